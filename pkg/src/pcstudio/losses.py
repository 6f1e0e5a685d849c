"""Training losses and the DDIM clean-image estimate.

The total objective is the denoising loss plus a regularizer pulling the
learned tokens toward the superclass token embedding, plus an identity loss
between face-recognition embeddings of the predicted clean image and the
source image. All squared-error losses use MEAN reduction so the default
lambdas transfer across tensor sizes.

Functions accept numpy arrays or torch tensors. With torch inputs the result
stays a torch scalar (differentiable); with numpy inputs a Python float is
returned.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .adaptor import TokenEmbeddingPair
from .errors import DimensionError, SingularityError, ValidationError


def _to_t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if not arr.flags.writeable:
        arr = arr.copy()
    return torch.as_tensor(arr)


def _wants_torch(*xs) -> bool:
    return any(isinstance(x, torch.Tensor) for x in xs)


def _ret(result: torch.Tensor, *inputs):
    return result if _wants_torch(*inputs) else float(result)


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative alpha products of the forward noising process, indexed t = 1..T."""

    T: int
    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.shape != (self.T,):
            raise DimensionError(f"alpha_bar must have shape ({self.T},), got {ab.shape}")
        if not np.all((ab > 0.0) & (ab <= 1.0)):
            raise ValidationError("alpha_bar entries must lie in (0, 1]")
        if np.any(np.diff(ab) > 0.0):
            raise ValidationError("alpha_bar must be nonincreasing in t")
        ab.flags.writeable = False
        object.__setattr__(self, "alpha_bar", ab)

    def at(self, t: int) -> float:
        """alpha_bar at timestep t; t=0 is the clean-data limit (1.0)."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise ValidationError(f"timestep {t} outside [0, {self.T}]")
        return float(self.alpha_bar[t - 1])

    @classmethod
    def cosine(cls, T: int) -> "NoiseSchedule":
        t = np.arange(1, T + 1, dtype=np.float64)
        ab = np.cos(0.5 * math.pi * t / (T + 1)) ** 2
        return cls(T=T, alpha_bar=ab)

    def to_json(self) -> dict:
        return {"T": self.T, "alpha_bar": self.alpha_bar.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "NoiseSchedule":
        return cls(T=int(d["T"]), alpha_bar=np.asarray(d["alpha_bar"], dtype=np.float64))


@dataclass(frozen=True)
class LossWeights:
    lambda_reg: float = 1e-7
    lambda_id: float = 1.0

    def __post_init__(self):
        for name in ("lambda_reg", "lambda_id"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValidationError(f"{name} must be finite and >= 0")


@dataclass(frozen=True)
class DiffusionLatent:
    """A (possibly noisy) latent of the image codec, tagged with its timestep."""

    data: object  # numpy array or torch tensor
    timestep: int

    def __post_init__(self):
        d = _to_t(self.data)
        if not torch.all(torch.isfinite(d)):
            raise ValidationError("diffusion latent contains non-finite entries")


def diffusion_loss(eps_true, eps_pred):
    """Mean squared error between true and predicted noise."""
    a, b = _to_t(eps_true), _to_t(eps_pred)
    if a.shape != b.shape:
        raise DimensionError(f"noise tensors differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    return _ret(torch.mean((a - b) ** 2), eps_true, eps_pred)


def reg_loss(pair: TokenEmbeddingPair | tuple, v_cls):
    """Mean squared distance of the two learned tokens to the superclass token."""
    if isinstance(pair, TokenEmbeddingPair):
        v1, v2 = pair.v1, pair.v2
    else:
        v1, v2 = pair
    v1t, v2t, ct = _to_t(v1), _to_t(v2), _to_t(v_cls)
    if v1t.shape != ct.shape or v2t.shape != ct.shape:
        raise DimensionError(
            f"token/superclass dims differ: {tuple(v1t.shape)}/{tuple(v2t.shape)} vs {tuple(ct.shape)}"
        )
    out = 0.5 * (torch.mean((v1t - ct) ** 2) + torch.mean((v2t - ct) ** 2))
    return _ret(out, v1, v2, v_cls)


def ddim_x0(x_t: DiffusionLatent, eps_pred, schedule: NoiseSchedule):
    """Closed-form clean-image estimate: (x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)."""
    xt = _to_t(x_t.data)
    eps = _to_t(eps_pred)
    if xt.shape != eps.shape:
        raise DimensionError(f"latent/noise shapes differ: {tuple(xt.shape)} vs {tuple(eps.shape)}")
    ab = schedule.at(x_t.timestep)
    if ab == 0.0:
        raise SingularityError(f"alpha_bar is zero at t={x_t.timestep}")
    out = (xt - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
    if _wants_torch(x_t.data, eps_pred):
        return out
    return out.numpy()


def id_loss(image_pred, image_ref, embedder):
    """MSE between face-recognition embeddings of the two images.

    Raises FaceDetectionError (from the embedder) when no face is found;
    callers may skip the term for that step.
    """
    e_pred = embedder.embed(image_pred)
    e_ref = embedder.embed(image_ref)
    a, b = _to_t(e_pred), _to_t(e_ref)
    if a.shape != b.shape:
        raise DimensionError("embedding dims differ")
    return _ret(torch.mean((a - b) ** 2), e_pred, e_ref)


def total_loss(l_diff, l_reg, l_id, weights: LossWeights):
    """Linear combination: l_diff + lambda_reg * l_reg + lambda_id * l_id."""
    for name, v in (("l_diff", l_diff), ("l_reg", l_reg), ("l_id", l_id)):
        fv = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(fv) or fv < 0:
            raise ValidationError(f"{name} must be finite and >= 0, got {fv}")
    out = l_diff + weights.lambda_reg * l_reg + weights.lambda_id * l_id
    return out
