"""Stage-1 adaptor pretraining and stage-2 subject-specific LoRA tuning.

Stage 1 trains only the latent adaptor over (image, w) pairs with the
combined objective (denoising + superclass regularizer + identity); every
backend stays frozen. Stage 2 fine-tunes the adaptor together with low-rank
residuals on the denoiser's conditioning projections for a few iterations on
a single image, producing a persistable SubjectProfile.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .adaptor import AdaptorConfig, LatentAdaptor, TokenEmbeddingSchedule
from .backends import BackendBundle
from .container import load_container, save_container
from .errors import (
    DimensionError,
    DivergenceError,
    FaceDetectionError,
    FingerprintMismatchError,
    ValidationError,
)
from .latent import WPlusLatent
from .lora import LoRADelta, lora_effective
from .losses import DiffusionLatent, LossWeights, ddim_x0, diffusion_loss, reg_loss, total_loss

DEFAULT_PRETRAIN_LR = 1e-3
SUPERCLASS_WORD = "person"
DIVERGENCE_FACTOR = 1e3

# Neutral stage-1/2 prompt with the subject slot between the articles and the
# superclass word: "A photo of a <v1 v2> person".
NEUTRAL_PROMPT_PREFIX = ["a", "photo", "of", "a"]
NEUTRAL_PROMPT_SUFFIX = [SUPERCLASS_WORD]


@dataclass(frozen=True)
class PairedSample:
    image: np.ndarray
    w: WPlusLatent
    id: str


@dataclass(frozen=True)
class TuneConfig:
    iterations: int = 50
    lr_lora: float = 1e-3
    lr_adaptor: float = 5e-6
    alpha: float = 0.3
    loss_weights: LossWeights = field(default_factory=LossWeights)
    rank: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")
        if self.lr_lora < 0 or self.lr_adaptor < 0:
            raise ValidationError("learning rates must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError("alpha must lie in [0, 1]")
        if self.rank < 1:
            raise ValidationError("rank must be >= 1")


@dataclass(frozen=True)
class SubjectProfile:
    """Persisted per-subject state: latent, token schedule, LoRA deltas."""

    subject_id: str
    w: WPlusLatent
    token_schedule: TokenEmbeddingSchedule
    lora: tuple[LoRADelta, ...]
    alpha: float
    created_at: float
    config_fingerprint: str
    source_image: np.ndarray | None = None

    def __post_init__(self):
        targets = [d.target_name for d in self.lora]
        if len(set(targets)) != len(targets):
            raise ValidationError("duplicate LoRA targets in profile")

    def save(self, path: str) -> None:
        v1, v2 = self.token_schedule.stacked()
        tensors: dict[str, np.ndarray] = {
            "w": self.w.styles,
            "token_v1": v1,
            "token_v2": v2,
        }
        lora_meta = []
        for i, d in enumerate(self.lora):
            dd = d.detached()
            tensors[f"lora.{i}.A"] = np.asarray(dd.A)
            tensors[f"lora.{i}.B"] = np.asarray(dd.B)
            lora_meta.append({"target_name": d.target_name, "rank": d.rank})
        if self.source_image is not None:
            tensors["source_image"] = self.source_image
        save_container(
            path,
            tensors,
            {
                "kind": "subject_profile",
                "subject_id": self.subject_id,
                "alpha": self.alpha,
                "T": self.token_schedule.T,
                "created_at": self.created_at,
                "config_fingerprint": self.config_fingerprint,
                "lora": lora_meta,
            },
        )

    @classmethod
    def load(cls, path: str, expect_fingerprint: str | None = None) -> "SubjectProfile":
        tensors, extra = load_container(path)
        if extra.get("kind") != "subject_profile":
            raise ValidationError(f"{path} is not a subject profile container")
        fp = extra["config_fingerprint"]
        if expect_fingerprint is not None and fp != expect_fingerprint:
            raise FingerprintMismatchError(
                f"profile fingerprint {fp[:12]} does not match environment {expect_fingerprint[:12]}"
            )
        schedule = TokenEmbeddingSchedule.from_arrays(
            tensors["token_v1"].astype(np.float64), tensors["token_v2"].astype(np.float64)
        )
        lora = []
        for i, meta in enumerate(extra.get("lora", [])):
            lora.append(
                LoRADelta(
                    target_name=meta["target_name"],
                    A=tensors[f"lora.{i}.A"].astype(np.float64),
                    B=tensors[f"lora.{i}.B"].astype(np.float64),
                    rank=int(meta["rank"]),
                )
            )
        src = tensors.get("source_image")
        return cls(
            subject_id=extra["subject_id"],
            w=WPlusLatent(tensors["w"].astype(np.float64), source_tag="encoded"),
            token_schedule=schedule,
            lora=tuple(lora),
            alpha=float(extra["alpha"]),
            created_at=float(extra["created_at"]),
            config_fingerprint=fp,
            source_image=src.astype(np.float64) if src is not None else None,
        )


def compute_fingerprint(cfg: AdaptorConfig, bundle: BackendBundle) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(cfg.to_json(), sort_keys=True).encode())
    h.update(bundle.fingerprint().encode())
    return h.hexdigest()


def superclass_token(bundle: BackendBundle) -> np.ndarray:
    return bundle.text_encoder.word_embedding(SUPERCLASS_WORD)


def neutral_prompt_tokens(v1, v2) -> list:
    return [*NEUTRAL_PROMPT_PREFIX, v1, v2, *NEUTRAL_PROMPT_SUFFIX]


def _step_losses(
    adaptor: LatentAdaptor,
    image: np.ndarray,
    w: WPlusLatent,
    t: int,
    eps: np.ndarray,
    bundle: BackendBundle,
    weights: LossWeights,
    v_cls: np.ndarray,
    lora: list[LoRADelta] | None = None,
    alpha: float = 0.0,
):
    """One forward pass through the full training graph; torch-scalar losses."""
    schedule = bundle.schedule
    z = bundle.image_codec.encode(image)
    ab = schedule.at(t)
    x_t = math.sqrt(ab) * np.asarray(z) + math.sqrt(1.0 - ab) * eps

    v1, v2 = adaptor.forward_torch(torch.as_tensor(np.array(w.styles)), t)
    cond = bundle.text_encoder.encode(neutral_prompt_tokens(v1, v2))
    eps_pred, _ = bundle.denoiser.predict(x_t, t, cond, lora=lora, alpha=alpha)

    l_diff = diffusion_loss(eps, eps_pred)
    l_reg = reg_loss((v1, v2), v_cls)

    id_skipped = False
    try:
        x0_hat = ddim_x0(DiffusionLatent(x_t, t), eps_pred, schedule)
        img_pred = bundle.image_codec.decode(x0_hat)
        e_pred = bundle.face_embedder.embed(img_pred)
        e_ref = bundle.face_embedder.embed(torch.as_tensor(image))
        l_id = torch.mean((e_pred - e_ref) ** 2)
    except FaceDetectionError:
        id_skipped = True
        l_id = torch.zeros((), dtype=torch.float64)

    total = l_diff + weights.lambda_reg * l_reg + weights.lambda_id * l_id
    return {"l_diff": l_diff, "l_reg": l_reg, "l_id": l_id, "total": total, "id_skipped": id_skipped}


def _detach_breakdown(d: dict) -> dict:
    return {k: (float(v.detach()) if isinstance(v, torch.Tensor) else v) for k, v in d.items()}


def pretrain_step(
    adaptor: LatentAdaptor,
    optimizer: torch.optim.Optimizer,
    sample: PairedSample,
    t: int,
    noise: np.ndarray,
    bundle: BackendBundle,
    weights: LossWeights,
    v_cls: np.ndarray,
) -> dict:
    """One stage-1 optimizer step on the adaptor only; returns the loss breakdown."""
    losses = _step_losses(adaptor, sample.image, sample.w, t, noise, bundle, weights, v_cls)
    optimizer.zero_grad()
    losses["total"].backward()
    optimizer.step()
    return _detach_breakdown(losses)


def pretrain(
    adaptor: LatentAdaptor,
    samples: list[PairedSample],
    iterations: int,
    seed: int,
    bundle: BackendBundle,
    weights: LossWeights | None = None,
    lr: float = DEFAULT_PRETRAIN_LR,
) -> list[dict]:
    """Stage-1 loop: uniform sample and timestep per step, fresh noise each step."""
    if not samples:
        raise ValidationError("pretraining needs at least one paired sample")
    weights = weights or LossWeights()
    v_cls = superclass_token(bundle)
    rng = np.random.default_rng(seed)
    optimizer = torch.optim.Adam(adaptor.parameters(), lr=lr)
    history = []
    T = bundle.T
    initial_total = None
    for _ in range(iterations):
        sample = samples[int(rng.integers(len(samples)))]
        t = int(rng.integers(1, T + 1))
        noise = rng.standard_normal(bundle.latent_shape)
        breakdown = pretrain_step(adaptor, optimizer, sample, t, noise, bundle, weights, v_cls)
        if initial_total is None:
            initial_total = breakdown["total"]
        if not math.isfinite(breakdown["total"]) or breakdown["total"] > DIVERGENCE_FACTOR * max(initial_total, 1e-12):
            raise DivergenceError(f"pretraining diverged at loss {breakdown['total']}")
        history.append(breakdown)
    return history


def init_lora_deltas(bundle: BackendBundle, rank: int, seed: int) -> list[LoRADelta]:
    """Fresh trainable deltas for every denoiser projection target (delta_W = 0 at init)."""
    gen = torch.Generator().manual_seed(seed)
    deltas = []
    for target, (out_dim, in_dim) in sorted(bundle.denoiser.lora_targets().items()):
        A = torch.randn((rank, in_dim), generator=gen, dtype=torch.float64) * (1.0 / math.sqrt(in_dim))
        B = torch.zeros((out_dim, rank), dtype=torch.float64)
        A.requires_grad_(True)
        B.requires_grad_(True)
        deltas.append(LoRADelta(target, A, B, rank))
    return deltas


def tune_subject(
    image: np.ndarray,
    w: WPlusLatent,
    adaptor: LatentAdaptor,
    cfg: TuneConfig,
    bundle: BackendBundle,
    subject_id: str = "subject",
) -> SubjectProfile:
    """Stage-2: jointly tune LoRA deltas and (a copy of) the adaptor on one image.

    Deterministic given (inputs, cfg.seed): the incoming adaptor is deep-copied
    so repeated calls start from identical state. Base denoiser weights are
    never mutated; the learned residuals live in the returned profile.
    """
    # Identity loss is impossible without a detectable face in the input.
    bundle.face_embedder.embed(image)

    model = copy.deepcopy(adaptor)
    weights = cfg.loss_weights
    v_cls = superclass_token(bundle)
    deltas = init_lora_deltas(bundle, cfg.rank, cfg.seed)
    lora_params = [p for d in deltas for p in (d.A, d.B)]
    optimizer = torch.optim.Adam(
        [
            {"params": lora_params, "lr": cfg.lr_lora},
            {"params": model.parameters(), "lr": cfg.lr_adaptor},
        ]
    )
    rng = np.random.default_rng(cfg.seed)
    T = bundle.T
    initial_total = None
    for _ in range(cfg.iterations):
        t = int(rng.integers(1, T + 1))
        noise = rng.standard_normal(bundle.latent_shape)
        # Tuning trains THROUGH the adapted denoiser at full residual strength;
        # cfg.alpha scales the residual only at inference time.
        losses = _step_losses(
            model, image, w, t, noise, bundle, weights, v_cls, lora=deltas, alpha=1.0
        )
        tot = float(losses["total"].detach())
        if initial_total is None:
            initial_total = tot
        if not math.isfinite(tot) or tot > DIVERGENCE_FACTOR * max(initial_total, 1e-12):
            raise DivergenceError(f"subject tuning diverged at loss {tot}")
        optimizer.zero_grad()
        losses["total"].backward()
        optimizer.step()

    schedule = model.embed_all_timesteps(w)
    return SubjectProfile(
        subject_id=subject_id,
        w=w,
        token_schedule=schedule,
        lora=tuple(d.detached() for d in deltas),
        alpha=cfg.alpha,
        created_at=time.time(),
        config_fingerprint=compute_fingerprint(adaptor.cfg, bundle),
        source_image=np.asarray(image, dtype=np.float64),
    )


def embed_subject(
    image: np.ndarray,
    adaptor: LatentAdaptor,
    bundle: BackendBundle,
    subject_id: str = "subject",
    alpha: float = 0.0,
) -> SubjectProfile:
    """Stage-1-only profile: encode to W+, embed all timesteps, no LoRA."""
    w = bundle.gan_encoder.encode(image)
    schedule = adaptor.embed_all_timesteps(w)
    return SubjectProfile(
        subject_id=subject_id,
        w=w,
        token_schedule=schedule,
        lora=(),
        alpha=alpha,
        created_at=time.time(),
        config_fingerprint=compute_fingerprint(adaptor.cfg, bundle),
        source_image=np.asarray(image, dtype=np.float64),
    )
