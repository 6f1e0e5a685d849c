"""Deterministic toy backend: every pretrained model replaced by a small
seeded linear/affine stand-in, so all pipeline math is checkable by hand.

All components are pure, reentrant, and fully determined by the config seed.
Components accept numpy arrays or torch tensors; torch in, torch out (and
differentiable), numpy in, numpy out.
"""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch

from ..errors import DimensionError, FaceDetectionError, ValidationError
from ..latent import WPlusLatent
from ..lora import LoRADelta, lora_effective
from ..losses import NoiseSchedule

DT = torch.float64


@dataclass(frozen=True)
class ToyBackendConfig:
    seed: int = 0
    latent_shape: tuple[int, int, int] = (4, 4, 2)
    image_shape: tuple[int, int, int] = (8, 8, 3)
    wplus_shape: tuple[int, int] = (3, 8)
    token_dim: int = 16
    T: int = 10
    segmenter_instances: int = 2
    vocab_size: int = 257


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DT)
    arr = np.asarray(x, dtype=np.float64)
    if not arr.flags.writeable:
        arr = arr.copy()
    return torch.as_tensor(arr)


def _ret(out: torch.Tensor, *inputs):
    if any(isinstance(x, torch.Tensor) for x in inputs):
        return out
    return out.numpy()


def _checksum(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()


class _ToyComponent:
    reentrant = True
    kind = "toy"

    def checksum(self) -> str:
        raise NotImplementedError


class ToyGanEncoder(_ToyComponent):
    """Fixed linear image -> W+ projection (stands in for a GAN inversion encoder)."""

    def __init__(self, cfg: ToyBackendConfig, rng: np.random.Generator):
        self.wplus_shape = cfg.wplus_shape
        self.image_shape = cfg.image_shape
        n_img = int(np.prod(cfg.image_shape))
        n_w = int(np.prod(cfg.wplus_shape))
        self.M = rng.standard_normal((n_w, n_img)) * 0.1

    def encode(self, image) -> WPlusLatent:
        img = np.asarray(image, dtype=np.float64)
        if img.shape != self.image_shape:
            raise DimensionError(f"image shape {img.shape} != {self.image_shape}")
        w = (self.M @ img.reshape(-1)).reshape(self.wplus_shape)
        return WPlusLatent(w, source_tag="encoded")

    def checksum(self) -> str:
        return _checksum(self.M)


class ToyTextEncoder(_ToyComponent):
    """Hash-bucketed word embedding table; learned token vectors pass through.

    `encode` takes a token list where each element is either a word (str) or a
    ready embedding vector, and returns the (seq, token_dim) conditioning.
    """

    def __init__(self, cfg: ToyBackendConfig, rng: np.random.Generator, token_dim: int | None = None):
        self.token_dim = int(token_dim if token_dim is not None else cfg.token_dim)
        self.vocab_size = cfg.vocab_size
        self.table = rng.standard_normal((self.vocab_size, self.token_dim)) * 0.5

    def word_embedding(self, word: str) -> np.ndarray:
        idx = zlib.crc32(word.lower().encode("utf-8")) % self.vocab_size
        return self.table[idx].copy()

    def encode(self, tokens: list):
        rows = []
        any_torch = False
        for tok in tokens:
            if isinstance(tok, str):
                rows.append(torch.as_tensor(self.word_embedding(tok)))
            else:
                v = _t(tok)
                any_torch = any_torch or isinstance(tok, torch.Tensor)
                if v.shape != (self.token_dim,):
                    raise DimensionError(f"token vector has dim {tuple(v.shape)}, expected ({self.token_dim},)")
                rows.append(v)
        if not rows:
            raise ValidationError("empty token sequence")
        out = torch.stack(rows)
        return out if any_torch else out.numpy()

    def checksum(self) -> str:
        return _checksum(self.table)


class ToyDenoiser(_ToyComponent):
    """Linear noise predictor with a pixel-local latent path.

    eps_hat[p] = A_t[p] @ latent[p] + (B_eff @ m)[p] + (C @ (attn_flat - u))[p]
    with m = mean over the conditioning sequence, attn = softmax(H_eff @ m)
    reshaped to the spatial grid, and u the uniform map (so a flat attention
    pattern contributes nothing). The latent path is block-diagonal per pixel
    so that mask-merged chained diffusion has exact region isolation. LoRA
    deltas target the conditioning projections "cross_attn.B" and
    "cross_attn.H".
    """

    def __init__(self, cfg: ToyBackendConfig, rng: np.random.Generator):
        self.latent_shape = cfg.latent_shape
        self.token_dim = cfg.token_dim
        self.T = cfg.T
        h, w, c = cfg.latent_shape
        self.n_pix = h * w
        self.n_ch = c
        n_lat = h * w * c
        self.A = rng.standard_normal((cfg.T, self.n_pix, c, c)) * 0.2
        self.B = rng.standard_normal((n_lat, cfg.token_dim)) * 0.1
        self.C = rng.standard_normal((n_lat, self.n_pix)) * 0.1
        self.H = rng.standard_normal((self.n_pix, cfg.token_dim)) * 1.0

    def lora_targets(self) -> dict[str, tuple[int, int]]:
        return {"cross_attn.B": tuple(self.B.shape), "cross_attn.H": tuple(self.H.shape)}

    def predict(
        self,
        latent,
        t: int,
        conditioning,
        lora: list[LoRADelta] | None = None,
        alpha: float = 0.0,
        attn_override=None,
        capture: bool = False,
    ):
        """Returns (eps_hat, attn_map or None)."""
        if not 1 <= t <= self.T:
            raise ValidationError(f"timestep {t} outside [1, {self.T}]")
        lat = _t(latent)
        cond = _t(conditioning)
        if tuple(lat.shape) != self.latent_shape:
            raise DimensionError(f"latent shape {tuple(lat.shape)} != {self.latent_shape}")
        if cond.ndim != 2 or cond.shape[1] != self.token_dim:
            raise DimensionError(f"conditioning shape {tuple(cond.shape)} incompatible with token_dim {self.token_dim}")

        deltas = {d.target_name: d for d in (lora or [])}
        B_eff = lora_effective(torch.as_tensor(self.B), deltas.get("cross_attn.B"), alpha)
        H_eff = lora_effective(torch.as_tensor(self.H), deltas.get("cross_attn.H"), alpha)

        m = cond.mean(dim=0)
        if attn_override is not None:
            attn = _t(attn_override)
        else:
            attn = torch.softmax(H_eff @ m, dim=0).reshape(self.latent_shape[:2])

        h, w, c = self.latent_shape
        A_t = torch.as_tensor(self.A[t - 1])  # (n_pix, c, c)
        local = torch.einsum("pij,pj->pi", A_t, lat.reshape(self.n_pix, c))
        eps = local.reshape(-1) + B_eff @ m + torch.as_tensor(self.C) @ (attn.reshape(-1) - 1.0 / self.n_pix)
        eps = eps.reshape(self.latent_shape)
        attn_out = attn if capture else None
        out_eps = _ret(eps, latent, conditioning, attn_override)
        if attn_out is not None and not isinstance(out_eps, torch.Tensor):
            attn_out = attn_out.detach().numpy()
        return out_eps, attn_out

    def checksum(self) -> str:
        return _checksum(self.A.reshape(self.T, -1), self.B, self.C, self.H)


class ToyImageCodec(_ToyComponent):
    """Linear, left-invertible latent <-> image codec."""

    def __init__(self, cfg: ToyBackendConfig, rng: np.random.Generator):
        self.latent_shape = cfg.latent_shape
        self.image_shape = cfg.image_shape
        n_img = int(np.prod(cfg.image_shape))
        n_lat = int(np.prod(cfg.latent_shape))
        self.D = rng.standard_normal((n_img, n_lat)) * 0.3
        self.E = np.linalg.pinv(self.D)  # E @ D == I on the latent space

    def decode(self, latent):
        lat = _t(latent)
        if tuple(lat.shape) != self.latent_shape:
            raise DimensionError(f"latent shape {tuple(lat.shape)} != {self.latent_shape}")
        img = (torch.as_tensor(self.D) @ lat.reshape(-1)).reshape(self.image_shape)
        return _ret(img, latent)

    def encode(self, image):
        img = _t(image)
        if tuple(img.shape) != self.image_shape:
            raise DimensionError(f"image shape {tuple(img.shape)} != {self.image_shape}")
        lat = (torch.as_tensor(self.E) @ img.reshape(-1)).reshape(self.latent_shape)
        return _ret(lat, image)

    def checksum(self) -> str:
        return _checksum(self.D)


class ToyFaceEmbedder(_ToyComponent):
    """Linear projection + normalization; flags blank images as face-free."""

    def __init__(self, cfg: ToyBackendConfig, rng: np.random.Generator, embed_dim: int = 8):
        self.image_shape = cfg.image_shape
        self.embed_dim = embed_dim
        n_img = int(np.prod(cfg.image_shape))
        self.M = rng.standard_normal((embed_dim, n_img)) * 0.2

    def embed(self, image):
        img = _t(image)
        if tuple(img.shape) != self.image_shape:
            raise DimensionError(f"image shape {tuple(img.shape)} != {self.image_shape}")
        flat = img.reshape(-1)
        if float((flat.max() - flat.min()).detach()) < 1e-6:
            raise FaceDetectionError("no face found (blank image)")
        e = torch.as_tensor(self.M) @ flat
        norm = torch.linalg.norm(e)
        if float(norm.detach()) < 1e-12:
            raise FaceDetectionError("no face found (degenerate projection)")
        return _ret(e / norm, image)

    def checksum(self) -> str:
        return _checksum(self.M)


class ToySegmenter(_ToyComponent):
    """Splits the image into `instances` vertical strips as instance masks."""

    def __init__(self, cfg: ToyBackendConfig, instances: int | None = None):
        self.image_shape = cfg.image_shape
        self.instances = int(instances if instances is not None else cfg.segmenter_instances)

    def segment(self, image) -> list[np.ndarray]:
        img = np.asarray(image, dtype=np.float64)
        if img.shape != self.image_shape:
            raise DimensionError(f"image shape {img.shape} != {self.image_shape}")
        h, w, _ = self.image_shape
        bounds = np.linspace(0, w, self.instances + 1).round().astype(int)
        masks = []
        for i in range(self.instances):
            m = np.zeros((h, w), dtype=np.float64)
            m[:, bounds[i] : bounds[i + 1]] = 1.0
            masks.append(m)
        return masks

    def checksum(self) -> str:
        return hashlib.sha256(f"strips:{self.instances}".encode()).hexdigest()


class ToyClipScorer(_ToyComponent):
    """Cosine similarity of fixed seeded image/text projections."""

    def __init__(self, cfg: ToyBackendConfig, rng: np.random.Generator, feat_dim: int = 12):
        self.image_shape = cfg.image_shape
        n_img = int(np.prod(cfg.image_shape))
        self.P_img = rng.standard_normal((feat_dim, n_img)) * 0.2
        self.P_txt = rng.standard_normal((feat_dim, cfg.token_dim)) * 0.2
        self.table = rng.standard_normal((cfg.vocab_size, cfg.token_dim)) * 0.5
        self.vocab_size = cfg.vocab_size

    def _text_feat(self, text: str) -> np.ndarray:
        words = text.lower().split()
        if not words:
            raise ValidationError("empty text for clip scoring")
        embs = [self.table[zlib.crc32(wd.encode("utf-8")) % self.vocab_size] for wd in words]
        return self.P_txt @ np.mean(embs, axis=0)

    def score(self, image, text: str) -> float:
        img = np.asarray(image, dtype=np.float64)
        if img.shape != self.image_shape:
            raise DimensionError(f"image shape {img.shape} != {self.image_shape}")
        fi = self.P_img @ img.reshape(-1)
        ft = self._text_feat(text)
        denom = np.linalg.norm(fi) * np.linalg.norm(ft)
        if denom < 1e-12:
            return 0.0
        return float(fi @ ft / denom)

    def checksum(self) -> str:
        return _checksum(self.P_img, self.P_txt, self.table)


class ToyLpipsScorer(_ToyComponent):
    """Squared distance in a fixed seeded 'perceptual' feature space."""

    def __init__(self, cfg: ToyBackendConfig, rng: np.random.Generator, feat_dim: int = 12):
        self.image_shape = cfg.image_shape
        n_img = int(np.prod(cfg.image_shape))
        self.P = rng.standard_normal((feat_dim, n_img)) * 0.2
        self.identifier = "toy-lpips-linear"

    def distance(self, image_a, image_b) -> float:
        a = np.asarray(image_a, dtype=np.float64)
        b = np.asarray(image_b, dtype=np.float64)
        if a.shape != self.image_shape or b.shape != self.image_shape:
            raise DimensionError("image shapes do not match the backend")
        fa, fb = self.P @ a.reshape(-1), self.P @ b.reshape(-1)
        return float(np.mean((fa - fb) ** 2))

    def checksum(self) -> str:
        return _checksum(self.P)
