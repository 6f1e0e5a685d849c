"""Timestep-conditioned latent adaptor.

Maps a W+ code plus a diffusion timestep to a pair of token embeddings that
condition the denoiser's text pathway. Architecture: a single self-attention
block over the W+ rows (each row is a token), a Fourier-feature encoding of
the normalized timestep through a small MLP, concatenation, then a mapper MLP
trunk with two output heads (one per token embedding).

All computation runs in float64 on CPU for deterministic, finite-difference
friendly behavior at desk scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

from .container import load_container, save_container
from .errors import DimensionError, ValidationError
from .latent import WPlusLatent

TORCH_DTYPE = torch.float64


@dataclass(frozen=True)
class AdaptorConfig:
    wplus_shape: tuple[int, int] = (18, 512)
    token_dim: int = 1024
    pe_bands: int = 6
    attn_heads: int = 4
    mlp_layers: int = 4
    time_mlp_layers: int = 2
    max_timestep: int = 1000
    hidden_mult: int = 2  # trunk hidden width = hidden_mult * token_dim

    def __post_init__(self):
        L, D = self.wplus_shape
        for name in ("token_dim", "pe_bands", "attn_heads", "mlp_layers", "time_mlp_layers", "max_timestep", "hidden_mult"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"AdaptorConfig.{name} must be >= 1")
        if L < 1 or D < 1:
            raise ValidationError("wplus_shape entries must be >= 1")
        if D % self.attn_heads != 0:
            raise ValidationError(f"W+ row width {D} not divisible by attn_heads {self.attn_heads}")
        object.__setattr__(self, "wplus_shape", (int(L), int(D)))

    def to_json(self) -> dict:
        return {
            "wplus_shape": list(self.wplus_shape),
            "token_dim": self.token_dim,
            "pe_bands": self.pe_bands,
            "attn_heads": self.attn_heads,
            "mlp_layers": self.mlp_layers,
            "time_mlp_layers": self.time_mlp_layers,
            "max_timestep": self.max_timestep,
            "hidden_mult": self.hidden_mult,
        }

    @classmethod
    def from_json(cls, d: dict) -> "AdaptorConfig":
        d = dict(d)
        d["wplus_shape"] = tuple(d["wplus_shape"])
        return cls(**d)


@dataclass(frozen=True)
class TokenEmbeddingPair:
    """The two learned subject tokens for one denoising timestep."""

    v1: np.ndarray
    v2: np.ndarray
    timestep: int

    def __post_init__(self):
        v1 = np.asarray(self.v1, dtype=np.float64)
        v2 = np.asarray(self.v2, dtype=np.float64)
        if v1.ndim != 1 or v2.ndim != 1 or v1.shape != v2.shape:
            raise DimensionError(f"token pair must be two equal-length vectors, got {v1.shape} / {v2.shape}")
        if not (np.all(np.isfinite(v1)) and np.all(np.isfinite(v2))):
            raise ValidationError("token embeddings must be finite")
        object.__setattr__(self, "v1", v1)
        object.__setattr__(self, "v2", v2)


@dataclass(frozen=True)
class TokenEmbeddingSchedule:
    """One TokenEmbeddingPair per timestep t = 1..T, in order."""

    pairs: tuple[TokenEmbeddingPair, ...]

    def __post_init__(self):
        pairs = tuple(self.pairs)
        if not pairs:
            raise ValidationError("schedule must not be empty")
        for i, p in enumerate(pairs):
            if p.timestep != i + 1:
                raise ValidationError(f"schedule entry {i} has timestep {p.timestep}, expected {i + 1}")
        object.__setattr__(self, "pairs", pairs)

    @property
    def T(self) -> int:
        return len(self.pairs)

    def at(self, t: int) -> TokenEmbeddingPair:
        if not 1 <= t <= self.T:
            raise ValidationError(f"timestep {t} outside [1, {self.T}]")
        return self.pairs[t - 1]

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """Returns (T, token_dim) arrays for v1 and v2."""
        return (
            np.stack([p.v1 for p in self.pairs]),
            np.stack([p.v2 for p in self.pairs]),
        )

    @classmethod
    def from_arrays(cls, v1: np.ndarray, v2: np.ndarray) -> "TokenEmbeddingSchedule":
        if v1.shape != v2.shape or v1.ndim != 2:
            raise DimensionError("schedule arrays must both be (T, token_dim)")
        return cls(tuple(TokenEmbeddingPair(v1[i], v2[i], i + 1) for i in range(v1.shape[0])))


def positional_encode(t: int, pe_bands: int, T: int) -> np.ndarray:
    """Fourier features of the normalized timestep.

    Layout: [sin(2^k pi t/T) for k=0..bands-1] followed by the matching cos block.
    """
    if pe_bands < 1:
        raise ValidationError("pe_bands must be >= 1")
    if not 0 <= t <= T:
        raise ValidationError(f"timestep {t} outside [0, {T}]")
    x = t / T
    ks = np.arange(pe_bands, dtype=np.float64)
    angles = (2.0**ks) * math.pi * x
    return np.concatenate([np.sin(angles), np.cos(angles)])


class SelfAttentionBlock(nn.Module):
    """Multi-head self-attention over the L rows of a W+ code (no residual)."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:  # x: (L, D)
        L, D = x.shape
        dh = D // self.heads

        def split(z):  # (L, D) -> (heads, L, dh)
            return z.reshape(L, self.heads, dh).permute(1, 0, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        out = (attn @ v).permute(1, 0, 2).reshape(L, D)
        return self.o(out)


class LatentAdaptor(nn.Module):
    """The adaptor network: (w, t) -> (v_t1, v_t2)."""

    def __init__(self, cfg: AdaptorConfig, seed: int = 0, v_cls: Optional[np.ndarray] = None):
        super().__init__()
        self.cfg = cfg
        L, D = cfg.wplus_shape
        hidden = cfg.hidden_mult * cfg.token_dim
        time_dim = cfg.token_dim

        self.attn = SelfAttentionBlock(D, cfg.attn_heads)

        time_layers: list[nn.Module] = []
        in_dim = 2 * cfg.pe_bands
        for i in range(cfg.time_mlp_layers):
            out_dim = time_dim
            time_layers.append(nn.Linear(in_dim, out_dim))
            if i < cfg.time_mlp_layers - 1:
                time_layers.append(nn.LeakyReLU(0.2))
            in_dim = out_dim
        self.time_mlp = nn.Sequential(*time_layers)

        trunk_layers: list[nn.Module] = []
        in_dim = L * D + time_dim
        for _ in range(cfg.mlp_layers):
            trunk_layers.append(nn.Linear(in_dim, hidden))
            trunk_layers.append(nn.LeakyReLU(0.2))
            in_dim = hidden
        self.trunk = nn.Sequential(*trunk_layers)

        self.head1 = nn.Linear(hidden, cfg.token_dim)
        self.head2 = nn.Linear(hidden, cfg.token_dim)

        self.to(TORCH_DTYPE)
        self._init_weights(seed, v_cls)

    def _init_weights(self, seed: int, v_cls: Optional[np.ndarray]) -> None:
        gen = torch.Generator().manual_seed(seed)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                fan_in = m.weight.shape[1]
                std = 1.0 / math.sqrt(fan_in)
                with torch.no_grad():
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen, dtype=TORCH_DTYPE) * std)
                    m.bias.zero_()
        # Small-gain heads biased at the superclass token so initial outputs
        # start near v_cls, where the regularizer wants them.
        with torch.no_grad():
            for head in (self.head1, self.head2):
                head.weight.mul_(0.01)
                if v_cls is not None:
                    head.bias.copy_(torch.as_tensor(np.asarray(v_cls, dtype=np.float64), dtype=TORCH_DTYPE))

    # -- torch-level forward (differentiable) ------------------------------

    def forward_torch(self, w: torch.Tensor, t: int) -> tuple[torch.Tensor, torch.Tensor]:
        L, D = self.cfg.wplus_shape
        if w.shape != (L, D):
            raise DimensionError(f"w has shape {tuple(w.shape)}, config says {(L, D)}")
        if not 1 <= t <= self.cfg.max_timestep:
            raise ValidationError(f"timestep {t} outside [1, {self.cfg.max_timestep}]")
        if not torch.all(torch.isfinite(w)):
            raise ValidationError("w contains non-finite entries")
        feat = self.attn(w).reshape(-1)
        pe = torch.as_tensor(positional_encode(t, self.cfg.pe_bands, self.cfg.max_timestep), dtype=w.dtype)
        tfeat = self.time_mlp(pe)
        h = self.trunk(torch.cat([feat, tfeat]))
        return self.head1(h), self.head2(h)

    # -- numpy-level API ----------------------------------------------------

    def forward_pair(self, w: WPlusLatent | np.ndarray, t: int) -> TokenEmbeddingPair:
        styles = w.styles if isinstance(w, WPlusLatent) else np.asarray(w, dtype=np.float64)
        with torch.no_grad():
            v1, v2 = self.forward_torch(torch.as_tensor(np.array(styles), dtype=TORCH_DTYPE), t)
        return TokenEmbeddingPair(v1.numpy(), v2.numpy(), t)

    def embed_all_timesteps(self, w: WPlusLatent | np.ndarray) -> TokenEmbeddingSchedule:
        return TokenEmbeddingSchedule(
            tuple(self.forward_pair(w, t) for t in range(1, self.cfg.max_timestep + 1))
        )

    # -- persistence ---------------------------------------------------------

    def save(self, path: str) -> None:
        tensors = {name: p.detach().numpy() for name, p in self.state_dict().items()}
        save_container(path, tensors, {"kind": "adaptor_weights", "config": self.cfg.to_json()})

    @classmethod
    def load(cls, path: str) -> "LatentAdaptor":
        tensors, extra = load_container(path)
        cfg = AdaptorConfig.from_json(extra["config"])
        model = cls(cfg, seed=0)
        state = {name: torch.as_tensor(arr.astype(np.float64)) for name, arr in tensors.items()}
        model.load_state_dict(state)
        return model

    def weights_fingerprint_payload(self) -> bytes:
        import hashlib

        h = hashlib.sha256()
        for name, p in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.detach().numpy(), dtype="<f4").tobytes())
        return h.digest()
