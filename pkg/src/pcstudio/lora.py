"""Low-rank residual weight updates for denoiser projection matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DimensionError, ValidationError


@dataclass(frozen=True)
class LoRADelta:
    """A rank-r residual for one named projection matrix: delta_W = B @ A."""

    target_name: str
    A: object  # (rank, in_dim), numpy or torch
    B: object  # (out_dim, rank)
    rank: int

    def __post_init__(self):
        A = self.A if isinstance(self.A, torch.Tensor) else np.asarray(self.A, dtype=np.float64)
        B = self.B if isinstance(self.B, torch.Tensor) else np.asarray(self.B, dtype=np.float64)
        if A.ndim != 2 or B.ndim != 2:
            raise DimensionError("LoRA factors must be matrices")
        if A.shape[0] != self.rank or B.shape[1] != self.rank:
            raise DimensionError(
                f"rank {self.rank} inconsistent with factor shapes {tuple(A.shape)}, {tuple(B.shape)}"
            )
        if self.rank < 1:
            raise ValidationError("rank must be >= 1")
        if self.rank > min(A.shape[1], B.shape[0]):
            raise ValidationError("rank exceeds min(in_dim, out_dim)")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def target_shape(self) -> tuple[int, int]:
        return (self.B.shape[0], self.A.shape[1])

    def delta(self):
        """The full-rank residual B @ A (numpy or torch, matching the factors)."""
        return self.B @ self.A

    def detached(self) -> "LoRADelta":
        """Numpy copy of the factors, detached from any autograd graph."""
        A = self.A.detach().numpy().copy() if isinstance(self.A, torch.Tensor) else self.A.copy()
        B = self.B.detach().numpy().copy() if isinstance(self.B, torch.Tensor) else self.B.copy()
        return LoRADelta(self.target_name, A, B, self.rank)


def lora_effective(w_base, delta: LoRADelta | None, alpha: float):
    """Effective projection matrix: W + alpha * (B @ A)."""
    if delta is None or alpha == 0.0:
        return w_base
    base_shape = tuple(w_base.shape)
    if base_shape != delta.target_shape:
        raise DimensionError(
            f"LoRA delta {delta.target_name!r} has shape {delta.target_shape}, base is {base_shape}"
        )
    d = delta.delta()
    if isinstance(w_base, torch.Tensor) and not isinstance(d, torch.Tensor):
        d = torch.as_tensor(np.asarray(d, dtype=np.float64))
    elif not isinstance(w_base, torch.Tensor) and isinstance(d, torch.Tensor):
        w_base = torch.as_tensor(np.asarray(w_base, dtype=np.float64))
    return w_base + alpha * d
