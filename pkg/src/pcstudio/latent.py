"""W+ latent algebra: attribute edits, interpolation, direction extraction.

All operations are pure functions over immutable float64 arrays and are safe
for unrestricted concurrent use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .container import load_container, save_container
from .errors import DimensionError, DirectionNotFoundError, ValidationError

SOURCE_TAGS = ("encoded", "synthetic", "edited", "interpolated")
PROVENANCES = ("paired_average", "external")


def _as_matrix(arr, what: str) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise DimensionError(f"{what} must be a 2-D (layers x dims) matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{what} contains non-finite entries")
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class WPlusLatent:
    """A subject's StyleGAN W+ code: one style row per generator layer."""

    styles: np.ndarray
    source_tag: str = "encoded"

    def __post_init__(self):
        object.__setattr__(self, "styles", _as_matrix(self.styles, "W+ latent"))
        if self.source_tag not in SOURCE_TAGS:
            raise ValidationError(f"unknown source_tag {self.source_tag!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.styles.shape  # type: ignore[return-value]


@dataclass(frozen=True)
class EditDirection:
    """A global linear attribute direction in W+ with bookkeeping on its origin."""

    name: str
    delta: np.ndarray
    provenance: str = "external"
    num_pairs: int = 0

    def __post_init__(self):
        object.__setattr__(self, "delta", _as_matrix(self.delta, f"direction {self.name!r}"))
        if self.provenance not in PROVENANCES:
            raise ValidationError(f"unknown provenance {self.provenance!r}")
        if self.provenance == "paired_average" and self.num_pairs < 1:
            raise ValidationError("paired_average direction requires num_pairs >= 1")


@dataclass(frozen=True)
class EditRequest:
    """A weighted list of named directions: [(direction_name, beta), ...]."""

    entries: tuple[tuple[str, float], ...]

    def __post_init__(self):
        entries = tuple((str(n), float(b)) for n, b in self.entries)
        if not entries:
            raise ValidationError("edit request must name at least one direction")
        for name, beta in entries:
            if not math.isfinite(beta):
                raise ValidationError(f"non-finite beta for direction {name!r}")
        object.__setattr__(self, "entries", entries)


def _check_same_shape(a: tuple[int, int], b: tuple[int, int], what: str) -> None:
    if a != b:
        raise DimensionError(f"{what}: shape {a} vs {b}")


def edit_latent(w: WPlusLatent, d: EditDirection, beta: float) -> WPlusLatent:
    """Apply a linear attribute edit: returns w + beta * d."""
    if not math.isfinite(beta):
        raise ValidationError("beta must be finite")
    _check_same_shape(w.shape, d.delta.shape, "edit_latent")
    return WPlusLatent(w.styles + beta * d.delta, source_tag="edited")


def combine_directions(edits: EditRequest, catalog: "DirectionCatalog") -> EditDirection:
    """Weighted sum of catalog directions into a single combined direction."""
    delta = None
    names = []
    for name, beta in edits.entries:
        d = catalog.get(name)
        names.append(name)
        term = beta * d.delta
        delta = term if delta is None else delta + term
    return EditDirection(name="+".join(names), delta=delta, provenance="external", num_pairs=0)


def interpolate(w_a: WPlusLatent, w_b: WPlusLatent, lam: float) -> WPlusLatent:
    """Linear interpolation between two identities; lam=0 gives w_a, lam=1 gives w_b."""
    if not (0.0 <= lam <= 1.0):
        raise ValidationError(f"lam must lie in [0, 1], got {lam}")
    _check_same_shape(w_a.shape, w_b.shape, "interpolate")
    return WPlusLatent((1.0 - lam) * w_a.styles + lam * w_b.styles, source_tag="interpolated")


def extract_direction(pairs: Sequence[tuple[WPlusLatent, WPlusLatent]], name: str) -> EditDirection:
    """Average (w_after - w_before) over paired latents into a global edit direction."""
    if len(pairs) == 0:
        raise ValidationError("need at least one (after, before) pair")
    shape = pairs[0][0].shape
    diffs = []
    for after, before in pairs:
        _check_same_shape(after.shape, shape, "extract_direction")
        _check_same_shape(before.shape, shape, "extract_direction")
        diffs.append(after.styles - before.styles)
    # fsum is correctly rounded, making the mean exactly permutation-invariant.
    flat = np.array([math.fsum(d[i, j] for d in diffs) for i in range(shape[0]) for j in range(shape[1])])
    return EditDirection(
        name=name,
        delta=flat.reshape(shape) / len(pairs),
        provenance="paired_average",
        num_pairs=len(pairs),
    )


class DirectionCatalog:
    """Named store of edit directions with container (de)serialization."""

    def __init__(self, directions: Iterable[EditDirection] = ()):
        self._dirs: dict[str, EditDirection] = {}
        for d in directions:
            self.add(d)

    def add(self, d: EditDirection) -> None:
        self._dirs[d.name] = d

    def get(self, name: str) -> EditDirection:
        try:
            return self._dirs[name]
        except KeyError:
            raise DirectionNotFoundError(f"unknown edit direction {name!r}") from None

    def names(self) -> list[str]:
        return sorted(self._dirs)

    def __len__(self) -> int:
        return len(self._dirs)

    def __contains__(self, name: str) -> bool:
        return name in self._dirs

    def save(self, path: str) -> None:
        tensors = {name: d.delta for name, d in sorted(self._dirs.items())}
        meta = {
            name: {
                "shape": list(d.delta.shape),
                "num_pairs": d.num_pairs,
                "provenance": d.provenance,
            }
            for name, d in sorted(self._dirs.items())
        }
        save_container(path, tensors, {"kind": "direction_catalog", "directions": meta})

    @classmethod
    def load(cls, path: str) -> "DirectionCatalog":
        tensors, extra = load_container(path)
        meta = extra.get("directions", {})
        cat = cls()
        for name, arr in tensors.items():
            m = meta.get(name, {})
            cat.add(
                EditDirection(
                    name=name,
                    delta=arr.astype(np.float64),
                    provenance=m.get("provenance", "external"),
                    num_pairs=int(m.get("num_pairs", 0)),
                )
            )
        return cat
