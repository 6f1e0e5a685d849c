"""Multi-subject generation: chained per-subject diffusion branches merged at
every denoising step with instance masks.

Each subject runs its own branch through its own LoRA-adapted denoiser and
token schedule; one extra branch renders the background with the plain
placeholder prompt. After every step the branch latents are fused as a
mask-weighted sum (the masks form a partition of unity) and the merged latent
is broadcast back to every branch as the next-step input.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .backends import BackendBundle
from .errors import (
    DimensionError,
    InsufficientInstancesError,
    SynchronizationError,
    ValidationError,
)
from .container import load_container, save_container
from .losses import DiffusionLatent, ddim_x0
from .pipeline import (
    GenerationConfig,
    GenerationTrace,
    PromptTemplate,
    _checksum,
    _slot_tokens,
    conditioning_source,
    sampler_timesteps,
)
from .training import SubjectProfile

PARTITION_TOL = 1e-6
BACKGROUND = "background"


@dataclass(frozen=True)
class InstanceMaskSet:
    """N subject masks plus one background mask at latent spatial resolution."""

    masks: tuple[np.ndarray, ...]  # subjects first, background last

    def __post_init__(self):
        masks = tuple(np.asarray(m, dtype=np.float64) for m in self.masks)
        if len(masks) < 2:
            raise ValidationError("mask set needs at least one subject mask plus background")
        shape = masks[0].shape
        for m in masks:
            if m.shape != shape or m.ndim != 2:
                raise DimensionError("all masks must share one 2-D resolution")
            if np.any(m < 0.0) or np.any(m > 1.0):
                raise ValidationError("mask values must lie in [0, 1]")
        total = np.sum(masks, axis=0)
        worst = np.unravel_index(np.argmax(np.abs(total - 1.0)), shape)
        if abs(total[worst] - 1.0) > PARTITION_TOL:
            raise ValidationError(
                f"masks violate partition of unity: sum={total[worst]:.8f} at pixel {tuple(int(i) for i in worst)}"
            )
        object.__setattr__(self, "masks", masks)

    @property
    def num_subjects(self) -> int:
        return len(self.masks) - 1

    @property
    def resolution(self) -> tuple[int, int]:
        return self.masks[0].shape  # type: ignore[return-value]

    @property
    def background(self) -> np.ndarray:
        return self.masks[-1]

    def save(self, path: str) -> None:
        tensors = {f"mask.{i}": m for i, m in enumerate(self.masks)}
        save_container(path, tensors, {"kind": "mask_set", "count": len(self.masks)})

    @classmethod
    def load(cls, path: str) -> "InstanceMaskSet":
        tensors, extra = load_container(path)
        count = int(extra.get("count", len(tensors)))
        return cls(tuple(tensors[f"mask.{i}"].astype(np.float64) for i in range(count)))


@dataclass(frozen=True)
class BranchState:
    branch_id: object  # subject index (int) or "background"
    latent: np.ndarray
    timestep: int
    model_binding: int | None = None  # which subject's LoRA set is active


@dataclass(frozen=True)
class CompositionPlan:
    subjects: tuple[SubjectProfile, ...]
    template: PromptTemplate
    masks: InstanceMaskSet
    cfg: GenerationConfig

    def __post_init__(self):
        n = len(self.subjects)
        if n < 1:
            raise ValidationError("composition needs at least one subject")
        if self.template.num_subjects != n:
            raise ValidationError(
                f"template has {self.template.num_subjects} slots for {n} subjects"
            )
        if len(self.masks.masks) != n + 1:
            raise ValidationError(f"mask set has {len(self.masks.masks)} masks, need {n + 1}")
        fps = {p.config_fingerprint for p in self.subjects}
        if len(fps) != 1:
            raise ValidationError("subjects were built under different configurations")


@dataclass(frozen=True)
class CompositionStepRecord:
    t: int
    branch_timesteps: tuple[int, ...]
    branch_checksums: tuple[str, ...]
    merged_checksum: str


@dataclass(frozen=True)
class CompositionTrace:
    steps: tuple[CompositionStepRecord, ...]
    image: np.ndarray
    final_latent: np.ndarray
    masks: InstanceMaskSet


def downsample_mask(mask: np.ndarray, resolution: tuple[int, int]) -> np.ndarray:
    """Area-average downsampling from image to latent resolution."""
    m = np.asarray(mask, dtype=np.float64)
    H, W = m.shape
    h, w = resolution
    if H % h or W % w:
        raise DimensionError(f"mask {m.shape} not an integer multiple of {resolution}")
    return m.reshape(h, H // h, w, W // w).mean(axis=(1, 3))


def normalize_masks(masks: list[np.ndarray]) -> InstanceMaskSet:
    """Renormalize raw masks (subjects + background) into a partition of unity."""
    stack = np.stack([np.clip(np.asarray(m, dtype=np.float64), 0.0, None) for m in masks])
    total = stack.sum(axis=0)
    if np.any(total <= 0.0):
        # Pixels covered by nothing fall to the background.
        bg = stack[-1].copy()
        bg[total <= 0.0] = 1.0
        stack[-1] = bg
        total = stack.sum(axis=0)
    stack = stack / total
    return InstanceMaskSet(tuple(np.clip(s, 0.0, 1.0) for s in stack))


def derive_masks(layout_trace: GenerationTrace, n_subjects: int, segmenter, bundle: BackendBundle) -> InstanceMaskSet:
    """Segment a single-process layout image into per-subject + background masks.

    Instances are assigned to subjects left-to-right by mask centroid x.
    """
    instances = segmenter.segment(layout_trace.image)
    if len(instances) < n_subjects:
        raise InsufficientInstancesError(found=len(instances), needed=n_subjects)

    def centroid_x(m: np.ndarray) -> float:
        m = np.asarray(m, dtype=np.float64)
        tot = m.sum()
        if tot <= 0:
            return float("inf")
        xs = np.arange(m.shape[1], dtype=np.float64)
        return float((m.sum(axis=0) @ xs) / tot)

    chosen = sorted(instances, key=centroid_x)[:n_subjects]
    latent_res = tuple(bundle.latent_shape[:2])
    subj = [downsample_mask(m, latent_res) for m in chosen]
    background = np.clip(1.0 - np.sum(subj, axis=0), 0.0, 1.0)
    return normalize_masks([*subj, background])


def merge_latents(branches: list[BranchState], masks: InstanceMaskSet) -> np.ndarray:
    """Mask-weighted sum of branch latents (subjects first, background last)."""
    if len(branches) != len(masks.masks):
        raise DimensionError(f"{len(branches)} branches vs {len(masks.masks)} masks")
    ts = {b.timestep for b in branches}
    if len(ts) != 1:
        raise SynchronizationError(f"branches at different timesteps: {sorted(ts)}")
    merged = np.zeros_like(np.asarray(branches[0].latent, dtype=np.float64))
    for b, m in zip(branches, masks.masks):
        lat = np.asarray(b.latent, dtype=np.float64)
        if lat.shape[:2] != m.shape:
            raise DimensionError(f"latent {lat.shape} does not match mask {m.shape}")
        merged = merged + m[..., None] * lat
    return merged


def compose(
    plan: CompositionPlan,
    bundle: BackendBundle,
    parallel: bool = False,
) -> CompositionTrace:
    """Run the chained multi-branch sampler and decode the merged result."""
    n = len(plan.subjects)
    cfg = plan.cfg
    ts = sampler_timesteps(bundle.T, cfg.steps)
    schedule = bundle.schedule
    T = plan.subjects[0].token_schedule.T

    def branch_cond(branch: int, t: int):
        # Branch i injects only subject i's learned tokens; everything else
        # stays on the placeholder. The background branch is all-placeholder.
        if branch < n:
            schedules = {branch + 1: plan.subjects[branch].token_schedule}
        else:
            schedules = {}
        return bundle.text_encoder.encode(_slot_tokens(plan.template, t, T, cfg.tau, schedules))

    def branch_model(branch: int):
        if branch < n and plan.subjects[branch].lora:
            return list(plan.subjects[branch].lora), plan.subjects[branch].alpha
        return None, 0.0

    x = np.random.default_rng(cfg.seed).standard_normal(bundle.latent_shape)
    records = []

    def step_branch(branch: int, t: int, t_next: int, x_in: np.ndarray) -> np.ndarray:
        lora, alpha = branch_model(branch)
        eps, _ = bundle.denoiser.predict(x_in, t, branch_cond(branch, t), lora=lora, alpha=alpha)
        x0 = ddim_x0(DiffusionLatent(x_in, t), eps, schedule)
        if t_next > 0:
            ab_next = schedule.at(t_next)
            return math.sqrt(ab_next) * x0 + math.sqrt(1.0 - ab_next) * np.asarray(eps)
        return np.asarray(x0)

    n_branches = n + 1
    for i, t in enumerate(ts):
        t_next = ts[i + 1] if i + 1 < len(ts) else 0
        if parallel:
            with ThreadPoolExecutor(max_workers=n_branches) as pool:
                futures = [pool.submit(step_branch, b, t, t_next, x) for b in range(n_branches)]
                outs = [f.result() for f in futures]
        else:
            outs = [step_branch(b, t, t_next, x) for b in range(n_branches)]

        branches = [
            BranchState(
                branch_id=(b if b < n else BACKGROUND),
                latent=outs[b],
                timestep=t_next,
                model_binding=(b if b < n else None),
            )
            for b in range(n_branches)
        ]
        x = merge_latents(branches, plan.masks)
        records.append(
            CompositionStepRecord(
                t=t,
                branch_timesteps=tuple(b.timestep for b in branches),
                branch_checksums=tuple(_checksum(o) for o in outs),
                merged_checksum=_checksum(x),
            )
        )

    image = bundle.image_codec.decode(x)
    return CompositionTrace(
        steps=tuple(records),
        image=np.asarray(image),
        final_latent=x,
        masks=plan.masks,
    )
