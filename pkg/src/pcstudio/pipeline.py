"""Personalized generation: prompt assembly, delayed token injection,
attribute-edited regeneration with self-attention reuse, and identity
interpolation strips.

The injection rule: a denoising step at timestep t uses the learned subject
tokens when t/T < tau, and the placeholder name otherwise. High-noise steps
(early in sampling, large t) therefore keep the generic prompt so the layout
is not disturbed, and the subject identity is injected late.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .adaptor import LatentAdaptor, TokenEmbeddingSchedule
from .backends import BackendBundle
from .errors import DimensionError, FingerprintMismatchError, ValidationError
from .latent import DirectionCatalog, EditRequest, WPlusLatent, combine_directions, edit_latent, interpolate
from .losses import DiffusionLatent, ddim_x0
from .training import SubjectProfile

DEFAULT_PLACEHOLDER = "famous person"
_MARKER_RE = re.compile(r"\{S(\d+)\}")


@dataclass(frozen=True)
class PromptTemplate:
    """Prompt text with one `{Sk}` slot per subject (k = 1..N)."""

    text: str
    placeholder_name: str = DEFAULT_PLACEHOLDER

    def __post_init__(self):
        if not self.text.strip():
            raise ValidationError("prompt text must be non-empty")
        slots = self.slots()
        if len(slots) != len(set(slots)):
            raise ValidationError("duplicate subject slots in prompt")
        if slots and slots != list(range(1, len(slots) + 1)):
            raise ValidationError(f"subject slots must be S1..SN, got {slots}")

    def slots(self) -> list[int]:
        return sorted(int(m) for m in _MARKER_RE.findall(self.text))

    @property
    def num_subjects(self) -> int:
        return len(self.slots())


@dataclass(frozen=True)
class GenerationConfig:
    steps: int
    tau: float = 0.7
    seed: int = 0
    guidance: dict = field(default_factory=dict)
    capture_attention: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if not 0.0 <= self.tau <= 1.0:
            raise ValidationError("tau must lie in [0, 1]")


@dataclass(frozen=True)
class StepRecord:
    t: int
    conditioning_source: str  # "placeholder" | "learned"
    latent_checksum: str


@dataclass(frozen=True)
class GenerationTrace:
    records: tuple[StepRecord, ...]
    image: np.ndarray
    final_latent: np.ndarray
    self_attention: tuple[np.ndarray, ...] | None = None
    edited_w: np.ndarray | None = None


def conditioning_source(t: int, T: int, tau: float) -> str:
    """Which conditioning a step at timestep t uses under threshold tau."""
    return "learned" if t / T < tau else "placeholder"


def _checksum(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()[:16]


def _slot_tokens(
    template: PromptTemplate,
    t: int,
    T: int,
    tau: float,
    schedules: dict[int, TokenEmbeddingSchedule],
) -> list:
    """Token list for the text backend, with per-slot learned/placeholder choice."""
    tokens: list = []
    for word in template.text.split():
        m = _MARKER_RE.fullmatch(word)
        if m is None:
            tokens.append(word)
            continue
        slot = int(m.group(1))
        sched = schedules.get(slot)
        if sched is not None and conditioning_source(t, T, tau) == "learned":
            pair = sched.at(t)
            tokens.extend([pair.v1, pair.v2])
        else:
            tokens.extend(template.placeholder_name.split())
    return tokens


def assemble_conditioning(
    template: PromptTemplate,
    schedule: TokenEmbeddingSchedule,
    t: int,
    cfg: GenerationConfig,
    text_backend,
):
    """Conditioning tensor for one step of a single-subject generation."""
    if template.num_subjects != 1:
        raise ValidationError(f"expected exactly one subject slot, found {template.num_subjects}")
    T = schedule.T
    if not 1 <= t <= T:
        raise ValidationError(f"timestep {t} outside [1, {T}]")
    return text_backend.encode(_slot_tokens(template, t, T, cfg.tau, {1: schedule}))


def sampler_timesteps(T: int, steps: int) -> list[int]:
    if steps > T:
        raise ValidationError(f"steps {steps} exceeds schedule length {T}")
    if steps == 1:
        return [T]
    return [int(round(v)) for v in np.linspace(T, 1, steps)]


def run_sampler(
    bundle: BackendBundle,
    cfg: GenerationConfig,
    cond_fn: Callable[[int], object],
    source_fn: Callable[[int], str],
    lora=None,
    alpha: float = 0.0,
    attn_override: Sequence[np.ndarray] | None = None,
    x_init: np.ndarray | None = None,
) -> GenerationTrace:
    """Deterministic DDIM loop shared by all generation paths."""
    schedule = bundle.schedule
    ts = sampler_timesteps(bundle.T, cfg.steps)
    if x_init is None:
        x = np.random.default_rng(cfg.seed).standard_normal(bundle.latent_shape)
    else:
        x = np.asarray(x_init, dtype=np.float64).copy()

    records = []
    attn_maps = []
    capture = cfg.capture_attention or attn_override is not None
    for i, t in enumerate(ts):
        cond = cond_fn(t)
        override = attn_override[i] if attn_override is not None else None
        eps, attn = bundle.denoiser.predict(
            x, t, cond, lora=lora, alpha=alpha, attn_override=override, capture=capture
        )
        x0 = ddim_x0(DiffusionLatent(x, t), eps, schedule)
        t_next = ts[i + 1] if i + 1 < len(ts) else 0
        ab_next = schedule.at(t_next)
        x = math.sqrt(ab_next) * x0 + math.sqrt(1.0 - ab_next) * eps if t_next > 0 else x0
        records.append(StepRecord(t=t, conditioning_source=source_fn(t), latent_checksum=_checksum(x)))
        if capture:
            attn_maps.append(np.asarray(attn))

    image = bundle.image_codec.decode(x)
    return GenerationTrace(
        records=tuple(records),
        image=np.asarray(image),
        final_latent=x,
        self_attention=tuple(attn_maps) if capture else None,
    )


def _check_fingerprint(profile: SubjectProfile, env_fingerprint: str | None) -> None:
    if env_fingerprint is not None and profile.config_fingerprint != env_fingerprint:
        raise FingerprintMismatchError(
            f"profile fingerprint {profile.config_fingerprint[:12]} does not match "
            f"environment {env_fingerprint[:12]}"
        )


def generate(
    profile: SubjectProfile,
    template: PromptTemplate,
    cfg: GenerationConfig,
    bundle: BackendBundle,
    env_fingerprint: str | None = None,
) -> GenerationTrace:
    """Single-subject personalized generation with delayed injection."""
    _check_fingerprint(profile, env_fingerprint)
    if template.num_subjects != 1:
        raise ValidationError("generate expects a single-subject template")
    lora = list(profile.lora) or None
    T = profile.token_schedule.T

    def cond_fn(t: int):
        return bundle.text_encoder.encode(_slot_tokens(template, t, T, cfg.tau, {1: profile.token_schedule}))

    return run_sampler(
        bundle,
        cfg,
        cond_fn,
        source_fn=lambda t: conditioning_source(t, T, cfg.tau),
        lora=lora,
        alpha=profile.alpha if lora else 0.0,
    )


def edit_generate(
    profile: SubjectProfile,
    edits: EditRequest,
    base: GenerationTrace,
    adaptor: LatentAdaptor,
    catalog: DirectionCatalog,
    cfg: GenerationConfig,
    bundle: BackendBundle,
    template: PromptTemplate | None = None,
) -> GenerationTrace:
    """Regenerate with an attribute-edited latent, reusing the base run's
    starting noise and self-attention maps so the layout is preserved."""
    if base.self_attention is None:
        raise ValidationError("base trace was not generated with capture_attention=true")
    template = template or PromptTemplate("a photo of a {S1} person")
    combined = combine_directions(edits, catalog)
    w_hat = edit_latent(profile.w, combined, 1.0)
    if np.array_equal(w_hat.styles, profile.w.styles):
        # A zero-magnitude edit must reproduce the base run exactly. Profiles
        # restored from storage hold rounded tokens, so recomputing them from
        # w would break that; the stored schedule is authoritative.
        schedule = profile.token_schedule
    else:
        schedule = adaptor.embed_all_timesteps(w_hat)
    lora = list(profile.lora) or None
    T = schedule.T

    def cond_fn(t: int):
        return bundle.text_encoder.encode(_slot_tokens(template, t, T, cfg.tau, {1: schedule}))

    trace = run_sampler(
        bundle,
        cfg,
        cond_fn,
        source_fn=lambda t: conditioning_source(t, T, cfg.tau),
        lora=lora,
        alpha=profile.alpha if lora else 0.0,
        attn_override=base.self_attention,
    )
    return GenerationTrace(
        records=trace.records,
        image=trace.image,
        final_latent=trace.final_latent,
        self_attention=trace.self_attention,
        edited_w=w_hat.styles,
    )


def interpolation_strip(
    profile_a: SubjectProfile,
    profile_b: SubjectProfile,
    n: int,
    template: PromptTemplate,
    cfg: GenerationConfig,
    adaptor: LatentAdaptor,
    bundle: BackendBundle,
) -> list[GenerationTrace]:
    """n frames interpolating identity from profile_a to profile_b, same seed."""
    if n < 2:
        raise ValidationError("interpolation strip needs n >= 2 frames")
    if profile_a.w.shape != profile_b.w.shape:
        raise DimensionError(
            f"W+ shapes differ between profiles: {profile_a.w.shape} vs {profile_b.w.shape}"
        )
    frames = []
    for k in range(n):
        lam = k / (n - 1)
        w_k = interpolate(profile_a.w, profile_b.w, lam)
        schedule = adaptor.embed_all_timesteps(w_k)
        T = schedule.T

        def cond_fn(t: int, schedule=schedule, T=T):
            return bundle.text_encoder.encode(_slot_tokens(template, t, T, cfg.tau, {1: schedule}))

        frames.append(
            run_sampler(
                bundle,
                cfg,
                cond_fn,
                source_fn=lambda t, T=T: conditioning_source(t, T, cfg.tau),
            )
        )
    return frames
