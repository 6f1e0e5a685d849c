"""Backend bundle: the set of pretrained-model interfaces a run depends on.

A bundle holds one component per role (GAN encoder, text encoder, denoiser,
image codec, face embedder, segmenter, CLIP scorer, LPIPS scorer) plus the
noise schedule. Components advertise their shapes; `load_bundle` runs one
cross-shape validation pass and computes a fingerprint that is embedded in
every persisted subject profile.

Production components load weights from externally supplied files via the
kind registry; nothing is downloaded implicitly. The "toy" kind is fully
deterministic and is the substrate for all desk-scale verification.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from ..errors import ConfigError, ValidationError
from ..losses import NoiseSchedule
from .toy import (
    ToyBackendConfig,
    ToyClipScorer,
    ToyDenoiser,
    ToyFaceEmbedder,
    ToyGanEncoder,
    ToyImageCodec,
    ToyLpipsScorer,
    ToySegmenter,
    ToyTextEncoder,
)

COMPONENT_NAMES = (
    "gan_encoder",
    "text_encoder",
    "denoiser",
    "image_codec",
    "face_embedder",
    "segmenter",
    "clip_scorer",
    "lpips_scorer",
)

ENV_BACKEND = "PC_BACKEND"


class _ExclusiveGate:
    """Serializes calls into a non-reentrant component."""

    def __init__(self, inner):
        self._inner = inner
        self._lock = threading.Lock()
        self.reentrant = True  # gated access is safe to share

    def __getattr__(self, name):
        attr = getattr(self._inner, name)
        if not callable(attr):
            return attr
        lock = self._lock

        def gated(*args, **kwargs):
            with lock:
                return attr(*args, **kwargs)

        return gated


@dataclass
class BackendBundle:
    gan_encoder: Any
    text_encoder: Any
    denoiser: Any
    image_codec: Any
    face_embedder: Any
    segmenter: Any
    clip_scorer: Any
    lpips_scorer: Any
    schedule: NoiseSchedule

    @property
    def wplus_shape(self) -> tuple[int, int]:
        return tuple(self.gan_encoder.wplus_shape)

    @property
    def token_dim(self) -> int:
        return int(self.text_encoder.token_dim)

    @property
    def latent_shape(self) -> tuple[int, ...]:
        return tuple(self.denoiser.latent_shape)

    @property
    def image_shape(self) -> tuple[int, ...]:
        return tuple(self.image_codec.image_shape)

    @property
    def T(self) -> int:
        return int(self.denoiser.T)

    def validate(self) -> None:
        """One pass over advertised shapes; raises naming the conflicting pair."""
        checks = [
            ("text_encoder.token_dim", self.text_encoder.token_dim, "denoiser.token_dim", self.denoiser.token_dim),
            ("denoiser.latent_shape", tuple(self.denoiser.latent_shape), "image_codec.latent_shape", tuple(self.image_codec.latent_shape)),
            ("image_codec.image_shape", tuple(self.image_codec.image_shape), "gan_encoder.image_shape", tuple(self.gan_encoder.image_shape)),
            ("image_codec.image_shape", tuple(self.image_codec.image_shape), "face_embedder.image_shape", tuple(self.face_embedder.image_shape)),
            ("image_codec.image_shape", tuple(self.image_codec.image_shape), "segmenter.image_shape", tuple(self.segmenter.image_shape)),
            ("denoiser.T", self.denoiser.T, "schedule.T", self.schedule.T),
        ]
        for name_a, val_a, name_b, val_b in checks:
            if val_a != val_b:
                raise ValidationError(f"backend shape conflict: {name_a}={val_a} vs {name_b}={val_b}")

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in COMPONENT_NAMES:
            comp = getattr(self, name)
            h.update(name.encode())
            h.update(getattr(comp, "kind", type(comp).__name__).encode())
            h.update(comp.checksum().encode())
        h.update(json.dumps(self.schedule.to_json(), sort_keys=True).encode())
        return h.hexdigest()


# -- kind registry -----------------------------------------------------------

_REGISTRY: dict[tuple[str, str], Callable] = {}


def register_backend(component: str, kind: str, factory: Callable) -> None:
    _REGISTRY[(component, kind)] = factory


def _toy_factory(component: str):
    builders = {
        "gan_encoder": lambda cfg, rng, params: ToyGanEncoder(cfg, rng),
        "text_encoder": lambda cfg, rng, params: ToyTextEncoder(cfg, rng, token_dim=params.get("token_dim")),
        "denoiser": lambda cfg, rng, params: ToyDenoiser(cfg, rng),
        "image_codec": lambda cfg, rng, params: ToyImageCodec(cfg, rng),
        "face_embedder": lambda cfg, rng, params: ToyFaceEmbedder(cfg, rng),
        "segmenter": lambda cfg, rng, params: ToySegmenter(cfg, instances=params.get("instances")),
        "clip_scorer": lambda cfg, rng, params: ToyClipScorer(cfg, rng),
        "lpips_scorer": lambda cfg, rng, params: ToyLpipsScorer(cfg, rng),
    }
    return builders[component]


for _name in COMPONENT_NAMES:
    register_backend(_name, "toy", _toy_factory(_name))


def make_toy_bundle(seed: int = 0, cfg: ToyBackendConfig | None = None) -> BackendBundle:
    """Build the fully deterministic toy bundle used throughout the tests."""
    cfg = cfg or ToyBackendConfig(seed=seed)
    spec = {
        "seed": cfg.seed,
        "components": {name: {"kind": "toy", "params": {}} for name in COMPONENT_NAMES},
        "schedule": {"kind": "cosine", "T": cfg.T},
    }
    return load_bundle(spec, toy_cfg=cfg)


def load_bundle(spec: dict | str, toy_cfg: ToyBackendConfig | None = None) -> BackendBundle:
    """Build and validate a bundle from a spec dict or JSON file path."""
    if isinstance(spec, str):
        with open(spec) as f:
            spec = json.load(f)

    components_spec = spec.get("components", {})
    missing = [n for n in COMPONENT_NAMES if n not in components_spec]
    if missing:
        raise ConfigError(f"bundle spec missing component(s): {', '.join(missing)}")
    if "schedule" not in spec:
        raise ConfigError("bundle spec missing component(s): schedule")

    seed = int(spec.get("seed", 0))
    toy_cfg = toy_cfg or ToyBackendConfig(seed=seed)
    # One generator shared across toy components in a fixed order keeps the
    # whole bundle a function of the single seed.
    rng = np.random.default_rng(seed)

    built: dict[str, Any] = {}
    for name in COMPONENT_NAMES:
        entry = components_spec[name]
        kind = entry.get("kind")
        params = entry.get("params", {}) or {}
        factory = _REGISTRY.get((name, kind))
        if factory is None:
            raise ConfigError(f"no backend registered for component {name!r} kind {kind!r}")
        comp = factory(toy_cfg, rng, params)
        if not getattr(comp, "reentrant", True):
            comp = _ExclusiveGate(comp)
        built[name] = comp

    sched_spec = spec["schedule"]
    if sched_spec.get("kind") == "cosine":
        schedule = NoiseSchedule.cosine(int(sched_spec.get("T", toy_cfg.T)))
    elif "alpha_bar" in sched_spec:
        schedule = NoiseSchedule.from_json(sched_spec)
    else:
        raise ConfigError(f"unrecognized schedule spec: {sched_spec!r}")

    bundle = BackendBundle(schedule=schedule, **built)
    bundle.validate()
    return bundle


def resolve_bundle(path: str | None = None) -> BackendBundle:
    """Bundle from an explicit path, the PC_BACKEND env var, or the toy default."""
    path = path or os.environ.get(ENV_BACKEND)
    if path:
        return load_bundle(path)
    return make_toy_bundle()
