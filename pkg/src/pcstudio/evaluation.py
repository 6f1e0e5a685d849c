"""Evaluation metrics: identity similarity (CS), prompt similarity (PS),
delta-CLIP, LPIPS, and batch report generation.

At desk scale these run against the toy scorers; the report records the
scorer identifiers so full-scale numbers are attributable to their backbones.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .backends import BackendBundle
from .errors import FaceDetectionError, RangeViolationError, ValidationError
from .pipeline import GenerationConfig, PromptTemplate, generate
from .training import SubjectProfile

# Full-scale reference magnitudes for the beard attribute edit (delta-CLIP on
# the x100 scale, LPIPS, CS). Not reproducible at desk scale; kept as
# documentation constants for sanity-bounding full-scale runs.
REFERENCE_BEARD_EDIT = {"delta_clip_x100": 2.473, "lpips": 0.185, "cs": 0.731}

_RANGE_EPS = 1e-9
_MARKER_RE = re.compile(r"\{S(\d+)\}")


def identity_similarity(img_a, img_b, face_embedder) -> float:
    """Cosine similarity between face-recognition embeddings of two images."""
    ea = np.asarray(face_embedder.embed(img_a), dtype=np.float64)
    eb = np.asarray(face_embedder.embed(img_b), dtype=np.float64)
    denom = np.linalg.norm(ea) * np.linalg.norm(eb)
    if denom < 1e-12:
        raise FaceDetectionError("degenerate embedding norm")
    return float(ea @ eb / denom)


def prompt_similarity(image, text: str, clip_scorer) -> float:
    """CLIP-style image/text alignment, validated against the [-1, 1] contract."""
    s = float(clip_scorer.score(image, text))
    if not -1.0 - _RANGE_EPS <= s <= 1.0 + _RANGE_EPS:
        raise RangeViolationError(f"clip scorer returned {s}, outside [-1, 1]")
    return s


def delta_clip(image_before, image_after, attribute_text: str, clip_scorer) -> float:
    """Change in prompt similarity toward the attribute text across an edit."""
    return prompt_similarity(image_after, attribute_text, clip_scorer) - prompt_similarity(
        image_before, attribute_text, clip_scorer
    )


@dataclass(frozen=True)
class EvalRow:
    subject_id: str
    prompt: str
    cs: float | None
    ps: float | None
    lpips: float | None = None
    delta_clip: float | None = None
    error: str | None = None


@dataclass(frozen=True)
class EvalReport:
    rows: tuple[EvalRow, ...]
    aggregates: dict
    excluded: int
    config: dict
    lpips_identifier: str | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "rows": [vars(r) for r in self.rows],
                "aggregates": self.aggregates,
                "excluded": self.excluded,
                "config": self.config,
                "lpips_identifier": self.lpips_identifier,
            },
            indent=1,
            sort_keys=True,
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(
            buf, fieldnames=["subject_id", "prompt", "cs", "ps", "lpips", "delta_clip", "error"]
        )
        writer.writeheader()
        for r in self.rows:
            writer.writerow(vars(r))
        return buf.getvalue()


def _aggregate(rows: list[EvalRow]) -> dict:
    agg = {}
    for metric in ("cs", "ps", "lpips", "delta_clip"):
        vals = [getattr(r, metric) for r in rows if getattr(r, metric) is not None]
        agg[f"mean_{metric}"] = float(np.mean(vals)) if vals else None
        agg[f"n_{metric}"] = len(vals)
    return agg


def _scoring_text(prompt: str) -> str:
    """Prompt text with subject slots replaced by a generic word for the scorer."""
    return _MARKER_RE.sub("person", prompt)


def evaluate_personalization(
    profiles: list[SubjectProfile],
    prompts: list[str],
    cfg: GenerationConfig,
    bundle: BackendBundle,
) -> EvalReport:
    """Generate per (profile, prompt); score CS against the source image and PS
    against the prompt. Per-row failures are recorded and the run continues."""
    if not profiles or not prompts:
        raise ValidationError("need at least one profile and one prompt")
    rows: list[EvalRow] = []
    excluded = 0
    for profile in profiles:
        for prompt in prompts:
            try:
                template = PromptTemplate(prompt)
                trace = generate(profile, template, cfg, bundle)
                ps = prompt_similarity(trace.image, _scoring_text(prompt), bundle.clip_scorer)
                if profile.source_image is None:
                    raise ValidationError("profile has no source image for CS")
                cs = identity_similarity(trace.image, profile.source_image, bundle.face_embedder)
                rows.append(EvalRow(profile.subject_id, prompt, cs=cs, ps=ps))
            except FaceDetectionError as e:
                excluded += 1
                rows.append(EvalRow(profile.subject_id, prompt, cs=None, ps=None, error=str(e)))
    usable = [r for r in rows if r.error is None]
    return EvalReport(
        rows=tuple(rows),
        aggregates=_aggregate(usable),
        excluded=excluded,
        config={"steps": cfg.steps, "tau": cfg.tau, "seed": cfg.seed},
        lpips_identifier=getattr(bundle.lpips_scorer, "identifier", None),
    )
