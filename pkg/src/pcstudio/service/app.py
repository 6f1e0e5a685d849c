"""HTTP service exposing embed/tune/generate/edit/compose/eval as async jobs.

Long operations become jobs polled via GET /jobs/{id}; results are
content-addressed artifacts served from GET /artifacts/{hash}. The subject
registry is a single JSON index updated by atomic rename.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, File, Form, Request, UploadFile
from fastapi.responses import FileResponse, JSONResponse
from pydantic import BaseModel

from ..adaptor import AdaptorConfig, LatentAdaptor
from ..backends import BackendBundle, resolve_bundle
from ..composition import CompositionPlan, InstanceMaskSet, compose, derive_masks
from ..errors import (
    DirectionNotFoundError,
    FaceDetectionError,
    FingerprintMismatchError,
    PCStudioError,
    ValidationError,
)
from ..evaluation import evaluate_personalization
from ..imageio import decode_image_bytes, to_png_bytes
from ..latent import DirectionCatalog, EditRequest, WPlusLatent, extract_direction
from ..lora import LoRADelta
from ..pipeline import (
    GenerationConfig,
    PromptTemplate,
    edit_generate,
    generate,
    run_sampler,
    _slot_tokens,
    conditioning_source,
)
from ..report import render_report
from ..training import LossWeights, SubjectProfile, TuneConfig, compute_fingerprint, embed_subject, superclass_token, tune_subject
from .jobs import JobManager
from .store import ArtifactStore, SubjectRegistry

MAX_UPLOAD = 16 * 1024 * 1024
ENV_STORE_DIR = "PC_STORE_DIR"
ENV_PORT = "PC_PORT"


@dataclass
class ServiceConfig:
    store_dir: str
    backend_path: str | None = None
    adaptor_weights: str | None = None
    adaptor_seed: int = 0
    beta_max: float = 3.0
    tau_default: float = 0.7

    @classmethod
    def from_env(cls, **overrides) -> "ServiceConfig":
        store_dir = overrides.pop("store_dir", None) or os.environ.get(ENV_STORE_DIR) or os.path.join(
            tempfile.gettempdir(), "pcstudio-store"
        )
        return cls(store_dir=store_dir, **overrides)


def default_adaptor_config(bundle: BackendBundle) -> AdaptorConfig:
    L, D = bundle.wplus_shape
    heads = next(h for h in (4, 2, 1) if D % h == 0)
    return AdaptorConfig(
        wplus_shape=(L, D),
        token_dim=bundle.token_dim,
        pe_bands=3,
        attn_heads=heads,
        max_timestep=bundle.T,
    )


class AppState:
    def __init__(self, config: ServiceConfig):
        self.config = config
        os.makedirs(config.store_dir, exist_ok=True)
        self.bundle = resolve_bundle(config.backend_path)
        if config.adaptor_weights:
            self.adaptor = LatentAdaptor.load(config.adaptor_weights)
        else:
            self.adaptor = LatentAdaptor(
                default_adaptor_config(self.bundle),
                seed=config.adaptor_seed,
                v_cls=superclass_token(self.bundle),
            )
        self.fingerprint = compute_fingerprint(self.adaptor.cfg, self.bundle)
        self.artifacts = ArtifactStore(os.path.join(config.store_dir, "artifacts"))
        self.registry = SubjectRegistry(os.path.join(config.store_dir, "subjects"))
        self.jobs = JobManager(os.path.join(config.store_dir, "jobs"))
        self.profiles_dir = os.path.join(config.store_dir, "profiles")
        os.makedirs(self.profiles_dir, exist_ok=True)
        self.catalog_path = os.path.join(config.store_dir, "directions.pcd")
        if os.path.exists(self.catalog_path):
            self.catalog = DirectionCatalog.load(self.catalog_path)
        else:
            self.catalog = DirectionCatalog()

    def load_profile(self, subject_id: str) -> SubjectProfile:
        entry = self.registry.get(subject_id)
        if entry is None:
            raise DirectionNotFoundError(f"unknown subject {subject_id!r}")
        return SubjectProfile.load(entry["profile_path"], expect_fingerprint=self.fingerprint)

    def store_image(self, image: np.ndarray) -> dict:
        png = self.artifacts.put(to_png_bytes(image), ".png")
        with tempfile.NamedTemporaryFile(suffix=".npy", delete=False) as tf:
            np.save(tf, np.asarray(image, dtype=np.float64))
            tmp = tf.name
        raw = self.artifacts.put_file(tmp)
        os.remove(tmp)
        return {"png": png, "raw": raw}


class GenerateBody(BaseModel):
    subject_id: str
    prompt: str
    seed: int = 0
    tau: float | None = None
    steps: int | None = None


class SweepBody(BaseModel):
    lo: float
    hi: float
    n: int


class EditBody(BaseModel):
    subject_id: str
    direction: str | None = None
    beta: float | None = None
    directions: dict[str, float] | None = None
    beta_sweep: SweepBody | None = None
    prompt: str | None = None
    seed: int = 0
    tau: float | None = None
    steps: int | None = None


class ComposeBody(BaseModel):
    subject_ids: list[str]
    prompt: str
    seed: int = 0
    tau: float | None = None
    steps: int | None = None
    masks: str | list = "auto"
    parallel: bool = False


class EvalBody(BaseModel):
    subject_ids: list[str]
    prompts: list[str]
    seed: int = 0
    tau: float | None = None
    steps: int | None = None


class DirectionPair(BaseModel):
    after: list[list[float]]
    before: list[list[float]]


class DirectionsBody(BaseModel):
    name: str
    pairs: list[DirectionPair]


def create_app(config: ServiceConfig | None = None) -> FastAPI:
    state = AppState(config or ServiceConfig.from_env())
    app = FastAPI(title="pcstudio", version="0.1.0")
    app.state.pc = state

    @app.exception_handler(PCStudioError)
    async def _pc_error(request: Request, exc: PCStudioError):
        status = 400
        if isinstance(exc, DirectionNotFoundError):
            status = 404
        elif isinstance(exc, FingerprintMismatchError):
            status = 409
        return JSONResponse(status_code=status, content={"error": type(exc).__name__, "detail": str(exc)})

    def gen_cfg(seed: int, tau: float | None, steps: int | None, capture: bool = False) -> GenerationConfig:
        return GenerationConfig(
            steps=steps if steps is not None else state.bundle.T,
            tau=tau if tau is not None else state.config.tau_default,
            seed=seed,
            capture_attention=capture,
        )

    # -- subjects ------------------------------------------------------------

    @app.post("/subjects")
    async def post_subject(
        file: UploadFile = File(...),
        subject_id: str = Form(None),
        tune: bool = Form(False),
        iterations: int = Form(50),
        alpha: float = Form(0.3),
        seed: int = Form(0),
    ):
        data = await file.read()
        if len(data) > MAX_UPLOAD:
            return JSONResponse(status_code=413, content={"error": "upload exceeds 16 MiB"})
        image = decode_image_bytes(data, file.filename or "upload.png", state.bundle.image_shape)
        sid = subject_id or os.path.splitext(os.path.basename(file.filename or "subject"))[0]

        def run(job):
            if tune:
                w = state.bundle.gan_encoder.encode(image)
                cfg = TuneConfig(iterations=iterations, alpha=alpha, seed=seed)
                profile = tune_subject(image, w, state.adaptor, cfg, state.bundle, subject_id=sid)
            else:
                profile = embed_subject(image, state.adaptor, state.bundle, subject_id=sid, alpha=alpha)
            path = os.path.join(state.profiles_dir, f"{sid}.pcs")
            profile.save(path)
            thumb = state.artifacts.put(to_png_bytes(image), ".png")
            state.registry.put(sid, path, thumbnail=thumb)
            return {"subject_id": sid, "profile_path": path, "thumbnail": thumb, "lora_targets": [d.target_name for d in profile.lora]}

        return state.jobs.submit("tune" if tune else "embed", run).to_json()

    @app.get("/subjects")
    def list_subjects():
        out = []
        for entry in state.registry.list():
            e = dict(entry)
            try:
                SubjectProfile.load(entry["profile_path"], expect_fingerprint=state.fingerprint)
                e["stale"] = False
            except (FingerprintMismatchError, FileNotFoundError):
                e["stale"] = True
            out.append(e)
        return {"subjects": out}

    @app.get("/subjects/{subject_id}")
    def get_subject(subject_id: str):
        entry = state.registry.get(subject_id)
        if entry is None:
            return JSONResponse(status_code=404, content={"error": f"unknown subject {subject_id!r}"})
        profile = SubjectProfile.load(entry["profile_path"])
        return {
            **entry,
            "alpha": profile.alpha,
            "T": profile.token_schedule.T,
            "lora_targets": [d.target_name for d in profile.lora],
            "stale": profile.config_fingerprint != state.fingerprint,
        }

    @app.delete("/subjects/{subject_id}")
    def delete_subject(subject_id: str):
        if not state.registry.delete(subject_id):
            return JSONResponse(status_code=404, content={"error": f"unknown subject {subject_id!r}"})
        return {"deleted": subject_id}

    # -- generation ----------------------------------------------------------

    @app.post("/generate")
    def post_generate(body: GenerateBody):
        if state.registry.get(body.subject_id) is None:
            return JSONResponse(status_code=404, content={"error": f"unknown subject {body.subject_id!r}"})
        if PromptTemplate(body.prompt).num_subjects != 1:
            raise ValidationError("generation prompt must contain exactly one subject slot")

        def run(job):
            profile = state.load_profile(body.subject_id)
            cfg = gen_cfg(body.seed, body.tau, body.steps)
            trace = generate(profile, PromptTemplate(body.prompt), cfg, state.bundle, env_fingerprint=state.fingerprint)
            refs = state.store_image(trace.image)
            return {
                "image": refs,
                "records": [vars(r) for r in trace.records],
            }

        return state.jobs.submit("generate", run).to_json()

    @app.post("/edit")
    def post_edit(body: EditBody):
        if state.registry.get(body.subject_id) is None:
            return JSONResponse(status_code=404, content={"error": f"unknown subject {body.subject_id!r}"})
        if body.beta_sweep is not None:
            if body.direction is None:
                raise ValidationError("beta_sweep requires a single direction name")
            sw = body.beta_sweep
            if sw.n < 1 or (sw.n == 1 and sw.lo != sw.hi):
                raise ValidationError("ambiguous sweep: n must be > 1 unless lo == hi")
            betas = [sw.lo] if sw.n == 1 else list(np.linspace(sw.lo, sw.hi, sw.n))
            slider_map = {body.direction: None}
        elif body.directions:
            betas = [None]
            slider_map = dict(body.directions)
        elif body.direction is not None:
            betas = [body.beta if body.beta is not None else 1.0]
            slider_map = {body.direction: None}
        else:
            raise ValidationError("edit request names no direction")
        for name in slider_map:
            state.catalog.get(name)  # 404 before job creation on unknown names

        prompt = body.prompt or "a photo of a {S1} person"
        PromptTemplate(prompt)

        def run(job):
            profile = state.load_profile(body.subject_id)
            cfg = gen_cfg(body.seed, body.tau, body.steps, capture=True)
            template = PromptTemplate(prompt)
            base = generate(profile, template, cfg, state.bundle, env_fingerprint=state.fingerprint)
            images = []
            used_betas = []
            for i, beta in enumerate(betas):
                if beta is None:
                    entries = tuple(slider_map.items())
                else:
                    entries = ((body.direction, float(beta)),)
                trace = edit_generate(
                    profile,
                    EditRequest(entries),
                    base,
                    state.adaptor,
                    state.catalog,
                    cfg,
                    state.bundle,
                    template=template,
                )
                images.append(state.store_image(trace.image))
                used_betas.append(beta if beta is not None else slider_map)
                state.jobs.set_progress(job, (i + 1) / len(betas))
            return {"base": state.store_image(base.image), "images": images, "betas": used_betas}

        return state.jobs.submit("edit", run).to_json()

    @app.post("/compose")
    def post_compose(body: ComposeBody):
        n = len(body.subject_ids)
        template = PromptTemplate(body.prompt)
        if template.num_subjects != n:
            raise ValidationError(f"prompt has {template.num_subjects} slots for {n} subjects")
        for sid in body.subject_ids:
            if state.registry.get(sid) is None:
                return JSONResponse(status_code=404, content={"error": f"unknown subject {sid!r}"})
        uploaded_masks = None
        if body.masks != "auto":
            uploaded_masks = InstanceMaskSet(tuple(np.asarray(m, dtype=np.float64) for m in body.masks))
            if uploaded_masks.num_subjects != n:
                raise ValidationError(f"mask set has {uploaded_masks.num_subjects} subject masks, need {n}")

        def run(job):
            profiles = tuple(state.load_profile(sid) for sid in body.subject_ids)
            cfg = gen_cfg(body.seed, body.tau, body.steps)
            if uploaded_masks is not None:
                masks = uploaded_masks
            else:
                # Layout pass: single process, all slots on the placeholder.
                T = state.bundle.T
                layout = run_sampler(
                    state.bundle,
                    cfg,
                    cond_fn=lambda t: state.bundle.text_encoder.encode(
                        _slot_tokens(template, t, T, 0.0, {})
                    ),
                    source_fn=lambda t: "placeholder",
                )
                masks = derive_masks(layout, n, state.bundle.segmenter, state.bundle)
            plan = CompositionPlan(subjects=profiles, template=template, masks=masks, cfg=cfg)
            trace = compose(plan, state.bundle, parallel=body.parallel)
            refs = state.store_image(trace.image)
            with tempfile.NamedTemporaryFile(suffix=".msk", delete=False) as tf:
                tmp = tf.name
            masks.save(tmp)
            mask_ref = state.artifacts.put_file(tmp)
            os.remove(tmp)
            mask_pngs = [state.artifacts.put(to_png_bytes(m), ".png") for m in masks.masks]
            return {"image": refs, "masks": mask_ref, "mask_pngs": mask_pngs, "mask_count": len(masks.masks)}

        return state.jobs.submit("compose", run).to_json()

    @app.post("/eval")
    def post_eval(body: EvalBody):
        for sid in body.subject_ids:
            if state.registry.get(sid) is None:
                return JSONResponse(status_code=404, content={"error": f"unknown subject {sid!r}"})
        if not body.prompts:
            raise ValidationError("need at least one prompt")

        def run(job):
            profiles = [state.load_profile(sid) for sid in body.subject_ids]
            cfg = gen_cfg(body.seed, body.tau, body.steps)
            report = evaluate_personalization(profiles, body.prompts, cfg, state.bundle)
            with tempfile.TemporaryDirectory() as tmp:
                paths = render_report(report, tmp)
                refs = {os.path.basename(p): state.artifacts.put_file(p) for p in paths}
            return {"artifacts": refs, "aggregates": report.aggregates, "excluded": report.excluded}

        return state.jobs.submit("eval", run).to_json()

    # -- jobs & artifacts ----------------------------------------------------

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str):
        job = state.jobs.get(job_id)
        if job is None:
            return JSONResponse(status_code=404, content={"error": f"unknown job {job_id!r}"})
        return job.to_json()

    @app.get("/artifacts/{digest}")
    def get_artifact(digest: str):
        resolved = state.artifacts.resolve(digest)
        if resolved is None:
            return JSONResponse(status_code=404, content={"error": f"unknown artifact {digest!r}"})
        path, media_type = resolved
        return FileResponse(path, media_type=media_type)

    # -- directions & config -------------------------------------------------

    @app.get("/directions")
    def get_directions():
        out = []
        for name in state.catalog.names():
            d = state.catalog.get(name)
            out.append({"name": name, "shape": list(d.delta.shape), "num_pairs": d.num_pairs, "provenance": d.provenance})
        return {"directions": out}

    @app.post("/directions")
    def post_directions(body: DirectionsBody):
        pairs = [
            (
                WPlusLatent(np.asarray(p.after, dtype=np.float64)),
                WPlusLatent(np.asarray(p.before, dtype=np.float64)),
            )
            for p in body.pairs
        ]
        d = extract_direction(pairs, body.name)
        if d.delta.shape != state.bundle.wplus_shape:
            raise ValidationError(
                f"direction shape {d.delta.shape} does not match backend W+ {state.bundle.wplus_shape}"
            )
        state.catalog.add(d)
        state.catalog.save(state.catalog_path)
        return {"name": d.name, "num_pairs": d.num_pairs, "provenance": d.provenance}

    @app.get("/config")
    def get_config():
        return {
            "directions": state.catalog.names(),
            "beta_max": state.config.beta_max,
            "T": state.bundle.T,
            "tau_default": state.config.tau_default,
            "token_dim": state.bundle.token_dim,
            "wplus_shape": list(state.bundle.wplus_shape),
            "fingerprint": state.fingerprint,
        }

    return app
