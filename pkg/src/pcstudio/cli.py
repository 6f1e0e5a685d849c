"""Command-line interface. Every service capability has a local-mode command;
`pc serve` runs the HTTP API."""

from __future__ import annotations

import glob
import json
import os

import click
import numpy as np

from .adaptor import LatentAdaptor
from .backends import resolve_bundle
from .composition import CompositionPlan, InstanceMaskSet, compose as compose_op, derive_masks
from .errors import PCStudioError
from .evaluation import evaluate_personalization
from .imageio import load_image, save_image
from .latent import DirectionCatalog, EditRequest, WPlusLatent, extract_direction
from .pipeline import (
    GenerationConfig,
    PromptTemplate,
    edit_generate,
    generate as generate_op,
    interpolation_strip,
    run_sampler,
    _slot_tokens,
)
from .report import render_image_strip, render_report
from .service.app import ServiceConfig, create_app, default_adaptor_config
from .training import (
    LossWeights,
    PairedSample,
    SubjectProfile,
    TuneConfig,
    compute_fingerprint,
    embed_subject,
    pretrain,
    superclass_token,
    tune_subject,
)


def _bundle(backend: str | None):
    return resolve_bundle(backend)


def _adaptor(weights: str | None, bundle, seed: int = 0) -> LatentAdaptor:
    if weights:
        return LatentAdaptor.load(weights)
    return LatentAdaptor(default_adaptor_config(bundle), seed=seed, v_cls=superclass_token(bundle))


def _gen_cfg(bundle, steps, tau, seed, capture=False) -> GenerationConfig:
    return GenerationConfig(
        steps=steps if steps else bundle.T, tau=tau, seed=seed, capture_attention=capture
    )


@click.group()
def main():
    """Face personalization and attribute-editing toolkit."""


@main.command()
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True), help="Directory of .npy/.png training images")
@click.option("--out", "out_path", required=True, help="Output adaptor weights (.pcw)")
@click.option("--iters", default=200, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--lr", default=1e-3, show_default=True)
@click.option("--backend", default=None, help="Backend bundle spec (JSON); defaults to PC_BACKEND or toy")
def pretrain_cmd(data_dir, out_path, iters, seed, lr, backend):
    """Stage-1 adaptor pretraining over (image, w) pairs."""
    bundle = _bundle(backend)
    adaptor = _adaptor(None, bundle, seed=seed)
    paths = sorted(
        p for ext in ("*.npy", "*.png", "*.jpg") for p in glob.glob(os.path.join(data_dir, ext))
    )
    if not paths:
        raise click.ClickException(f"no images found in {data_dir}")
    samples = []
    for p in paths:
        img = load_image(p, bundle.image_shape)
        samples.append(PairedSample(img, bundle.gan_encoder.encode(img), os.path.basename(p)))
    history = pretrain(adaptor, samples, iters, seed, bundle, lr=lr)
    adaptor.save(out_path)
    click.echo(f"trained {iters} steps: loss {history[0]['total']:.5f} -> {history[-1]['total']:.5f}")
    click.echo(f"wrote {out_path}")


main.add_command(pretrain_cmd, name="pretrain")


@main.command()
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
@click.option("--weights", default=None, help="Adaptor weights (.pcw); fresh seeded adaptor if omitted")
@click.option("--out", "out_path", required=True, help="Output subject profile (.pcs)")
@click.option("--iters", default=50, show_default=True)
@click.option("--alpha", default=0.3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--subject-id", default=None)
@click.option("--backend", default=None)
def tune(image_path, weights, out_path, iters, alpha, seed, subject_id, backend):
    """Stage-2 subject-specific LoRA tuning on a single image."""
    bundle = _bundle(backend)
    adaptor = _adaptor(weights, bundle)
    image = load_image(image_path, bundle.image_shape)
    sid = subject_id or os.path.splitext(os.path.basename(image_path))[0]
    w = bundle.gan_encoder.encode(image)
    cfg = TuneConfig(iterations=iters, alpha=alpha, seed=seed)
    profile = tune_subject(image, w, adaptor, cfg, bundle, subject_id=sid)
    profile.save(out_path)
    click.echo(f"wrote {out_path} (lora targets: {[d.target_name for d in profile.lora]})")


@main.command()
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
@click.option("--weights", default=None)
@click.option("--out", "out_path", required=True)
@click.option("--alpha", default=0.0, show_default=True)
@click.option("--subject-id", default=None)
@click.option("--backend", default=None)
def embed(image_path, weights, out_path, alpha, subject_id, backend):
    """Stage-1-only subject embedding (no LoRA)."""
    bundle = _bundle(backend)
    adaptor = _adaptor(weights, bundle)
    image = load_image(image_path, bundle.image_shape)
    sid = subject_id or os.path.splitext(os.path.basename(image_path))[0]
    profile = embed_subject(image, adaptor, bundle, subject_id=sid, alpha=alpha)
    profile.save(out_path)
    click.echo(f"wrote {out_path}")


@main.command()
@click.option("--subject", "subject_path", required=True, type=click.Path(exists=True))
@click.option("--prompt", required=True, help='e.g. "A photo of {S1} on the beach"')
@click.option("--tau", default=0.7, show_default=True)
@click.option("--seed", default=42, show_default=True)
@click.option("--steps", default=0, help="Defaults to the backend schedule length")
@click.option("--out", "out_path", required=True)
@click.option("--backend", default=None)
def generate(subject_path, prompt, tau, seed, steps, out_path, backend):
    """Single-subject personalized generation."""
    bundle = _bundle(backend)
    profile = SubjectProfile.load(subject_path)
    cfg = _gen_cfg(bundle, steps, tau, seed)
    trace = generate_op(profile, PromptTemplate(prompt), cfg, bundle)
    save_image(trace.image, out_path)
    click.echo(f"wrote {out_path}")


@main.command()
@click.option("--subject", "subject_path", required=True, type=click.Path(exists=True))
@click.option("--directions", "catalog_path", required=True, type=click.Path(exists=True), help="Direction catalog (.pcd)")
@click.option("--dir", "direction", required=True, help="Direction name")
@click.option("--beta", default="1.0", show_default=True, help="Single value or sweep lo:hi:n")
@click.option("--prompt", default="a photo of a {S1} person", show_default=True)
@click.option("--weights", default=None, help="Adaptor weights used to re-embed the edited latent")
@click.option("--tau", default=0.7, show_default=True)
@click.option("--seed", default=42, show_default=True)
@click.option("--steps", default=0)
@click.option("--out-dir", "out_dir", required=True)
@click.option("--backend", default=None)
def edit(subject_path, catalog_path, direction, beta, prompt, weights, tau, seed, steps, out_dir, backend):
    """Attribute edit: single beta or a lo:hi:n sweep, layout-preserving."""
    bundle = _bundle(backend)
    adaptor = _adaptor(weights, bundle)
    profile = SubjectProfile.load(subject_path)
    catalog = DirectionCatalog.load(catalog_path)
    if ":" in beta:
        lo, hi, n = beta.split(":")
        betas = list(np.linspace(float(lo), float(hi), int(n)))
    else:
        betas = [float(beta)]
    template = PromptTemplate(prompt)
    cfg = _gen_cfg(bundle, steps, tau, seed, capture=True)
    base = generate_op(profile, template, cfg, bundle)
    os.makedirs(out_dir, exist_ok=True)
    images = []
    for b in betas:
        trace = edit_generate(
            profile, EditRequest(((direction, b),)), base, adaptor, catalog, cfg, bundle, template=template
        )
        path = os.path.join(out_dir, f"{direction}_{b:+.3f}.png")
        save_image(trace.image, path)
        images.append(trace.image)
    strip_path = os.path.join(out_dir, f"{direction}_sweep.png")
    render_image_strip(images, strip_path, labels=[f"b={b:+.2f}" for b in betas])
    click.echo(f"wrote {len(betas)} frames + {strip_path}")


@main.command()
@click.option("--a", "a_path", required=True, type=click.Path(exists=True))
@click.option("--b", "b_path", required=True, type=click.Path(exists=True))
@click.option("--n", default=8, show_default=True)
@click.option("--prompt", default="a photo of a {S1} person", show_default=True)
@click.option("--weights", default=None)
@click.option("--tau", default=0.7, show_default=True)
@click.option("--seed", default=42, show_default=True)
@click.option("--steps", default=0)
@click.option("--out-dir", "out_dir", required=True)
@click.option("--backend", default=None)
def interp(a_path, b_path, n, prompt, weights, tau, seed, steps, out_dir, backend):
    """Identity interpolation strip between two subjects."""
    bundle = _bundle(backend)
    adaptor = _adaptor(weights, bundle)
    pa, pb = SubjectProfile.load(a_path), SubjectProfile.load(b_path)
    cfg = _gen_cfg(bundle, steps, tau, seed)
    frames = interpolation_strip(pa, pb, n, PromptTemplate(prompt), cfg, adaptor, bundle)
    os.makedirs(out_dir, exist_ok=True)
    for k, tr in enumerate(frames):
        save_image(tr.image, os.path.join(out_dir, f"frame_{k:02d}.png"))
    render_image_strip([tr.image for tr in frames], os.path.join(out_dir, "strip.png"))
    click.echo(f"wrote {n} frames to {out_dir}")


@main.command(name="compose")
@click.option("--subjects", required=True, help="Comma-separated .pcs paths")
@click.option("--prompt", required=True, help='e.g. "{S1} and {S2} playing chess"')
@click.option("--seed", default=7, show_default=True)
@click.option("--tau", default=0.7, show_default=True)
@click.option("--steps", default=0)
@click.option("--masks", default="auto", show_default=True, help='"auto" or a mask set file (.msk)')
@click.option("--parallel", is_flag=True, default=False)
@click.option("--out", "out_path", required=True)
@click.option("--backend", default=None)
def compose_cmd(subjects, prompt, seed, tau, steps, masks, parallel, out_path, backend):
    """Multi-subject mask-merged composition."""
    bundle = _bundle(backend)
    profiles = tuple(SubjectProfile.load(p) for p in subjects.split(","))
    template = PromptTemplate(prompt)
    cfg = _gen_cfg(bundle, steps, tau, seed)
    if masks == "auto":
        T = bundle.T
        layout = run_sampler(
            bundle,
            cfg,
            cond_fn=lambda t: bundle.text_encoder.encode(_slot_tokens(template, t, T, 0.0, {})),
            source_fn=lambda t: "placeholder",
        )
        mask_set = derive_masks(layout, len(profiles), bundle.segmenter, bundle)
    else:
        mask_set = InstanceMaskSet.load(masks)
    plan = CompositionPlan(subjects=profiles, template=template, masks=mask_set, cfg=cfg)
    trace = compose_op(plan, bundle, parallel=parallel)
    save_image(trace.image, out_path)
    mask_path = os.path.splitext(out_path)[0] + ".msk"
    mask_set.save(mask_path)
    click.echo(f"wrote {out_path} and {mask_path}")


@main.command(name="eval")
@click.option("--subjects", "subjects_dir", required=True, type=click.Path(exists=True), help="Directory of .pcs profiles")
@click.option("--prompts", "prompts_file", required=True, type=click.Path(exists=True), help="One prompt per line")
@click.option("--out", "out_path", required=True, help="Report JSON path; CSV and figures land beside it")
@click.option("--tau", default=0.7, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--steps", default=0)
@click.option("--backend", default=None)
def eval_cmd(subjects_dir, prompts_file, out_path, tau, seed, steps, backend):
    """Personalization metrics (CS/PS) over profiles x prompts."""
    bundle = _bundle(backend)
    profiles = [SubjectProfile.load(p) for p in sorted(glob.glob(os.path.join(subjects_dir, "*.pcs")))]
    if not profiles:
        raise click.ClickException(f"no .pcs profiles in {subjects_dir}")
    with open(prompts_file) as f:
        prompts = [line.strip() for line in f if line.strip()]
    cfg = _gen_cfg(bundle, steps, tau, seed)
    report = evaluate_personalization(profiles, prompts, cfg, bundle)
    out_dir = os.path.dirname(os.path.abspath(out_path)) or "."
    base = os.path.splitext(os.path.basename(out_path))[0]
    paths = render_report(report, out_dir, basename=base)
    click.echo(f"aggregates: {json.dumps(report.aggregates)}")
    for p in paths:
        click.echo(f"wrote {p}")


@main.group()
def directions():
    """Edit-direction catalog management."""


@directions.command(name="extract")
@click.option("--after", "after_dir", required=True, type=click.Path(exists=True), help="Images after the edit")
@click.option("--before", "before_dir", required=True, type=click.Path(exists=True), help="Matching images before the edit")
@click.option("--name", required=True)
@click.option("--out", "out_path", required=True, help="Catalog file (.pcd); created or updated")
@click.option("--backend", default=None)
def directions_extract(after_dir, before_dir, name, out_path, backend):
    """Average encoded latent differences over paired images into a direction."""
    bundle = _bundle(backend)
    after_paths = sorted(glob.glob(os.path.join(after_dir, "*")))
    before_paths = sorted(glob.glob(os.path.join(before_dir, "*")))
    if len(after_paths) != len(before_paths) or not after_paths:
        raise click.ClickException("after/before directories must hold matching non-empty file lists")
    pairs = []
    for pa, pb in zip(after_paths, before_paths):
        wa = bundle.gan_encoder.encode(load_image(pa, bundle.image_shape))
        wb = bundle.gan_encoder.encode(load_image(pb, bundle.image_shape))
        pairs.append((wa, wb))
    d = extract_direction(pairs, name)
    catalog = DirectionCatalog.load(out_path) if os.path.exists(out_path) else DirectionCatalog()
    catalog.add(d)
    catalog.save(out_path)
    click.echo(f"added {name!r} ({d.num_pairs} pairs) to {out_path}")


@directions.command(name="list")
@click.argument("catalog_path", type=click.Path(exists=True))
def directions_list(catalog_path):
    catalog = DirectionCatalog.load(catalog_path)
    for name in catalog.names():
        d = catalog.get(name)
        click.echo(f"{name}: shape={d.delta.shape} pairs={d.num_pairs} provenance={d.provenance}")


@main.command()
@click.option("--port", default=None, type=int, help="Defaults to PC_PORT or 8642")
@click.option("--store-dir", default=None, help="Defaults to PC_STORE_DIR")
@click.option("--backend", default=None)
@click.option("--weights", default=None, help="Adaptor weights for the service")
def serve(port, store_dir, backend, weights):
    """Run the HTTP service."""
    import uvicorn

    port = port or int(os.environ.get("PC_PORT", "8642"))
    cfg = ServiceConfig.from_env(backend_path=backend, adaptor_weights=weights, **(
        {"store_dir": store_dir} if store_dir else {}
    ))
    uvicorn.run(create_app(cfg), host="127.0.0.1", port=port)


if __name__ == "__main__":
    main()
