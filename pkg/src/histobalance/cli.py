"""Command-line entry point.

Subcommands cover the pipeline end to end: synthetic dataset creation,
generator training (GAN, autoencoder, latent diffusion), segmenter training,
pool generation, prediction, the experiment matrix, and report rendering.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

logger = logging.getLogger(__name__)


def _add_common(parser):
    parser.add_argument("--seed", type=int, default=0)


def _load_patch_split(root, part):
    from histobalance.datasets import load_patches

    return load_patches(root, part)


def cmd_phantom(args):
    from histobalance.phantom import generate_phantom_dataset

    manifest = generate_phantom_dataset(
        args.root,
        n_slides=args.slides,
        slide_size=args.slide_size,
        instances_per_slide=args.instances,
        patch=args.patch,
        stride=args.stride,
        seed=args.seed,
    )
    print(f"wrote {sum(len(s.patches) for s in manifest.slides)} patches to {args.root}")


def cmd_train_ae(args):
    from histobalance.checkpoints import save_checkpoint
    from histobalance.diffusion import AutoencoderConfig, train_autoencoder

    patches = _load_patch_split(args.data_root, "train")
    config = AutoencoderConfig(**json.loads(args.config)) if args.config else AutoencoderConfig(steps=args.steps)
    payload, history = train_autoencoder(patches, config, seed=args.seed)
    save_checkpoint(args.out, payload)
    print(f"autoencoder: {payload['step']} steps, final recon loss "
          f"{history['recon'][-1]:.5f}, saved {args.out}")


def cmd_train_ldm(args):
    from histobalance.checkpoints import load_checkpoint, save_checkpoint
    from histobalance.diffusion import LdmConfig, train_ldm

    patches = _load_patch_split(args.data_root, "train")
    ae = load_checkpoint(args.ae, "autoencoder")
    config = LdmConfig(**json.loads(args.config)) if args.config else LdmConfig(steps=args.steps)
    resume = load_checkpoint(args.resume, "ldm") if args.resume else None
    payload, history = train_ldm(patches, ae, config, seed=args.seed, resume=resume)
    save_checkpoint(args.out, payload)
    print(f"latent diffusion: {payload['step']} steps, final loss "
          f"{history['loss'][-1]:.5f}, saved {args.out}")


def cmd_train_gan(args):
    from histobalance.checkpoints import load_checkpoint, save_checkpoint
    from histobalance.gan import GanConfig, train_gan

    patches = _load_patch_split(args.data_root, "train")
    config = GanConfig(**json.loads(args.config)) if args.config else GanConfig(steps=args.steps)
    resume = load_checkpoint(args.resume, "gan") if args.resume else None
    payload, history = train_gan(patches, config, seed=args.seed, resume=resume)
    save_checkpoint(args.out, payload)
    print(f"gan: {payload['step']} steps, final g_loss {history['g_loss'][-1]:.4f} "
          f"d_loss {history['d_loss'][-1]:.4f}, saved {args.out}")


def cmd_train_seg(args):
    from histobalance.checkpoints import save_checkpoint
    from histobalance.sampling import DatasetItem
    from histobalance.segmentation import SegConfig, train_segmenter

    train = _load_patch_split(args.data_root, "train")
    val = _load_patch_split(args.data_root, "val")
    items = [
        DatasetItem(image=p.image, mask=p.mask, source="real",
                    provenance={"slide_id": p.slide_id, "index": i})
        for i, p in enumerate(train)
    ]
    config = SegConfig(**json.loads(args.config)) if args.config else SegConfig(steps=args.steps)
    payload, history = train_segmenter(items, config, args.seed, val_items=val)
    save_checkpoint(args.out, payload)
    best = history.get("best_step")
    print(f"segmenter: best step {best}, saved {args.out}")


def cmd_generate(args):
    from histobalance.checkpoints import load_checkpoint
    from histobalance.pools import generate_pool

    patches = _load_patch_split(args.data_root, "train")
    kwargs = {}
    if args.gan:
        kwargs["gan"] = load_checkpoint(args.gan, "gan")
    if args.ldm:
        kwargs["ldm"] = load_checkpoint(args.ldm, "ldm")
    if args.ae:
        kwargs["ae"] = load_checkpoint(args.ae, "autoencoder")
    manifest = generate_pool(args.method, patches, args.count, args.seed, args.out, **kwargs)
    print(f"pool: {manifest['count']} {args.method} samples in {args.out}")


def cmd_predict(args):
    import numpy as np

    from histobalance.checkpoints import load_checkpoint
    from histobalance.patches import load_image_png, save_mask_png
    from histobalance.segmentation import predict_mask

    payload = load_checkpoint(args.checkpoint, "segmenter")
    image = load_image_png(args.image)
    pred = predict_mask(payload, image)
    save_mask_png(args.out, pred.binary)
    print(f"tumor pixels: {int(pred.binary.sum())} / {pred.binary.size} "
          f"(mean prob {float(np.mean(pred.probabilities)):.3f}), saved {args.out}")


def _spec_from_file(path) -> "ExperimentSpec":
    from histobalance.harness import ExperimentSpec

    return ExperimentSpec.from_json(json.loads(Path(path).read_text()))


def cmd_experiment_run(args):
    from histobalance.harness import run_matrix

    spec = _spec_from_file(args.spec)
    records, failed = run_matrix(spec, force=args.force)
    print(f"completed {len(records)} runs" + (f", {len(failed)} failed: {failed}" if failed else ""))
    if failed:
        sys.exit(1)


def cmd_experiment_plan(args):
    from histobalance.harness import plan_runs

    spec = _spec_from_file(args.spec)
    for d in plan_runs(spec):
        print(f"{d.run_id}  seed={d.seed}")


def cmd_experiment_status(args):
    from histobalance.harness import experiment_status

    states = experiment_status(args.output_dir)
    if not states:
        print("no runs recorded")
        return
    for run_id, state in sorted(states.items()):
        print(f"{run_id}: {state}")


def cmd_report(args):
    from histobalance.harness import load_records
    from histobalance.report import emit_report

    records = load_records(args.runs)
    if not records:
        print(f"no run records under {args.runs}", file=sys.stderr)
        sys.exit(1)
    paths = emit_report(records, args.out, reference=args.reference)
    print(f"report written: {paths['text']}")
    print(f"delimited summary: {paths['csv']}")
    for fig in paths["figures"]:
        print(f"figure: {fig}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="histobalance",
        description="Subtype-balanced synthetic augmentation for tumor segmentation",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic labeled dataset")
    p.add_argument("--root", required=True)
    p.add_argument("--slides", type=int, default=8)
    p.add_argument("--slide-size", type=int, default=256)
    p.add_argument("--instances", type=int, default=24)
    p.add_argument("--patch", type=int, default=64)
    p.add_argument("--stride", type=int, default=64)
    _add_common(p)
    p.set_defaults(func=cmd_phantom)

    for name, func, extra in (
        ("train-ae", cmd_train_ae, ()),
        ("train-ldm", cmd_train_ldm, ("ae", "resume")),
        ("train-gan", cmd_train_gan, ("resume",)),
        ("train-seg", cmd_train_seg, ()),
    ):
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} on the train split")
        p.add_argument("--data-root", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--steps", type=int, default=1000)
        p.add_argument("--config", help="JSON object of config overrides")
        if "ae" in extra:
            p.add_argument("--ae", required=True, help="autoencoder checkpoint")
        if "resume" in extra:
            p.add_argument("--resume", help="checkpoint to continue from")
        _add_common(p)
        p.set_defaults(func=func)

    p = sub.add_parser("generate", help="generate a synthetic sample pool")
    p.add_argument("--data-root", required=True)
    p.add_argument("--method", required=True, choices=("gan", "diffusion", "inpaint"))
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gan")
    p.add_argument("--ldm")
    p.add_argument("--ae")
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("predict", help="segment one image with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("experiment", help="experiment matrix operations")
    esub = p.add_subparsers(dest="subcommand", required=True)
    pe = esub.add_parser("run", help="execute all planned runs")
    pe.add_argument("--spec", required=True, help="ExperimentSpec JSON file")
    pe.add_argument("--force", action="store_true")
    pe.set_defaults(func=cmd_experiment_run)
    pe = esub.add_parser("plan", help="list planned runs and seeds")
    pe.add_argument("--spec", required=True)
    pe.set_defaults(func=cmd_experiment_plan)
    pe = esub.add_parser("status", help="show ledger state per run")
    pe.add_argument("--output-dir", required=True)
    pe.set_defaults(func=cmd_experiment_status)

    p = sub.add_parser("report", help="render figures and tables from run records")
    p.add_argument("--runs", required=True, help="experiment output directory")
    p.add_argument("--out", required=True)
    p.add_argument("--reference", help="condition to compare against")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    args.func(args)


if __name__ == "__main__":
    main()
