"""Command line entry points.

Subcommands:
  synth        generate a synthetic dataset (frames + truths + manifest)
  pseudolabel  derive vesselness maps, pseudo labels and partitions
  train        run one training mode against a manifest (oracle annotator,
               or interactive via an embedded session server)
  serve        host the session service for browser-based annotation
"""

from __future__ import annotations

import argparse
import json
import sys
import threading
import time
from pathlib import Path

from .core import load_manifest
from .pipeline import load_bundle, prepare_derived
from .segmodel import TrainHyper, save_checkpoint
from .spl import MODES, SplConfig, arspl_run, report_bytes
from .suggest import OracleAnnotator


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"size must look like 64x64, got {text!r}") from exc


def _parse_split(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 3 or any(p < 0 for p in parts):
        raise argparse.ArgumentTypeError("split must be three comma-separated counts, e.g. 20,5,10")
    return tuple(parts)


def cmd_synth(args) -> int:
    from .synth import write_dataset

    counts = args.split
    if sum(counts) != args.count:
        print(f"error: --split {counts} does not sum to --count {args.count}", file=sys.stderr)
        return 2
    width, height = args.size
    manifest = write_dataset(
        args.out, args.seed, counts=counts, width=width, height=height, n_frames=args.frames,
    )
    print(f"wrote {args.count} sequences and {manifest}")
    return 0


def cmd_pseudolabel(args) -> int:
    derived = Path(args.out) if args.out else Path(args.manifest).parent / "derived"
    prepare_derived(
        args.manifest, derived,
        disk_diameter=args.disk, xi_scale=args.xi_scale,
        target_superpixels=args.superpixels,
    )
    manifest = load_manifest(args.manifest)
    total = sum(len(manifest.split(s)) for s in ("train", "val", "test"))
    print(f"derived artifacts for {total} sequences under {derived}")
    return 0


def _config_from_args(args) -> SplConfig:
    hyper = TrainHyper(
        lr0=args.lr, batch=args.batch, max_steps=args.steps, precision=args.precision,
    )
    return SplConfig(
        mode=args.mode,
        n_b=args.n_b,
        max_alt_iters=args.iters,
        stop_dice_increment=args.stop_increment,
        hyper=hyper,
        baseline_steps=args.baseline_steps,
        mcdo_passes=args.mcdo_passes,
        inference_precision=args.precision,
    )


def cmd_train(args) -> int:
    manifest_path = Path(args.manifest)
    derived = Path(args.derived) if args.derived else manifest_path.parent / "derived"
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = _config_from_args(args)

    if args.annotator == "interactive":
        return _train_interactive(args, manifest_path, derived, cfg)

    prepare_derived(manifest_path, derived)
    bundle = load_bundle(manifest_path, derived)
    annotator = None
    if cfg.mode in ("arspl", "nospl") and cfg.n_b > 0:
        missing = [r.image_id for r in bundle.train if r.truth is None]
        if missing:
            print(f"error: oracle annotator needs ground truth for {missing}", file=sys.stderr)
            return 2
        annotator = OracleAnnotator({r.image_id: r.truth for r in bundle.train})

    outcome = arspl_run(bundle, cfg, annotator, args.seed, checkpoint_dir=out_dir / "checkpoint")
    if outcome.status == "suspended":
        print("run suspended before completion", file=sys.stderr)
        return 3
    (out_dir / "report.json").write_bytes(report_bytes(outcome.report))
    if outcome.model is not None:
        save_checkpoint(outcome.model, out_dir / "model.ckpt")
    report = outcome.report
    print(f"mode={report.mode} iterations={report.iterations} "
          f"test_dice={report.test_metrics['dice']:.4f} "
          f"annotated_fraction={report.annotated_pixel_fraction:.4f}")
    print(f"report written to {out_dir / 'report.json'}")
    return 0


def _train_interactive(args, manifest_path: Path, derived: Path, cfg: SplConfig) -> int:
    import uvicorn

    from .service import create_app
    from .spl import config_to_json

    out_dir = Path(args.out)
    app = create_app(out_dir, auto_resume=False)
    manager = app.state.manager
    session = manager.create({
        "manifest": str(manifest_path.resolve()),
        "derived_dir": str(derived.resolve()),
        "seed": args.seed,
        "config": config_to_json(cfg),
    })
    print(f"session {session.id} created; awaiting annotations on port {args.port}")

    server = uvicorn.Server(uvicorn.Config(app, host="127.0.0.1", port=args.port, log_level="warning"))

    def watch():
        while session.phase not in ("converged", "suspended"):
            time.sleep(1.0)
        time.sleep(0.5)
        server.should_exit = True

    threading.Thread(target=watch, daemon=True).start()
    server.run()
    if session.phase != "converged":
        print("session did not converge", file=sys.stderr)
        return 3
    report_path = session.dir / "report.json"
    (out_dir / "report.json").write_bytes(report_path.read_bytes())
    print(f"report written to {out_dir / 'report.json'}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(args.data)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vesselbench", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate synthetic angiogram sequences")
    p_synth.add_argument("--seed", type=int, required=True)
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--count", type=int, default=35)
    p_synth.add_argument("--split", type=_parse_split, default=(20, 5, 10),
                         help="train,val,test counts (default 20,5,10)")
    p_synth.add_argument("--size", type=_parse_size, default=(64, 64))
    p_synth.add_argument("--frames", type=int, default=20)
    p_synth.set_defaults(func=cmd_synth)

    p_pl = sub.add_parser("pseudolabel", help="derive vesselness, pseudo labels, partitions")
    p_pl.add_argument("--manifest", required=True)
    p_pl.add_argument("--out", help="derived dir (default: <manifest dir>/derived)")
    p_pl.add_argument("--xi-scale", type=float, default=0.8, dest="xi_scale")
    p_pl.add_argument("--disk", type=float, default=20.0)
    p_pl.add_argument("--superpixels", type=int, help="target superpixels per image (default: area-scaled)")
    p_pl.set_defaults(func=cmd_pseudolabel)

    p_train = sub.add_parser("train", help="run one training mode")
    p_train.add_argument("--manifest", required=True)
    p_train.add_argument("--mode", choices=MODES, default="arspl")
    p_train.add_argument("--annotator", choices=("oracle", "interactive"), default="oracle")
    p_train.add_argument("--seed", type=int, required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--derived", help="derived dir (default: <manifest dir>/derived)")
    p_train.add_argument("--steps", type=int, default=120, help="SGD steps per alternation iteration")
    p_train.add_argument("--baseline-steps", type=int, default=None, dest="baseline_steps")
    p_train.add_argument("--batch", type=int, default=10)
    p_train.add_argument("--lr", type=float, default=0.1, help="desk-scale calibrated default")
    p_train.add_argument("--iters", type=int, default=20, help="alternation iteration cap")
    p_train.add_argument("--n-b", type=int, default=1, dest="n_b", help="query batch size per image")
    p_train.add_argument("--mcdo-passes", type=int, default=20, dest="mcdo_passes")
    p_train.add_argument("--stop-increment", type=float, default=5e-4, dest="stop_increment")
    p_train.add_argument("--precision", choices=("f32", "f64"), default="f32")
    p_train.add_argument("--port", type=int, default=8008, help="port for --annotator interactive")
    p_train.set_defaults(func=cmd_train)

    p_serve = sub.add_parser("serve", help="host the annotation session service")
    p_serve.add_argument("--port", type=int, default=8000)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--data", required=True)
    p_serve.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
