# app.py (command-line entry point: experiment runs, single explanations, evaluation, synthetic data)
import argparse
import json
import logging
import os
import sys

from config import LOG_LEVEL, OUTPUT_DIR
from borex.core import DatasetItem, ImageVolume, as_label, read_region, read_saliency, read_tensor, write_tensor
from borex.errors import BorexError, RunFailed
from borex.harness import build_run_config, evaluate_one, explain_one, load_run_config, run_experiment
from borex.heatmap import emit_heatmap
from borex.synthetic import synth_dataset

logger = logging.getLogger("borex")


# ---------------- Helpers ----------------
def _setup_logging(args) -> None:
    level = logging.DEBUG if args.verbose else getattr(logging, LOG_LEVEL.upper(), logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _run_config(args, **overrides):
    """Run config from --config, or defaults plus an external --classifier command."""
    overrides.setdefault("seed", getattr(args, "seed", None))
    overrides.setdefault("method", getattr(args, "method", None))
    if getattr(args, "quiet", False):
        overrides["progress"] = False
    if args.config:
        return load_run_config(args.config, **overrides)
    return build_run_config({"classifier": {"external": args.classifier}} if getattr(args, "classifier", None)
                            else {}, **overrides)


def _load_item(args, with_prior: bool) -> DatasetItem:
    image = ImageVolume(read_tensor(args.image))
    region = read_region(args.region) if args.region else None
    prior = read_saliency(args.prior) if with_prior and args.prior else None
    stem = os.path.splitext(os.path.basename(args.image))[0]
    return DatasetItem(image=image, target=as_label(args.label), region=region, prior=prior, id=stem)


# ---------------- Commands ----------------
def cmd_run(args) -> int:
    cfg = _run_config(args, output_dir=args.out)
    report = run_experiment(cfg)
    logger.info("Run finished: %d row(s), %d failed item(s)", len(report.rows), len(report.failures))
    return 0


def cmd_explain(args) -> int:
    cfg = _run_config(args)
    item = _load_item(args, with_prior=True)
    smap, calls = explain_one(cfg, item)
    out_dir = args.out or OUTPUT_DIR
    os.makedirs(out_dir, exist_ok=True)
    map_path = os.path.join(out_dir, f"{item.id}_saliency.bxt")
    write_tensor(map_path, smap.values)
    emit_heatmap(smap, item.image, out_dir, f"heatmap_{item.id}")
    print(json.dumps({"map": map_path, "n_classifier_calls": calls}))
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    item = _load_item(args, with_prior=False)
    scores = evaluate_one(cfg, item, read_saliency(args.map))
    print(json.dumps(scores))
    return 0


def cmd_synth(args) -> int:
    kwargs = dict(
        shape=(args.frames, args.size, args.size),
        n_regions=args.regions,
        side=args.side,
        prior_snr=args.prior_snr,
        channels=args.channels,
        seed=args.seed,
        label=args.label,
    )
    path = synth_dataset(args.out, args.items, **kwargs)
    print(path)
    return 0


# ---------------- Parser ----------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="borex", description="Saliency maps refined by Bayesian optimisation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="no progress bar")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="explain and score every item of a dataset")
    run.add_argument("--config", required=True, help="run file (.toml or .json)")
    run.add_argument("--out", help="output directory (overrides the run file)")
    run.add_argument("--seed", type=int)
    run.add_argument("--method")
    run.set_defaults(func=cmd_run)

    explain = sub.add_parser("explain", help="explain a single image or video")
    explain.add_argument("--image", required=True)
    explain.add_argument("--label", required=True)
    explain.add_argument("--prior")
    explain.add_argument("--region")
    explain.add_argument("--config")
    explain.add_argument("--classifier", help="external classifier command when no --config is given")
    explain.add_argument("--seed", type=int)
    explain.add_argument("--method")
    explain.add_argument("--out")
    explain.set_defaults(func=cmd_explain)

    ev = sub.add_parser("eval", help="score an existing saliency map")
    ev.add_argument("--map", required=True)
    ev.add_argument("--image", required=True)
    ev.add_argument("--label", required=True)
    ev.add_argument("--region")
    ev.add_argument("--config")
    ev.add_argument("--classifier", help="external classifier command when no --config is given")
    ev.add_argument("--seed", type=int, default=0)
    ev.set_defaults(func=cmd_eval)

    synth = sub.add_parser("synth", help="write a synthetic dataset")
    synth.add_argument("--out", required=True)
    synth.add_argument("--items", type=int, default=30)
    synth.add_argument("--size", type=int, default=32)
    synth.add_argument("--frames", type=int, default=1)
    synth.add_argument("--regions", type=int, default=1)
    synth.add_argument("--side", type=int, default=8)
    synth.add_argument("--channels", type=int, choices=(1, 3), default=1)
    synth.add_argument("--prior-snr", type=float)
    synth.add_argument("--label", default="target")
    synth.add_argument("--seed", type=int, default=0)
    synth.set_defaults(func=cmd_synth)
    return parser


# ---------------- Main ----------------
def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args)
    try:
        return args.func(args)
    except RunFailed as e:
        logger.error("%s", e)
        for item, reason in e.failures:
            logger.error("  %s: %s", item, reason)
        return 2
    except BorexError as e:
        logger.error("%s", e)
        return 2
    except (OSError, ValueError) as e:
        logger.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
