"""Command-line entry point: one verb per pipeline stage."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import experiments


def _add_common(sub):
    sub.add_argument("--manifest", type=Path, help="path to the run manifest")
    sub.add_argument("--run-dir", type=Path, required=True)
    sub.add_argument("--seed", type=int, help="override the manifest seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="priorfuse",
        description="Restoration with decoupled data fidelity and prior hallucination")
    sub = parser.add_subparsers(dest="command", required=True)
    for verb in ("prepare", "invert", "train", "evaluate", "analyze-phi", "report"):
        _add_common(sub.add_parser(verb))
    init = sub.add_parser("init-manifest", help="write a default manifest")
    init.add_argument("--task", default="awgn-blind", choices=experiments.TASKS)
    init.add_argument("--out", type=Path, required=True)

    train_sub = [a for a in sub.choices["train"]._actions]  # noqa: F841
    for field in ("batch-size", "lr0", "rho", "epochs", "restart-epochs"):
        sub.choices["train"].add_argument(
            f"--{field}", type=float if field in ("lr0", "rho") else int,
            help=f"override train.{field.replace('-', '_')}")
    return parser


def _resolve_manifest(args, stage: str) -> dict:
    if args.manifest is not None:
        manifest = experiments.load_manifest(args.manifest)
    else:
        path = Path(args.run_dir) / "manifest.json"
        if not path.exists():
            raise experiments.StageError(
                stage, "no --manifest given and no manifest in the run dir")
        manifest = experiments.load_manifest(path)
    if args.seed is not None:
        manifest["seed"] = args.seed
        manifest.setdefault("train", {})["seed"] = args.seed
    return manifest


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "init-manifest":
            manifest = experiments.default_manifest(args.task)
            experiments.save_manifest(manifest, args.out)
            return 0
        if args.command == "report":
            experiments.cmd_report(args.run_dir)
            return 0
        manifest = _resolve_manifest(args, args.command)
        if args.command == "prepare":
            experiments.cmd_prepare(manifest, args.run_dir)
        elif args.command == "invert":
            experiments.cmd_invert(manifest, args.run_dir)
        elif args.command == "train":
            for field in ("batch_size", "lr0", "rho", "epochs", "restart_epochs"):
                value = getattr(args, field, None)
                if value is not None:
                    manifest["train"][field] = value
            experiments.cmd_train(manifest, args.run_dir)
        elif args.command == "evaluate":
            experiments.cmd_evaluate(manifest, args.run_dir)
        elif args.command == "analyze-phi":
            analysis = experiments.cmd_analyze_phi(manifest, args.run_dir)
            print(json.dumps({"r_phi_sigma": analysis.r_phi_sigma,
                              "r_phi_priorpsnr": analysis.r_phi_priorpsnr}))
    except experiments.StageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
