"""Command-line entry point: prepare / experiment / report.

Configuration comes from a JSON file (--config); flags override file
values. Exit codes: 0 success, 2 usage or config error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import random
import sys
from pathlib import Path

import numpy as np

from .eval import aggregate_results
from .pipeline import ExperimentConfig, prepare, read_results_csv, run_experiment
from .report import render_comparison_table, render_error_overlay, render_shot_curves, save_overlay
from .training import METHODS

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def _build_config(args) -> ExperimentConfig:
    overrides = {
        "seed": args.seed,
        "method": args.method,
        "unlabelled_fraction": args.unlabelled_fraction,
        "shots": [int(s) for s in args.shots.split(",")] if args.shots else None,
        "workers": args.workers,
        "out_dir": args.out,
    }
    if args.config:
        return ExperimentConfig.from_json(args.config, overrides)
    return ExperimentConfig.from_dict({}, overrides)


def cmd_prepare(args) -> int:
    config = _build_config(args)
    summary = prepare(config, synthetic=args.synthetic)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "prepare_config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    for d in summary["datasets"]:
        print(f"{d['name']}: {d['labelled']} labelled, {d['unlabelled']} unlabelled")
    print(f"edge maps written: {summary['edge_maps_written']}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    config = _build_config(args)
    if not config.source_roots:
        prepared = Path(config.out_dir) / "prepare_config.json"
        if prepared.exists():
            saved = json.loads(prepared.read_text())
            config.source_roots = saved["source_roots"]
            config.target_root = saved["target_root"]
        else:
            raise FileNotFoundError(
                f"no source datasets configured and no {prepared}; run 'prepare' first"
            )
    run_dir = run_experiment(config)
    results = read_results_csv(run_dir / "results.csv")
    print(f"run directory: {run_dir}")
    print(f"episodes evaluated: {len(results)}")
    return EXIT_OK


def cmd_report(args) -> int:
    reports = []
    run_dirs = [Path(d) for d in args.run_dirs]
    first_config = None
    for run_dir in run_dirs:
        results_path = run_dir / "results.csv"
        if not results_path.exists():
            raise FileNotFoundError(f"no results.csv in {run_dir}; not a completed run")
        config = ExperimentConfig.from_dict(json.loads((run_dir / "config.json").read_text()))
        first_config = first_config or config
        results = read_results_csv(results_path)
        summary = f"u={int(config.unlabelled_fraction * 100)}%"
        reports.append(aggregate_results(results, n_selections=config.n_selections, config_summary=summary))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = render_comparison_table(reports, out / "comparison_table.md")
    curves = render_shot_curves(reports, out / "shot_curves.png")
    overlay_paths = _render_sample_overlays(run_dirs, first_config, out)
    print(f"table: {table}")
    print(f"curves: {curves} (+ CSV sidecar)")
    for p in overlay_paths:
        print(f"overlay: {p}")
    return EXIT_OK


def _render_sample_overlays(run_dirs, config: ExperimentConfig, out: Path) -> list[Path]:
    """One error overlay per run, on a fixed sampled query image from the
    target dataset, after fine-tuning on a fixed 5-shot support."""
    import torch

    from .corpus import SplitManifest
    from .eval import sample_episodes
    from .model import load_checkpoint
    from .pipeline import _load_episode_data
    from .training import finetune

    paths = []
    for run_dir in run_dirs:
        run_config = ExperimentConfig.from_dict(json.loads((run_dir / "config.json").read_text()))
        manifest = SplitManifest.load(Path(run_config.target_root))
        k = 5 if 5 in run_config.shots else run_config.shots[0]
        episode = [
            e
            for e in sample_episodes(
                manifest.dataset_name, manifest.all_ids(), run_config.shots, 1, run_config.seed
            )
            if e.shot_count == k
        ][0]
        model, _ = load_checkpoint(run_dir / "checkpoint.pt")
        support, query = _load_episode_data(run_config, episode)
        finetune(model, support, run_config.finetune_config())
        model.eval()
        with torch.no_grad():
            pred = model.forward_segmentation(query.images[:1])[0]
        pred_mask = (pred.numpy() >= 0.5).astype(np.uint8)
        gt_mask = query.masks[0].numpy().astype(np.uint8)
        overlay = render_error_overlay(pred_mask, gt_mask)
        path = out / f"overlay_{run_dir.name}.png"
        save_overlay(overlay, path)
        paths.append(path)
    return paths


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgeseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="JSON experiment config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--method", choices=METHODS, default=None)
        p.add_argument("--unlabelled-fraction", dest="unlabelled_fraction", type=float, default=None)
        p.add_argument("--shots", type=str, default=None, help="comma-separated shot counts")
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--out", type=str, default=None, help="output directory")

    p_prepare = sub.add_parser("prepare", help="build split manifests and edge-map caches")
    common(p_prepare)
    p_prepare.add_argument("--synthetic", action="store_true", help="generate the synthetic corpora first")
    p_prepare.set_defaults(func=cmd_prepare)

    p_exp = sub.add_parser("experiment", help="train one method and evaluate all few-shot episodes")
    common(p_exp)
    p_exp.set_defaults(func=cmd_experiment)

    p_rep = sub.add_parser("report", help="render tables, shot curves and error overlays")
    p_rep.add_argument("run_dirs", nargs="+", help="completed run directories")
    p_rep.add_argument("--out", type=str, default="report_out")
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - report and exit nonzero
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
