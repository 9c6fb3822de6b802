"""Compare training methods on the synthetic benchmark.

Trains each requested method on the two synthetic source corpora, fine-tunes
on K-shot supports from the shifted target corpus, and prints mean 5-shot
query IoU per seed plus the seed-averaged gap of every method over the
supervised baseline.

Example:
    python scripts/compare_methods.py --seeds 5 --methods supervised edge_joint
"""

import argparse
import sys
import tempfile
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

import numpy as np

from edgeseg.corpus import SplitManifest
from edgeseg.eval import evaluate_episode, sample_episodes
from edgeseg.pipeline import ExperimentConfig, load_labelled_data, prepare, train_method

FRACTIONS = {"supervised": 0.0}  # every other method defaults to 0.6


def mean_shot_iou(config: ExperimentConfig) -> float:
    model, _ = train_method(config)
    manifest = SplitManifest.load(Path(config.target_root))
    episodes = sample_episodes(
        manifest.dataset_name, manifest.all_ids(), config.shots, config.n_selections, config.seed
    )
    ft = config.finetune_config()
    root = Path(config.target_root)
    ious = []
    for ep in episodes:
        support = load_labelled_data(root, ep.support_ids, config.image_size)
        query = load_labelled_data(root, ep.query_ids, config.image_size)
        ious.append(evaluate_episode(model, support, query, ft))
    return float(np.mean(ious))


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--methods", nargs="+", default=["supervised", "edge_joint"])
    ap.add_argument("--seeds", type=int, default=5, help="number of seeds (0..N-1)")
    ap.add_argument("--unlabelled-fraction", type=float, default=0.6)
    ap.add_argument("--epochs", type=int, default=25)
    ap.add_argument("--n-selections", type=int, default=8)
    ap.add_argument("--finetune-epochs", type=int, default=40)
    ap.add_argument("--finetune-lr", type=float, default=0.003)
    ap.add_argument("--out", default=None, help="work directory (default: temp dir)")
    args = ap.parse_args()

    work = Path(args.out) if args.out else Path(tempfile.mkdtemp(prefix="compare_methods_"))
    base = dict(
        image_size=(64, 64),
        encoder_channels=(8, 16, 32),
        bottleneck_channels=64,
        epochs=args.epochs,
        batch_size=8,
        shots=(5,),
        n_selections=args.n_selections,
        finetune_epochs=args.finetune_epochs,
        finetune_lr=args.finetune_lr,
        synthetic_count=20,
        target_count=16,
    )

    t0 = time.time()
    scores = {m: [] for m in args.methods}
    for seed in range(args.seeds):
        seed_base = dict(base, out_dir=str(work / f"seed{seed}"), seed=seed)
        cfg = ExperimentConfig.from_dict(
            {**seed_base, "method": "edge_joint", "unlabelled_fraction": args.unlabelled_fraction}
        )
        prepare(cfg, synthetic=True)
        row = []
        for method in args.methods:
            frac = FRACTIONS.get(method, args.unlabelled_fraction)
            c = ExperimentConfig.from_dict(
                {
                    **seed_base,
                    "method": method,
                    "unlabelled_fraction": frac,
                    "source_roots": cfg.source_roots,
                    "target_root": cfg.target_root,
                }
            )
            iou = mean_shot_iou(c)
            scores[method].append(iou)
            row.append(f"{method} {100 * iou:5.1f}")
        print(f"seed {seed}: {'  '.join(row)}  ({time.time() - t0:.0f}s)")

    print()
    for method in args.methods:
        mean = 100 * np.mean(scores[method])
        line = f"{method}: mean 5-shot IoU {mean:.1f}"
        if method != "supervised" and "supervised" in scores:
            gap = mean - 100 * np.mean(scores["supervised"])
            line += f"  (gap over supervised {gap:+.1f})"
        print(line)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
