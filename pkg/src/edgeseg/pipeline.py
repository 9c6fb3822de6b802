"""End-to-end experiment orchestration: prepare data, train one method,
evaluate episodes, and persist results for the report stage."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import corpus, edgemaps
from .corpus import SplitManifest, SyntheticConfig, generate_synthetic_dataset, load_sample
from .edgemaps import CannyConfig, foreground_weight, load_cached_edge_target
from .eval import EpisodeResult, FewShotEpisode, evaluate_episode, sample_episodes
from .model import ArchConfig, DualDecoderNet, init_model, load_checkpoint, save_checkpoint
from .training import (
    FinetuneConfig,
    LabelledData,
    TrainConfig,
    UnlabelledData,
    joint_train,
    pretrain_rotation,
    train_supervised,
    train_with_regularizer,
)

RESULTS_HEADER = ["method", "target", "shot", "selection", "iou"]


@dataclass
class ExperimentConfig:
    source_roots: list[str] = field(default_factory=list)
    target_root: str = ""
    out_dir: str = "out"
    labelled_fraction: float = 0.1
    unlabelled_fraction: float = 0.6
    method: str = "edge_joint"
    seed: int = 0
    image_size: tuple[int, int] = (64, 64)
    shots: tuple[int, ...] = (1, 3, 5, 7, 10)
    n_selections: int = 10
    encoder_channels: tuple[int, ...] = (32, 64, 128)
    bottleneck_channels: int = 512
    canny_sigma: float = 1.0
    canny_low: float = 0.1
    canny_high: float = 0.2
    epochs: int = 50
    batch_size: int = 64
    learning_rate: float = 0.001
    lambda_reg: float = 1.0
    joint_mode: str = "alternate"
    finetune_epochs: int = 20
    finetune_lr: float = 0.001
    workers: int = 1
    synthetic_count: int = 24
    target_count: int = 20

    @classmethod
    def from_json(cls, path: Path, overrides: dict | None = None) -> "ExperimentConfig":
        data = json.loads(Path(path).read_text())
        return cls.from_dict(data, overrides)

    @classmethod
    def from_dict(cls, data: dict, overrides: dict | None = None) -> "ExperimentConfig":
        merged = dict(data)
        for key, value in (overrides or {}).items():
            if value is not None:
                merged[key] = value
        valid = {f.name for f in dataclasses.fields(cls)}
        unknown = set(merged) - valid
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls(**merged)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not (0 < self.labelled_fraction <= 1):
            raise ValueError(f"labelled_fraction must be in (0,1], got {self.labelled_fraction}")
        if self.unlabelled_fraction not in (0, 0.3, 0.6, 1.0):
            raise ValueError(
                f"unlabelled_fraction must be one of (0, 0.3, 0.6, 1.0), got {self.unlabelled_fraction}"
            )
        from .training import METHODS

        if self.method not in METHODS:
            raise ValueError(f"unknown method '{self.method}'; valid: {METHODS}")
        # normalize types so equal configs hash equally
        self.unlabelled_fraction = float(self.unlabelled_fraction)
        self.labelled_fraction = float(self.labelled_fraction)
        self.image_size = tuple(self.image_size)
        self.shots = tuple(self.shots)
        self.encoder_channels = tuple(self.encoder_channels)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["image_size"] = list(self.image_size)
        d["shots"] = list(self.shots)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    def config_hash(self) -> str:
        return hashlib.sha1(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:8]

    def arch(self) -> ArchConfig:
        return ArchConfig(
            encoder_channels=self.encoder_channels, bottleneck_channels=self.bottleneck_channels
        )

    def canny(self) -> CannyConfig:
        return CannyConfig(self.canny_sigma, self.canny_low, self.canny_high)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            method=self.method,
            unlabelled_fraction=self.unlabelled_fraction,
            seed=self.seed,
            lambda_reg=self.lambda_reg,
            joint_mode=self.joint_mode,
        )

    def finetune_config(self) -> FinetuneConfig:
        return FinetuneConfig(epochs=self.finetune_epochs, learning_rate=self.finetune_lr, seed=self.seed)

    def edge_cache_dir(self, dataset_root: Path) -> Path:
        return Path(self.out_dir) / "edge_cache" / Path(dataset_root).name

    def run_dir(self) -> Path:
        name = f"{self.method}_u{int(self.unlabelled_fraction * 100)}_s{self.seed}_{self.config_hash()}"
        return Path(self.out_dir) / "runs" / name


def generate_synthetic_corpora(config: ExperimentConfig) -> tuple[list[Path], Path]:
    """Create the desk-scale stand-in corpora: two 'source'-style datasets
    and one shifted 'target'-style dataset under <out>/data/."""
    data_dir = Path(config.out_dir) / "data"
    roots = []
    for i, name in enumerate(("source_a", "source_b")):
        root = data_dir / name
        generate_synthetic_dataset(
            SyntheticConfig(
                count=config.synthetic_count,
                image_size=config.image_size,
                seed=config.seed * 1000 + i,
                style="source",
            ),
            root,
        )
        roots.append(root)
    target_root = data_dir / "target"
    generate_synthetic_dataset(
        SyntheticConfig(
            count=config.target_count,
            image_size=config.image_size,
            seed=config.seed * 1000 + 99,
            style="target",
        ),
        target_root,
    )
    return roots, target_root


def prepare(config: ExperimentConfig, synthetic: bool = False) -> dict:
    """Write split manifests for all datasets and precompute edge targets
    for the unlabelled pool of each source dataset."""
    if synthetic:
        source_roots, target_root = generate_synthetic_corpora(config)
        config.source_roots = [str(p) for p in source_roots]
        config.target_root = str(target_root)
    if not config.source_roots or not config.target_root:
        raise ValueError("config must name source_roots and target_root (or pass --synthetic)")
    summary = {"datasets": [], "edge_maps_written": 0}
    canny = config.canny()
    for root in config.source_roots:
        root = Path(root)
        manifest = corpus.build_split_manifest(root, config.labelled_fraction, config.seed)
        written = edgemaps.precompute_edge_targets(
            manifest, root, canny, config.edge_cache_dir(root), config.image_size
        )
        summary["datasets"].append(
            {
                "name": manifest.dataset_name,
                "labelled": len(manifest.labelled_ids),
                "unlabelled": len(manifest.unlabelled_ids),
            }
        )
        summary["edge_maps_written"] += written
    # target manifest: every image needs a mask, so treat all as labelled
    target_root = Path(config.target_root)
    target_manifest = corpus.build_split_manifest(target_root, 1.0, config.seed)
    summary["datasets"].append(
        {"name": target_manifest.dataset_name, "labelled": len(target_manifest.labelled_ids), "unlabelled": 0}
    )
    return summary


def _as_tensor(arrays: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(arrays)).float()


def load_labelled_data(root: Path, ids: list[str], image_size) -> LabelledData:
    images, masks, weights = [], [], []
    for sample_id in ids:
        sample = load_sample(sample_id, "labelled", root, image_size)
        images.append(sample.image)
        masks.append(sample.mask)
        weights.append(foreground_weight(sample.mask))
    return LabelledData(_as_tensor(images), _as_tensor(masks), torch.tensor(weights).float())


def load_unlabelled_data(root: Path, ids: list[str], image_size, canny: CannyConfig, cache_dir: Path) -> UnlabelledData:
    images, targets, weights = [], [], []
    for sample_id in ids:
        sample = load_sample(sample_id, "unlabelled", root, image_size)
        edge = load_cached_edge_target(cache_dir, sample_id, canny)
        images.append(sample.image)
        targets.append(edge)
        weights.append(foreground_weight(edge))
    return UnlabelledData(_as_tensor(images), _as_tensor(targets), torch.tensor(weights).float())


def assemble_training_data(config: ExperimentConfig) -> tuple[LabelledData, UnlabelledData | None]:
    """Concatenate labelled and (fraction-selected) unlabelled pools across
    all source datasets."""
    lab_parts, unlab_parts = [], []
    canny = config.canny()
    for root in config.source_roots:
        root = Path(root)
        manifest = SplitManifest.load(root)
        lab_parts.append(load_labelled_data(root, manifest.labelled_ids, config.image_size))
        if config.unlabelled_fraction > 0:
            subset = corpus.select_unlabelled_subset(manifest, config.unlabelled_fraction)
            if subset:
                unlab_parts.append(
                    load_unlabelled_data(root, subset, config.image_size, canny, config.edge_cache_dir(root))
                )
    labelled = LabelledData(
        torch.cat([p.images for p in lab_parts]),
        torch.cat([p.masks for p in lab_parts]),
        torch.cat([p.weights for p in lab_parts]),
    )
    unlabelled = None
    if unlab_parts:
        unlabelled = UnlabelledData(
            torch.cat([p.images for p in unlab_parts]),
            torch.cat([p.edge_targets for p in unlab_parts]),
            torch.cat([p.weights for p in unlab_parts]),
        )
    return labelled, unlabelled


def train_method(config: ExperimentConfig) -> tuple[DualDecoderNet, object]:
    """Train the configured method from scratch on the source corpus."""
    labelled, unlabelled = assemble_training_data(config)
    tc = config.train_config()
    model = init_model(config.arch(), config.seed, with_rotation_head=(config.method == "rotation_pretrain"))
    if config.method == "supervised":
        return train_supervised(model, labelled, tc)
    if unlabelled is None:
        raise ValueError(f"method '{config.method}' needs unlabelled data (fraction > 0)")
    if config.method == "edge_joint":
        return joint_train(model, labelled, unlabelled, tc)
    if config.method in ("entropy", "consistency"):
        return train_with_regularizer(model, labelled, unlabelled, tc)
    if config.method == "rotation_pretrain":
        pretrain_rotation(model, unlabelled.images, tc)
        sup = dataclasses.replace(tc, method="supervised", unlabelled_fraction=0)
        return train_supervised(model, labelled, sup)
    raise ValueError(f"unknown method '{config.method}'")


def _load_episode_data(config: ExperimentConfig, episode: FewShotEpisode) -> tuple[LabelledData, LabelledData]:
    root = Path(config.target_root)
    support = load_labelled_data(root, episode.support_ids, config.image_size)
    query = load_labelled_data(root, episode.query_ids, config.image_size)
    return support, query


def _evaluate_one(config: ExperimentConfig, checkpoint_path: Path, episode: FewShotEpisode) -> EpisodeResult:
    model, _ = load_checkpoint(checkpoint_path)
    support, query = _load_episode_data(config, episode)
    ft = FinetuneConfig(epochs=config.finetune_epochs, learning_rate=config.finetune_lr, seed=config.seed)
    iou = evaluate_episode(model, support, query, ft)
    return EpisodeResult(config.method, episode.target_name, episode.shot_count, episode.selection_index, iou)


def _worker(args) -> EpisodeResult:
    config_dict, checkpoint_path, episode = args
    config = ExperimentConfig.from_dict(config_dict)
    return _evaluate_one(config, Path(checkpoint_path), episode)


def read_results_csv(path: Path) -> list[EpisodeResult]:
    results = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            results.append(
                EpisodeResult(row["method"], row["target"], int(row["shot"]), int(row["selection"]), float(row["iou"]))
            )
    return results


def write_results_csv(path: Path, results: list[EpisodeResult]) -> None:
    results = sorted(results, key=lambda r: (r.method, r.target, r.shot, r.selection))
    tmp = Path(path).with_suffix(".tmp")
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(RESULTS_HEADER)
        for r in results:
            writer.writerow([r.method, r.target, r.shot, r.selection, f"{r.iou:.6f}"])
    tmp.replace(path)


def run_experiment(config: ExperimentConfig) -> Path:
    """Train (or reuse a checkpoint), evaluate all few-shot episodes, and
    write results.csv in the run directory. Resumable: already-recorded
    episodes are skipped."""
    for root in [config.target_root] + list(config.source_roots):
        if not (Path(root) / corpus.MANIFEST_FILENAME).exists():
            raise FileNotFoundError(f"no manifest under {root}; run the prepare step first")
    run_dir = config.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))

    checkpoint_path = run_dir / "checkpoint.pt"
    if checkpoint_path.exists():
        model, _ = load_checkpoint(checkpoint_path)
    else:
        model, history = train_method(config)
        save_checkpoint(model, checkpoint_path, config.config_hash())
        history.save_csv(run_dir / "history.csv")

    target_manifest = SplitManifest.load(Path(config.target_root))
    episodes = sample_episodes(
        target_manifest.dataset_name,
        target_manifest.all_ids(),
        shots=config.shots,
        n_selections=config.n_selections,
        seed=config.seed,
    )

    results_path = run_dir / "results.csv"
    done: dict[tuple, EpisodeResult] = {}
    if results_path.exists():
        for r in read_results_csv(results_path):
            done[(r.method, r.target, r.shot, r.selection)] = r
    todo = [
        ep
        for ep in episodes
        if (config.method, ep.target_name, ep.shot_count, ep.selection_index) not in done
    ]

    if config.workers > 1 and todo:
        args = [(config.to_dict(), str(checkpoint_path), ep) for ep in todo]
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            new_results = list(pool.map(_worker, args))
    else:
        new_results = [_evaluate_one(config, checkpoint_path, ep) for ep in todo]

    all_results = list(done.values()) + new_results
    write_results_csv(results_path, all_results)
    return run_dir
