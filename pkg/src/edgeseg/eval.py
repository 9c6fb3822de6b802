"""Episodic few-shot evaluation: episode sampling, fine-tune-then-test,
IoU, and mean/std aggregation per shot count."""

from __future__ import annotations

import copy
import random
from dataclasses import dataclass, field

import numpy as np
import torch

from .model import DualDecoderNet
from .training import FinetuneConfig, LabelledData, finetune

DEFAULT_SHOTS = (1, 3, 5, 7, 10)


@dataclass
class FewShotEpisode:
    target_name: str
    shot_count: int
    selection_index: int
    support_ids: list[str]
    query_ids: list[str]

    def __post_init__(self):
        if len(self.support_ids) != self.shot_count:
            raise ValueError("support size must equal shot count")
        if set(self.support_ids) & set(self.query_ids):
            raise ValueError("support and query overlap")


@dataclass
class EpisodeResult:
    method: str
    target: str
    shot: int
    selection: int
    iou: float


@dataclass
class MetricsReport:
    method: str
    config_summary: str = ""
    # (target, shot) -> list of per-episode IoU, one per selection
    cells: dict[tuple[str, int], list[float]] = field(default_factory=dict)

    def mean(self, target: str, shot: int) -> float:
        return float(np.mean(self.cells[(target, shot)]))

    def std(self, target: str, shot: int) -> float:
        vals = self.cells[(target, shot)]
        return float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0

    def cell_text(self, target: str, shot: int) -> str:
        """Percentage points, one decimal, e.g. '34.9±2.9'."""
        return f"{100 * self.mean(target, shot):.1f}±{100 * self.std(target, shot):.1f}"

    def shots(self) -> list[int]:
        return sorted({shot for _, shot in self.cells})

    def targets(self) -> list[str]:
        return sorted({target for target, _ in self.cells})


def binary_iou(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Intersection over union of two binary masks; 1.0 when both are
    empty (perfect agreement on absence)."""
    pred_mask = np.asarray(pred_mask)
    gt_mask = np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise ValueError(f"shape mismatch: {pred_mask.shape} vs {gt_mask.shape}")
    for name, m in (("pred", pred_mask), ("gt", gt_mask)):
        if not np.all(np.isin(np.unique(m), [0, 1])):
            raise ValueError(f"{name} mask must be binary")
    p = pred_mask.astype(bool)
    g = gt_mask.astype(bool)
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def sample_episodes(
    target_name: str,
    target_ids: list[str],
    shots: tuple[int, ...] = DEFAULT_SHOTS,
    n_selections: int = 10,
    seed: int = 0,
) -> list[FewShotEpisode]:
    """Deterministic episode list; within one selection index the supports
    nest across shot counts (the 1-shot support is a prefix of the 3-shot
    support, etc.)."""
    ids = sorted(target_ids)
    if len(ids) <= max(shots):
        raise ValueError(f"target '{target_name}' has {len(ids)} images, need > {max(shots)}")
    episodes = []
    for selection in range(n_selections):
        order = list(ids)
        random.Random(seed * 100_003 + selection).shuffle(order)
        for k in shots:
            episodes.append(
                FewShotEpisode(
                    target_name=target_name,
                    shot_count=k,
                    selection_index=selection,
                    support_ids=order[:k],
                    query_ids=sorted(order[k:]),
                )
            )
    return episodes


def evaluate_episode(
    base_model: DualDecoderNet,
    support: LabelledData,
    query: LabelledData,
    finetune_config: FinetuneConfig,
    threshold: float = 0.5,
) -> float:
    """Fine-tune a copy of the model on the support set, then return the
    mean query IoU. The input model is never mutated."""
    if len(query) == 0:
        raise ValueError("query set is empty")
    model = copy.deepcopy(base_model)
    finetune(model, support, finetune_config)
    model.eval()
    with torch.no_grad():
        preds = model.forward_segmentation(query.images)
    ious = []
    for i in range(len(query)):
        pred_mask = (preds[i].numpy() >= threshold).astype(np.uint8)
        ious.append(binary_iou(pred_mask, query.masks[i].numpy().astype(np.uint8)))
    return float(np.mean(ious))


def aggregate_results(
    episode_results: list[EpisodeResult], n_selections: int = 10, config_summary: str = ""
) -> MetricsReport:
    """Group per-episode IoUs into a report; every (target, shot) cell must
    contain exactly n_selections results."""
    if not episode_results:
        raise ValueError("no episode results to aggregate")
    methods = {r.method for r in episode_results}
    if len(methods) != 1:
        raise ValueError(f"results mix methods: {sorted(methods)}")
    cells: dict[tuple[str, int], list[float]] = {}
    for r in episode_results:
        if not (0 <= r.iou <= 1):
            raise ValueError(f"IoU out of range: {r.iou}")
        cells.setdefault((r.target, r.shot), []).append(r.iou)
    missing = [
        f"{target}/K={shot}: {len(vals)}/{n_selections}"
        for (target, shot), vals in sorted(cells.items())
        if len(vals) != n_selections
    ]
    if missing:
        raise ValueError("incomplete cells: " + "; ".join(missing))
    return MetricsReport(method=methods.pop(), config_summary=config_summary, cells=cells)
