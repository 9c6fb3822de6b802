"""Dataset ingestion, deterministic splits, and synthetic cell images.

Directory layout per dataset: ``<root>/images/*.png|tif`` with masks at
``<root>/masks/<same-stem>.png``.
"""

from __future__ import annotations

import json
import random
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_EXTENSIONS = (".png", ".tif", ".tiff")
# ITU-R BT.601 luma coefficients for RGB -> grayscale
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

MANIFEST_FILENAME = "split_manifest.json"


@dataclass
class Sample:
    id: str
    image: np.ndarray  # float, [0,1], H x W
    mask: np.ndarray | None = None  # uint8 {0,1}, H x W
    edge_target: np.ndarray | None = None  # uint8 {0,1}, H x W

    def __post_init__(self):
        if self.image.min() < 0 or self.image.max() > 1:
            raise ValueError(f"sample {self.id}: image values outside [0,1]")
        for name, arr in (("mask", self.mask), ("edge_target", self.edge_target)):
            if arr is None:
                continue
            if arr.shape != self.image.shape:
                raise ValueError(f"sample {self.id}: {name} shape {arr.shape} != image {self.image.shape}")
            if not np.all(np.isin(np.unique(arr), [0, 1])):
                raise ValueError(f"sample {self.id}: {name} is not binary")


@dataclass
class SplitManifest:
    dataset_name: str
    seed: int
    labelled_fraction: float
    labelled_ids: list[str]
    unlabelled_ids: list[str]
    created_at: float = field(default_factory=time.time)

    def all_ids(self) -> list[str]:
        return sorted(self.labelled_ids + self.unlabelled_ids)

    def to_json(self) -> str:
        # created_at is deliberately excluded so that identical inputs
        # produce byte-identical manifest files.
        return json.dumps(
            {
                "dataset_name": self.dataset_name,
                "seed": self.seed,
                "labelled_fraction": self.labelled_fraction,
                "labelled_ids": sorted(self.labelled_ids),
                "unlabelled_ids": sorted(self.unlabelled_ids),
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        d = json.loads(text)
        return cls(
            dataset_name=d["dataset_name"],
            seed=d["seed"],
            labelled_fraction=d["labelled_fraction"],
            labelled_ids=d["labelled_ids"],
            unlabelled_ids=d["unlabelled_ids"],
        )

    def save(self, dataset_root: Path) -> Path:
        path = Path(dataset_root) / MANIFEST_FILENAME
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, dataset_root: Path) -> "SplitManifest":
        path = Path(dataset_root) / MANIFEST_FILENAME
        if not path.exists():
            raise FileNotFoundError(f"no split manifest at {path}; run prepare first")
        return cls.from_json(path.read_text())


@dataclass
class SourceCorpus:
    datasets: list[tuple[str, SplitManifest]]
    unlabelled_fraction_used: float = 1.0

    def __post_init__(self):
        names = [name for name, _ in self.datasets]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate dataset names: {names}")
        if not (0 <= self.unlabelled_fraction_used <= 1):
            raise ValueError("unlabelled_fraction_used must be in [0,1]")


def list_image_ids(dataset_root: Path) -> list[str]:
    images_dir = Path(dataset_root) / "images"
    if not images_dir.is_dir():
        raise FileNotFoundError(f"missing images directory: {images_dir}")
    ids = sorted(p.stem for p in images_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
    return ids


def _image_path(dataset_root: Path, sample_id: str) -> Path:
    images_dir = Path(dataset_root) / "images"
    for ext in IMAGE_EXTENSIONS:
        p = images_dir / f"{sample_id}{ext}"
        if p.exists():
            return p
    raise FileNotFoundError(f"no image file for id '{sample_id}' in {images_dir}")


def mask_path(dataset_root: Path, sample_id: str) -> Path:
    return Path(dataset_root) / "masks" / f"{sample_id}.png"


def build_split_manifest(dataset_root: Path, labelled_fraction: float, seed: int) -> SplitManifest:
    """Deterministically split a dataset's images into labelled/unlabelled.

    The split is a seeded permutation of the lexicographically sorted file
    stems; the labelled set takes round(fraction * total) ids (at least 1)
    and every labelled id must have a mask file.
    """
    if not (0 < labelled_fraction <= 1):
        raise ValueError(f"labelled_fraction must be in (0,1], got {labelled_fraction}")
    dataset_root = Path(dataset_root)
    ids = list_image_ids(dataset_root)
    if not ids:
        raise ValueError(f"no image files found under {dataset_root}/images")
    order = list(ids)
    random.Random(seed).shuffle(order)
    n_labelled = max(1, round(labelled_fraction * len(ids)))
    labelled = sorted(order[:n_labelled])
    unlabelled = sorted(order[n_labelled:])
    for sample_id in labelled:
        if not mask_path(dataset_root, sample_id).exists():
            raise FileNotFoundError(
                f"labelled id '{sample_id}' has no mask file at {mask_path(dataset_root, sample_id)}"
            )
    manifest = SplitManifest(
        dataset_name=dataset_root.name,
        seed=seed,
        labelled_fraction=labelled_fraction,
        labelled_ids=labelled,
        unlabelled_ids=unlabelled,
    )
    manifest.save(dataset_root)
    return manifest


def select_unlabelled_subset(manifest: SplitManifest, fraction: float) -> list[str]:
    """Seeded-order prefix of the unlabelled ids, so the 30% subset nests
    inside 60% which nests inside 100% for a fixed seed."""
    if not (0 <= fraction <= 1):
        raise ValueError(f"fraction must be in [0,1], got {fraction}")
    order = sorted(manifest.unlabelled_ids)
    random.Random(manifest.seed).shuffle(order)
    n = round(fraction * len(order))
    return order[:n]


def _to_grayscale(arr: np.ndarray) -> np.ndarray:
    if arr.ndim == 2:
        return arr.astype(np.float64)
    r, g, b = LUMA_WEIGHTS
    return r * arr[..., 0] + g * arr[..., 1] + b * arr[..., 2]


def load_sample(
    sample_id: str,
    role: str,
    dataset_root: Path,
    target_size: tuple[int, int] | None = None,
) -> Sample:
    """Load one image (plus its mask for labelled/target roles), rescale
    intensities to [0,1] and resize to target_size."""
    if role not in ("labelled", "unlabelled", "target"):
        raise ValueError(f"unknown role '{role}'")
    dataset_root = Path(dataset_root)
    img_path = _image_path(dataset_root, sample_id)
    try:
        pil_img = Image.open(img_path)
        pil_img.load()
    except OSError as exc:
        raise ValueError(f"cannot decode image {img_path}: {exc}") from exc

    arr = np.asarray(pil_img)
    scale = 65535.0 if arr.dtype == np.uint16 else 255.0
    gray = _to_grayscale(arr[..., :3] if arr.ndim == 3 else arr) / scale
    gray = np.clip(gray, 0.0, 1.0)

    mask = None
    if role in ("labelled", "target"):
        mpath = mask_path(dataset_root, sample_id)
        if not mpath.exists():
            raise FileNotFoundError(f"{role} id '{sample_id}' has no mask at {mpath}")
        mask_arr = np.asarray(Image.open(mpath).convert("L")).astype(np.float64) / 255.0
        if mask_arr.shape != gray.shape:
            raise ValueError(
                f"sample {sample_id}: mask shape {mask_arr.shape} != image shape {gray.shape}"
            )
        mask = mask_arr

    if target_size is not None and gray.shape != tuple(target_size):
        h, w = target_size
        gray = np.asarray(
            Image.fromarray((gray * 255).astype(np.uint8)).resize((w, h), Image.BILINEAR)
        ).astype(np.float64) / 255.0
        if mask is not None:
            mask = np.asarray(
                Image.fromarray((mask * 255).astype(np.uint8)).resize((w, h), Image.NEAREST)
            ).astype(np.float64) / 255.0

    binary_mask = (mask >= 0.5).astype(np.uint8) if mask is not None else None
    return Sample(id=sample_id, image=gray, mask=binary_mask)


@dataclass(frozen=True)
class SyntheticConfig:
    count: int = 20
    image_size: tuple[int, int] = (64, 64)
    cell_count_range: tuple[int, int] = (3, 7)
    cell_radius_range: tuple[int, int] = (5, 10)
    noise_level: float = 0.03
    seed: int = 0
    style: str = "source"  # "source" or "target"

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        h, w = self.image_size
        if 2 * self.cell_radius_range[1] >= min(h, w):
            raise ValueError("cell radii do not fit inside image_size")
        if self.style not in ("source", "target"):
            raise ValueError(f"style must be 'source' or 'target', got {self.style}")


def _render_cell(image, mask, cy, cx, ry, rx, angle, peak, dark):
    h, w = image.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    ca, sa = np.cos(angle), np.sin(angle)
    u = ((ys - cy) * ca + (xs - cx) * sa) / ry
    v = (-(ys - cy) * sa + (xs - cx) * ca) / rx
    d2 = u * u + v * v
    inside = d2 <= 1.0
    # smooth radial falloff towards the boundary
    profile = peak * np.clip(1.0 - 0.6 * d2, 0.0, None)
    if dark:
        image[inside] = np.minimum(image[inside], 1.0 - profile[inside])
    else:
        image[inside] = np.maximum(image[inside], profile[inside])
    mask[inside] = 1


def generate_synthetic_dataset(config: SyntheticConfig, out_root: Path) -> Path:
    """Write a synthetic cell dataset (images/ + masks/) under out_root.

    Cells are randomly placed ellipses with a smooth intensity profile on a
    style-dependent background, plus additive Gaussian noise. The "source"
    style has bright cells on a dark background (fluorescence-like); the
    "target" style inverts the contrast polarity (dark cells on a bright
    background, electron-microscopy-like) with denser cells and more
    noise, creating a genuine domain shift worth fine-tuning across.
    """
    out_root = Path(out_root)
    (out_root / "images").mkdir(parents=True, exist_ok=True)
    (out_root / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    h, w = config.image_size

    dark_cells = config.style == "target"
    if config.style == "source":
        background, contrast, noise_scale = 0.10, (0.65, 0.95), 1.0
        count_lo, count_hi = config.cell_count_range
    else:
        background, contrast, noise_scale = 0.85, (0.55, 0.80), 1.4
        count_lo, count_hi = config.cell_count_range[0] + 1, config.cell_count_range[1] + 2

    r_lo, r_hi = config.cell_radius_range
    for i in range(config.count):
        image = np.full((h, w), background, dtype=np.float64)
        mask = np.zeros((h, w), dtype=np.uint8)
        n_cells = int(rng.integers(count_lo, count_hi + 1))
        placed = 0
        for _ in range(n_cells * 20):  # bounded retries
            if placed >= n_cells:
                break
            ry = float(rng.uniform(r_lo, r_hi))
            rx = float(rng.uniform(r_lo, r_hi))
            margin = max(ry, rx) + 1
            if margin >= min(h, w) / 2:
                continue
            cy = float(rng.uniform(margin, h - margin))
            cx = float(rng.uniform(margin, w - margin))
            angle = float(rng.uniform(0, np.pi))
            peak = float(rng.uniform(*contrast))
            _render_cell(image, mask, cy, cx, ry, rx, angle, peak, dark_cells)
            placed += 1
        if placed < n_cells:
            raise RuntimeError(f"could not place {n_cells} cells in image {i} after bounded retries")
        image = image + noise_scale * config.noise_level * rng.standard_normal((h, w))
        image = np.clip(image, 0.0, 1.0)
        stem = f"{config.style}_{i:04d}"
        Image.fromarray((image * 255).round().astype(np.uint8)).save(out_root / "images" / f"{stem}.png")
        Image.fromarray(mask * 255).save(out_root / "masks" / f"{stem}.png")
    return out_root
