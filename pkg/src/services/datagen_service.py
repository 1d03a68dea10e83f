"""Synthetic multi-task dataset: shapes on textured backgrounds"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from .. import config
from ..utils import imaging
from ..utils import storage

logger = logging.getLogger(__name__)

BACKGROUNDS = ('smooth_noise', 'sinusoid')
PRIMARY_SCALE = (0.38, 0.50)
SECONDARY_SCALE = (0.18, 0.28)
PLACEMENT_ATTEMPTS = 50
LAYOUT_ATTEMPTS = 20
SHRINK_FACTOR = 0.8
MIN_RADIUS = 3.0

# (class_id, x_min, y_min, x_max, y_max); x_max/y_max are exclusive pixel edges
Box = Tuple[int, int, int, int, int]


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    num_shapes: Tuple[int, int] = (1, 3)
    shape_classes: Tuple[str, ...] = config.DEFAULT_SHAPE_CLASSES
    background: str = 'smooth_noise'
    rng_seed: int = 0

    def __post_init__(self):
        lo, hi = self.num_shapes
        if self.image_size < 32:
            raise ValueError(f"image_size must be ≥ 32, got {self.image_size}")
        if self.image_size % 4 != 0:
            raise ValueError(f"image_size must be divisible by 4 for the stride-2 stages, got {self.image_size}")
        if not 1 <= lo <= hi <= 3:
            raise ValueError(f"num_shapes must satisfy 1 ≤ min ≤ max ≤ 3, got {self.num_shapes}")
        if len(self.shape_classes) < 2:
            raise ValueError("at least 2 shape classes are required")
        unknown = [name for name in self.shape_classes if name not in SHAPE_RASTERIZERS]
        if unknown:
            raise ValueError(f"unknown shape classes {unknown}")
        if self.background not in BACKGROUNDS:
            raise ValueError(f"unknown background '{self.background}', expected one of {BACKGROUNDS}")

    @property
    def num_classes(self) -> int:
        return len(self.shape_classes)

    def to_dict(self) -> Dict:
        return {
            'image_size': self.image_size,
            'num_shapes': list(self.num_shapes),
            'shape_classes': list(self.shape_classes),
            'background': self.background,
            'rng_seed': self.rng_seed,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'SceneSpec':
        return cls(
            image_size=int(data['image_size']),
            num_shapes=tuple(data['num_shapes']),
            shape_classes=tuple(data['shape_classes']),
            background=data['background'],
            rng_seed=int(data['rng_seed']),
        )

    @classmethod
    def from_config(cls, dataset: config.DatasetConfig, rng_seed: int) -> 'SceneSpec':
        return cls(
            image_size=dataset.image_size,
            num_shapes=(dataset.min_shapes, dataset.max_shapes),
            shape_classes=tuple(dataset.shape_classes),
            background=dataset.background,
            rng_seed=rng_seed,
        )


@dataclass
class MultiTaskSample:
    image: np.ndarray  # H×W×3 float32 in [0,1]
    class_label: int
    boxes: List[Box]
    mask: np.ndarray  # H×W uint8, 0 = background, c+1 = class c


# Rasterizers: boolean mask of pixel centers inside the shape
def _circle(xx, yy, cx, cy, r):
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= r ** 2


def _square(xx, yy, cx, cy, r):
    half = 0.85 * r
    return (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)


def _triangle(xx, yy, cx, cy, r):
    top, bottom = cy - r, cy + r
    t = (yy - top) / (bottom - top)
    return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= t * r)


def _cross(xx, yy, cx, cy, r):
    arm = r / 3.0
    dx, dy = np.abs(xx - cx), np.abs(yy - cy)
    return ((dx <= arm) & (dy <= r)) | ((dy <= arm) & (dx <= r))


SHAPE_RASTERIZERS = {
    'circle': _circle,
    'square': _square,
    'triangle': _triangle,
    'cross': _cross,
}


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Low-frequency texture in a muted range so shapes stay salient"""
    size = spec.image_size
    if spec.background == 'smooth_noise':
        coarse = rng.uniform(0.0, 1.0, size=(4, 4, 3))
        grid = torch.from_numpy(coarse).permute(2, 0, 1).unsqueeze(0)
        field_ = torch.nn.functional.interpolate(grid, size=(size, size), mode='bilinear', align_corners=False)
        texture = field_[0].permute(1, 2, 0).numpy()
    else:
        yy, xx = np.mgrid[0:size, 0:size] / size
        texture = np.zeros((size, size, 3))
        for channel in range(3):
            fx, fy = rng.uniform(0.5, 2.0, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            texture[..., channel] = 0.5 + 0.5 * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    base = rng.uniform(0.25, 0.45, size=3)
    return np.clip(base + 0.25 * (texture - 0.5), 0.0, 1.0)


def _shape_color(rng: np.random.Generator, background_mean: np.ndarray) -> np.ndarray:
    """Saturated color that differs clearly from the background mean"""
    for _ in range(20):
        color = rng.uniform(0.0, 1.0, size=3)
        color[rng.integers(0, 3)] = rng.uniform(0.85, 1.0)
        if np.abs(color - background_mean).max() > 0.35:
            return color
    return np.clip(1.0 - background_mean, 0.0, 1.0)


def _boxes_overlap(a: Tuple[float, float, float, float], b: Tuple[float, float, float, float], gap: float = 1.0) -> bool:
    return not (a[2] + gap <= b[0] or b[2] + gap <= a[0] or a[3] + gap <= b[1] or b[3] + gap <= a[1])


def _try_place(rng: np.random.Generator, placed: List[Tuple[float, float, float, float]],
               scale: Tuple[float, float], size: int) -> Optional[Tuple[float, float, float]]:
    """Shrink the radius range until a non-overlapping spot is found; None if even the smallest fails"""
    scale_lo, scale_hi = scale
    while True:
        for _ in range(PLACEMENT_ATTEMPTS):
            r = max(rng.uniform(scale_lo, scale_hi) * size / 2, MIN_RADIUS)
            cx = rng.uniform(r + 1, size - r - 1)
            cy = rng.uniform(r + 1, size - r - 1)
            extent = (cx - r, cy - r, cx + r, cy + r)
            if not any(_boxes_overlap(extent, other) for other in placed):
                return cx, cy, r
        if scale_hi * size / 2 <= MIN_RADIUS:
            return None
        scale_lo, scale_hi = scale_lo * SHRINK_FACTOR, scale_hi * SHRINK_FACTOR


def _layout(spec: SceneSpec, rng: np.random.Generator, n_shapes: int, background_mean: np.ndarray,
            xx: np.ndarray, yy: np.ndarray) -> Optional[List[Tuple[int, np.ndarray, np.ndarray]]]:
    """(class_id, color, pixel mask) for exactly n_shapes shapes, or None if one could not be placed"""
    placed: List[Tuple[float, float, float, float]] = []
    shapes = []
    for shape_idx in range(n_shapes):
        class_id = int(rng.integers(0, spec.num_classes))
        color = _shape_color(rng, background_mean)
        spot = _try_place(rng, placed, PRIMARY_SCALE if shape_idx == 0 else SECONDARY_SCALE, spec.image_size)
        if spot is None:
            return None
        cx, cy, r = spot
        pixels = SHAPE_RASTERIZERS[spec.shape_classes[class_id]](xx, yy, cx, cy, r)
        if not pixels.any():
            return None
        placed.append((cx - r, cy - r, cx + r, cy + r))
        shapes.append((class_id, color, pixels))
    return shapes


def generate_sample(spec: SceneSpec, index: int) -> MultiTaskSample:
    """
    Generate one deterministic multi-task sample

    Args:
        spec: Scene specification
        index: Sample index; (spec.rng_seed, index) fully determines the output

    Returns:
        MultiTaskSample with aligned label, boxes and mask

    Raises:
        RuntimeError: no layout with the drawn number of shapes was found
    """
    rng = np.random.default_rng([spec.rng_seed & ((1 << 64) - 1), index])
    size = spec.image_size
    image = _background(spec, rng)
    mask = np.zeros((size, size), dtype=np.uint8)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5

    lo, hi = spec.num_shapes
    n_shapes = int(rng.integers(lo, hi + 1))
    background_mean = image.reshape(-1, 3).mean(axis=0)

    for attempt in range(LAYOUT_ATTEMPTS):
        shapes = _layout(spec, rng, n_shapes, background_mean, xx, yy)
        if shapes is not None:
            break
        logger.debug(f"Sample {index}: layout {attempt} failed, resampling")
    else:
        raise RuntimeError(f"could not place {n_shapes} shapes in sample {index} at {size}px")

    boxes: List[Box] = []
    for class_id, color, pixels in shapes:
        image[pixels] = color
        mask[pixels] = class_id + 1
        rows = np.flatnonzero(pixels.any(axis=1))
        cols = np.flatnonzero(pixels.any(axis=0))
        boxes.append((class_id, int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1))

    areas = [(b[3] - b[1]) * (b[4] - b[2]) for b in boxes]
    best = max(areas)
    # ties on area go to the lowest class id
    class_label = min(b[0] for b, a in zip(boxes, areas) if a == best)

    return MultiTaskSample(
        image=image.astype(np.float32),
        class_label=class_label,
        boxes=boxes,
        mask=mask,
    )


@dataclass
class DatasetManifest:
    root: Path
    spec: SceneSpec
    records: List[Dict] = field(default_factory=list)

    def split_records(self, split: str) -> List[Dict]:
        return [r for r in self.records if r['split'] == split]


@dataclass
class SplitArrays:
    """In-memory view of one split, tensors ready for the models"""
    images: torch.Tensor  # N×3×H×W float32
    labels: torch.Tensor  # N
    masks: torch.Tensor  # N×H×W int64
    boxes: List[List[Box]]
    files: List[str]

    def __len__(self) -> int:
        return self.images.shape[0]


class ImageOnlyView:
    """
    Label-free view over a split: exposes images and nothing else

    The attack trainer only ever receives this view, so it cannot read class
    labels, boxes or masks.
    """

    def __init__(self, images: torch.Tensor):
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected N×3×H×W images, got {tuple(images.shape)}")
        self._images = images

    def __len__(self) -> int:
        return self._images.shape[0]

    def __getitem__(self, index) -> torch.Tensor:
        return self._images[index]


def _record(sample: MultiTaskSample, index: int, split: str) -> Dict:
    return {
        'file': f"images/{split}_{index:05d}.png",
        'split': split,
        'class': sample.class_label,
        'boxes': [list(b) for b in sample.boxes],
        'mask_file': f"masks/{split}_{index:05d}.png",
    }


def generate_dataset(spec: SceneSpec, n_train: int, n_test: int, out_dir: Path) -> DatasetManifest:
    """
    Render and write a dataset with disjoint train/test index ranges

    Args:
        spec: Scene specification
        n_train: Number of training samples (indices 0..n_train-1)
        n_test: Number of test samples (indices n_train..n_train+n_test-1)
        out_dir: Dataset directory

    Returns:
        DatasetManifest describing the written files
    """
    if n_train <= 0 or n_test <= 0:
        raise ValueError(f"n_train and n_test must be > 0, got {n_train} and {n_test}")
    out_dir = Path(out_dir)
    records = []
    try:
        (out_dir / 'images').mkdir(parents=True, exist_ok=True)
        (out_dir / 'masks').mkdir(parents=True, exist_ok=True)
        for index in range(n_train + n_test):
            split = 'train' if index < n_train else 'test'
            sample = generate_sample(spec, index)
            record = _record(sample, index, split)
            imaging.save_rgb_png(out_dir / record['file'], sample.image)
            imaging.save_uint8_png(out_dir / record['mask_file'], sample.mask)
            records.append(record)
        storage.save_json(out_dir / config.SCENE_SPEC_FILE, spec.to_dict())
        storage.save_jsonl(out_dir / config.MANIFEST_FILE, records)
    except OSError as e:
        logger.error(f"Failed to write dataset to {out_dir}: {e}")
        raise OSError(f"failed to write dataset under {out_dir}: {e}") from e

    logger.info(f"Generated dataset at {out_dir}: {n_train} train, {n_test} test samples")
    return DatasetManifest(root=out_dir, spec=spec, records=records)


def load_dataset(root: Path) -> DatasetManifest:
    """Read the manifest and scene spec of a generated dataset"""
    root = Path(root)
    spec = SceneSpec.from_dict(storage.load_json(root / config.SCENE_SPEC_FILE))
    records = storage.load_jsonl(root / config.MANIFEST_FILE)
    return DatasetManifest(root=root, spec=spec, records=records)


def load_split(manifest: DatasetManifest, split: str, limit: Optional[int] = None) -> SplitArrays:
    """
    Load one split into tensors

    Args:
        manifest: Dataset manifest
        split: 'train' or 'test'
        limit: Keep only the first `limit` records
    """
    records = manifest.split_records(split)
    if limit is not None:
        records = records[:limit]
    if not records:
        raise ValueError(f"split '{split}' of {manifest.root} is empty")

    images, masks = [], []
    for record in records:
        images.append(imaging.image_to_tensor(imaging.load_rgb_png(manifest.root / record['file'])))
        masks.append(torch.from_numpy(imaging.load_uint8_png(manifest.root / record['mask_file']).astype(np.int64)))
    return SplitArrays(
        images=torch.stack(images),
        labels=torch.tensor([r['class'] for r in records], dtype=torch.long),
        masks=torch.stack(masks),
        boxes=[[tuple(b) for b in r['boxes']] for r in records],
        files=[r['file'] for r in records],
    )
