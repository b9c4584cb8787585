import json
import logging
import math
import os
from dataclasses import asdict, dataclass
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from cachetools import LRUCache

from .checkpoint import ChecksumError, load_archive, save_archive

logger = logging.getLogger(__name__)

SHAPE_KINDS = ("ellipse", "rectangle", "triangle")
CONTROL_KINDS = ("mask", "edge")
MIN_SIZE = 16
BACKGROUND = -1.0


@dataclass(frozen=True)
class ShapeSpec:
    """
    One filled shape. `center` is (row, col) in continuous canvas units,
    `size` is the full (height, width) extent before rotation.
    """

    kind: str
    center: Tuple[float, float]
    size: Tuple[float, float]
    rotation: float
    intensity: float


@dataclass
class ControlSample:
    image: torch.Tensor
    control: torch.Tensor
    kind: str
    seed: int
    index: int
    shape: ShapeSpec
    mask: torch.Tensor


@dataclass
class DatasetConfig:
    kind: str = "mask"
    size: int = 64
    seed: int = 0
    train_count: int = 1024
    heldout_seed: int = 1
    heldout_count: int = 32
    cache_dir: Optional[str] = None

    def validate(self) -> None:
        if self.kind not in CONTROL_KINDS:
            raise ValueError(f"Unknown control kind '{self.kind}', expected one of {CONTROL_KINDS}.")
        if self.size < MIN_SIZE:
            raise ValueError(f"Canvas size must be at least {MIN_SIZE}, got {self.size}.")
        if self.train_count < 1 or self.heldout_count < 1:
            raise ValueError("Dataset splits need at least one sample each.")
        if self.seed == self.heldout_seed:
            raise ValueError("The held-out split must use a different seed than the training split.")


def draw_shape(rng: np.random.Generator, size: int) -> ShapeSpec:
    kind = SHAPE_KINDS[int(rng.integers(0, len(SHAPE_KINDS)))]
    height, width = rng.uniform(0.25 * size, 0.5 * size, size=2)
    rotation = float(rng.uniform(0.0, math.pi))
    intensity = float(1.0 - rng.uniform(0.0, 0.8))
    # The bounding circle stays inside the canvas for any rotation.
    radius = 0.5 * math.hypot(height, width)
    row, col = rng.uniform(radius, size - radius, size=2)
    return ShapeSpec(
        kind=kind,
        center=(float(row), float(col)),
        size=(float(height), float(width)),
        rotation=rotation,
        intensity=intensity,
    )


def rasterize(spec: ShapeSpec, size: int) -> np.ndarray:
    """Hard rasterization at pixel centres; returns a {0, 1} uint8 array."""
    if spec.kind not in SHAPE_KINDS:
        raise ValueError(f"Unknown shape kind '{spec.kind}', expected one of {SHAPE_KINDS}.")
    centres = np.arange(size, dtype=np.float64) + 0.5
    rows, cols = np.meshgrid(centres, centres, indexing="ij")
    dr, dc = rows - spec.center[0], cols - spec.center[1]
    cos, sin = math.cos(spec.rotation), math.sin(spec.rotation)
    # u runs along the width, v along the height, in the shape's own frame.
    u = cos * dc + sin * dr
    v = -sin * dc + cos * dr
    half_h, half_w = spec.size[0] / 2.0, spec.size[1] / 2.0

    if spec.kind == "rectangle":
        inside = (u >= -half_w) & (u < half_w) & (v >= -half_h) & (v < half_h)
    elif spec.kind == "ellipse":
        inside = (u / half_w) ** 2 + (v / half_h) ** 2 <= 1.0
    else:
        # Isosceles, apex at v = -half_h, base on v = half_h.
        depth = (v + half_h) / spec.size[0]
        inside = (v >= -half_h) & (v < half_h) & (np.abs(u) <= half_w * depth)
    return inside.astype(np.uint8)


def render_edge(mask: torch.Tensor) -> torch.Tensor:
    """
    Inner 8-connected boundary: a pixel is kept when it is set and at least
    one of its eight neighbours is not. Pixels outside the canvas count as 0.
    Accepts (h, w) or (b, c, h, w) maps.
    """
    if not bool(((mask == 0) | (mask == 1)).all()):
        raise ValueError("render_edge expects a binary {0, 1} mask.")
    squeeze = mask.ndim == 2
    m = mask[None, None] if squeeze else mask
    m = m.to(torch.float32)
    outside = F.pad(1.0 - m, (1, 1, 1, 1), value=1.0)
    has_zero_neighbour = F.max_pool2d(outside, kernel_size=3, stride=1)
    edge = (m * has_zero_neighbour).to(mask.dtype)
    return edge[0, 0] if squeeze else edge


def make_sample(seed: int, index: int, size: int, kind: str) -> ControlSample:
    """Sample `index` of the split seeded by `seed`; depends on nothing else."""
    rng = np.random.default_rng([seed, index])
    spec = draw_shape(rng, size)
    mask_np = rasterize(spec, size)
    image_np = np.where(mask_np == 1, 2.0 * spec.intensity - 1.0, BACKGROUND)

    mask = torch.from_numpy(mask_np.astype(np.float32))[None, None]
    image = torch.from_numpy(image_np.astype(np.float32))[None, None]
    control = mask if kind == "mask" else render_edge(mask)
    return ControlSample(
        image=image, control=control, kind=kind, seed=seed, index=index, shape=spec, mask=mask
    )


def generate(seed: int, count: int, size: int, kind: str) -> List[ControlSample]:
    if size < MIN_SIZE:
        raise ValueError(f"Canvas size {size} is too small to place shapes; need at least {MIN_SIZE}.")
    if count < 1:
        raise ValueError(f"count must be at least 1, got {count}.")
    if kind not in CONTROL_KINDS:
        raise ValueError(f"Unknown control kind '{kind}', expected one of {CONTROL_KINDS}.")
    samples = [make_sample(seed, i, size, kind) for i in range(count)]
    logger.info(f"Generated {count} {kind} samples of size {size} from seed {seed}.")
    return samples


def as_tensors(samples: Sequence[ControlSample]) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Stacks (images, controls, masks), each of shape (n, 1, S, S)."""
    if not samples:
        raise ValueError("Cannot stack an empty sample list.")
    images = torch.cat([s.image for s in samples])
    controls = torch.cat([s.control for s in samples])
    masks = torch.cat([s.mask for s in samples])
    return images, controls, masks


def write_split(path: str, samples: Sequence[ControlSample]) -> str:
    images, controls, masks = as_tensors(samples)
    first = samples[0]
    extra = {
        "kind": first.kind,
        "seed": str(first.seed),
        "indices": json.dumps([s.index for s in samples]),
        "shapes": json.dumps([asdict(s.shape) for s in samples]),
    }
    return save_archive(
        path,
        {"images": images, "controls": controls, "masks": masks},
        order=["images", "controls", "masks"],
        extra=extra,
    )


def read_split(path: str) -> List[ControlSample]:
    archive = load_archive(path)
    kind, seed = archive.extra["kind"], int(archive.extra["seed"])
    indices = json.loads(archive.extra["indices"])
    shapes = json.loads(archive.extra["shapes"])
    samples = []
    for i, (index, raw) in enumerate(zip(indices, shapes)):
        spec = ShapeSpec(
            kind=raw["kind"],
            center=tuple(raw["center"]),
            size=tuple(raw["size"]),
            rotation=raw["rotation"],
            intensity=raw["intensity"],
        )
        samples.append(
            ControlSample(
                image=archive.tensors["images"][i : i + 1],
                control=archive.tensors["controls"][i : i + 1],
                kind=kind,
                seed=seed,
                index=index,
                shape=spec,
                mask=archive.tensors["masks"][i : i + 1],
            )
        )
    return samples


SplitKey = Tuple[int, int, int, str]


class SampleCache:
    """
    Disk cache of generated splits with an in-memory LRU in front. Mimics a
    mapping keyed by (seed, count, size, kind) and degrades to a miss when
    an archive is unreadable or fails its checksum.
    """

    def __init__(self, directory: Optional[str], maxsize: int = 8):
        self.directory = directory
        self.memory: LRUCache = LRUCache(maxsize=maxsize)
        if directory:
            try:
                os.makedirs(directory, exist_ok=True)
                logger.info(f"Using dataset cache at {directory}")
            except OSError as e:
                logger.error(f"Could not create dataset cache at {directory}. Disk caching will be disabled. Error: {e}")
                self.directory = None

    def path_for(self, key: SplitKey) -> Optional[str]:
        if not self.directory:
            return None
        seed, count, size, kind = key
        return os.path.join(self.directory, f"{kind}-s{size}-seed{seed}-n{count}.safetensors")

    def __contains__(self, key: Any) -> bool:
        if key in self.memory:
            return True
        path = self.path_for(key)
        return bool(path and os.path.exists(path))

    def __getitem__(self, key: Any) -> Optional[List[ControlSample]]:
        if key in self.memory:
            return self.memory[key]
        path = self.path_for(key)
        if not path or not os.path.exists(path):
            return None
        try:
            samples = read_split(path)
        except ChecksumError as e:
            logger.error(f"Cached split '{path}' failed its checksum and will be regenerated. Error: {e}")
            return None
        except (OSError, ValueError, KeyError) as e:
            logger.error(f"Failed to read cached split '{path}'. The cache entry may be corrupt. Error: {e}")
            return None
        self.memory[key] = samples
        return samples

    def __setitem__(self, key: Any, samples: List[ControlSample]) -> None:
        self.memory[key] = samples
        path = self.path_for(key)
        if not path:
            return
        try:
            write_split(path, samples)
        except OSError as e:
            logger.error(f"Failed to write dataset cache entry '{path}'. The split will not be cached. Error: {e}")


def load_split(
    seed: int, count: int, size: int, kind: str, cache: Optional[SampleCache] = None
) -> List[ControlSample]:
    key: SplitKey = (seed, count, size, kind)
    if cache is not None and key in cache:
        cached = cache[key]
        if cached is not None:
            logger.debug(f"Dataset cache hit for {key}.")
            return cached
    samples = generate(seed, count, size, kind)
    if cache is not None:
        cache[key] = samples
    return samples
