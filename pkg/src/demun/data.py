"""Image directory -> k x k grayscale tiles in [0, 1], with test/train/val splits."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".pgm"}
LUMA = np.array([0.299, 0.587, 0.114])
CACHE_VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    tiles: np.ndarray  # (N, k*k) float64 in [0, 1]
    k: int
    manifest: list[tuple[str, int]]  # (source file name, tile index 0..8)
    splits: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.tiles)

    def split_tiles(self, name: str) -> np.ndarray:
        if name not in self.splits:
            raise DatasetError(f"dataset has no {name!r} split")
        start, stop = self.splits[name]
        return self.tiles[start:stop]

    def split_range(self, name: str) -> range:
        if name not in self.splits:
            raise DatasetError(f"dataset has no {name!r} split")
        return range(*self.splits[name])


def load_grayscale(path: Path) -> np.ndarray:
    """8-bit grayscale or RGB(A) image as float64 luminance in [0, 255]."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    if arr.dtype != np.uint8:
        raise DatasetError(f"{path.name}: only 8-bit images are supported, got {arr.dtype}")
    arr = arr.astype(np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[2] in (3, 4):
        return arr[..., :3] @ LUMA
    if arr.ndim == 3 and arr.shape[2] in (1, 2):
        return arr[..., 0]
    raise DatasetError(f"{path.name}: unsupported image layout {arr.shape}")


def center_tiles(img: np.ndarray, k: int) -> list[np.ndarray]:
    """Nine k x k tiles of the centered 3k x 3k crop, row-major."""
    H, W = img.shape
    top, left = (H - 3 * k) // 2, (W - 3 * k) // 2
    crop = img[top : top + 3 * k, left : left + 3 * k]
    return [crop[r * k : (r + 1) * k, c * k : (c + 1) * k] for r in range(3) for c in range(3)]


def ingest(dir_path, k: int, max_images: Optional[int] = None, max_tiles: Optional[int] = None) -> Dataset:
    """Tile every PNG/PGM in ``dir_path`` (lexicographic order) at resolution k."""
    root = Path(dir_path)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())
    if not files:
        raise DatasetError(f"no PNG/PGM images in {root}")
    tiles, manifest, used = [], [], 0
    for path in files:
        if max_images is not None and used >= max_images:
            break
        if max_tiles is not None and len(tiles) >= max_tiles:
            break
        img = load_grayscale(path)
        if img.shape[0] < 3 * k or img.shape[1] < 3 * k:
            logger.warning("skipping %s: %dx%d is smaller than %dx%d", path.name, img.shape[0], img.shape[1], 3 * k, 3 * k)
            continue
        used += 1
        for t, tile in enumerate(center_tiles(img, k)):
            tiles.append(tile.reshape(-1) / 255.0)
            manifest.append((path.name, t))
    if not tiles:
        raise DatasetError(f"no image in {root} is at least {3 * k}x{3 * k}")
    if max_tiles is not None:
        tiles, manifest = tiles[:max_tiles], manifest[:max_tiles]
    arr = np.clip(np.stack(tiles), 0.0, 1.0)
    return Dataset(arr, k, manifest)


def split(dataset: Dataset, n_test: int, n_train: int, n_val: int) -> Dataset:
    """Contiguous test, train, val ranges in manifest order."""
    if min(n_test, n_train, n_val) < 0:
        raise DatasetError("split sizes must be non-negative")
    need = n_test + n_train + n_val
    if need > len(dataset):
        raise DatasetError(f"split needs {need} tiles but the dataset has {len(dataset)}")
    bounds = np.cumsum([0, n_test, n_train, n_val])
    splits = {name: (int(bounds[i]), int(bounds[i + 1])) for i, name in enumerate(("test", "train", "val"))}
    return replace(dataset, splits=splits)


def save_cache(dataset: Dataset, path) -> None:
    header = {
        "version": CACHE_VERSION,
        "k": dataset.k,
        "manifest": [list(m) for m in dataset.manifest],
        "splits": dataset.splits,
    }
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), tiles=dataset.tiles)


def load_cache(path) -> Dataset:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        tiles = z["tiles"].astype(np.float64)
    if header.get("version") != CACHE_VERSION:
        raise DatasetError(f"unsupported dataset cache version {header.get('version')}")
    manifest = [(str(f), int(t)) for f, t in header["manifest"]]
    splits = {name: (int(a), int(b)) for name, (a, b) in header["splits"].items()}
    return Dataset(tiles, int(header["k"]), manifest, splits)
