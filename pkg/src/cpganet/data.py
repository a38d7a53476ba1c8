"""PNG I/O, LOL-style paired directories, aligned random crops and batching."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import cv2
import numpy as np

from .autodiff import Tensor

log = logging.getLogger(__name__)

IMAGE_EXTS = (".png",)


class DataError(Exception):
    """Raised for unreadable images and malformed dataset layouts."""


class ImageTooSmallError(DataError):
    pass


def load_png(path: str) -> np.ndarray:
    """Decode an 8- or 16-bit PNG into a float ``[1, 3, H, W]`` array in [0, 1].

    Alpha is dropped and grayscale is replicated to three channels.
    """
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise DataError(f"cannot decode image {path}")
    if raw.dtype == np.uint8:
        maxval = 255.0
    elif raw.dtype == np.uint16:
        maxval = 65535.0
    else:
        raise DataError(f"unsupported bit depth {raw.dtype} in {path}")
    if raw.ndim == 2:
        rgb = np.repeat(raw[:, :, None], 3, axis=2)
    elif raw.shape[2] == 4:
        rgb = raw[:, :, 2::-1]
    elif raw.shape[2] == 3:
        rgb = raw[:, :, ::-1]
    else:
        raise DataError(f"unsupported channel count {raw.shape[2]} in {path}")
    return (rgb.transpose(2, 0, 1)[None].astype(np.float64) / maxval).astype(np.float32)


def save_png(img, path: str) -> None:
    """Encode ``[1, 3, H, W]`` (or ``[3, H, W]``) values in [0, 1] as 8-bit RGB."""
    arr = np.asarray(img.data if isinstance(img, Tensor) else img, dtype=np.float64)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError("save_png writes one image at a time")
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected a 3-channel image, got shape {arr.shape}")
    if not np.isfinite(arr).all() or arr.min() < 0 or arr.max() > 1:
        raise ValueError("pixel values must lie in [0, 1]")
    # round half up
    q = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    bgr = np.ascontiguousarray(q.transpose(1, 2, 0)[:, :, ::-1])
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    if not cv2.imwrite(str(path), bgr):
        raise OSError(f"failed to write {path}")


def list_images(directory: str) -> list[str]:
    return sorted(f for f in os.listdir(directory) if f.lower().endswith(IMAGE_EXTS))


@dataclass
class PairedSample:
    low: np.ndarray
    gt: np.ndarray
    id: str

    def __post_init__(self):
        if self.low.shape != self.gt.shape:
            raise DataError(f"{self.id}: low {self.low.shape} and gt {self.gt.shape} differ in size")


@dataclass
class DatasetIndex:
    low_dir: str
    high_dir: str
    stems: list[str]
    split: Optional[str] = None
    files: dict[str, tuple[str, str]] = field(default_factory=dict)
    unmatched: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.stems)

    def paths(self, stem: str) -> tuple[str, str]:
        low, high = self.files[stem]
        return os.path.join(self.low_dir, low), os.path.join(self.high_dir, high)


def index_dataset(root: str, split: Optional[str] = None, low_name: str = "low", high_name: str = "high") -> DatasetIndex:
    """Pair ``root[/split]/{low,high}`` files by filename stem, sorted lexicographically."""
    base = os.path.join(root, split) if split else root
    low_dir, high_dir = os.path.join(base, low_name), os.path.join(base, high_name)
    for d in (low_dir, high_dir):
        if not os.path.isdir(d):
            raise DataError(f"missing directory {d}")
    lows = {os.path.splitext(f)[0]: f for f in list_images(low_dir)}
    highs = {os.path.splitext(f)[0]: f for f in list_images(high_dir)}
    stems = sorted(set(lows) & set(highs))
    unmatched = sorted(
        [os.path.join(low_name, lows[s]) for s in set(lows) - set(highs)]
        + [os.path.join(high_name, highs[s]) for s in set(highs) - set(lows)]
    )
    if not stems:
        raise DataError(f"no paired images under {base}")
    if unmatched:
        log.warning("%d unmatched files under %s: %s", len(unmatched), base, ", ".join(unmatched))
    log.info("indexed %d pairs under %s", len(stems), base)
    files = {s: (lows[s], highs[s]) for s in stems}
    return DatasetIndex(low_dir, high_dir, stems, split, files, unmatched)


class PairedDataset:
    """Loads pairs from an index, caching decoded arrays in memory."""

    def __init__(self, index: DatasetIndex, cache: bool = True):
        self.index = index
        self.cache = cache
        self._cache: dict[str, PairedSample] = {}

    def __len__(self) -> int:
        return len(self.index)

    @property
    def ids(self) -> list[str]:
        return list(self.index.stems)

    def get(self, stem: str) -> PairedSample:
        if stem in self._cache:
            return self._cache[stem]
        low_path, high_path = self.index.paths(stem)
        try:
            sample = PairedSample(load_png(low_path), load_png(high_path), stem)
        except (DataError, OSError) as exc:
            raise DataError(f"sample {stem!r}: {exc}") from exc
        if self.cache:
            self._cache[stem] = sample
        return sample


class InMemoryDataset:
    """Same interface as :class:`PairedDataset` over already-decoded samples."""

    def __init__(self, samples: Sequence[PairedSample]):
        self.samples = {s.id: s for s in samples}

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def ids(self) -> list[str]:
        return sorted(self.samples)

    def get(self, stem: str) -> PairedSample:
        return self.samples[stem]


def crop_window(h: int, w: int, size: int, rng: np.random.Generator) -> tuple[int, int]:
    """Uniform top-left offset of a ``size`` square inside an ``h x w`` image."""
    if size > h or size > w:
        raise ImageTooSmallError(f"crop {size} exceeds image {h}x{w}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return top, left


def random_crop_pair(s: PairedSample, size: int, rng: np.random.Generator) -> PairedSample:
    """Apply one random window to both images of the pair."""
    h, w = s.low.shape[-2:]
    try:
        top, left = crop_window(h, w, size, rng)
    except ImageTooSmallError as exc:
        raise ImageTooSmallError(f"{s.id}: {exc}") from None
    win = (..., slice(top, top + size), slice(left, left + size))
    return PairedSample(s.low[win], s.gt[win], s.id)


@dataclass
class BatchPlan:
    batch_size: int = 8
    crop_size: int = 256
    seed: int = 0
    epoch: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.crop_size < 2 or self.crop_size % 2:
            raise ValueError("crop_size must be even and >= 2")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng([self.seed, self.epoch])


def epoch_order(ids: Sequence[str], rng: np.random.Generator) -> list[str]:
    ids = sorted(ids)
    return [ids[i] for i in rng.permutation(len(ids))]


def make_batches(dataset, plan: BatchPlan, rng: Optional[np.random.Generator] = None,
                 ) -> Iterator[tuple[Tensor, Tensor, list[str]]]:
    """Yield ``(low, gt, ids)`` batches for one epoch.

    The generator (derived from ``plan.seed`` and ``plan.epoch`` unless given)
    fixes both the shuffle and every crop window. The last partial batch is kept.
    """
    rng = rng if rng is not None else plan.rng()
    order = epoch_order(dataset.ids, rng)
    for start in range(0, len(order), plan.batch_size):
        chunk = order[start : start + plan.batch_size]
        crops = [random_crop_pair(dataset.get(stem), plan.crop_size, rng) for stem in chunk]
        low = np.concatenate([c.low for c in crops], axis=0)
        gt = np.concatenate([c.gt for c in crops], axis=0)
        yield Tensor(low), Tensor(gt), chunk


def full_images(dataset) -> Iterator[PairedSample]:
    for stem in dataset.ids:
        yield dataset.get(stem)
