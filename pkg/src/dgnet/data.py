"""Image IO, dataset indexing and splitting, resizing, batching and the input-size schedule."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DimensionError
from .tensor import Tensor

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


# ---------------------------------------------------------------------------
# image IO


def load_image(path) -> Tensor:
    """Read an 8-bit RGB image as a (1, 3, H, W) tensor with values byte / 255."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return Tensor(arr.transpose(2, 0, 1)[None].astype(np.float64) / 255.0)


def to_uint8(image) -> np.ndarray:
    """(1, 3, H, W) or (3, H, W) values in [0, 1] -> (H, W, 3) bytes, rounded."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim == 4:
        arr = arr[0]
    return np.clip(np.rint(arr.transpose(1, 2, 0).astype(np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image(image, path) -> None:
    """Write as PNG (lossless) regardless of suffix handling elsewhere."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# dataset index


@dataclass(frozen=True)
class Entry:
    id: str
    raw_path: str
    reference_path: str | None = None


@dataclass
class DatasetIndex:
    entries: list = field(default_factory=list)
    kind: str = "paired"

    def __post_init__(self):
        if self.kind not in ("paired", "unpaired"):
            raise ConfigurationError(f"dataset kind must be paired or unpaired, got {self.kind!r}")
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("dataset ids must be unique")
        if self.kind == "paired" and any(e.reference_path is None for e in self.entries):
            raise ConfigurationError("paired dataset has entries without a reference image")

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def subset(self, ids) -> "DatasetIndex":
        by_id = {e.id: e for e in self.entries}
        return DatasetIndex([by_id[i] for i in ids], self.kind)


def _list_images(folder: Path) -> list[str]:
    return sorted(p.name for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def index_directory(root, manifest=None) -> DatasetIndex:
    """Index ``root/raw`` (+ ``root/reference`` when present).

    A manifest (one path per line, relative to ``root/raw``) overrides the
    directory scan. Raw and reference files are paired by file name.
    """
    root = Path(root)
    raw_dir, ref_dir = root / "raw", root / "reference"
    if not raw_dir.is_dir():
        raise OSError(f"dataset root {root} has no raw/ directory")
    if manifest is not None:
        names = [ln.strip() for ln in Path(manifest).read_text().splitlines() if ln.strip()]
    else:
        names = _list_images(raw_dir)
    paired = ref_dir.is_dir()
    entries = []
    for name in names:
        ref = ref_dir / name if paired else None
        if paired and not ref.is_file():
            raise OSError(f"missing reference image {ref}")
        entries.append(Entry(Path(name).stem, str(raw_dir / name), str(ref) if ref else None))
    return DatasetIndex(entries, "paired" if paired else "unpaired")


def read_manifest(path, root) -> DatasetIndex:
    return index_directory(root, manifest=path)


def write_manifest(index: DatasetIndex, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [Path(e.raw_path).name for e in index.entries]
    path.write_text("".join(line + "\n" for line in lines))


@dataclass(frozen=True)
class SplitSpec:
    train_count: int = 800
    val_count: int = 90
    seed: int = 0


def split_dataset(index: DatasetIndex, spec: SplitSpec) -> tuple[DatasetIndex, DatasetIndex]:
    """Seeded shuffle, then the first ``train_count`` entries train and the next ``val_count`` validate."""
    if index.kind != "paired":
        raise ConfigurationError("split_dataset needs a paired dataset")
    if spec.train_count < 0 or spec.val_count < 0 or spec.train_count + spec.val_count > len(index):
        raise ConfigurationError(
            f"cannot split {len(index)} entries into {spec.train_count} train + {spec.val_count} val")
    # sort first so the result does not depend on directory listing order
    entries = sorted(index.entries, key=lambda e: e.id)
    order = np.random.default_rng(spec.seed).permutation(len(entries))
    shuffled = [entries[i] for i in order]
    train = shuffled[:spec.train_count]
    val = shuffled[spec.train_count:spec.train_count + spec.val_count]
    return DatasetIndex(train, "paired"), DatasetIndex(val, "paired")


# ---------------------------------------------------------------------------
# resizing and schedule


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # corners aligned: output sample i sits at input coordinate i * (n_in - 1) / (n_out - 1)
    m = np.zeros((n_out, n_in))
    if n_out == 1 or n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m


def resize_bilinear(image: Tensor, size) -> Tensor:
    """Bilinear resize with the corners-aligned convention (first/last samples coincide).

    ``size`` is an int (square) or (height, width). Every output value is a
    convex combination of inputs, so the range never grows.
    """
    oh, ow = (size, size) if np.isscalar(size) else size
    if oh < 1 or ow < 1:
        raise DimensionError(f"invalid target size {size}")
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    h, w = arr.shape[-2:]
    if (h, w) == (oh, ow):
        return Tensor(arr.copy(), dtype=arr.dtype)
    my, mx = _interp_matrix(h, oh), _interp_matrix(w, ow)
    out = np.einsum("ij,...jk,lk->...il", my, arr.astype(np.float64), mx)
    return Tensor(out, dtype=arr.dtype)


def center_crop(image: Tensor, multiple: int = 8) -> Tensor:
    """Crop H and W down to the nearest multiple, keeping the centre."""
    h, w = image.shape[-2:]
    nh, nw = h - h % multiple, w - w % multiple
    top, left = (h - nh) // 2, (w - nw) // 2
    return Tensor(image.data[..., top:top + nh, left:left + nw].copy(), dtype=image.dtype)


@dataclass(frozen=True)
class ResizeSchedule:
    start_size: int = 256
    end_size: int = 400
    stages: int = 4

    def __post_init__(self):
        if self.stages < 1:
            raise ConfigurationError("stages must be >= 1")
        if self.start_size > self.end_size:
            raise ConfigurationError("start_size must not exceed end_size")
        if self.start_size % 8 or self.end_size % 8:
            raise ConfigurationError("schedule sizes must be divisible by 8")

    def sizes(self) -> list[int]:
        if self.stages == 1:
            return [self.end_size]
        step = (self.end_size - self.start_size) / (self.stages - 1)
        return [int(8 * round((self.start_size + k * step) / 8)) for k in range(self.stages)]


def progressive_size(epoch: int, total_epochs: int, schedule: ResizeSchedule) -> int:
    """Input size for ``epoch``: ``stages`` equal spans of epochs, sizes stepping from start to end."""
    if not 0 <= epoch < total_epochs:
        raise ConfigurationError(f"epoch {epoch} outside [0, {total_epochs})")
    stage = min(schedule.stages - 1, epoch * schedule.stages // total_epochs)
    return schedule.sizes()[stage]


# ---------------------------------------------------------------------------
# batching


class ImageCache:
    """Decoded images keyed by path; datasets here are small enough to keep in memory."""

    def __init__(self):
        self._store: dict[str, Tensor] = {}

    def get(self, path: str) -> Tensor:
        img = self._store.get(path)
        if img is None:
            img = self._store[path] = load_image(path)
        return img


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_iterator(train: DatasetIndex, batch: int, size: int, seed: int, epoch: int,
                   cache: ImageCache | None = None) -> Iterator[tuple[list[str], Tensor, Tensor]]:
    """Yield (ids, raw batch, reference batch) in a (seed, epoch)-determined order.

    The final partial batch is kept. Images are resized to ``size x size``.
    """
    if len(train) == 0:
        raise ConfigurationError("training set is empty")
    if train.kind != "paired":
        raise ConfigurationError("batch_iterator needs a paired dataset")
    if batch < 1:
        raise ConfigurationError("batch size must be >= 1")
    cache = cache or ImageCache()
    order = epoch_order(len(train), seed, epoch)
    for start in range(0, len(order), batch):
        chunk = [train.entries[i] for i in order[start:start + batch]]
        raws = [resize_bilinear(cache.get(e.raw_path), size).data for e in chunk]
        refs = [resize_bilinear(cache.get(e.reference_path), size).data for e in chunk]
        yield ([e.id for e in chunk], Tensor(np.concatenate(raws)), Tensor(np.concatenate(refs)))


def worker_count(requested: int | None = None) -> int:
    """Worker threads, capped by the DGNET_THREADS environment variable."""
    cap = os.environ.get("DGNET_THREADS")
    n = requested or os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigurationError(f"DGNET_THREADS must be an integer, got {cap!r}") from None
    return max(1, n)
