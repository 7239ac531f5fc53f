"""Datasets: IDX image files, a synthetic content/style generator and stratified splits."""
from __future__ import annotations

import csv
import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

CIRCLE_DIGITS = (0, 6, 8, 9)
IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
PAD_TO = 32


class IdxFormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DatasetError(ValueError):
    pass


@dataclass
class GroupedDataset:
    samples: np.ndarray  # (N, C, H, W) float64
    content: np.ndarray  # downstream label per sample
    private: np.ndarray  # identity label per sample

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.content = np.asarray(self.content, dtype=np.int64)
        self.private = np.asarray(self.private, dtype=np.int64)
        n = len(self.samples)
        if len(self.content) != n or len(self.private) != n:
            raise DatasetError(f"label lengths {len(self.content)}/{len(self.private)} differ from {n} samples")
        for name, lab in (("content", self.content), ("private", self.private)):
            if n and lab.min() < 0:
                raise DatasetError(f"{name} labels must be non-negative")

    def __len__(self):
        return len(self.samples)

    @property
    def sample_shape(self):
        return tuple(self.samples.shape[1:])

    @property
    def content_count(self):
        return int(self.content.max()) + 1 if len(self) else 0

    @property
    def private_count(self):
        return int(self.private.max()) + 1 if len(self) else 0

    def subset(self, idx):
        idx = np.asarray(idx)
        idx = np.flatnonzero(idx) if idx.dtype == bool else idx.astype(np.int64)
        return GroupedDataset(self.samples[idx], self.content[idx], self.private[idx])

    def labels(self, key):
        if key not in ("content", "private"):
            raise KeyError(f"label key must be 'content' or 'private', got {key!r}")
        return getattr(self, key)

    def sorted_by_private(self):
        """Stable reorder so same-private-class samples are contiguous."""
        return self.subset(np.argsort(self.private, kind="stable"))


def concat(parts):
    parts = [p for p in parts if len(p)]
    return GroupedDataset(np.concatenate([p.samples for p in parts]),
                          np.concatenate([p.content for p in parts]),
                          np.concatenate([p.private for p in parts]))


# ----------------------------------------------------------------- IDX files

def _open(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def read_idx(path, expected_magic=None):
    """Parse an IDX file (optionally gzipped) into a uint8 array."""
    buf = _open(path)
    if len(buf) < 4:
        raise IdxFormatError("file shorter than the 4-byte magic", len(buf))
    magic = struct.unpack_from(">I", buf, 0)[0]
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != 0x08:
        raise IdxFormatError(f"bad magic 0x{magic:08x}; only unsigned-byte IDX is supported", 0)
    if expected_magic is not None and magic != expected_magic:
        raise IdxFormatError(f"magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IdxFormatError(f"truncated dimension table ({ndim} dims)", len(buf))
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    need = header + int(np.prod(dims))
    if len(buf) < need:
        raise IdxFormatError(f"truncated data: need {need} bytes, file has {len(buf)}", len(buf))
    if len(buf) > need:
        raise IdxFormatError(f"{len(buf) - need} trailing bytes after data", need)
    return np.frombuffer(buf, np.uint8, int(np.prod(dims)), header).reshape(dims)


def write_idx(path, array, compress=None):
    """Write a uint8 array as IDX; gzip when ``path`` ends with .gz unless told otherwise."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise DatasetError("IDX writer only handles uint8 data")
    body = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    body += np.ascontiguousarray(array).tobytes()
    if compress is None:
        compress = str(path).endswith(".gz")
    with open(path, "wb") as fh:
        fh.write(gzip.compress(body, mtime=0) if compress else body)


def _labels_path(images_path):
    p = str(images_path)
    for a, b in (("images-idx3", "labels-idx1"), ("images.idx3", "labels.idx1")):
        if a in p:
            return p.replace(a, b)
    raise DatasetError(f"cannot infer label file for {images_path}; pass labels_path")


def load_idx_images(path, labels_path=None, pad_to=PAD_TO, limit=None):
    """Digits as a GroupedDataset: pixels in [0,1] zero-padded to ``pad_to``.

    content label 1 = digit drawn with a closed loop (0, 6, 8, 9), 0 otherwise;
    private label = the digit itself.
    """
    images = read_idx(path, IMAGE_MAGIC)
    digits = read_idx(labels_path or _labels_path(path), LABEL_MAGIC)
    if len(images) != len(digits):
        raise DatasetError(f"{len(images)} images but {len(digits)} labels")
    if limit is not None:
        images, digits = images[:limit], digits[:limit]
    h, w = images.shape[1:]
    if pad_to < max(h, w):
        raise DatasetError(f"cannot pad {h}x{w} images to {pad_to}")
    top, left = (pad_to - h) // 2, (pad_to - w) // 2
    x = np.zeros((len(images), 1, pad_to, pad_to))
    x[:, 0, top:top + h, left:left + w] = images / 255.0
    content = np.isin(digits, CIRCLE_DIGITS).astype(np.int64)
    return GroupedDataset(x, content, digits.astype(np.int64))


def dataset_to_idx(dataset, images_path, labels_path, size=(28, 28)):
    """Inverse of ``load_idx_images`` (crops the padding, rescales to bytes)."""
    h, w = size
    _, _, ph, pw = dataset.samples.shape
    top, left = (ph - h) // 2, (pw - w) // 2
    pix = np.rint(dataset.samples[:, 0, top:top + h, left:left + w] * 255.0)
    write_idx(images_path, np.clip(pix, 0, 255).astype(np.uint8))
    write_idx(labels_path, dataset.private.astype(np.uint8))


def find_mnist(root):
    """Image path of the first IDX digit file under ``root``."""
    for name in sorted(os.listdir(root)):
        if "images-idx3" in name:
            return os.path.join(root, name)
    raise DatasetError(f"no '*images-idx3*' file in {root}")


def export_labels_csv(dataset, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["index", "content", "private"])
        for i, (c, p) in enumerate(zip(dataset.content, dataset.private)):
            wr.writerow([i, int(c), int(p)])


# --------------------------------------------------------------- synthetic

def synth_content_style(content_classes=4, style_classes=4, samples_per_cell=50, noise=0.05, seed=0,
                        shape=(3, 16, 16), style_scale=0.3):
    """Content prototype + channel-constant style offset + Gaussian noise.

    Prototypes are orthonormal (then rescaled to unit RMS) and zero-mean in every
    channel, so they carry no per-channel statistics; styles are exactly such
    statistics and instance normalisation removes them.
    """
    if noise < 0:
        raise DatasetError("noise must be >= 0")
    c, h, w = shape
    d = c * h * w
    if content_classes > d - c:
        raise DatasetError("too many content classes for the sample size")
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((content_classes, c, h * w))
    raw -= raw.mean(axis=2, keepdims=True)
    q, _ = np.linalg.qr(raw.reshape(content_classes, d).T)
    protos = (q.T * np.sqrt(d)).reshape(content_classes, c, h, w)
    offsets = style_scale * rng.standard_normal((style_classes, c))
    n = content_classes * style_classes * samples_per_cell
    content = np.repeat(np.arange(content_classes), style_classes * samples_per_cell)
    private = np.tile(np.repeat(np.arange(style_classes), samples_per_cell), content_classes)
    x = protos[content] + offsets[private][:, :, None, None]
    if noise:
        x = x + noise * rng.standard_normal((n,) + tuple(shape))
    return GroupedDataset(x, content, private)


# ------------------------------------------------------------------ splits

@dataclass
class SplitSpec:
    test: float = 0.2
    atd: float = 0.15  # fraction of the training part

    def __post_init__(self):
        if not (0 <= self.test < 1 and 0 <= self.atd < 1):
            raise DatasetError("split fractions must lie in [0, 1)")


@dataclass
class Splits:
    nodes: GroupedDataset
    atd: GroupedDataset
    test: GroupedDataset


def split(dataset, spec=None, seed=0, min_size=100):
    """Stratified (by content label) Te / ATD / node-data split."""
    spec = spec or SplitSpec()
    if len(dataset) < min_size:
        raise DatasetError(f"dataset has {len(dataset)} samples; need at least {min_size} to split")
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for c in np.unique(dataset.content):
        members = np.flatnonzero(dataset.content == c)
        members = members[rng.permutation(len(members))]
        n_te = int(round(spec.test * len(members)))
        n_atd = int(round(spec.atd * (len(members) - n_te)))
        parts[0].append(members[n_te + n_atd:])
        parts[1].append(members[n_te:n_te + n_atd])
        parts[2].append(members[:n_te])
    nodes, atd, test = (dataset.subset(np.sort(np.concatenate(p))) for p in parts)
    return Splits(nodes, atd, test)
