"""ColorMNIST synthesis and its on-disk container.

The dataset composites grayscale digit glyphs over 100 saturated background
hues and adds two extra classes (solid color, random noise) used only by the
evaluation classifier.  Construction is bit-deterministic: every record's
randomness is derived from (seed, split, record index), never from execution
order.

File format (little-endian):
    magic "CMNIST01" | split byte (0=train, 1=test) | record count (u64)
    then per record: 2352 bytes raw RGB (row-major, channel-last),
    1 byte digit label, 1 byte hue index (255 = absent).
"""

import csv
import gzip
import os
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .seeding import derive_rng, derive_seed

MAGIC = b"CMNIST01"
IMAGE_SHAPE = (28, 28, 3)
IMAGE_BYTES = 28 * 28 * 3
RECORD_BYTES = IMAGE_BYTES + 2

GRID_HUES = 100
LABEL_SOLID = 10
LABEL_NOISE = 11
HUE_ABSENT = 255

SPLIT_TRAIN = 0
SPLIT_TEST = 1

# Per-split class totals. Digit classes are balanced by undersampling, with
# the remainder going to the lowest class indices.
TRAIN_DIGIT_TOTAL = 108_503
TRAIN_SOLID = 10_850
TRAIN_NOISE = 10_850
TEST_DIGIT_TOTAL = 18_103
TEST_SOLID = 1_810
TEST_NOISE = 1_810


class DatasetFormatError(ValueError):
    """Raised when a dataset file is malformed (bad magic, truncation, counts)."""


class DatasetConstructionError(RuntimeError):
    """Raised when the requested class counts cannot be built from the source."""


def hsv_to_rgb(h):
    """HSV -> RGB at full saturation and value.

    ``h`` is a scalar or array of hue fractions in [0, 1).  Returns floats in
    [0, 1] with trailing axis 3; at least one channel is 1 and one is 0.
    """
    h = np.asarray(h, dtype=np.float64)
    if np.any(h < 0.0) or np.any(h >= 1.0):
        raise ValueError("hue must lie in [0, 1)")
    hp = h * 6.0
    sector = np.floor(hp).astype(np.int64) % 6
    f = hp - np.floor(hp)
    one = np.ones_like(f)
    zero = np.zeros_like(f)
    q = 1.0 - f
    conds = [sector == k for k in range(6)]
    r = np.select(conds, [one, q, zero, zero, f, one])
    g = np.select(conds, [f, one, one, q, zero, zero])
    b = np.select(conds, [zero, zero, f, one, one, q])
    return np.stack([r, g, b], axis=-1)


HUE_GRID = np.arange(GRID_HUES) / GRID_HUES
HUE_GRID_RGB = hsv_to_rgb(HUE_GRID)


def render_digit_image(glyph, hue):
    """Composite a black digit over a saturated background.

    ``glyph`` is a 28x28 stroke mask in [0, 1] (1 = full stroke).  Each pixel
    is (1 - m) * rgb(hue), quantized to 8 bits; mask-0 pixels equal the
    background color exactly.
    """
    glyph = np.asarray(glyph, dtype=np.float64)
    if glyph.shape != (28, 28):
        raise ValueError(f"glyph must be 28x28, got {glyph.shape}")
    if glyph.min() < 0.0 or glyph.max() > 1.0:
        raise ValueError("glyph values must lie in [0, 1]")
    rgb = hsv_to_rgb(hue)
    img = (1.0 - glyph)[:, :, None] * rgb[None, None, :]
    return np.rint(img * 255.0).astype(np.uint8)


def render_solid(hue):
    """Uniform background-color image for the solid-color class."""
    rgb = np.rint(hsv_to_rgb(hue) * 255.0).astype(np.uint8)
    return np.broadcast_to(rgb, IMAGE_SHAPE).copy()


def render_noise(seed):
    """Per-pixel, per-channel uniform 8-bit noise from the seeded stream."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, IMAGE_SHAPE, dtype=np.uint8)


class DatasetRecord(NamedTuple):
    image: np.ndarray
    digit_label: int
    hue_index: int | None


@dataclass
class DatasetFile:
    """One split held in memory as parallel arrays."""

    split: int
    images: np.ndarray       # (n, 28, 28, 3) uint8
    digit_labels: np.ndarray  # (n,) uint8, 0-11
    hue_indices: np.ndarray   # (n,) uint8, 255 = absent

    def __len__(self):
        return self.images.shape[0]

    def record(self, i) -> DatasetRecord:
        hue = int(self.hue_indices[i])
        return DatasetRecord(
            self.images[i],
            int(self.digit_labels[i]),
            None if hue == HUE_ABSENT else hue,
        )

    def digit_subset(self) -> "DatasetFile":
        """Records with digit labels 0-9 (the only ones the GAN trains on)."""
        keep = self.digit_labels < LABEL_SOLID
        return DatasetFile(
            self.split,
            self.images[keep],
            self.digit_labels[keep],
            self.hue_indices[keep],
        )

    def to_bytes(self) -> bytes:
        n = len(self)
        body = np.concatenate(
            [
                self.images.reshape(n, IMAGE_BYTES),
                self.digit_labels.reshape(n, 1),
                self.hue_indices.reshape(n, 1),
            ],
            axis=1,
        )
        header = MAGIC + struct.pack("<BQ", self.split, n)
        return header + body.tobytes()


@dataclass
class MnistData:
    """Source glyph corpus in the original train/test split."""

    train_images: np.ndarray  # (n, 28, 28) uint8
    train_labels: np.ndarray  # (n,) integer 0-9
    test_images: np.ndarray
    test_labels: np.ndarray


def _digit_targets(total):
    base, rem = divmod(total, 10)
    return [base + (1 if c < rem else 0) for c in range(10)]


TRAIN_DIGIT_TARGETS = _digit_targets(TRAIN_DIGIT_TOTAL)
TEST_DIGIT_TARGETS = _digit_targets(TEST_DIGIT_TOTAL)


def _record_hues(seed, split, start, count):
    """Hue indices for records [start, start+count).

    Hues are balanced in blocks of 100: record i takes position i%100 of a
    seeded permutation of the hue grid for block i//100, so any contiguous
    run of records covers the grid almost uniformly while each record's hue
    remains a pure function of (seed, split, record index).
    """
    out = np.empty(count, dtype=np.uint8)
    pos = 0
    i = start
    while pos < count:
        block, offset = divmod(i, GRID_HUES)
        perm = derive_rng(seed, f"hue/{split}/{block}").permutation(GRID_HUES)
        take = min(GRID_HUES - offset, count - pos)
        out[pos : pos + take] = perm[offset : offset + take]
        pos += take
        i += take
    return out


def _build_split(images, labels, split, seed, digit_total, n_solid, n_noise):
    targets = _digit_targets(digit_total)
    n_records = digit_total + n_solid + n_noise
    out_images = np.empty((n_records,) + IMAGE_SHAPE, dtype=np.uint8)
    out_labels = np.empty(n_records, dtype=np.uint8)
    out_hues = np.full(n_records, HUE_ABSENT, dtype=np.uint8)

    pos = 0
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            raise DatasetConstructionError(f"source has no glyphs for digit {c}")
        order = derive_rng(seed, f"select/{split}/{c}").permutation(idx.size)
        chosen = np.resize(idx[order], targets[c])  # cycles when target > supply
        hues = _record_hues(seed, split, pos, targets[c])
        # float64 keeps quantization identical to render_digit_image; grid
        # hues produce exact half-integer values that round dtype-sensitively
        for lo in range(0, targets[c], 4096):
            hi = min(lo + 4096, targets[c])
            glyphs = images[chosen[lo:hi]].astype(np.float64) / 255.0
            rgb = HUE_GRID_RGB[hues[lo:hi]]
            block = (1.0 - glyphs)[:, :, :, None] * rgb[:, None, None, :]
            out_images[pos + lo : pos + hi] = np.rint(block * 255.0).astype(np.uint8)
        out_labels[pos : pos + targets[c]] = c
        out_hues[pos : pos + targets[c]] = hues
        pos += targets[c]

    hues = _record_hues(seed, split, pos, n_solid)
    rgb_u8 = np.rint(HUE_GRID_RGB[hues] * 255.0).astype(np.uint8)
    out_images[pos : pos + n_solid] = rgb_u8[:, None, None, :]
    out_labels[pos : pos + n_solid] = LABEL_SOLID
    out_hues[pos : pos + n_solid] = hues
    pos += n_solid

    for k in range(n_noise):
        out_images[pos + k] = render_noise(derive_seed(seed, f"noise/{split}/{pos + k}"))
    out_labels[pos : pos + n_noise] = LABEL_NOISE
    pos += n_noise
    assert pos == n_records

    return DatasetFile(split, out_images, out_labels, out_hues)


def build_dataset(mnist: MnistData, seed: int):
    """Build the (train, test) splits with the fixed per-class totals.

    Digit classes are balanced to near-equal sizes; each source glyph keeps
    its original split membership and is reused cyclically when the target
    exceeds the supply.  Fully deterministic given (mnist, seed).
    """
    train = _build_split(
        mnist.train_images, mnist.train_labels, SPLIT_TRAIN, seed,
        TRAIN_DIGIT_TOTAL, TRAIN_SOLID, TRAIN_NOISE,
    )
    test = _build_split(
        mnist.test_images, mnist.test_labels, SPLIT_TEST, seed,
        TEST_DIGIT_TOTAL, TEST_SOLID, TEST_NOISE,
    )
    return train, test


def save_dataset(dataset: DatasetFile, path):
    n = len(dataset)
    if dataset.digit_labels.shape != (n,) or dataset.hue_indices.shape != (n,):
        raise DatasetFormatError("inconsistent array lengths")
    with open(path, "wb") as fh:
        fh.write(dataset.to_bytes())


def load_dataset(path) -> DatasetFile:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 9:
        raise DatasetFormatError("file too short for header")
    if raw[: len(MAGIC)] != MAGIC:
        raise DatasetFormatError(f"bad magic {raw[:8]!r}")
    split, count = struct.unpack_from("<BQ", raw, len(MAGIC))
    if split not in (SPLIT_TRAIN, SPLIT_TEST):
        raise DatasetFormatError(f"unknown split byte {split}")
    body = raw[len(MAGIC) + 9 :]
    if len(body) != count * RECORD_BYTES:
        raise DatasetFormatError(
            f"record count {count} implies {count * RECORD_BYTES} payload bytes, "
            f"found {len(body)}"
        )
    rows = np.frombuffer(body, dtype=np.uint8).reshape(count, RECORD_BYTES)
    images = rows[:, :IMAGE_BYTES].reshape((count,) + IMAGE_SHAPE).copy()
    labels = rows[:, IMAGE_BYTES].copy()
    hues = rows[:, IMAGE_BYTES + 1].copy()
    if np.any(labels > LABEL_NOISE):
        raise DatasetFormatError("digit label out of range")
    noise = labels == LABEL_NOISE
    if np.any(hues[noise] != HUE_ABSENT) or np.any(hues[~noise] >= GRID_HUES):
        raise DatasetFormatError("hue index inconsistent with class label")
    return DatasetFile(split, images, labels, hues)


def export_png(dataset: DatasetFile, outdir, limit=None):
    """Write records as PNGs plus a ``labels.csv`` manifest."""
    from PIL import Image

    os.makedirs(outdir, exist_ok=True)
    n = len(dataset) if limit is None else min(limit, len(dataset))
    with open(os.path.join(outdir, "labels.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "digit_label", "hue_index"])
        for i in range(n):
            Image.fromarray(dataset.images[i]).save(
                os.path.join(outdir, f"{i:06d}.png")
            )
            hue = int(dataset.hue_indices[i])
            writer.writerow([i, int(dataset.digit_labels[i]),
                             "" if hue == HUE_ABSENT else hue])


# --- IDX source loading (original glyph corpus distribution format) ---

_IDX_IMAGE_MAGIC = 2051
_IDX_LABEL_MAGIC = 2049


def _open_maybe_gz(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path) -> np.ndarray:
    with _open_maybe_gz(path) as fh:
        magic, = struct.unpack(">i", fh.read(4))
        if magic == _IDX_IMAGE_MAGIC:
            n, rows, cols = struct.unpack(">iii", fh.read(12))
            data = np.frombuffer(fh.read(n * rows * cols), dtype=np.uint8)
            return data.reshape(n, rows, cols)
        if magic == _IDX_LABEL_MAGIC:
            n, = struct.unpack(">i", fh.read(4))
            return np.frombuffer(fh.read(n), dtype=np.uint8).copy()
        raise DatasetFormatError(f"unrecognized idx magic {magic} in {path}")


def write_idx_images(path, images):
    images = np.ascontiguousarray(images, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">iiii", _IDX_IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">ii", _IDX_LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


_IDX_STEMS = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


def load_mnist_idx(root) -> MnistData:
    """Load a glyph corpus from a directory of idx files (.gz accepted).

    Also accepts ``test-*`` in place of the historical ``t10k-*`` names.
    """
    found = {}
    for key, stem in _IDX_STEMS.items():
        stems = [stem]
        if stem.startswith("t10k"):
            stems.append(stem.replace("t10k", "test"))
        candidates = [
            os.path.join(root, s + ext) for s in stems for ext in ("", ".gz")
        ]
        path = next((p for p in candidates if os.path.exists(p)), None)
        if path is None:
            raise FileNotFoundError(
                f"missing {stem}[.gz] under {root!r} (searched {candidates})"
            )
        found[key] = read_idx(path)
    for split in ("train", "test"):
        if found[f"{split}_images"].shape[0] != found[f"{split}_labels"].shape[0]:
            raise DatasetFormatError(f"{split} images/labels length mismatch")
    return MnistData(**found)
