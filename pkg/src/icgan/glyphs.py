"""Procedural digit-glyph corpus for running the pipeline without the
original handwritten corpus.

Glyphs are drawn from a bundled vector font with seeded jitter in size,
stroke weight, rotation and position, then lightly blurred so strokes carry
a grayscale mask like scanned digits.  Content stays clear of the 3-pixel
image corners, which the dataset invariants rely on.
"""

import os
from functools import lru_cache

import numpy as np
from PIL import Image, ImageDraw, ImageFilter, ImageFont

from .colormnist import MnistData, write_idx_images, write_idx_labels
from .seeding import derive_rng


@lru_cache(maxsize=8)
def _font(size: int):
    import matplotlib

    path = os.path.join(matplotlib.get_data_path(), "fonts", "ttf", "DejaVuSans.ttf")
    if os.path.exists(path):
        return ImageFont.truetype(path, size)
    return ImageFont.load_default()


def render_glyph(digit: int, rng: np.random.Generator) -> np.ndarray:
    """One 28x28 uint8 stroke mask (255 = full stroke) with seeded jitter."""
    size = int(rng.integers(15, 20))
    stroke = int(rng.integers(0, 2))
    angle = float(rng.uniform(-12.0, 12.0))
    dx, dy = (float(rng.uniform(-1.5, 1.5)) for _ in range(2))

    font = _font(size)
    img = Image.new("L", (28, 28), 0)
    draw = ImageDraw.Draw(img)
    left, top, right, bottom = draw.textbbox((0, 0), str(digit), font=font,
                                             stroke_width=stroke)
    x = 14 - (left + right) / 2 + dx
    y = 14 - (top + bottom) / 2 + dy
    draw.text((x, y), str(digit), fill=255, font=font, stroke_width=stroke,
              stroke_fill=255)
    img = img.rotate(angle, resample=Image.BILINEAR, center=(14, 14))
    img = img.filter(ImageFilter.GaussianBlur(0.4))
    arr = np.asarray(img, dtype=np.uint8).copy()
    # Guarantee pure-background corners regardless of jitter extremes.
    arr[:2, :] = 0
    arr[-2:, :] = 0
    arr[:, :2] = 0
    arr[:, -2:] = 0
    return arr


def _split(n_per_class: int, split: str, seed: int):
    images = np.empty((10 * n_per_class, 28, 28), dtype=np.uint8)
    labels = np.empty(10 * n_per_class, dtype=np.uint8)
    pos = 0
    for digit in range(10):
        for k in range(n_per_class):
            rng = derive_rng(seed, f"glyph/{split}/{digit}/{k}")
            images[pos] = render_glyph(digit, rng)
            labels[pos] = digit
            pos += 1
    return images, labels


def make_glyph_corpus(n_train_per_class=600, n_test_per_class=100, seed=0) -> MnistData:
    train_images, train_labels = _split(n_train_per_class, "train", seed)
    test_images, test_labels = _split(n_test_per_class, "test", seed)
    return MnistData(train_images, train_labels, test_images, test_labels)


def write_glyph_corpus_idx(outdir, n_train_per_class=600, n_test_per_class=100, seed=0):
    """Write the corpus in idx format so it can stand in as a --mnist directory."""
    os.makedirs(outdir, exist_ok=True)
    corpus = make_glyph_corpus(n_train_per_class, n_test_per_class, seed)
    write_idx_images(os.path.join(outdir, "train-images-idx3-ubyte"), corpus.train_images)
    write_idx_labels(os.path.join(outdir, "train-labels-idx1-ubyte"), corpus.train_labels)
    write_idx_images(os.path.join(outdir, "t10k-images-idx3-ubyte"), corpus.test_images)
    write_idx_labels(os.path.join(outdir, "t10k-labels-idx1-ubyte"), corpus.test_labels)
    return corpus
