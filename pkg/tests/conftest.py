import numpy as np
import pytest
import torch

from icgan import colormnist as cm
from icgan import glyphs, models
from icgan.seeding import derive_rng


@pytest.fixture(scope="session")
def glyph_corpus() -> cm.MnistData:
    return glyphs.make_glyph_corpus(n_train_per_class=40, n_test_per_class=12,
                                    seed=3)


@pytest.fixture(scope="session")
def built_dataset(glyph_corpus):
    """Full-size (train, test) build; shared because it costs a few seconds."""
    return cm.build_dataset(glyph_corpus, seed=11)


def small_split(glyph_corpus, split, n_per_digit, n_solid, n_noise, seed=5):
    """Small DatasetFile assembled directly from the rendering primitives."""
    rng = derive_rng(seed, f"small/{split}")
    images, labels, hues = [], [], []
    source = (glyph_corpus.train_images if split == cm.SPLIT_TRAIN
              else glyph_corpus.test_images)
    source_labels = (glyph_corpus.train_labels if split == cm.SPLIT_TRAIN
                     else glyph_corpus.test_labels)
    for digit in range(10):
        idx = np.flatnonzero(source_labels == digit)
        for k in range(n_per_digit):
            glyph = source[idx[k % idx.size]] / 255.0
            hue_idx = int(rng.integers(cm.GRID_HUES))
            images.append(cm.render_digit_image(glyph, hue_idx / cm.GRID_HUES))
            labels.append(digit)
            hues.append(hue_idx)
    for k in range(n_solid):
        hue_idx = int(rng.integers(cm.GRID_HUES))
        images.append(cm.render_solid(hue_idx / cm.GRID_HUES))
        labels.append(cm.LABEL_SOLID)
        hues.append(hue_idx)
    for k in range(n_noise):
        images.append(cm.render_noise(int(rng.integers(2**32))))
        labels.append(cm.LABEL_NOISE)
        hues.append(cm.HUE_ABSENT)
    return cm.DatasetFile(
        split,
        np.stack(images),
        np.array(labels, dtype=np.uint8),
        np.array(hues, dtype=np.uint8),
    )


@pytest.fixture(scope="session")
def small_train(glyph_corpus):
    return small_split(glyph_corpus, cm.SPLIT_TRAIN, n_per_digit=60,
                       n_solid=60, n_noise=60)


@pytest.fixture(scope="session")
def small_test(glyph_corpus):
    return small_split(glyph_corpus, cm.SPLIT_TEST, n_per_digit=12,
                       n_solid=12, n_noise=12, seed=6)


@pytest.fixture
def torch_rng():
    return torch.Generator().manual_seed(1234)


@pytest.fixture(scope="session")
def tiny_generator():
    return models.build_generator(models.GeneratorConfig(base_channels=16),
                                  seed=7)


def passthrough_generator(glyph_corpus):
    """Oracle generator: renders exactly what the latent code requests.

    The digit comes from the one-hot block (drawn as the first glyph of that
    class), the background from the color block; noise dims are ignored.
    """
    from icgan.metrics import extract_bg_hue

    prototypes = {}
    for digit in range(10):
        idx = np.flatnonzero(glyph_corpus.train_labels == digit)[0]
        prototypes[digit] = glyph_corpus.train_images[idx] / 255.0

    def gen(codes: torch.Tensor) -> torch.Tensor:
        out = torch.empty(codes.shape[0], 3, 28, 28)
        for i, code in enumerate(codes):
            digit = int(code[:10].argmax())
            rgb = code[10:13].numpy().reshape(1, 1, 3)
            hue, _ = extract_bg_hue(np.broadcast_to(rgb, (28, 28, 3)))
            img = cm.render_digit_image(prototypes[digit], hue) / 255.0
            out[i] = torch.from_numpy(img.transpose(2, 0, 1)).float()
        return out

    return gen
