"""Gradient-score probe: mask the digit region of a generated image, push
the masked-to-zero objective backward, score each channel of the ablatable
layers by the absolute spatial mean of its gradient, then re-generate with
the top-scoring channels suppressed (one layer at a time or cumulatively).
"""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from . import models
from .metrics import chw_to_hwc, circular_hue_distance, extract_bg_hue

MASK_RGB_THRESHOLD = 0.25


@dataclass
class GradScoreTable:
    """Per-channel scores for every ablatable layer, in generator order."""

    scores: dict = field(default_factory=dict)  # layer name -> (C,) float array

    def __post_init__(self):
        missing = [l for l in models.ABLATABLE_LAYERS if l not in self.scores]
        extra = [l for l in self.scores if l not in models.ABLATABLE_LAYERS]
        if missing or extra:
            raise ValueError(f"score table must cover exactly the ablatable "
                             f"layers; missing={missing} extra={extra}")


@dataclass
class AblationPlan:
    mode: str = "layerwise"            # or "accumulative"
    fraction: float = 0.10
    layers: tuple = models.ABLATABLE_LAYERS

    def __post_init__(self):
        if self.mode not in ("layerwise", "accumulative"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("fraction must lie in [0, 1]")
        unknown = [l for l in self.layers if l not in models.ABLATABLE_LAYERS]
        if unknown:
            raise ValueError(f"unknown layers {unknown}")


def digit_masks(generator, z_batch: torch.Tensor) -> torch.Tensor:
    """Binary (n, 28, 28) masks of digit pixels in the generated images.

    A pixel belongs to the digit when its RGB distance from the
    corner-estimated background color exceeds 0.25.
    """
    with torch.no_grad():
        images = generator(z_batch)
    hwc = chw_to_hwc(images)
    masks = torch.empty(images.shape[0], 28, 28)
    for i, img in enumerate(hwc):
        _, degenerate = extract_bg_hue(img)
        if degenerate:
            raise ValueError(f"degenerate background in sample {i}; "
                             "cannot estimate the digit mask")
        corners = np.concatenate([
            img[r, c].reshape(-1, 3)
            for r in (slice(0, 3), slice(25, 28))
            for c in (slice(0, 3), slice(25, 28))
        ])
        bg = corners.mean(axis=0)
        dist = np.linalg.norm(img - bg[None, None, :], axis=2)
        masks[i] = torch.from_numpy((dist > MASK_RGB_THRESHOLD).astype(np.float32))
    return masks


def digit_mask(generator, z: torch.Tensor) -> torch.Tensor:
    return digit_masks(generator, z.unsqueeze(0))[0]


def grad_score_table(generator, z_batch: torch.Tensor,
                     masks: torch.Tensor) -> GradScoreTable:
    """Channel scores |mean_{m,n} grad| at each layer's post-activation maps,
    averaged over the batch.  The driving loss is the sum of squared masked
    output pixels."""
    sites = {}

    def hook(name, t):
        if name in models.ABLATABLE_LAYERS:
            t.retain_grad()
            sites[name] = t
        return t

    images = generator(z_batch, site_hook=hook)
    if float(masks.sum()) == 0.0:
        warnings.warn("all-zero digit mask; gradient scores are zero")
    loss = ((images * masks[:, None, :, :]) ** 2).sum()
    generator.zero_grad(set_to_none=True)
    loss.backward()
    scores = {}
    for name in models.ABLATABLE_LAYERS:
        grad = sites[name].grad
        if grad is None:
            grad = torch.zeros_like(sites[name])
        per_sample = grad.mean(dim=(2, 3)).abs()  # |spatial mean| per channel
        scores[name] = per_sample.mean(dim=0).detach().numpy().astype(np.float64)
    generator.zero_grad(set_to_none=True)
    return GradScoreTable(scores)


def grad_scores(generator, z: torch.Tensor, mask: torch.Tensor) -> GradScoreTable:
    return grad_score_table(generator, z.unsqueeze(0), mask.unsqueeze(0))


def topk_channels(scores: np.ndarray, fraction: float) -> np.ndarray:
    """Indices of the ceil(fraction * C) highest scores; ties break toward
    the lower channel index."""
    k = int(np.ceil(fraction * scores.shape[0]))
    if k == 0:
        return np.empty(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:k])


def _suppression_hook(table: GradScoreTable, plan: AblationPlan, targets):
    zeroed = {
        name: topk_channels(table.scores[name], plan.fraction)
        for name in targets
    }

    def hook(name, t):
        if name in zeroed and zeroed[name].size:
            mask = torch.ones(t.shape[1], dtype=t.dtype)
            mask[zeroed[name]] = 0.0
            t = t * mask[None, :, None, None]
        return t

    return hook, zeroed


def suppress_topk(generator, plan: AblationPlan, table: GradScoreTable,
                  z_batch: torch.Tensor) -> torch.Tensor:
    """Forward pass with the plan's target layers' top channels zeroed.
    Parameters are untouched; suppression is forward-time masking only."""
    hook, _ = _suppression_hook(table, plan, plan.layers)
    with torch.no_grad():
        return generator(z_batch, site_hook=hook)


def ablation_grid(generator, rng: torch.Generator, digits=range(10),
                  fraction=0.10, score_samples=64):
    """Images and per-cell statistics for both probe modes.

    Rows are digits; columns are single ablated layers (layerwise) or layer
    prefixes (accumulative).  Each cell records the circular background-hue
    shift and the mean absolute pixel change inside the digit mask, both
    against the unablated baseline for that digit's fixed code.
    """
    digits = list(digits)
    layers = models.ABLATABLE_LAYERS
    cells = {"layerwise": {}, "accumulative": {}}
    baselines = {}
    stats = []
    for digit in digits:
        z_show = models.sample_latents(1, rng,
                                       digits=torch.tensor([digit]))
        z_score = models.sample_latents(score_samples, rng,
                                        digits=torch.full((score_samples,), digit))
        masks = digit_masks(generator, z_score)
        table = grad_score_table(generator, z_score, masks)

        with torch.no_grad():
            base = generator(z_show)
        base_hwc = chw_to_hwc(base)[0]
        base_hue, base_degen = extract_bg_hue(base_hwc)
        base_mask = digit_mask(generator, z_show[0]).numpy()
        baselines[digit] = base_hwc

        for mode in ("layerwise", "accumulative"):
            for col, layer in enumerate(layers):
                targets = (layer,) if mode == "layerwise" else layers[: col + 1]
                plan = AblationPlan(mode=mode, fraction=fraction, layers=targets)
                out = suppress_topk(generator, plan, table, z_show)
                hwc = chw_to_hwc(out)[0]
                hue, degen = extract_bg_hue(hwc)
                if base_degen or degen:
                    dhue = float("nan")
                else:
                    dhue = float(circular_hue_distance(base_hue, hue))
                area = base_mask.sum()
                ddigit = 0.0 if area == 0 else float(
                    (np.abs(hwc - base_hwc).mean(axis=2) * base_mask).sum() / area)
                cells[mode][(digit, col)] = hwc
                stats.append({
                    "digit": digit, "mode": mode, "column": col, "layer": layer,
                    "dhue": dhue, "ddigit": ddigit,
                })
    return cells, baselines, stats


def render_grid(cells: dict, baselines: dict, digits, n_cols) -> np.ndarray:
    """Assemble a (rows*29+1, (cols+1)*29+1, 3) uint8 grid image; the first
    column shows the unablated baseline."""
    pad = 1
    rows = len(digits)
    height = rows * (28 + pad) + pad
    width = (n_cols + 1) * (28 + pad) + pad
    canvas = np.full((height, width, 3), 255, dtype=np.uint8)
    for r, digit in enumerate(digits):
        y = pad + r * (28 + pad)
        canvas[y : y + 28, pad : pad + 28] = np.rint(
            baselines[digit] * 255.0).astype(np.uint8)
        for c in range(n_cols):
            x = pad + (c + 1) * (28 + pad)
            canvas[y : y + 28, x : x + 28] = np.rint(
                cells[(digit, c)] * 255.0).astype(np.uint8)
    return canvas


def save_grid_png(path, cells, baselines, digits, n_cols):
    from PIL import Image

    Image.fromarray(render_grid(cells, baselines, digits, n_cols)).save(path)


def save_stats_jsonl(path, stats):
    with open(path, "w") as fh:
        for rec in stats:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
