"""Evaluation procedures: feature-space Frechet distance, digit-recovery
accuracy through the pretrained classifier, and the color-ring hue score
with its rotation/flip alignment search.

Ring score convention: hue fractions are first mapped to the half scale
(h/2, matching an H/360 representation whose H spans 0-180), and the score
is the plain squared difference minimized over all cyclic rotations and the
reversal of the generated ring's index order.  The reported degree figure is
360 x the unit score.  A proper circular-distance MSE is also emitted as an
auxiliary value; see the circular_hue_distance helper.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import linalg

from . import models
from .colormnist import hsv_to_rgb

DEGENERATE_SATURATION = 0.05


class FidNumericalError(ArithmeticError):
    """Covariance square root failed even after jitter."""


@dataclass
class MetricReport:
    kind: str
    value: float
    stderr: float = 0.0
    aux: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"kind": self.kind, "value": self.value, "stderr": self.stderr,
             "aux": self.aux},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "MetricReport":
        d = json.loads(line)
        return cls(d["kind"], d["value"], d["stderr"], d["aux"])


# --- feature-space Frechet distance ---

def fid(features_a, features_b, eps=1e-6) -> float:
    """||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2}).

    Each feature set must have more samples than dimensions so the
    covariance estimate has full rank; the matrix square root falls back to
    a jittered retry before failing.
    """
    fa = np.asarray(features_a, dtype=np.float64)
    fb = np.asarray(features_b, dtype=np.float64)
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[1] != fb.shape[1]:
        raise ValueError("feature sets must be 2-d with matching width")
    d = fa.shape[1]
    if fa.shape[0] <= d or fb.shape[0] <= d:
        raise ValueError(f"need more than {d} samples per set for rank-{d} covariance")
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    cov_a = np.cov(fa, rowvar=False)
    cov_b = np.cov(fb, rowvar=False)
    covmean, _ = linalg.sqrtm(cov_a @ cov_b, disp=False)
    if not np.isfinite(covmean).all():
        jitter = np.eye(d) * eps
        covmean, _ = linalg.sqrtm((cov_a + jitter) @ (cov_b + jitter), disp=False)
        if not np.isfinite(covmean).all():
            raise FidNumericalError("covariance square root did not converge")
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b)
                 - 2.0 * np.trace(covmean))


def classifier_features(classifier, images: torch.Tensor, batch=256) -> np.ndarray:
    """Penultimate-layer activations for a (n, 3, 28, 28) image tensor."""
    outs = []
    classifier.eval()
    with torch.no_grad():
        for i in range(0, images.shape[0], batch):
            outs.append(classifier.features(images[i : i + batch]).numpy())
    return np.concatenate(outs, axis=0)


# --- background-hue extraction ---

_CORNER = slice(0, 3), slice(25, 28)


def extract_bg_hue(image):
    """Background hue from the mean RGB of the four 3x3 corner patches.

    ``image`` is a (28, 28, 3) array in [0, 1].  Returns (hue, degenerate);
    saturation below 0.05 flags the hue as degenerate and reports 0.0.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (28, 28, 3):
        raise ValueError(f"expected (28, 28, 3) image, got {image.shape}")
    patches = [image[r, c] for r in _CORNER for c in _CORNER]
    rgb = np.concatenate([p.reshape(-1, 3) for p in patches]).mean(axis=0)
    maxc, minc = rgb.max(), rgb.min()
    sat = 0.0 if maxc <= 0.0 else (maxc - minc) / maxc
    if sat < DEGENERATE_SATURATION:
        return 0.0, True
    r, g, b = rgb
    span = maxc - minc
    if maxc == r:
        h = ((g - b) / span) % 6.0
    elif maxc == g:
        h = (b - r) / span + 2.0
    else:
        h = (r - g) / span + 4.0
    return float((h / 6.0) % 1.0), False


def circular_hue_distance(a, b):
    """min(|a-b|, 1-|a-b|): proper distance on the unit hue circle."""
    d = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) % 1.0
    return np.minimum(d, 1.0 - d)


# --- color rings ---

@dataclass
class ColorRing:
    hues: np.ndarray               # (n,) hue fractions in [0, 1)
    degenerate_fraction: float = 0.0
    unreliable: bool = False


def chw_to_hwc(images: torch.Tensor) -> np.ndarray:
    return images.detach().cpu().numpy().transpose(0, 2, 3, 1)


def generated_color_ring(generator_fn, rng: torch.Generator, digit=0, steps=900,
                         batch=128, noise=None) -> ColorRing:
    """Ring of background hues along a latent color interpolation.

    Step k targets hue k/steps through the code's color dims; the digit code
    is fixed and one noise draw is reused for every step so only the
    continuous factor moves.
    """
    if steps < 2:
        raise ValueError("need at least 2 interpolation steps")
    if noise is None:
        noise = torch.rand(models.NOISE_DIM, generator=rng)
    targets = np.arange(steps) / steps
    cat = torch.zeros(steps, models.NUM_DIGITS)
    cat[:, digit] = 1.0
    col = torch.from_numpy(hsv_to_rgb(targets)).float()
    codes = torch.cat([cat, col, noise.expand(steps, -1)], dim=1)
    hues = np.empty(steps)
    degenerate = np.zeros(steps, dtype=bool)
    with torch.no_grad():
        for i in range(0, steps, batch):
            images = chw_to_hwc(generator_fn(codes[i : i + batch]))
            for j, img in enumerate(images):
                hues[i + j], degenerate[i + j] = extract_bg_hue(img)
    frac = float(degenerate.mean())
    return ColorRing(hues, frac, frac > 0.10)


def standard_ring(steps: int) -> np.ndarray:
    return np.arange(steps) / steps


def _alignment_scores(ring: np.ndarray):
    """Score every candidate mapping (rotation x optional reversal).

    Returns (plain, circ): two (2, n) arrays of per-candidate means, where
    row 0 is the unreversed ring, row 1 the reversed one, and column r is
    the candidate that reads the ring starting at index r.
    """
    n = ring.shape[0]
    target = standard_ring(n)
    idx = (np.arange(n)[None, :] + np.arange(n)[:, None]) % n
    plain = np.empty((2, n))
    circ = np.empty((2, n))
    for flip, base in enumerate((ring, ring[::-1])):
        cand = base[idx]
        plain[flip] = (((target[None, :] - cand) / 2.0) ** 2).mean(axis=1)
        circ[flip] = (circular_hue_distance(target[None, :], cand) ** 2).mean(axis=1)
    return plain, circ


def hue_mse_best_alignment(ring: ColorRing) -> MetricReport:
    """Minimum ring score over all 2n rotation/reversal mappings.

    The internal order of the ring is never permuted.  ``value`` is the
    half-scale plain squared error; ``aux`` carries the 360x degree figure,
    the chosen offset/flip, and the circular-distance MSE of the same
    candidate family.
    """
    hues = np.asarray(ring.hues, dtype=np.float64)
    if hues.size == 0:
        raise ValueError("empty ring")
    plain, circ = _alignment_scores(hues)
    flip, offset = np.unravel_index(np.argmin(plain), plain.shape)
    value = float(plain[flip, offset])
    return MetricReport(
        kind="hue_mse",
        value=value,
        stderr=0.0,
        aux={
            "degrees": 360.0 * value,
            "offset": int(offset),
            "flipped": bool(flip),
            "circular_mse": float(circ.min()),
            "n_steps": int(hues.size),
            "degenerate_fraction": ring.degenerate_fraction,
            "unreliable": ring.unreliable,
        },
    )


def align_ring(ring: ColorRing, offset: int, flipped: bool) -> np.ndarray:
    hues = np.asarray(ring.hues, dtype=np.float64)
    if flipped:
        hues = hues[::-1]
    return np.roll(hues, -offset)


def random_ring_baseline(n_hues=100, trials=1000, rng=None) -> MetricReport:
    """Monte Carlo mean of the best-aligned score for randomly permuted rings."""
    if rng is None:
        rng = np.random.default_rng(0)
    base = standard_ring(n_hues)
    vals = np.empty(trials)
    for t in range(trials):
        plain, _ = _alignment_scores(base[rng.permutation(n_hues)])
        vals[t] = plain.min()
    return MetricReport(
        kind="hue_mse_random_baseline",
        value=float(vals.mean()),
        stderr=float(vals.std(ddof=1) / math.sqrt(trials)),
        aux={"degrees": 360.0 * float(vals.mean()), "trials": trials,
             "n_hues": n_hues},
    )


def linearity_report(aligned_hues) -> MetricReport:
    """Least-squares fit of index -> unwrapped hue for an aligned ring."""
    hues = np.asarray(aligned_hues, dtype=np.float64)
    if hues.size < 2:
        raise ValueError("need at least 2 ring entries")
    unwrapped = np.unwrap(hues * 2.0 * np.pi) / (2.0 * np.pi)
    x = np.arange(hues.size)
    slope, intercept = np.polyfit(x, unwrapped, 1)
    fitted = slope * x + intercept
    ss_res = float(((unwrapped - fitted) ** 2).sum())
    ss_tot = float(((unwrapped - unwrapped.mean()) ** 2).sum())
    if ss_tot == 0.0:
        r2 = 1.0 if ss_res == 0.0 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return MetricReport(
        kind="hue_linearity",
        value=float(r2),
        stderr=0.0,
        aux={"slope": float(slope), "intercept": float(intercept),
             "curve": unwrapped.tolist()},
    )


# --- digit-recovery accuracy ---

def discrete_accuracy(generator_fn, classifier, rng: torch.Generator,
                      n=1000, rounds=10, batch=250) -> MetricReport:
    """Fraction of generated images the classifier assigns to the intended
    digit, averaged over rounds; images carry random hue and noise codes."""
    if n < 1 or rounds < 1:
        raise ValueError("n and rounds must be positive")
    accs = np.empty(rounds)
    hits = np.zeros(models.NUM_DIGITS)
    counts = np.zeros(models.NUM_DIGITS)
    classifier.eval()
    with torch.no_grad():
        for r in range(rounds):
            codes = models.sample_latents(n, rng)
            intended = models.latent_digits(codes)
            preds = torch.empty(n, dtype=torch.long)
            for i in range(0, n, batch):
                chunk = generator_fn(codes[i : i + batch])
                preds[i : i + batch] = classifier(chunk).argmax(dim=1)
            correct = preds == intended
            accs[r] = correct.float().mean().item()
            for d in range(models.NUM_DIGITS):
                sel = intended == d
                hits[d] += correct[sel].sum().item()
                counts[d] += sel.sum().item()
    per_class = np.divide(hits, counts, out=np.zeros_like(hits),
                          where=counts > 0)
    stderr = float(accs.std(ddof=1) / math.sqrt(rounds)) if rounds > 1 else 0.0
    return MetricReport(
        kind="discrete_acc",
        value=float(accs.mean()),
        stderr=stderr,
        aux={"per_class": per_class.tolist(), "n": n, "rounds": rounds},
    )
