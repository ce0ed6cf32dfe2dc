"""Latent codes, the modulated generator and its bias-only ablated variant,
the three-headed critic, and the evaluation classifier.

Generator stack (28x28 output):
    Dense(100 -> c0*4*4) -> [mod] -> Deconv D1 (4->7, c0->c1) -> [mod]
    -> ResBlock{conv 11, conv 12; c1} -> Deconv D2 (7->14, c1->c2) -> [mod]
    -> ResBlock{conv 21, conv 22; c2} -> Deconv D3 (14->28, c2->c3) -> [mod]
    -> Conv C (3x3, c3->3) -> sigmoid
with [mod] = leaky-relu(SSBlock(., z)) at every site when the compensation
path is enabled; with it disabled the sites reduce to plain activations and
each layer's own per-channel bias plays the learned-shift role, so both
variants share depth and receptive field.
"""

from dataclasses import asdict, dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint
from .colormnist import GRID_HUES, hsv_to_rgb
from .nn_core import (
    BlurPool2d,
    EqualizedConv2d,
    EqualizedConvTranspose2d,
    EqualizedLinear,
    SSBlock,
    leaky_relu,
)

LATENT_DIM = 100
NUM_DIGITS = 10
COLOR_DIM = 3
NOISE_DIM = LATENT_DIM - NUM_DIGITS - COLOR_DIM

# Weight layers the gradient-score probe can ablate, in generator order.
ABLATABLE_LAYERS = ("D1", "11", "12", "D2", "21", "22", "D3", "C")


def make_latent(digit, hue, rng: torch.Generator) -> torch.Tensor:
    """One latent code: 10 one-hot digit dims, 3 background RGB dims, 87
    uniform noise dims.  ``digit=None`` / ``hue=None`` draw uniformly (hue
    over the 100 grid hues)."""
    digits = None if digit is None else torch.tensor([digit])
    hues = None if hue is None else np.array([hue])
    return sample_latents(1, rng, digits=digits, hues=hues)[0]


def sample_latents(n, rng: torch.Generator, digits=None, hues=None) -> torch.Tensor:
    if digits is None:
        digits = torch.randint(0, NUM_DIGITS, (n,), generator=rng)
    else:
        digits = torch.as_tensor(digits, dtype=torch.long)
        if digits.shape != (n,):
            raise ValueError(f"need {n} digits, got shape {tuple(digits.shape)}")
        if digits.min() < 0 or digits.max() >= NUM_DIGITS:
            raise ValueError("digit out of range 0-9")
    if hues is None:
        hues = torch.randint(0, GRID_HUES, (n,), generator=rng).numpy() / GRID_HUES
    else:
        hues = np.asarray(hues, dtype=np.float64)
        if hues.shape != (n,):
            raise ValueError(f"need {n} hues, got shape {hues.shape}")
    cat = torch.nn.functional.one_hot(digits, NUM_DIGITS).float()
    col = torch.from_numpy(hsv_to_rgb(hues)).float()
    noise = torch.rand(n, NOISE_DIM, generator=rng)
    return torch.cat([cat, col, noise], dim=1)


def latent_digits(codes: torch.Tensor) -> torch.Tensor:
    return codes[:, :NUM_DIGITS].argmax(dim=1)


def latent_colors(codes: torch.Tensor) -> torch.Tensor:
    return codes[:, NUM_DIGITS : NUM_DIGITS + COLOR_DIM]


@dataclass
class GeneratorConfig:
    latent_dim: int = LATENT_DIM
    base_channels: int = 256
    ic_enabled: bool = True

    def __post_init__(self):
        if self.base_channels % 8 or self.base_channels < 8:
            raise ValueError("base_channels must be a positive multiple of 8")

    @property
    def widths(self):
        c0 = self.base_channels
        return c0, c0 // 2, c0 // 4, c0 // 8


# (site name, which width index modulates it)
_GEN_SITES = (
    ("dense", 0), ("D1", 1), ("11", 1), ("12", 1),
    ("D2", 2), ("21", 2), ("22", 2), ("D3", 3),
)

SiteHook = Callable[[str, torch.Tensor], torch.Tensor]


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        c0, c1, c2, c3 = config.widths
        L = config.latent_dim
        self.dense = EqualizedLinear(L, c0 * 4 * 4)
        self.d1 = EqualizedConvTranspose2d(c0, c1, 4, stride=2, padding=2,
                                           output_padding=1)
        self.conv11 = EqualizedConv2d(c1, c1, 3, padding=1)
        self.conv12 = EqualizedConv2d(c1, c1, 3, padding=1)
        self.d2 = EqualizedConvTranspose2d(c1, c2, 4, stride=2, padding=1)
        self.conv21 = EqualizedConv2d(c2, c2, 3, padding=1)
        self.conv22 = EqualizedConv2d(c2, c2, 3, padding=1)
        self.d3 = EqualizedConvTranspose2d(c2, c3, 4, stride=2, padding=1)
        self.convc = EqualizedConv2d(c3, 3, 3, padding=1)
        if config.ic_enabled:
            widths = config.widths
            self.mod = nn.ModuleDict(
                {name: SSBlock(L, widths[w]) for name, w in _GEN_SITES}
            )
        else:
            self.mod = nn.ModuleDict()

    def ablatable_channels(self) -> dict:
        c0, c1, c2, c3 = self.config.widths
        return {"D1": c1, "11": c1, "12": c1, "D2": c2,
                "21": c2, "22": c2, "D3": c3, "C": 3}

    def _site(self, name, h, z, hook):
        if self.config.ic_enabled:
            h = self.mod[name](h, z)
        h = leaky_relu(h)
        if hook is not None:
            h = hook(name, h)
        return h

    def forward(self, z, site_hook: Optional[SiteHook] = None):
        if z.ndim != 2 or z.shape[1] != self.config.latent_dim:
            raise ValueError(
                f"latent batch must be (n, {self.config.latent_dim}), "
                f"got {tuple(z.shape)}"
            )
        c0 = self.config.widths[0]
        h = self.dense(z).reshape(z.shape[0], c0, 4, 4)
        h = self._site("dense", h, z, site_hook)
        h = self._site("D1", self.d1(h), z, site_hook)
        r = self._site("11", self.conv11(h), z, site_hook)
        r = self._site("12", self.conv12(r), z, site_hook)
        h = h + r
        h = self._site("D2", self.d2(h), z, site_hook)
        r = self._site("21", self.conv21(h), z, site_hook)
        r = self._site("22", self.conv22(r), z, site_hook)
        h = h + r
        h = self._site("D3", self.d3(h), z, site_hook)
        x = torch.sigmoid(self.convc(h))
        if site_hook is not None:
            x = site_hook("C", x)
        return x


def modulation_param_count(config: GeneratorConfig) -> int:
    """Parameters the compensation path adds: 2*(latent*C + C) per site."""
    widths = config.widths
    return sum(2 * (config.latent_dim * widths[w] + widths[w])
               for _, w in _GEN_SITES)


@dataclass
class DiscriminatorConfig:
    base_channels: int = 32
    feature_dim: int = 256

    def __post_init__(self):
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")


class _ConvTrunk(nn.Module):
    """Shared conv stack: 3 blur-pooled conv stages then a dense feature layer."""

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        b = config.base_channels
        self.conv1 = EqualizedConv2d(3, b, 3, padding=1)
        self.conv2 = EqualizedConv2d(b, 2 * b, 3, padding=1)
        self.conv3 = EqualizedConv2d(2 * b, 4 * b, 3, padding=1)
        self.pool = BlurPool2d()
        self.dense = EqualizedLinear(4 * b * 4 * 4, config.feature_dim)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1:] != (3, 28, 28):
            raise ValueError(f"images must be (n, 3, 28, 28), got {tuple(x.shape)}")
        h = self.pool(leaky_relu(self.conv1(x)))   # 28 -> 14
        h = self.pool(leaky_relu(self.conv2(h)))   # 14 -> 7
        h = self.pool(leaky_relu(self.conv3(h)))   # 7 -> 4
        return leaky_relu(self.dense(h.flatten(1)))


class DiscriminatorOutput(NamedTuple):
    critic: torch.Tensor     # (n,) unbounded scores
    cat_logits: torch.Tensor  # (n, 10)
    con_pred: torch.Tensor   # (n, 3) in (0, 1)


class Discriminator(nn.Module):
    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        self.trunk = _ConvTrunk(config)
        self.critic_head = EqualizedLinear(config.feature_dim, 1)
        self.cat_head = EqualizedLinear(config.feature_dim, NUM_DIGITS)
        self.con_head = EqualizedLinear(config.feature_dim, COLOR_DIM)

    def features(self, x):
        return self.trunk(x)

    def forward(self, x) -> DiscriminatorOutput:
        h = self.trunk(x)
        return DiscriminatorOutput(
            critic=self.critic_head(h).squeeze(1),
            cat_logits=self.cat_head(h),
            con_pred=torch.sigmoid(self.con_head(h)),
        )

    def critic_score(self, x) -> torch.Tensor:
        return self.critic_head(self.trunk(x)).squeeze(1)


class Classifier(nn.Module):
    """12-way evaluation classifier built on the discriminator trunk."""

    NUM_CLASSES = 12

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        self.trunk = _ConvTrunk(config)
        self.head = EqualizedLinear(config.feature_dim, self.NUM_CLASSES)

    def features(self, x):
        """Penultimate 256-dim activations; the feature space for fid."""
        return self.trunk(x)

    def forward(self, x):
        return self.head(self.trunk(x))


def build_generator(config: GeneratorConfig, seed: int) -> Generator:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return Generator(config)


def build_discriminator(config: DiscriminatorConfig, seed: int) -> Discriminator:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return Discriminator(config)


def build_classifier(config: DiscriminatorConfig, seed: int) -> Classifier:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return Classifier(config)


# --- checkpoint plumbing ---

_CONFIG_TYPES = {
    "generator": GeneratorConfig,
    "discriminator": DiscriminatorConfig,
    "classifier": DiscriminatorConfig,
}
_BUILDERS = {
    "generator": lambda cfg: Generator(cfg),
    "discriminator": lambda cfg: Discriminator(cfg),
    "classifier": lambda cfg: Classifier(cfg),
}


def state_arrays(module: nn.Module, prefix="") -> dict:
    return {
        prefix + name: tensor.detach().cpu().numpy().astype(np.float32)
        for name, tensor in module.state_dict().items()
    }


def load_state_arrays(module: nn.Module, arrays: dict, prefix=""):
    state = {}
    for name, tensor in module.state_dict().items():
        key = prefix + name
        if key not in arrays:
            raise checkpoint.CheckpointError(f"checkpoint missing array {key!r}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise checkpoint.CheckpointError(
                f"array {key!r} has shape {arr.shape}, expected {tuple(tensor.shape)}"
            )
        state[name] = torch.from_numpy(arr.copy())
    module.load_state_dict(state)


def save_model(path, kind: str, module: nn.Module, step: int, extra: dict | None = None):
    if kind not in _CONFIG_TYPES:
        raise ValueError(f"unknown model kind {kind!r}")
    config = asdict(module.config)
    manifest = {
        "kind": kind,
        "config": config,
        "spec_hash": checkpoint.spec_hash(config),
        "step": step,
    }
    if extra:
        manifest.update(extra)
    checkpoint.save_checkpoint(path, manifest, state_arrays(module))


def load_model(path, expected_kind: str | None = None):
    manifest, arrays = checkpoint.load_checkpoint(path)
    kind = manifest.get("kind")
    if expected_kind is not None and kind != expected_kind:
        raise checkpoint.CheckpointError(
            f"checkpoint holds a {kind!r} model, expected {expected_kind!r}"
        )
    if kind not in _CONFIG_TYPES:
        raise checkpoint.CheckpointError(f"unknown model kind {kind!r}")
    config = _CONFIG_TYPES[kind](**manifest["config"])
    if checkpoint.spec_hash(asdict(config)) != manifest.get("spec_hash"):
        raise checkpoint.CheckpointError("spec hash mismatch: config was altered")
    module = _BUILDERS[kind](config)
    load_state_arrays(module, arrays)
    module.eval()
    return module, manifest
