"""Differentiable building blocks shared by the generator and discriminator:
runtime weight-scaled ("equalized") layers, per-channel shift-scale
modulation, and anti-aliased downsampling.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

LEAKY_SLOPE = 0.2


def leaky_relu(x, slope=LEAKY_SLOPE):
    return F.leaky_relu(x, slope)


class EqualizedLinear(nn.Module):
    """Linear layer with weights drawn from N(0,1) and rescaled at runtime.

    The effective weight is raw_weight * sqrt(2 / fan_in); the scale is fixed
    at construction so optimizer steps act on the unit-variance raws,
    equalizing the per-layer effective step size.
    """

    def __init__(self, in_features, out_features, bias_init=0.0):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = nn.Parameter(torch.randn(out_features, in_features))
        self.bias = nn.Parameter(torch.full((out_features,), float(bias_init)))
        self.runtime_scale = math.sqrt(2.0 / in_features)

    def forward(self, x):
        return F.linear(x, self.weight * self.runtime_scale, self.bias)


class EqualizedConv2d(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size, padding=0):
        super().__init__()
        self.padding = padding
        self.weight = nn.Parameter(
            torch.randn(out_channels, in_channels, kernel_size, kernel_size)
        )
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.runtime_scale = math.sqrt(2.0 / (in_channels * kernel_size**2))

    def forward(self, x):
        return F.conv2d(x, self.weight * self.runtime_scale, self.bias,
                        padding=self.padding)


class EqualizedConvTranspose2d(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1,
                 padding=0, output_padding=0):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding
        self.weight = nn.Parameter(
            torch.randn(in_channels, out_channels, kernel_size, kernel_size)
        )
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.runtime_scale = math.sqrt(2.0 / (in_channels * kernel_size**2))

    def forward(self, x):
        return F.conv_transpose2d(
            x, self.weight * self.runtime_scale, self.bias,
            stride=self.stride, padding=self.padding,
            output_padding=self.output_padding,
        )


class SSBlock(nn.Module):
    """Per-channel affine modulation of feature maps by the latent code.

    output_i = alpha_i(z) * x_i + beta_i(z), broadcast over the spatial grid.
    No normalization of x is applied before or after.  The alpha head is
    bias-initialized to 1 and the beta head to 0 so modulation starts near
    the identity.
    """

    def __init__(self, latent_dim, channels):
        super().__init__()
        self.channels = channels
        self.scale = EqualizedLinear(latent_dim, channels, bias_init=1.0)
        self.shift = EqualizedLinear(latent_dim, channels, bias_init=0.0)

    def forward(self, x, z):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(
                f"expected rank-4 input with {self.channels} channels, "
                f"got shape {tuple(x.shape)}"
            )
        alpha = self.scale(z)[:, :, None, None]
        beta = self.shift(z)[:, :, None, None]
        return alpha * x + beta


def _blur_kernel(channels, dtype, device):
    row = torch.tensor([1.0, 2.0, 1.0], dtype=dtype, device=device)
    k = torch.outer(row, row) / 16.0
    return k.expand(channels, 1, 3, 3)


def blurpool_downsample(x):
    """Shift-robust downsampling to ceil(n/2) spatial size.

    Stride-1 max pool (window 2, replicate-padded on the right/bottom so the
    map keeps its size), depthwise [1,2,1] binomial blur with replicate
    padding, then stride-2 subsampling.  Constant inputs pass through
    unchanged.
    """
    if x.ndim != 4:
        raise ValueError(f"expected rank-4 input, got shape {tuple(x.shape)}")
    if x.shape[-2] < 2 or x.shape[-1] < 2:
        raise ValueError("spatial dims must be at least 2")
    y = F.max_pool2d(F.pad(x, (0, 1, 0, 1), mode="replicate"), 2, stride=1)
    kernel = _blur_kernel(y.shape[1], y.dtype, y.device)
    y = F.conv2d(F.pad(y, (1, 1, 1, 1), mode="replicate"), kernel,
                 groups=y.shape[1])
    return y[..., ::2, ::2]


class BlurPool2d(nn.Module):
    def forward(self, x):
        return blurpool_downsample(x)
