"""Building blocks for the downscaling networks.

All modules use PyTorch's ``(batch, channel, y, x)`` layout; sequences are
``(batch, time, channel, y, x)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

NORMALIZATIONS = ("none", "batch", "layer")


@dataclass(frozen=True)
class BlockConfig:
    filters: int
    kernel: int = 3
    dropout_rate: float = 0.0
    normalization: str = "none"
    attention: bool = False
    activation: str = "relu"
    attention_reduction: int = 8

    def __post_init__(self):
        if self.filters < 1:
            raise ValueError("filters must be >= 1")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {self.normalization!r}")

    def but(self, **changes) -> "BlockConfig":
        return replace(self, **changes)


def get_activation(name: str) -> nn.Module:
    name = name.lower()
    if name == "relu":
        return nn.ReLU()
    if name == "gelu":
        return nn.GELU()
    if name in ("leaky_relu", "lrelu"):
        return nn.LeakyReLU(0.2)
    if name in ("linear", "none", "identity"):
        return nn.Identity()
    raise ValueError(f"unknown activation {name!r}")


class ChannelLayerNorm(nn.Module):
    """Layer normalization over the channel axis of a ``(B, C, Y, X)`` tensor."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(dim=1, keepdim=True)
        var = (x - mu).pow(2).mean(dim=1, keepdim=True)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


def make_norm(kind: str, channels: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    if kind == "layer":
        return ChannelLayerNorm(channels)
    return nn.Identity()


def _check_spatial(x: torch.Tensor):
    if x.dim() == 5:
        raise ValueError("use recurrent variant for sequence (rank-4 sample) inputs")
    if x.dim() != 4:
        raise ValueError(f"expected a (B, C, Y, X) tensor, got shape {tuple(x.shape)}")


class ChannelAttention(nn.Module):
    """Squeeze-and-excitation style channel gating.

    Spatial average pooling, a 1x1 reduction conv, ReLU, a 1x1 expansion conv
    and a sigmoid give one weight in (0, 1) per channel.
    """

    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise ValueError(f"bad reduction ratio {reduction} for {channels} channels")
        hidden = channels // reduction
        self.reduce = nn.Conv2d(channels, hidden, 1)
        self.expand = nn.Conv2d(hidden, channels, 1)

    def weights(self, x):
        z = x.mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.expand(F.relu(self.reduce(z))))

    def forward(self, x):
        return x * self.weights(x)


class ConvBlock(nn.Module):
    """Two same-padded convolutions, each followed by norm, activation and dropout.

    The optional channel attention is applied last.
    """

    def __init__(self, in_channels: int, cfg: BlockConfig, stride: int = 1):
        super().__init__()
        pad = cfg.kernel // 2
        self.cfg = cfg
        self.conv1 = nn.Conv2d(in_channels, cfg.filters, cfg.kernel, stride=stride, padding=pad)
        self.norm1 = make_norm(cfg.normalization, cfg.filters)
        self.act1 = get_activation(cfg.activation)
        self.drop1 = nn.Dropout(cfg.dropout_rate)
        self.conv2 = nn.Conv2d(cfg.filters, cfg.filters, cfg.kernel, padding=pad)
        self.norm2 = make_norm(cfg.normalization, cfg.filters)
        self.act2 = get_activation(cfg.activation)
        self.drop2 = nn.Dropout(cfg.dropout_rate)
        self.attention = (
            ChannelAttention(cfg.filters, cfg.attention_reduction) if cfg.attention else nn.Identity()
        )

    def forward(self, x):
        _check_spatial(x)
        x = self.drop1(self.act1(self.norm1(self.conv1(x))))
        x = self.drop2(self.act2(self.norm2(self.conv2(x))))
        return self.attention(x)


class ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, cfg: BlockConfig):
        super().__init__()
        if in_channels != cfg.filters:
            raise ValueError(f"skip shape mismatch: {in_channels} input channels vs {cfg.filters} filters")
        self.body = ConvBlock(in_channels, cfg)

    def forward(self, x):
        if x.shape[1] != self.body.cfg.filters:
            raise ValueError("skip shape mismatch")
        return x + self.body(x)


class DenseBlock(nn.Module):
    """Each inner conv block sees the concatenation of all previous feature maps."""

    def __init__(self, in_channels: int, cfg: BlockConfig, growth: int = 12, layers: int = 2):
        super().__init__()
        self.layers = nn.ModuleList(
            ConvBlock(in_channels + i * growth, cfg.but(filters=growth, attention=False))
            for i in range(layers)
        )
        self.out_channels = in_channels + layers * growth

    def forward(self, x):
        for layer in self.layers:
            x = torch.cat([x, layer(x)], dim=1)
        return x


class ConvNextBlock(nn.Module):
    """Depthwise 7x7 conv, layer norm, 4x pointwise expansion, GELU, projection, residual."""

    def __init__(self, in_channels: int, cfg: BlockConfig, kernel: int = 7, expansion: int = 4):
        super().__init__()
        if in_channels != cfg.filters:
            raise ValueError(f"skip shape mismatch: {in_channels} input channels vs {cfg.filters} filters")
        c = cfg.filters
        self.expansion_channels = expansion * c
        self.dwconv = nn.Conv2d(c, c, kernel, padding=kernel // 2, groups=c)
        self.norm = ChannelLayerNorm(c)
        self.pwconv1 = nn.Conv2d(c, self.expansion_channels, 1)
        self.act = nn.GELU()
        self.pwconv2 = nn.Conv2d(self.expansion_channels, c, 1)
        self.drop = nn.Dropout(cfg.dropout_rate)

    def forward(self, x):
        _check_spatial(x)
        if x.shape[1] != self.dwconv.in_channels:
            raise ValueError("skip shape mismatch")
        y = self.pwconv2(self.act(self.pwconv1(self.norm(self.dwconv(x)))))
        return x + self.drop(y)


class ConvLSTMCell(nn.Module):
    """Convolutional LSTM cell without peephole terms."""

    def __init__(self, in_channels: int, hidden: int, kernel: int = 3):
        super().__init__()
        self.hidden = hidden
        self.gates = nn.Conv2d(in_channels + hidden, 4 * hidden, kernel, padding=kernel // 2)

    def init_state(self, x):
        b, _, ny, nx = x.shape
        zeros = x.new_zeros(b, self.hidden, ny, nx)
        return zeros, zeros.clone()

    def forward(self, x, h_prev, c_prev):
        if h_prev.shape != c_prev.shape or h_prev.shape[-2:] != x.shape[-2:] or h_prev.shape[1] != self.hidden:
            raise ValueError("state shape mismatch")
        i, f, o, g = self.gates(torch.cat([x, h_prev], dim=1)).chunk(4, dim=1)
        c = torch.sigmoid(f) * c_prev + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c


class ConvLSTM(nn.Module):
    """Runs a :class:`ConvLSTMCell` over a ``(B, T, C, Y, X)`` sequence, returning all hidden states."""

    def __init__(self, in_channels: int, hidden: int, kernel: int = 3):
        super().__init__()
        self.cell = ConvLSTMCell(in_channels, hidden, kernel)

    def forward(self, x):
        h, c = self.cell.init_state(x[:, 0])
        out = []
        for t in range(x.shape[1]):
            h, c = self.cell(x[:, t], h, c)
            out.append(h)
        return torch.stack(out, dim=1)


def framewise(module: nn.Module, x: torch.Tensor) -> torch.Tensor:
    b, t = x.shape[:2]
    y = module(x.reshape(b * t, *x.shape[2:]))
    return y.reshape(b, t, *y.shape[1:])


class RecurrentConvBlock(nn.Module):
    """The conv block with its two convolutions replaced by ConvLSTM layers."""

    def __init__(self, in_channels: int, cfg: BlockConfig):
        super().__init__()
        self.cfg = cfg
        self.lstm1 = ConvLSTM(in_channels, cfg.filters, cfg.kernel)
        self.lstm2 = ConvLSTM(cfg.filters, cfg.filters, cfg.kernel)
        self.post1 = nn.Sequential(
            make_norm(cfg.normalization, cfg.filters), get_activation(cfg.activation), nn.Dropout(cfg.dropout_rate)
        )
        self.post2 = nn.Sequential(
            make_norm(cfg.normalization, cfg.filters), get_activation(cfg.activation), nn.Dropout(cfg.dropout_rate)
        )
        self.attention = (
            ChannelAttention(cfg.filters, cfg.attention_reduction) if cfg.attention else nn.Identity()
        )

    def forward(self, x):
        if x.dim() != 5:
            raise ValueError("recurrent blocks expect (B, T, C, Y, X) sequences")
        x = framewise(self.post1, self.lstm1(x))
        x = framewise(self.post2, self.lstm2(x))
        return framewise(self.attention, x)


class RecurrentResidualBlock(nn.Module):
    def __init__(self, in_channels: int, cfg: BlockConfig):
        super().__init__()
        if in_channels != cfg.filters:
            raise ValueError("skip shape mismatch")
        self.body = RecurrentConvBlock(in_channels, cfg)

    def forward(self, x):
        return x + self.body(x)


class RecurrentDenseBlock(nn.Module):
    def __init__(self, in_channels: int, cfg: BlockConfig, growth: int = 12, layers: int = 2):
        super().__init__()
        self.layers = nn.ModuleList(
            RecurrentConvBlock(in_channels + i * growth, cfg.but(filters=growth, attention=False))
            for i in range(layers)
        )
        self.out_channels = in_channels + layers * growth

    def forward(self, x):
        for layer in self.layers:
            x = torch.cat([x, layer(x)], dim=2)
        return x


class RecurrentConvNextBlock(nn.Module):
    """A ConvLSTM layer followed by a framewise ConvNeXt block, with a residual connection."""

    def __init__(self, in_channels: int, cfg: BlockConfig):
        super().__init__()
        if in_channels != cfg.filters:
            raise ValueError("skip shape mismatch")
        self.lstm = ConvLSTM(in_channels, cfg.filters, cfg.kernel)
        self.convnext = ConvNextBlock(cfg.filters, cfg)

    def forward(self, x):
        return x + framewise(self.convnext, self.lstm(x))


class LocallyConnected2d(nn.Module):
    """Same-padded convolution-like layer whose weights are not shared across positions.

    ``weight`` has shape ``(Y, X, k, k, C_in, C_out)`` and ``bias`` ``(Y, X, C_out)``.
    """

    def __init__(self, in_channels: int, out_channels: int, grid_shape: tuple[int, int], kernel: int = 3):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        ny, nx = grid_shape
        self.grid_shape = (ny, nx)
        self.kernel = kernel
        self.weight = nn.Parameter(torch.empty(ny, nx, kernel, kernel, in_channels, out_channels))
        self.bias = nn.Parameter(torch.zeros(ny, nx, out_channels))
        bound = 1.0 / (kernel * kernel * in_channels) ** 0.5
        nn.init.uniform_(self.weight, -bound, bound)

    def forward(self, x):
        b, c, ny, nx = x.shape
        if (ny, nx) != self.grid_shape:
            raise ValueError(f"locally connected layer built for {self.grid_shape}, got {(ny, nx)}")
        k = self.kernel
        patches = F.unfold(x, k, padding=k // 2)  # (B, C*k*k, L), channel-major
        w = self.weight.reshape(ny * nx, k, k, c, -1).permute(0, 3, 1, 2, 4).reshape(ny * nx, c * k * k, -1)
        out = torch.einsum("bjl,ljo->bol", patches, w)
        out = out + self.bias.reshape(ny * nx, -1).t()[None]
        return out.reshape(b, -1, ny, nx)


class LocalizedConvBlock(nn.Module):
    """1x1 bottleneck followed by a locally connected layer with per-position biases."""

    def __init__(
        self,
        in_channels: int,
        grid_shape: tuple[int, int],
        bottleneck: int = 8,
        out_channels: int = 8,
        kernel: int = 3,
    ):
        super().__init__()
        self.bottleneck = nn.Conv2d(in_channels, bottleneck, 1)
        self.local = LocallyConnected2d(bottleneck, out_channels, grid_shape, kernel)
        self.out_channels = out_channels

    def forward(self, x):
        return self.local(self.bottleneck(x))


def phase_shift(x: torch.Tensor, scale: int) -> torch.Tensor:
    """``(B, C*s*s, Y, X) -> (B, C, Y*s, X*s)`` with ``out[c, h*s+i, w*s+j] = in[c*s*s + i*s + j, h, w]``."""
    b, cs2, ny, nx = x.shape
    if cs2 % (scale * scale):
        raise ValueError(f"bad channel count for phase shift: {cs2} not divisible by {scale * scale}")
    c = cs2 // (scale * scale)
    x = x.reshape(b, c, scale, scale, ny, nx).permute(0, 1, 4, 2, 5, 3)
    return x.reshape(b, c, ny * scale, nx * scale)


class SubpixelUpsample(nn.Module):
    def __init__(self, in_channels: int, filters: int, scale: int, kernel: int = 3):
        super().__init__()
        self.scale = scale
        self.conv = nn.Conv2d(in_channels, filters * scale * scale, kernel, padding=kernel // 2)

    def forward(self, x):
        return phase_shift(self.conv(x), self.scale)


class DeconvUpsample(nn.Module):
    """Stride-``s`` transposed convolution producing exactly ``s`` times the input grid."""

    def __init__(self, in_channels: int, filters: int, scale: int, kernel: int = 3):
        super().__init__()
        pad = kernel // 2
        out_pad = scale + 2 * pad - kernel
        if not 0 <= out_pad < scale:
            raise ValueError(f"kernel {kernel} incompatible with stride {scale}")
        self.deconv = nn.ConvTranspose2d(
            in_channels, filters, kernel, stride=scale, padding=pad, output_padding=out_pad
        )

    def forward(self, x):
        return self.deconv(x)


def checkerboard_score(y: torch.Tensor, scale: int) -> float:
    """Relative spread of the per-phase means of ``y``; ~0 for outputs without checkerboarding."""
    phases = torch.stack(
        [y[..., i::scale, j::scale].mean() for i in range(scale) for j in range(scale)]
    )
    return float((phases.std() / (phases.abs().mean() + 1e-12)).detach())


class ResizeConvUpsample(nn.Module):
    def __init__(self, in_channels: int, filters: int, scale: int, kernel: int = 3):
        super().__init__()
        self.scale = scale
        self.conv = nn.Conv2d(in_channels, filters, kernel, padding=kernel // 2)

    def resize(self, x):
        if self.scale == 1:
            return x
        return F.interpolate(x, scale_factor=self.scale, mode="bilinear", align_corners=False)

    def forward(self, x):
        return self.conv(self.resize(x))


class EncoderBlock(nn.Module):
    """Conv block then 2x2 max pooling. Returns ``(pooled, features_before_pooling)``."""

    def __init__(self, in_channels: int, cfg: BlockConfig):
        super().__init__()
        self.conv = ConvBlock(in_channels, cfg)

    def forward(self, x):
        skip = self.conv(x)
        return F.max_pool2d(skip, 2), skip


class DecoderBlock(nn.Module):
    """Bilinear 2x upsampling, concatenation with the encoder skip, conv block."""

    def __init__(self, in_channels: int, skip_channels: int, cfg: BlockConfig):
        super().__init__()
        self.conv = ConvBlock(in_channels + skip_channels, cfg)

    def forward(self, x, skip):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        if x.shape[-2:] != skip.shape[-2:]:
            raise ValueError(f"skip shape mismatch: {tuple(x.shape[-2:])} vs {tuple(skip.shape[-2:])}")
        return self.conv(torch.cat([x, skip], dim=1))
