"""Full downscaling networks assembled from :mod:`deepds.blocks`.

A model is ``head conv -> backbone (incl. upsampling) -> output module``.
The output module concatenates the backbone features, a localized
convolutional block over them, and a conv block over the static fields.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import blocks as B
from .preprocessing import SamplePair, parse_key_values

BACKBONES = ("convnet", "resnet", "densenet", "unet", "convnext")
MODES = ("train", "infer", "mc")


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class ArchitectureSpec:
    backbone: str = "resnet"
    upsampling: str = "SPC"
    sample_kind: str = "spatial"
    scale: int = 4
    n_blocks: int = 6
    filters: int = 32
    use_lcb: bool = True
    dropout_rate: float = 0.0
    attention: bool = False
    n_static_channels: int = 0
    n_predictor_channels: int = 0
    hr_shape: tuple[int, int] = (32, 32)
    statics_in_input: bool = True
    normalization: str = "none"
    activation: str = "relu"
    attention_reduction: int = 8
    output_attention: bool = True
    lcb_bottleneck: int = 8
    lcb_out_channels: int = 8
    lcb_kernel: int = 3
    static_filters: int = 16
    dense_growth: int = 12
    dense_layers: int = 2
    deconv_kernel: int = 3
    disc_filters: int = 32
    disc_blocks: int = 4

    def __post_init__(self):
        object.__setattr__(self, "hr_shape", tuple(int(v) for v in self.hr_shape))

    @property
    def n_input_channels(self) -> int:
        statics = self.n_static_channels if self.statics_in_input else 0
        return 1 + self.n_predictor_channels + statics

    @property
    def pre_upsampled(self) -> bool:
        return self.upsampling == "PIN"

    @property
    def spatiotemporal(self) -> bool:
        return self.sample_kind == "spatiotemporal"

    @property
    def lr_shape(self) -> tuple[int, int]:
        if self.pre_upsampled:
            return self.hr_shape
        return self.hr_shape[0] // self.scale, self.hr_shape[1] // self.scale

    def validate(self) -> "ArchitectureSpec":
        def bad(msg):
            raise SpecError(f"invalid spec: {msg}")

        if self.backbone not in BACKBONES:
            bad(f"unknown backbone {self.backbone!r}")
        if self.upsampling not in ("PIN", "RC", "DC", "SPC"):
            bad(f"unknown upsampling {self.upsampling!r}")
        if self.sample_kind not in ("spatial", "spatiotemporal"):
            bad(f"unknown sample kind {self.sample_kind!r}")
        if self.backbone == "unet" and (self.upsampling != "PIN" or self.spatiotemporal):
            bad("unet backbone is only available for pre-upsampled (PIN) spatial samples")
        if self.scale < 2:
            bad("scale must be >= 2")
        if self.hr_shape[0] % self.scale or self.hr_shape[1] % self.scale:
            bad(f"scale {self.scale} does not divide hr_shape {self.hr_shape}")
        if self.backbone == "unet" and (self.hr_shape[0] % 8 or self.hr_shape[1] % 8):
            bad("unet needs grid dims divisible by 8 (three pooling levels)")
        if self.n_blocks < 1 or self.filters < 1:
            bad("n_blocks and filters must be >= 1")
        if (self.attention or self.output_attention) and self.filters % self.attention_reduction:
            bad(f"bad reduction ratio: filters {self.filters} not divisible by {self.attention_reduction}")
        if not 0.0 <= self.dropout_rate < 1.0:
            bad("dropout_rate must lie in [0, 1)")
        return self

    def block_config(self, **changes) -> B.BlockConfig:
        cfg = B.BlockConfig(
            filters=self.filters,
            dropout_rate=self.dropout_rate,
            normalization=self.normalization,
            attention=self.attention,
            activation=self.activation,
            attention_reduction=self.attention_reduction,
        )
        return cfg.but(**changes) if changes else cfg

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(i) for i in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ArchitectureSpec":
        return cls.from_dict(parse_key_values(text))

    @classmethod
    def from_dict(cls, raw: dict) -> "ArchitectureSpec":
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(raw) - set(types)
        if unknown:
            raise SpecError(f"invalid spec: unknown fields {sorted(unknown)}")
        kwargs = {}
        for name, value in raw.items():
            kind = types[name]
            if kind == "bool":
                kwargs[name] = value if isinstance(value, bool) else str(value).lower() in ("true", "1", "yes")
            elif kind == "int":
                kwargs[name] = int(value)
            elif kind == "float":
                kwargs[name] = float(value)
            elif name == "hr_shape":
                kwargs[name] = tuple(int(v) for v in (value.split(",") if isinstance(value, str) else value))
            else:
                kwargs[name] = str(value)
        return cls(**kwargs)

    def spec_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def but(self, **changes) -> "ArchitectureSpec":
        return replace(self, **changes)


# --------------------------------------------------------------------------
# backbones
# --------------------------------------------------------------------------


def make_upsampling(spec: ArchitectureSpec, channels: int) -> nn.Module:
    if spec.upsampling == "SPC":
        return B.SubpixelUpsample(channels, spec.filters, spec.scale)
    if spec.upsampling == "DC":
        return B.DeconvUpsample(channels, spec.filters, spec.scale, spec.deconv_kernel)
    if spec.upsampling == "RC":
        return B.ResizeConvUpsample(channels, spec.filters, spec.scale)
    return nn.Identity()


class ConvnetBody(nn.Module):
    def __init__(self, spec: ArchitectureSpec, recurrent: bool):
        super().__init__()
        block = B.RecurrentConvBlock if recurrent else B.ConvBlock
        cfg = spec.block_config()
        self.blocks = nn.Sequential(*[block(spec.filters, cfg) for _ in range(spec.n_blocks)])

    def forward(self, x):
        return self.blocks(x)


class ResnetBody(nn.Module):
    """Residual blocks plus an outer skip: ``x + tail(blocks(x))``."""

    def __init__(self, spec: ArchitectureSpec, recurrent: bool):
        super().__init__()
        block = B.RecurrentResidualBlock if recurrent else B.ResidualBlock
        cfg = spec.block_config()
        self.recurrent = recurrent
        self.blocks = nn.Sequential(*[block(spec.filters, cfg) for _ in range(spec.n_blocks)])
        self.tail = nn.Conv2d(spec.filters, spec.filters, 3, padding=1)

    def forward(self, x):
        y = self.blocks(x)
        y = B.framewise(self.tail, y) if self.recurrent else self.tail(y)
        return x + y


class DensenetBody(nn.Module):
    """Dense blocks, each followed by a 1x1 transition; outer skip by concatenation + 1x1 conv."""

    def __init__(self, spec: ArchitectureSpec, recurrent: bool):
        super().__init__()
        block = B.RecurrentDenseBlock if recurrent else B.DenseBlock
        cfg = spec.block_config()
        self.recurrent = recurrent
        self.dense = nn.ModuleList()
        self.transitions = nn.ModuleList()
        for _ in range(spec.n_blocks):
            d = block(spec.filters, cfg, growth=spec.dense_growth, layers=spec.dense_layers)
            self.dense.append(d)
            self.transitions.append(nn.Conv2d(d.out_channels, spec.filters, 1))
        self.outer = nn.Conv2d(2 * spec.filters, spec.filters, 1)

    def _apply(self, module, x):
        return B.framewise(module, x) if self.recurrent else module(x)

    def forward(self, x):
        y = x
        for d, t in zip(self.dense, self.transitions):
            y = self._apply(t, d(y))
        dim = 2 if self.recurrent else 1
        return self._apply(self.outer, torch.cat([x, y], dim=dim))


class ConvnextBody(nn.Module):
    def __init__(self, spec: ArchitectureSpec, recurrent: bool):
        super().__init__()
        block = B.RecurrentConvNextBlock if recurrent else B.ConvNextBlock
        cfg = spec.block_config()
        self.blocks = nn.Sequential(*[block(spec.filters, cfg) for _ in range(spec.n_blocks)])

    def forward(self, x):
        return self.blocks(x)


class UnetBody(nn.Module):
    """Three encoder levels (F, 2F, 4F), an 8F bottleneck, and mirrored decoders."""

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        f = spec.filters
        cfg = spec.block_config()
        widths = [f, 2 * f, 4 * f]
        self.encoders = nn.ModuleList()
        c = f
        for w in widths:
            self.encoders.append(B.EncoderBlock(c, cfg.but(filters=w)))
            c = w
        self.bottleneck = B.ConvBlock(c, cfg.but(filters=8 * f))
        c = 8 * f
        self.decoders = nn.ModuleList()
        for w in reversed(widths):
            self.decoders.append(B.DecoderBlock(c, w, cfg.but(filters=w)))
            c = w

    def forward(self, x):
        skips = []
        for enc in self.encoders:
            x, s = enc(x)
            skips.append(s)
        x = self.bottleneck(x)
        for dec, s in zip(self.decoders, reversed(skips)):
            x = dec(x, s)
        return x


_BODIES = {
    "convnet": ConvnetBody,
    "resnet": ResnetBody,
    "densenet": DensenetBody,
    "convnext": ConvnextBody,
}


class Backbone(nn.Module):
    """Feature extractor at working resolution followed by the upsampling block.

    Sequence inputs are reduced to their last hidden state before upsampling.
    """

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        if spec.backbone == "unet":
            self.body = UnetBody(spec)
        else:
            self.body = _BODIES[spec.backbone](spec, recurrent=spec.spatiotemporal)
        self.upsample = make_upsampling(spec, spec.filters)
        self.out_channels = spec.filters

    def forward(self, x):
        x = self.body(x)
        if x.dim() == 5:
            x = x[:, -1]
        return self.upsample(x)


def build_backbone(spec: ArchitectureSpec) -> Backbone:
    return Backbone(spec)


# --------------------------------------------------------------------------
# output module and full model
# --------------------------------------------------------------------------


class OutputModule(nn.Module):
    def __init__(self, spec: ArchitectureSpec, in_channels: int):
        super().__init__()
        cfg = spec.block_config(attention=False)
        self.lcb = (
            B.LocalizedConvBlock(
                in_channels, spec.hr_shape, spec.lcb_bottleneck, spec.lcb_out_channels, spec.lcb_kernel
            )
            if spec.use_lcb
            else None
        )
        self.static_branch = (
            B.ConvBlock(spec.n_static_channels, cfg.but(filters=spec.static_filters))
            if spec.n_static_channels > 0
            else None
        )
        self.transition_in = (
            in_channels
            + (spec.lcb_out_channels if spec.use_lcb else 0)
            + (spec.static_filters if spec.n_static_channels > 0 else 0)
        )
        self.transition = nn.Conv2d(self.transition_in, spec.filters, 1)
        self.conv1 = B.ConvBlock(spec.filters, cfg.but(attention=spec.output_attention))
        self.conv2 = B.ConvBlock(spec.filters, cfg)
        self.final = nn.Conv2d(spec.filters, 1, 3, padding=1)
        self.hr_shape = spec.hr_shape

    def forward(self, features, statics=None):
        if tuple(features.shape[-2:]) != self.hr_shape:
            raise ValueError(f"static grid mismatch: features {tuple(features.shape[-2:])} vs {self.hr_shape}")
        parts = [features]
        if self.lcb is not None:
            parts.append(self.lcb(features))
        if self.static_branch is not None:
            if statics is None:
                raise ValueError("static fields are required by this model")
            if statics.shape[-2:] != features.shape[-2:]:
                raise ValueError("static grid mismatch")
            parts.append(self.static_branch(statics))
        x = self.transition(torch.cat(parts, dim=1))
        return self.final(self.conv2(self.conv1(x)))


def build_output_module(spec: ArchitectureSpec, in_channels: int | None = None) -> OutputModule:
    return OutputModule(spec, spec.filters if in_channels is None else in_channels)


class DownscalingModel(nn.Module):
    """``(lr_input, statics) -> (B, 1, Y, X)`` high-resolution field."""

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.head = nn.Conv2d(spec.n_input_channels, spec.filters, 3, padding=1)
        self.backbone = Backbone(spec)
        self.output = OutputModule(spec, self.backbone.out_channels)

    def check_input(self, lr, statics=None):
        spec = self.spec
        want_dim = 5 if spec.spatiotemporal else 4
        ch_axis = 2 if spec.spatiotemporal else 1
        if lr.dim() != want_dim or lr.shape[ch_axis] != spec.n_input_channels:
            raise ValueError(
                f"sample/spec mismatch: input shape {tuple(lr.shape)}, expected rank {want_dim} "
                f"with {spec.n_input_channels} channels"
            )
        if tuple(lr.shape[-2:]) != spec.lr_shape:
            raise ValueError(f"sample/spec mismatch: input grid {tuple(lr.shape[-2:])} vs {spec.lr_shape}")
        if spec.n_static_channels and (statics is None or statics.shape[1] != spec.n_static_channels):
            raise ValueError("sample/spec mismatch: static channels")

    def forward(self, lr, statics=None):
        self.check_input(lr, statics)
        if lr.dim() == 5:
            x = B.framewise(self.head, lr)
        else:
            x = self.head(lr)
        return self.output(self.backbone(x), statics)


def build_model(spec: ArchitectureSpec) -> DownscalingModel:
    return DownscalingModel(spec)


class Discriminator(nn.Module):
    """Conditional discriminator scoring ``(hr_candidate, lr_condition)`` in (0, 1).

    The condition is bilinearly resized to the candidate grid and concatenated
    on channels; strided conv blocks, global average pooling and a sigmoid follow.
    """

    def __init__(self, spec: ArchitectureSpec):
        super().__init__()
        self.spec = spec
        cfg = spec.block_config(attention=False, activation="leaky_relu", dropout_rate=0.0)
        c = 1 + spec.n_input_channels
        layers = []
        for i in range(spec.disc_blocks):
            w = spec.disc_filters * 2**i
            layers.append(B.ConvBlock(c, cfg.but(filters=w), stride=2))
            c = w
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(c, 1)

    def logits(self, hr, lr):
        if lr.dim() == 5:
            lr = lr[:, -1]
        if lr.shape[-2:] != hr.shape[-2:]:
            lr = F.interpolate(lr, size=tuple(hr.shape[-2:]), mode="bilinear", align_corners=False)
        z = self.features(torch.cat([hr, lr], dim=1)).mean(dim=(2, 3))
        return self.head(z).squeeze(-1)

    def forward(self, hr, lr):
        return torch.sigmoid(self.logits(hr, lr))


def build_discriminator(spec: ArchitectureSpec) -> Discriminator:
    return Discriminator(spec)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# --------------------------------------------------------------------------
# batching and modes
# --------------------------------------------------------------------------


def collate(samples: Sequence[SamplePair], dtype=torch.float32) -> dict:
    """Stack channels-last samples into channel-first tensors."""
    lr = np.stack([s.lr_input for s in samples])
    lr = np.moveaxis(lr, -1, -3)
    target = np.moveaxis(np.stack([s.hr_target for s in samples]), -1, 1)
    mask = np.moveaxis(np.stack([s.mask for s in samples]), -1, 1)
    batch = {
        "lr": torch.as_tensor(np.ascontiguousarray(lr), dtype=dtype),
        "target": torch.as_tensor(np.ascontiguousarray(target), dtype=dtype),
        "mask": torch.as_tensor(np.ascontiguousarray(mask), dtype=torch.bool),
        "statics": None,
    }
    if samples[0].statics is not None:
        st = np.moveaxis(np.stack([s.statics for s in samples]), -1, 1)
        batch["statics"] = torch.as_tensor(np.ascontiguousarray(st), dtype=dtype)
    return batch


def set_mode(model: nn.Module, mode: str) -> nn.Module:
    """``train``: training mode; ``infer``: eval mode; ``mc``: eval mode with dropout kept active."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    model.train(mode == "train")
    if mode == "mc":
        for m in model.modules():
            if isinstance(m, nn.Dropout):
                m.train(True)
    return model


def forward(model: DownscalingModel, sample, mode: str = "infer", dtype=None) -> torch.Tensor:
    """Run ``model`` on a :class:`SamplePair`, a list of them, or a collated batch."""
    if dtype is None:
        dtype = next(model.parameters()).dtype
    if isinstance(sample, SamplePair):
        batch = collate([sample], dtype)
    elif isinstance(sample, dict):
        batch = sample
    else:
        batch = collate(list(sample), dtype)
    set_mode(model, mode)
    if mode == "train":
        return model(batch["lr"], batch["statics"])
    with torch.no_grad():
        return model(batch["lr"], batch["statics"])
