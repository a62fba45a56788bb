"""Scaling and construction of low/high-resolution training pairs.

Two training regimes are supported:

* ``MOS``: the low-resolution input comes from an explicit coarse dataset,
  time-aligned with the high-resolution reference.
* ``PerfectProg``: the low-resolution input is synthesized by block-mean
  coarsening of the high-resolution reference itself.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .datacube import DataCube, StaticFieldSet, regrid_bilinear

logger = logging.getLogger(__name__)

REGIMES = ("MOS", "PerfectProg")
UPSAMPLINGS = ("PIN", "RC", "DC", "SPC")
SAMPLE_KINDS = ("spatial", "spatiotemporal")
SCALER_KINDS = ("standard", "minmax")


# --------------------------------------------------------------------------
# scalers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalerState:
    """Global statistics of a fitted scaler. Immutable once built."""

    kind: str
    mean: float = float("nan")
    std: float = float("nan")
    min: float = float("nan")
    max: float = float("nan")
    fitted: bool = False

    def __post_init__(self):
        if self.kind not in SCALER_KINDS:
            raise ValueError(f"unknown scaler kind {self.kind!r}")
        if self.fitted:
            if self.kind == "standard" and not self.std > 0:
                raise ValueError("standard scaler needs std > 0")
            if self.kind == "minmax" and not self.max > self.min:
                raise ValueError("minmax scaler needs max > min")

    def _check(self):
        if not self.fitted:
            raise RuntimeError("scaler not fitted")

    def transform(self, x):
        self._check()
        if self.kind == "standard":
            return (x - self.mean) / self.std
        return (x - self.min) / (self.max - self.min)

    def inverse_transform(self, x):
        self._check()
        if self.kind == "standard":
            return x * self.std + self.mean
        return x * (self.max - self.min) + self.min

    def to_text(self) -> str:
        lines = [f"kind = {self.kind}", f"fitted = {str(self.fitted).lower()}"]
        keys = ("mean", "std") if self.kind == "standard" else ("min", "max")
        lines += [f"{k} = {getattr(self, k)!r}" for k in keys]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ScalerState":
        kv = parse_key_values(text)
        kwargs = {k: float(kv[k]) for k in ("mean", "std", "min", "max") if k in kv}
        return cls(kind=kv["kind"], fitted=kv.get("fitted", "false") == "true", **kwargs)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_text())
        return path

    @classmethod
    def load(cls, path) -> "ScalerState":
        return cls.from_text(Path(path).read_text())


def parse_key_values(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"malformed line: {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _values(data) -> np.ndarray:
    return data.values if isinstance(data, DataCube) else np.asarray(data, dtype=float)


def fit_scaler(kind: str, data) -> ScalerState:
    """Fit global statistics over every non-NaN cell of ``data``."""
    values = _values(data)
    valid = values[np.isfinite(values)]
    if valid.size == 0:
        raise ValueError("no valid data")
    if kind == "standard":
        return ScalerState("standard", mean=float(valid.mean()), std=float(valid.std()), fitted=True)
    if kind == "minmax":
        return ScalerState("minmax", min=float(valid.min()), max=float(valid.max()), fitted=True)
    raise ValueError(f"unknown scaler kind {kind!r}")


def transform(state: ScalerState, data):
    if isinstance(data, DataCube):
        return data.with_values(state.transform(data.values))
    return state.transform(np.asarray(data, dtype=float))


def inverse_transform(state: ScalerState, data):
    if isinstance(data, DataCube):
        return data.with_values(state.inverse_transform(data.values))
    return state.inverse_transform(np.asarray(data, dtype=float))


# --------------------------------------------------------------------------
# resampling
# --------------------------------------------------------------------------


def coarsen(field: np.ndarray, scale: int, axes: tuple[int, int] | None = None) -> np.ndarray:
    """NaN-aware block mean over ``scale x scale`` blocks.

    ``axes`` defaults to ``(0, 1)`` for rank-2 input and ``(1, 2)`` otherwise,
    i.e. ``(time, lat, lon[, channel])`` layout. All-NaN blocks give NaN.
    """
    field = np.asarray(field, dtype=float)
    if axes is None:
        axes = (0, 1) if field.ndim == 2 else (1, 2)
    ay, ax = (a % field.ndim for a in axes)
    ny, nx = field.shape[ay], field.shape[ax]
    if scale < 1 or ny % scale or nx % scale:
        raise ValueError(f"incompatible scale {scale} for grid {(ny, nx)}")
    moved = np.moveaxis(field, (ay, ax), (-2, -1))
    lead = moved.shape[:-2]
    blocks = moved.reshape(*lead, ny // scale, scale, nx // scale, scale)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=RuntimeWarning)
        out = np.nanmean(blocks, axis=(-3, -1))
    return np.moveaxis(out, (-2, -1), (ay, ax))


def coarsen_coords(coord: np.ndarray, scale: int) -> np.ndarray:
    coord = np.asarray(coord, dtype=float)
    return coord.reshape(-1, scale).mean(axis=1)


def bicubic_resize(field: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Bicubic resize over the last two axes (half-pixel aligned grid cells)."""
    field = np.asarray(field, dtype=float)
    lead = field.shape[:-2]
    x = torch.from_numpy(field.reshape(-1, 1, *field.shape[-2:]).copy())
    y = F.interpolate(x, size=tuple(out_shape), mode="bicubic", align_corners=False)
    return y.numpy().reshape(*lead, *out_shape)


# --------------------------------------------------------------------------
# pairing
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PairingConfig:
    regime: str = "PerfectProg"
    upsampling: str = "SPC"
    scale: int = 4
    sample_kind: str = "spatial"
    window_length: int = 8
    statics_in_input: bool = True

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.upsampling not in UPSAMPLINGS:
            raise ValueError(f"unknown upsampling {self.upsampling!r}; expected one of {UPSAMPLINGS}")
        if self.sample_kind not in SAMPLE_KINDS:
            raise ValueError(f"unknown sample kind {self.sample_kind!r}")
        if self.scale < 2:
            raise ValueError("scale must be >= 2")
        if self.window_length < 1:
            raise ValueError("window_length must be >= 1")

    @property
    def pre_upsampled(self) -> bool:
        return self.upsampling == "PIN"


@dataclass
class SamplePair:
    """One training example, channels-last.

    ``lr_input`` is ``(y, x, C_in)`` or ``(t, y, x, C_in)`` with the predictand in
    channel 0, followed by predictors and (optionally) coarsened statics.
    ``hr_target`` is ``(Y, X, 1)`` with NaN replaced by 0 and flagged in ``mask``.
    """

    lr_input: np.ndarray
    hr_target: np.ndarray
    mask: np.ndarray
    statics: np.ndarray | None
    time_index: int

    @property
    def lr_predictand(self) -> np.ndarray:
        """The predictand channel of the input (last frame for sequences)."""
        x = self.lr_input[-1] if self.lr_input.ndim == 4 else self.lr_input
        return x[..., 0]


class SampleSet(list):
    """A list of :class:`SamplePair` tagged with the split it came from."""

    def __init__(self, samples=(), split: str = "train", config: PairingConfig | None = None):
        super().__init__(samples)
        self.split = split
        self.config = config

    def subset(self, index, split: str | None = None) -> "SampleSet":
        items = self[index] if isinstance(index, slice) else [self[i] for i in index]
        return SampleSet(items, split=split or self.split, config=self.config)


def mask_from_nans(hr_target: np.ndarray) -> tuple[np.ndarray, bool]:
    """Return the finite-cell mask and whether the sample must be dropped."""
    mask = np.isfinite(hr_target)
    return mask, not bool(mask.any())


def _aligned(a: DataCube, b: DataCube) -> bool:
    return a.n_time == b.n_time and np.array_equal(a.time, b.time)


def _as_channels(cube: DataCube) -> np.ndarray:
    values = np.asarray(cube.values, dtype=float)
    return values[..., None] if values.ndim == 3 else values


def make_pairs(
    predictand_hr: DataCube,
    predictand_lr: DataCube | None,
    predictors: Sequence[DataCube],
    statics: StaticFieldSet | None,
    cfg: PairingConfig,
    split: str = "train",
) -> SampleSet:
    """Build one sample per time step (spatial) or per sliding window (spatiotemporal)."""
    predictors = list(predictors or [])
    if cfg.regime == "PerfectProg" and predictand_lr is not None:
        raise ValueError("conflicting inputs: PerfectProg synthesizes the low-resolution input")
    if cfg.regime == "MOS" and predictand_lr is None:
        raise ValueError("MOS regime requires an explicit low-resolution predictand")
    for other in ([predictand_lr] if predictand_lr is not None else []) + predictors:
        if not _aligned(predictand_hr, other):
            raise ValueError(f"unaligned cubes: {other.name!r} vs {predictand_hr.name!r}")

    ny, nx = predictand_hr.grid_shape
    s = cfg.scale
    if ny % s or nx % s:
        raise ValueError(f"incompatible scale {s} for grid {(ny, nx)}")
    if statics is not None:
        statics.check_grid((ny, nx))

    hr = np.asarray(predictand_hr.values, dtype=float)
    if hr.ndim == 4:
        hr = hr[..., 0]
    if cfg.regime == "PerfectProg":
        lr = coarsen(hr, s)
        lr_lat, lr_lon = coarsen_coords(predictand_hr.lat, s), coarsen_coords(predictand_hr.lon, s)
    else:
        lr = np.asarray(predictand_lr.values, dtype=float)
        if lr.ndim == 4:
            lr = lr[..., 0]
        if lr.shape[1:] != (ny // s, nx // s):
            raise ValueError(
                f"incompatible scale: low-res grid {lr.shape[1:]} is not {(ny, nx)} / {s}"
            )
        lr_lat, lr_lon = predictand_lr.lat, predictand_lr.lon

    if cfg.pre_upsampled:
        channels = [bicubic_resize(lr, (ny, nx))[..., None]]
        grid_lat, grid_lon = predictand_hr.lat, predictand_hr.lon
    else:
        channels = [lr[..., None]]
        grid_lat, grid_lon = lr_lat, lr_lon
    for p in predictors:
        channels.append(_as_channels(regrid_bilinear(p, grid_lat, grid_lon)))
    static_hr = None
    if statics is not None:
        static_hr = np.nan_to_num(statics.fields, nan=0.0)
        if cfg.statics_in_input:
            st = static_hr if cfg.pre_upsampled else coarsen(static_hr, s, axes=(0, 1))
            channels.append(np.broadcast_to(st, (hr.shape[0],) + st.shape))
    inputs = np.nan_to_num(np.concatenate(channels, axis=-1), nan=0.0)

    w = cfg.window_length if cfg.sample_kind == "spatiotemporal" else 1
    if hr.shape[0] < w:
        raise ValueError(f"need at least {w} time steps, got {hr.shape[0]}")
    samples = SampleSet(split=split, config=cfg)
    dropped = 0
    for t in range(w - 1, hr.shape[0]):
        target = hr[t][..., None]
        mask, drop = mask_from_nans(target)
        if drop:
            dropped += 1
            continue
        x = inputs[t - w + 1 : t + 1] if cfg.sample_kind == "spatiotemporal" else inputs[t]
        samples.append(
            SamplePair(
                lr_input=np.ascontiguousarray(x),
                hr_target=np.where(mask, target, 0.0),
                mask=mask,
                statics=static_hr,
                time_index=t,
            )
        )
    if dropped:
        warnings.warn(f"sample dropped: {dropped} all-NaN targets skipped")
    return samples


def bicubic_baseline(sample: SamplePair, cfg: PairingConfig) -> np.ndarray:
    """Bicubic interpolation of the low-res predictand onto the target grid, ``(Y, X)``."""
    lr = sample.lr_predictand
    if cfg.pre_upsampled:
        return lr.copy()
    return bicubic_resize(lr, sample.hr_target.shape[:2])


def split_samples(samples: SampleSet, val_fraction: float) -> tuple[SampleSet, SampleSet]:
    """Trailing validation split of an already time-ordered sample set."""
    if val_fraction <= 0 or len(samples) < 2:
        return samples, SampleSet(split="validation", config=samples.config)
    n_val = max(1, int(round(val_fraction * len(samples))))
    n_val = min(n_val, len(samples) - 1)
    cut = len(samples) - n_val
    return samples.subset(slice(0, cut)), samples.subset(slice(cut, None), split="validation")


def n_input_channels(n_predictors: int, n_statics: int, cfg: PairingConfig) -> int:
    return 1 + n_predictors + (n_statics if cfg.statics_in_input else 0)
