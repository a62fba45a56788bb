"""Gridded data containers and the array/coordinate operations on them.

A :class:`DataCube` holds a ``(time, lat, lon[, channel])`` array plus its
coordinate vectors. Everything downstream (scaling, pairing, evaluation)
reads arrays and coordinates from here.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import xarray as xr

__all__ = [
    "DataCube",
    "StaticFieldSet",
    "load_cube",
    "save_cube",
    "load_statics",
    "save_statics",
    "spatial_subset",
    "temporal_split",
    "concat_time",
    "regrid_bilinear",
    "bilinear_weights",
]

_LAT_NAMES = ("lat", "latitude", "y")
_LON_NAMES = ("lon", "longitude", "x")
_TIME_NAMES = ("time", "t")


def _strictly_increasing(values: np.ndarray) -> bool:
    return bool(np.all(values[1:] > values[:-1]))


@dataclass
class DataCube:
    """A gridded variable with shape ``(time, lat, lon)`` or ``(time, lat, lon, channel)``."""

    values: np.ndarray
    time: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    name: str = "var"
    units: str = ""
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.time = np.asarray(self.time)
        self.lat = np.asarray(self.lat, dtype=float)
        self.lon = np.asarray(self.lon, dtype=float)
        if self.values.ndim not in (3, 4):
            raise ValueError(f"cube values must be rank 3 or 4, got rank {self.values.ndim}")
        nt, ny, nx = self.values.shape[:3]
        if (len(self.time), len(self.lat), len(self.lon)) != (nt, ny, nx):
            raise ValueError(
                f"coordinate lengths {(len(self.time), len(self.lat), len(self.lon))} "
                f"do not match array shape {self.values.shape[:3]}"
            )
        if not _strictly_increasing(self.time):
            raise ValueError("unsorted time axis")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def n_time(self) -> int:
        return self.values.shape[0]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    def isel_time(self, index) -> "DataCube":
        return replace(self, values=self.values[index], time=self.time[index])

    def with_values(self, values: np.ndarray) -> "DataCube":
        return replace(self, values=values)

    def to_dataset(self) -> xr.Dataset:
        dims = ["time", "lat", "lon"] + (["channel"] if self.values.ndim == 4 else [])
        da = xr.DataArray(
            self.values,
            dims=dims,
            coords={"time": self.time, "lat": self.lat, "lon": self.lon},
            name=self.name,
            attrs={"units": self.units, **self.attrs},
        )
        return da.to_dataset()


@dataclass
class StaticFieldSet:
    """Time-invariant high-resolution fields stacked as ``(lat, lon, channel)``."""

    fields: np.ndarray
    names: list[str]
    lat: np.ndarray | None = None
    lon: np.ndarray | None = None
    mask_channels: tuple[str, ...] = ()

    def __post_init__(self):
        self.fields = np.asarray(self.fields, dtype=float)
        if self.fields.ndim == 2:
            self.fields = self.fields[..., None]
        if self.fields.ndim != 3:
            raise ValueError("static fields must be rank 3 (lat, lon, channel)")
        if len(self.names) != self.fields.shape[-1]:
            raise ValueError("one name per static channel is required")
        for name in self.mask_channels:
            values = self.fields[..., self.names.index(name)]
            finite = values[np.isfinite(values)]
            if finite.size and (finite.min() < 0 or finite.max() > 1):
                raise ValueError(f"mask channel {name!r} must lie in [0, 1]")

    @property
    def n_channels(self) -> int:
        return self.fields.shape[-1]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.fields.shape[0], self.fields.shape[1]

    def check_grid(self, grid_shape: tuple[int, int]) -> None:
        if self.grid_shape != tuple(grid_shape):
            raise ValueError(
                f"static grid mismatch: statics {self.grid_shape} vs target {tuple(grid_shape)}"
            )


def _find_dim(names, candidates, what):
    for c in candidates:
        if c in names:
            return c
    raise ValueError(f"no {what} dimension among {tuple(names)}")


def load_cube(path, variable: str, missing_value: float | None = None) -> DataCube:
    """Read one variable of a NetCDF file as a :class:`DataCube`.

    ``_FillValue``/``missing_value`` attributes are decoded to NaN by xarray;
    ``missing_value`` additionally masks an undeclared sentinel.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with xr.open_dataset(path) as ds:
        if variable not in ds.data_vars:
            raise KeyError(f"variable not found: {variable!r} (available: {list(ds.data_vars)})")
        da = ds[variable].load()
    tdim = _find_dim(da.dims, _TIME_NAMES, "time")
    ydim = _find_dim(da.dims, _LAT_NAMES, "latitude")
    xdim = _find_dim(da.dims, _LON_NAMES, "longitude")
    extra = [d for d in da.dims if d not in (tdim, ydim, xdim)]
    if len(extra) > 1:
        raise ValueError(f"too many dimensions: {da.dims}")
    da = da.transpose(tdim, ydim, xdim, *extra)
    values = np.asarray(da.values, dtype=float)
    if missing_value is not None:
        values = np.where(values == missing_value, np.nan, values)
    time = np.asarray(da[tdim].values) if tdim in da.coords else np.arange(values.shape[0])
    if not _strictly_increasing(time):
        raise ValueError("unsorted time axis")
    lat = np.asarray(da[ydim].values) if ydim in da.coords else np.arange(values.shape[1], dtype=float)
    lon = np.asarray(da[xdim].values) if xdim in da.coords else np.arange(values.shape[2], dtype=float)
    attrs = {k: v for k, v in da.attrs.items() if k != "units"}
    cube = DataCube(values, time, lat, lon, name=variable, units=str(da.attrs.get("units", "")), attrs=attrs)
    empty = np.isnan(values.reshape(values.shape[0], -1)).all(axis=1)
    if empty.any():
        warnings.warn(f"{int(empty.sum())} time slices of {variable!r} are entirely NaN")
    return cube


def save_cube(cube: DataCube, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ds = cube.to_dataset()
    safe = {k: (str(v) if isinstance(v, (dict, list, tuple)) else v) for k, v in ds[cube.name].attrs.items()}
    ds[cube.name].attrs = safe
    ds.to_netcdf(path)
    return path


def save_statics(statics: StaticFieldSet, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ny, nx = statics.grid_shape
    lat = statics.lat if statics.lat is not None else np.arange(ny, dtype=float)
    lon = statics.lon if statics.lon is not None else np.arange(nx, dtype=float)
    data_vars = {
        name: (("lat", "lon"), statics.fields[..., i]) for i, name in enumerate(statics.names)
    }
    ds = xr.Dataset(data_vars, coords={"lat": lat, "lon": lon})
    ds.attrs["mask_channels"] = ",".join(statics.mask_channels)
    ds.to_netcdf(path)
    return path


def load_statics(path, names: list[str] | None = None) -> StaticFieldSet:
    with xr.open_dataset(path) as ds:
        names = list(names) if names else list(ds.data_vars)
        missing = [n for n in names if n not in ds.data_vars]
        if missing:
            raise KeyError(f"variable not found: {missing}")
        fields = np.stack([np.asarray(ds[n].values, dtype=float) for n in names], axis=-1)
        lat = np.asarray(ds[_find_dim(ds.dims, _LAT_NAMES, "latitude")].values)
        lon = np.asarray(ds[_find_dim(ds.dims, _LON_NAMES, "longitude")].values)
        masks = tuple(m for m in str(ds.attrs.get("mask_channels", "")).split(",") if m in names)
    return StaticFieldSet(fields, names, lat=lat, lon=lon, mask_channels=masks)


def _inclusive(coord: np.ndarray, lo: float, hi: float) -> np.ndarray:
    lo, hi = min(lo, hi), max(lo, hi)
    eps = 1e-9 * max(1.0, abs(lo), abs(hi))
    return (coord >= lo - eps) & (coord <= hi + eps)


def spatial_subset(cube: DataCube, lat_range, lon_range) -> DataCube:
    """Keep the grid points whose coordinates fall inside both closed ranges."""
    keep_y = np.flatnonzero(_inclusive(cube.lat, *lat_range))
    keep_x = np.flatnonzero(_inclusive(cube.lon, *lon_range))
    if keep_y.size == 0 or keep_x.size == 0:
        raise ValueError("empty subset")
    values = cube.values[:, keep_y][:, :, keep_x]
    return replace(cube, values=values, lat=cube.lat[keep_y], lon=cube.lon[keep_x])


def holdout_length(n_time: int, fraction: float) -> int:
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"invalid fraction: {fraction}")
    # guard against 0.2 * 14600 -> 2920.0000000000005
    return int(math.ceil(fraction * n_time - 1e-9))


def temporal_split(cube: DataCube, holdout_fraction: float) -> tuple[DataCube, DataCube]:
    """Split off the trailing ``ceil(fraction * T)`` time steps as the holdout."""
    if cube.n_time < 2:
        raise ValueError("temporal split needs at least 2 time steps")
    n_hold = holdout_length(cube.n_time, holdout_fraction)
    if n_hold >= cube.n_time:
        raise ValueError(f"invalid fraction: {holdout_fraction} leaves no training steps")
    cut = cube.n_time - n_hold
    return cube.isel_time(slice(0, cut)), cube.isel_time(slice(cut, None))


def concat_time(*cubes: DataCube) -> DataCube:
    first = cubes[0]
    values = np.concatenate([c.values for c in cubes], axis=0)
    time = np.concatenate([c.time for c in cubes], axis=0)
    return replace(first, values=values, time=time)


def bilinear_weights(source: np.ndarray, target: np.ndarray):
    """Lower stencil indices and fractional weights for 1-D linear interpolation.

    Works for ascending or descending source coordinates. Returns ``(i0, i1, w)``
    such that ``f(target) = (1 - w) * f[i0] + w * f[i1]``.
    """
    source = np.asarray(source, dtype=float)
    target = np.asarray(target, dtype=float)
    if source.size < 2:
        raise ValueError("bilinear interpolation needs at least two source points per axis")
    descending = source[0] > source[-1]
    src = source[::-1] if descending else source
    span = src[-1] - src[0]
    eps = 1e-9 * max(1.0, abs(span))
    if np.any(target < src[0] - eps) or np.any(target > src[-1] + eps):
        raise ValueError("extrapolation not supported")
    t = np.clip(target, src[0], src[-1])
    i0 = np.clip(np.searchsorted(src, t, side="right") - 1, 0, src.size - 2)
    i1 = i0 + 1
    w = (t - src[i0]) / (src[i1] - src[i0])
    if descending:
        n = source.size
        i0, i1 = n - 1 - i0, n - 1 - i1
    return i0, i1, w


def _interp_axis(values: np.ndarray, i0, i1, w, axis: int) -> np.ndarray:
    shape = [1] * values.ndim
    shape[axis] = -1
    w = w.reshape(shape)
    a = np.take(values, i0, axis=axis)
    b = np.take(values, i1, axis=axis)
    return (1.0 - w) * a + w * b


def regrid_bilinear(cube: DataCube, target_lats, target_lons) -> DataCube:
    """Bilinearly interpolate every time slice onto a new regular lat/lon grid.

    Any NaN among the four stencil cells yields NaN in the output cell.
    """
    target_lats = np.asarray(target_lats, dtype=float)
    target_lons = np.asarray(target_lons, dtype=float)
    yi0, yi1, wy = bilinear_weights(cube.lat, target_lats)
    xi0, xi1, wx = bilinear_weights(cube.lon, target_lons)
    values = np.asarray(cube.values, dtype=float)
    out = _interp_axis(values, yi0, yi1, wy, axis=1)
    out = _interp_axis(out, xi0, xi1, wx, axis=2)
    return replace(cube, values=out, lat=target_lats, lon=target_lons)
