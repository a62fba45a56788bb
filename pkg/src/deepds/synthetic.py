"""Desk-scale synthetic dataset standing in for reanalysis archives.

The high-resolution field is a sum of a few drifting low-wavenumber sine
modes, modulated fine-scale structure tied to the synthetic topography, and
white noise. The low-resolution field is its block-mean coarsening, optionally
perturbed to mimic an independent coarse model (MOS surrogate).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datacube import DataCube, StaticFieldSet, save_cube, save_statics
from .preprocessing import coarsen, coarsen_coords

PREDICTAND = "target"


@dataclass
class SyntheticData:
    hr: DataCube
    lr: DataCube
    predictors: list[DataCube]
    statics: StaticFieldSet
    files: dict[str, Path] | None = None


def _modes(rng, n_modes):
    k = rng.uniform(0.5, 2.0, size=(n_modes, 2)) * rng.choice([-1, 1], size=(n_modes, 2))
    amp = rng.uniform(0.5, 1.5, size=n_modes)
    phase = rng.uniform(0, 2 * np.pi, size=n_modes)
    speed = rng.uniform(0.05, 0.3, size=n_modes)
    return k, amp, phase, speed


def _large_scale(yy, xx, t, modes):
    """Smooth field on unit-square coordinates ``yy, xx`` at time steps ``t``."""
    k, amp, phase, speed = modes
    out = np.zeros((len(t),) + yy.shape)
    for (ky, kx), a, p, s in zip(k, amp, phase, speed):
        arg = 2 * np.pi * (ky * yy + kx * xx)
        out += a * np.sin(arg[None] + p + s * t[:, None, None])
    return out


def gen_synthetic(
    ny: int = 32,
    nx: int = 32,
    n_time: int = 200,
    scale: int = 4,
    seed: int = 0,
    *,
    n_modes: int = 4,
    noise: float = 0.05,
    fine_amplitude: float = 1.0,
    perturb: bool = True,
    n_predictors: int = 1,
    location_bias: float = 0.0,
    offset: float = 10.0,
    resolution: float = 0.1,
    out_dir=None,
) -> SyntheticData:
    """Generate (and optionally write) a synthetic downscaling dataset.

    ``location_bias`` adds a fixed, spatially white per-gridpoint offset that no
    input channel reveals; it is what a location-aware layer can learn.
    """
    if ny % scale or nx % scale:
        raise ValueError(f"incompatible scale {scale} for grid {(ny, nx)}")
    rng = np.random.default_rng(seed)
    lat = 40.0 + resolution * np.arange(ny)
    lon = 0.0 + resolution * np.arange(nx)
    yy, xx = np.meshgrid(np.linspace(0, 1, ny), np.linspace(0, 1, nx), indexing="ij")
    t = np.arange(n_time, dtype=float)

    ramp = 0.6 * yy + 0.4 * xx
    bumps = np.zeros((ny, nx))
    for _ in range(6):
        cy, cx = rng.uniform(0, 1, 2)
        w = rng.uniform(0.03, 0.08)
        bumps += rng.uniform(0.3, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * w**2))
    fine = np.sin(2 * np.pi * (yy * ny / 3.0)) * np.sin(2 * np.pi * (xx * nx / 3.0))
    topo_fine = 0.5 * bumps / max(bumps.max(), 1e-12) + 0.25 * (fine + 1) / 2
    topography = ramp + topo_fine
    topography = (topography - topography.min()) / (topography.max() - topography.min())
    landmask = (ramp > 0.35).astype(float)

    modes = _modes(rng, n_modes)
    large = _large_scale(yy, xx, t, modes)
    modulation = 1.0 + 0.5 * np.tanh(large)
    hr = offset + large + fine_amplitude * modulation * (topo_fine - topo_fine.mean()) * 2.0
    hr += 0.3 * landmask[None]
    if location_bias:
        hr += location_bias * rng.standard_normal((ny, nx))[None]
    hr += noise * rng.standard_normal(hr.shape)

    lr = coarsen(hr, scale)
    if perturb:
        lr = 0.95 * lr + 0.1 + 0.05 * rng.standard_normal(lr.shape)
    lr_lat, lr_lon = coarsen_coords(lat, scale), coarsen_coords(lon, scale)

    predictors = []
    py, px = max(2, ny // 2), max(2, nx // 2)
    plat, plon = np.linspace(lat[0], lat[-1], py), np.linspace(lon[0], lon[-1], px)
    pyy, pxx = np.meshgrid(np.linspace(0, 1, py), np.linspace(0, 1, px), indexing="ij")
    for i in range(n_predictors):
        base = _large_scale(pyy, pxx, t, modes)
        values = 280.0 + 5.0 * (base if i == 0 else np.roll(base, i, axis=0)) + 0.2 * rng.standard_normal(base.shape)
        predictors.append(DataCube(values, t, plat, plon, name=f"pred{i}", units="K"))

    data = SyntheticData(
        hr=DataCube(hr, t, lat, lon, name=PREDICTAND, units="ug m-3"),
        lr=DataCube(lr, t, lr_lat, lr_lon, name=PREDICTAND, units="ug m-3"),
        predictors=predictors,
        statics=StaticFieldSet(
            np.stack([topography, landmask], axis=-1),
            ["topography", "landmask"],
            lat=lat,
            lon=lon,
            mask_channels=("landmask",),
        ),
    )
    if out_dir is not None:
        data.files = write_synthetic(data, out_dir)
    return data


def write_synthetic(data: SyntheticData, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "hr": save_cube(data.hr, out / "hr.nc"),
        "lr": save_cube(data.lr, out / "lr.nc"),
        "statics": save_statics(data.statics, out / "statics.nc"),
    }
    for i, p in enumerate(data.predictors):
        files[f"predictor_{i}"] = save_cube(p, out / f"predictor_{i}.nc")
    return files
