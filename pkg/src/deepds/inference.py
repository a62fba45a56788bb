"""Downscaled predictions, Monte Carlo dropout ensembles, and prediction files."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import xarray as xr

from .networks import DownscalingModel, collate, forward, set_mode
from .preprocessing import SamplePair, ScalerState


@dataclass
class Ensemble:
    members: np.ndarray  # (n_members, Y, X, 1)

    def __post_init__(self):
        if self.members.shape[0] < 2:
            raise ValueError("an ensemble needs at least 2 members")

    @property
    def mean(self) -> np.ndarray:
        return self.members.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        return self.members.std(axis=0, ddof=1)

    @property
    def n_members(self) -> int:
        return self.members.shape[0]


def _to_channels_last(y: torch.Tensor) -> np.ndarray:
    return y.detach().cpu().numpy().transpose(0, 2, 3, 1)


def predict(model: DownscalingModel, sample, scaler: ScalerState | None = None) -> np.ndarray:
    """Deterministic forward pass mapped back to physical units.

    A single :class:`SamplePair` gives ``(Y, X, 1)``; a sequence gives ``(N, Y, X, 1)``.
    """
    single = isinstance(sample, SamplePair)
    out = _to_channels_last(forward(model, sample, mode="infer"))
    if scaler is not None:
        out = scaler.inverse_transform(out.astype(float))
    return out[0] if single else out


def predict_many(model, samples: Sequence[SamplePair], scaler=None, batch_size: int = 32) -> np.ndarray:
    chunks = [predict(model, list(samples[i : i + batch_size]), scaler) for i in range(0, len(samples), batch_size)]
    return np.concatenate(chunks, axis=0)


def has_dropout(model: nn.Module) -> bool:
    return any(isinstance(m, nn.Dropout) and m.p > 0 for m in model.modules())


def mc_predict(
    model: DownscalingModel, sample: SamplePair, scaler: ScalerState | None, n_members: int, seed: int = 0
) -> Ensemble:
    """``n_members`` forward passes with dropout active, one seeded draw per member."""
    if not has_dropout(model):
        raise ValueError("MC dropout requires dropout (model dropout_rate is 0)")
    dtype = next(model.parameters()).dtype
    batch = collate([sample], dtype)
    set_mode(model, "mc")
    members = []
    with torch.no_grad():
        for k in range(n_members):
            torch.manual_seed(seed * 1_000_003 + k)
            members.append(_to_channels_last(model(batch["lr"], batch["statics"]))[0])
    set_mode(model, "infer")
    members = np.stack(members).astype(float)
    if scaler is not None:
        members = scaler.inverse_transform(members)
    return Ensemble(members)


def write_prediction(
    path,
    fields: np.ndarray,
    lat: np.ndarray,
    lon: np.ndarray,
    time=None,
    *,
    name: str = "prediction",
    spec=None,
    checkpoint: str | None = None,
    scaler: ScalerState | None = None,
    std: np.ndarray | None = None,
) -> Path:
    """Write ``(N, Y, X[, 1])`` predictions as NetCDF with provenance attributes."""
    fields = np.asarray(fields, dtype=float)
    if fields.ndim == 4:
        fields = fields[..., 0]
    time = np.arange(fields.shape[0]) if time is None else np.asarray(time)
    attrs = {}
    if spec is not None:
        attrs["spec_hash"] = spec.spec_hash()
        attrs["spec"] = spec.to_text()
    if checkpoint is not None:
        attrs["checkpoint"] = str(checkpoint)
    if scaler is not None:
        attrs["scaler"] = scaler.to_text()
    data = {name: (("time", "lat", "lon"), fields, attrs)}
    if std is not None:
        std = np.asarray(std, dtype=float)
        data[f"{name}_std"] = (("time", "lat", "lon"), std[..., 0] if std.ndim == 4 else std)
    ds = xr.Dataset(data, coords={"time": time, "lat": lat, "lon": lon})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ds.to_netcdf(path)
    return path
