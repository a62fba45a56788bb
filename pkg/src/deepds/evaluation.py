"""Holdout evaluation: per-time-step metrics, per-gridpoint maps, tables and figures."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import xarray as xr

from . import plotting
from .losses import LossSpec, psnr_from_mse, ssim

logger = logging.getLogger(__name__)

METRICS = ("mae", "rmse", "pearson", "ssim", "psnr")
HEADERS = {"mae": "MAE", "rmse": "RMSE", "pearson": "PearCorr", "ssim": "SSIM", "psnr": "PSNR"}


def _grid(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    return a[..., 0] if a.ndim == 3 and a.shape[-1] == 1 else a


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation, NaN when either input is constant."""
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float((a * a).sum()) * float((b * b).sum()))
    if den == 0.0:
        return float("nan")
    return float(np.clip((a * b).sum() / den, -1.0, 1.0))


def metrics_per_sample(pred, target, mask=None, data_range: float = 1.0, ssim_spec: LossSpec | None = None) -> dict:
    pred, target = _grid(pred), _grid(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    mask = np.isfinite(target) if mask is None else _grid(mask).astype(bool) & np.isfinite(target)
    p, t = pred[mask], target[mask]
    if p.size == 0:
        raise ValueError("no valid cells")
    err = p - t
    mse_v = float(np.mean(err**2))
    spec = (ssim_spec or LossSpec()).but(data_range=data_range)
    s = float("nan")
    if min(pred.shape) >= spec.ssim_window:
        with torch.no_grad():
            s = ssim(
                torch.from_numpy(np.where(mask, pred, 0.0))[None, None],
                torch.from_numpy(np.where(mask, target, 0.0))[None, None],
                spec,
            )
    return {
        "mae": float(np.mean(np.abs(err))),
        "rmse": math.sqrt(mse_v),
        "pearson": pearson(p, t) if p.size >= 2 else float("nan"),
        "ssim": float(s),
        "psnr": psnr_from_mse(mse_v, data_range),
    }


def metric_maps(preds, targets, masks=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-gridpoint Pearson correlation and RMSE over the time axis of ``(T, Y, X)`` stacks."""
    preds = np.asarray(preds, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if preds.ndim == 4:
        preds, targets = preds[..., 0], targets[..., 0]
    if masks is not None:
        masks = np.asarray(masks, dtype=bool)
        if masks.ndim == 4:
            masks = masks[..., 0]
        preds = np.where(masks, preds, np.nan)
        targets = np.where(masks, targets, np.nan)
    if preds.shape[0] < 2:
        raise ValueError("insufficient samples for maps")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=RuntimeWarning)
        rmse_map = np.sqrt(np.nanmean((preds - targets) ** 2, axis=0))
        dp = preds - np.nanmean(preds, axis=0)
        dt = targets - np.nanmean(targets, axis=0)
        num = np.nansum(dp * dt, axis=0)
        den = np.sqrt(np.nansum(dp**2, axis=0) * np.nansum(dt**2, axis=0))
        pearson_map = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)
    return np.clip(pearson_map, -1, 1), rmse_map


@dataclass
class EvalReport:
    label: str
    per_sample: list[dict]
    pearson_map: np.ndarray | None = None
    rmse_map: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def n_undefined_pearson(self) -> int:
        return sum(1 for r in self.per_sample if not np.isfinite(r["pearson"]))

    @property
    def summary(self) -> dict[str, tuple[float, float]]:
        out = {}
        for m in METRICS:
            vals = np.array([r[m] for r in self.per_sample], dtype=float)
            vals = vals[np.isfinite(vals)]
            out[m] = (float(vals.mean()), float(vals.std())) if vals.size else (float("nan"), float("nan"))
        return out


def evaluate(
    preds,
    targets,
    masks=None,
    *,
    data_range: float | None = None,
    time_index: Sequence[int] | None = None,
    label: str = "model",
) -> EvalReport:
    """Metrics for every holdout step plus the per-gridpoint maps.

    ``data_range`` defaults to the finite range of ``targets``.
    """
    preds = np.asarray(preds, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if masks is None:
        masks = np.isfinite(targets)
    if data_range is None:
        lo, hi = np.nanmin(targets), np.nanmax(targets)
        data_range = float(hi - lo) if hi > lo else 1.0
    if time_index is None:
        time_index = range(len(preds))
    rows = []
    for t, p, y, m in zip(time_index, preds, targets, masks):
        row = {"time_index": int(t)}
        row.update(metrics_per_sample(p, y, m, data_range))
        rows.append(row)
    report = EvalReport(label=label, per_sample=rows, extras={"data_range": data_range})
    if len(preds) >= 2:
        report.pearson_map, report.rmse_map = metric_maps(preds, targets, masks)
    return report


def format_pm(mean: float, std: float) -> str:
    return f"{mean:.2f} ± {std:.2f}"


def summarize(reports) -> str:
    """Text table with one ``mean ± std`` row per model, sorted by label."""
    if isinstance(reports, EvalReport):
        reports = [reports]
    reports = sorted(reports, key=lambda r: r.label)
    header = ["Panel"] + [HEADERS[m] for m in METRICS]
    rows = []
    for r in reports:
        s = r.summary
        rows.append([r.label] + [format_pm(*s[m]) for m in METRICS])
    widths = [max(len(x[i]) for x in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(header, widths)).rstrip()]
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
    undefined = [f"{r.label}={r.n_undefined_pearson}" for r in reports if r.n_undefined_pearson]
    if undefined:
        lines.append("undefined PearCorr samples (excluded): " + ", ".join(undefined))
    return "\n".join(lines) + "\n"


def write_report(reports, out_dir, lat=None, lon=None) -> dict[str, Path]:
    """Summary (text + CSV), per-sample CSV and NetCDF metric maps for each report."""
    if isinstance(reports, EvalReport):
        reports = [reports]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"summary_txt": out / "summary.txt", "summary_csv": out / "summary.csv"}
    files["summary_txt"].write_text(summarize(reports))
    with open(files["summary_csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"{m}_{k}" for m in METRICS for k in ("mean", "std")] + ["n_samples", "n_undefined_pearson"])
        for r in sorted(reports, key=lambda r: r.label):
            s = r.summary
            w.writerow([r.label] + [f"{v:.6g}" for m in METRICS for v in s[m]] + [len(r.per_sample), r.n_undefined_pearson])
    for r in reports:
        path = out / f"per_sample_{r.label}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["time_index", *METRICS])
            w.writeheader()
            for row in r.per_sample:
                w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})
        files[f"per_sample_{r.label}"] = path
        if r.rmse_map is not None:
            ny, nx = r.rmse_map.shape
            ds = xr.Dataset(
                {"pearson": (("lat", "lon"), r.pearson_map), "rmse": (("lat", "lon"), r.rmse_map)},
                coords={
                    "lat": np.arange(ny, dtype=float) if lat is None else lat,
                    "lon": np.arange(nx, dtype=float) if lon is None else lon,
                },
            )
            mpath = out / f"maps_{r.label}.nc"
            ds.to_netcdf(mpath)
            files[f"maps_{r.label}"] = mpath
    return files


def emit_plots(reports, out_dir, gallery: dict | None = None, rmse_max: float | None = None) -> dict:
    """Render metric maps and a sample gallery.

    RMSE maps of all models share one color range, ``[0, rmse_max]`` (default:
    the largest value over all maps). Returns ``{"files": [...], "clim": {file: (lo, hi)}}``.

    ``gallery`` may hold ``lr``, ``bicubic``, ``target`` fields and a
    ``predictions`` dict mapping labels to fields.
    """
    if isinstance(reports, EvalReport):
        reports = [reports]
    reports = sorted(reports, key=lambda r: r.label)
    out = Path(out_dir)
    result = {"files": [], "clim": {}}
    have_maps = [r for r in reports if r.rmse_map is not None and np.isfinite(r.rmse_map).any()]
    if not have_maps:
        warnings.warn("empty maps: no metric map figures written")
        logger.warning("empty maps: no metric map figures written")
    else:
        out.mkdir(parents=True, exist_ok=True)
        if rmse_max is None:
            rmse_max = max(float(np.nanmax(r.rmse_map)) for r in have_maps) or 1.0
        for kind, cmap, lim in (("rmse", "magma", (0.0, rmse_max)), ("pearson", "RdBu_r", (-1.0, 1.0))):
            fig, axes = plotting.panel_figure(len(have_maps))
            for ax, r in zip(axes, have_maps):
                im = plotting.show_field(ax, getattr(r, f"{kind}_map"), vmin=lim[0], vmax=lim[1], cmap=cmap, title=r.label)
            path = plotting.save(fig, out / f"{kind}_maps.png")
            result["files"].append(path)
            result["clim"][path.name] = tuple(float(v) for v in im.get_clim())
            for r in have_maps:
                fig, (ax,) = plotting.panel_figure(1)
                im = plotting.show_field(ax, getattr(r, f"{kind}_map"), vmin=lim[0], vmax=lim[1], cmap=cmap,
                                         title=f"{r.label} {kind}")
                result["clim"][f"{kind}_{r.label}.png"] = tuple(float(v) for v in im.get_clim())
                result["files"].append(plotting.save(fig, out / f"{kind}_{r.label}.png"))
    if gallery:
        panels = [(k, gallery[k]) for k in ("lr", "bicubic", "target") if gallery.get(k) is not None]
        panels += sorted(gallery.get("predictions", {}).items())
        if panels:
            vmin, vmax = plotting.finite_range(*[p for k, p in panels if k != "lr"])
            fig, axes = plotting.panel_figure(len(panels))
            titles = {"lr": "low-res input", "bicubic": "bicubic", "target": "reference"}
            for ax, (k, p) in zip(axes, panels):
                plotting.show_field(ax, _grid(p), vmin=vmin, vmax=vmax, title=titles.get(k, k))
            result["files"].append(plotting.save(fig, out / "gallery.png"))
    return result
