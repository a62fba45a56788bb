"""End-to-end experiment: prepare -> train -> evaluate -> report."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import evaluation
from .checkpoint import load_checkpoint
from .config import ExperimentConfig
from .datacube import StaticFieldSet, holdout_length, load_cube, load_statics, spatial_subset
from .inference import mc_predict, predict_many, write_prediction
from .networks import ArchitectureSpec, build_discriminator, build_model
from .preprocessing import (
    SampleSet,
    ScalerState,
    bicubic_baseline,
    fit_scaler,
    make_pairs,
    transform,
)
from .synthetic import PREDICTAND, gen_synthetic
from .training import cgan_train, supervised_train

logger = logging.getLogger(__name__)


@dataclass
class Prepared:
    train: SampleSet
    holdout: SampleSet
    scaler: ScalerState
    predictor_scalers: list[ScalerState]
    spec: ArchitectureSpec
    hr_lat: np.ndarray
    hr_lon: np.ndarray
    hr_time: np.ndarray
    data_range: float
    extras: dict = field(default_factory=dict)


def _scale_statics(statics: StaticFieldSet | None) -> StaticFieldSet | None:
    """Min-max scale each non-mask static channel to [0, 1]."""
    if statics is None:
        return None
    f = statics.fields.copy()
    for i, name in enumerate(statics.names):
        if name in statics.mask_channels:
            continue
        ch = f[..., i]
        lo, hi = np.nanmin(ch), np.nanmax(ch)
        f[..., i] = (ch - lo) / (hi - lo) if hi > lo else 0.0
    return StaticFieldSet(f, statics.names, statics.lat, statics.lon, statics.mask_channels)


def load_inputs(cfg: ExperimentConfig, out_dir: Path):
    d = cfg.data
    if d.synthetic is not None:
        params = dict(d.synthetic)
        use_statics = params.pop("statics", True)
        params.setdefault("scale", cfg.pairing.scale)
        params.setdefault("seed", cfg.seed)
        syn = gen_synthetic(**params, out_dir=out_dir / "data")
        hr = load_cube(syn.files["hr"], PREDICTAND)
        lr = load_cube(syn.files["lr"], PREDICTAND) if cfg.pairing.regime == "MOS" else None
        predictors = [load_cube(syn.files[f"predictor_{i}"], p.name) for i, p in enumerate(syn.predictors)]
        statics = load_statics(syn.files["statics"]) if use_statics else None
    else:
        hr = load_cube(d.predictand_hr.path, d.predictand_hr.variable, d.predictand_hr.missing_value)
        lr = (
            load_cube(d.predictand_lr.path, d.predictand_lr.variable, d.predictand_lr.missing_value)
            if d.predictand_lr is not None
            else None
        )
        predictors = [load_cube(p.path, p.variable, p.missing_value) for p in d.predictors]
        statics = load_statics(d.statics["path"], d.statics.get("names")) if d.statics else None
    if d.lat_range is not None or d.lon_range is not None:
        lat_range = d.lat_range or (hr.lat.min(), hr.lat.max())
        lon_range = d.lon_range or (hr.lon.min(), hr.lon.max())
        hr = spatial_subset(hr, lat_range, lon_range)
        if lr is not None:
            lr = spatial_subset(lr, lat_range, lon_range)
        if statics is not None:
            keep_y = np.isin(statics.lat, hr.lat)
            keep_x = np.isin(statics.lon, hr.lon)
            statics = StaticFieldSet(
                statics.fields[keep_y][:, keep_x], statics.names, hr.lat, hr.lon, statics.mask_channels
            )
    return hr, lr, predictors, statics


def prepare(cfg: ExperimentConfig, out_dir: Path | None = None) -> Prepared:
    out_dir = Path(out_dir or cfg.output_dir)
    hr, lr, predictors, statics = load_inputs(cfg, out_dir)
    statics = _scale_statics(statics)

    n_hold = holdout_length(hr.n_time, cfg.data.holdout_fraction)
    cut = hr.n_time - n_hold
    train_idx = slice(0, cut)
    scaler = fit_scaler(cfg.data.scaler, hr.isel_time(train_idx))
    hr_s = transform(scaler, hr)
    lr_s = transform(scaler, lr) if lr is not None else None
    p_scalers = [fit_scaler(cfg.data.scaler, p.isel_time(train_idx)) for p in predictors]
    preds_s = [transform(s, p) for s, p in zip(p_scalers, predictors)]

    def pairs(index, split):
        return make_pairs(
            hr_s.isel_time(index),
            lr_s.isel_time(index) if lr_s is not None else None,
            [p.isel_time(index) for p in preds_s],
            statics,
            cfg.pairing,
            split=split,
        )

    train = pairs(train_idx, "train")
    holdout = pairs(slice(cut, None), "holdout")
    for s in holdout:
        s.time_index += cut

    train_vals = hr_s.values[train_idx]
    data_range = float(np.nanmax(train_vals) - np.nanmin(train_vals))
    arch = dict(cfg.architecture)
    spec = ArchitectureSpec.from_dict(
        {
            **arch,
            "upsampling": cfg.pairing.upsampling,
            "scale": cfg.pairing.scale,
            "sample_kind": cfg.pairing.sample_kind,
            "n_static_channels": statics.n_channels if statics is not None else 0,
            "n_predictor_channels": sum(1 if p.values.ndim == 3 else p.values.shape[-1] for p in predictors),
            "hr_shape": hr.grid_shape,
            "statics_in_input": cfg.pairing.statics_in_input,
        }
    ).validate()
    return Prepared(train, holdout, scaler, p_scalers, spec, hr.lat, hr.lon, hr.time, data_range)


def _seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))


def train(cfg: ExperimentConfig, prepared: Prepared | None = None, out_dir=None, resume=None):
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    prepared = prepared or prepare(cfg, out)
    prepared.scaler.save(out / "scaler.txt")
    for i, s in enumerate(prepared.predictor_scalers):
        s.save(out / f"scaler_predictor_{i}.txt")
    (out / "spec.txt").write_text(prepared.spec.to_text())

    loss = cfg.loss.but(data_range=prepared.data_range)
    tcfg = replace(cfg.training, loss=loss, checkpoint_dir=str(out / "checkpoints"))
    _seed_everything(cfg.seed)
    model = build_model(prepared.spec)
    if cfg.learning == "adversarial":
        disc = build_discriminator(prepared.spec)
        report = cgan_train(model, disc, prepared.train, tcfg, resume_from=resume)
    else:
        report = supervised_train(model, prepared.train, tcfg, resume_from=resume)
    report.save(out / "train_report.tsv")
    return model, report, prepared


def evaluate(cfg: ExperimentConfig, model=None, prepared: Prepared | None = None, out_dir=None, checkpoint=None):
    """Evaluate on the holdout in physical units; writes tables, maps and figures to ``<out>/eval``."""
    out = Path(out_dir or cfg.output_dir)
    prepared = prepared or prepare(cfg, out)
    if model is None:
        model = load_checkpoint(checkpoint or out / "checkpoints" / "last")
    hold = prepared.holdout
    sc = prepared.scaler
    preds = predict_many(model, hold, sc)
    targets = np.stack([sc.inverse_transform(s.hr_target) for s in hold])
    masks = np.stack([s.mask for s in hold])
    targets = np.where(masks, targets, np.nan)
    data_range = float(np.nanmax(targets) - np.nanmin(targets))
    times = [s.time_index for s in hold]
    report = evaluation.evaluate(preds, targets, masks, data_range=data_range, time_index=times, label=cfg.label)
    bic = np.stack([sc.inverse_transform(bicubic_baseline(s, cfg.pairing)) for s in hold])[..., None]
    baseline = evaluation.evaluate(bic, targets, masks, data_range=data_range, time_index=times, label="bicubic")

    eval_dir = out / "eval"
    files = evaluation.write_report([report, baseline], eval_dir, prepared.hr_lat, prepared.hr_lon)
    k = len(hold) // 2
    gallery = {
        "lr": sc.inverse_transform(hold[k].lr_predictand),
        "bicubic": bic[k],
        "target": targets[k],
        "predictions": {cfg.label: preds[k]},
    }
    plots = evaluation.emit_plots([report, baseline], eval_dir, gallery=gallery)
    (eval_dir / "plots.json").write_text(json.dumps({"clim": plots["clim"]}, indent=1))
    return report, baseline, files


def run_predict(cfg: ExperimentConfig, checkpoint, out_path, mc_members: int = 0, prepared=None):
    out = Path(cfg.output_dir)
    prepared = prepared or prepare(cfg, out)
    model = load_checkpoint(checkpoint)
    hold = prepared.holdout
    std = None
    if mc_members:
        ens = [mc_predict(model, s, prepared.scaler, mc_members, seed=cfg.seed + i) for i, s in enumerate(hold)]
        preds = np.stack([e.mean for e in ens])
        std = np.stack([e.std for e in ens])
    else:
        preds = predict_many(model, hold, prepared.scaler)
    time = prepared.hr_time[[s.time_index for s in hold]]
    return write_prediction(
        out_path, preds, prepared.hr_lat, prepared.hr_lon, time,
        spec=model.spec, checkpoint=str(checkpoint), scaler=prepared.scaler, std=std,
    )


def run(cfg: ExperimentConfig, out_dir=None, resume=None):
    out = Path(out_dir or cfg.output_dir)
    model, report, prepared = train(cfg, out_dir=out, resume=resume)
    ev, baseline, files = evaluate(cfg, model=model, prepared=prepared, out_dir=out)
    return report, ev, baseline


def load_eval_report(eval_dir, label: str) -> evaluation.EvalReport:
    """Rebuild an :class:`EvalReport` from the files written by :func:`evaluate`."""
    import csv

    import xarray as xr

    eval_dir = Path(eval_dir)
    rows = []
    with open(eval_dir / f"per_sample_{label}.csv") as fh:
        for r in csv.DictReader(fh):
            rows.append({"time_index": int(r["time_index"]), **{m: float(r[m]) for m in evaluation.METRICS}})
    rep = evaluation.EvalReport(label=label, per_sample=rows)
    maps = eval_dir / f"maps_{label}.nc"
    if maps.exists():
        with xr.open_dataset(maps) as ds:
            rep.pearson_map = ds["pearson"].values
            rep.rmse_map = ds["rmse"].values
    return rep
