"""Experiment configuration files (YAML).

Example::

    label: E
    learning: supervised        # or adversarial
    seed: 0
    output_dir: runs/E
    data:
      synthetic: {ny: 32, nx: 32, n_time: 200, scale: 4}
      holdout_fraction: 0.2
    pairing: {regime: MOS, upsampling: SPC, scale: 4, sample_kind: spatial}
    architecture: {backbone: resnet, use_lcb: true, n_blocks: 6, filters: 32}
    training: {epochs: 100, batch_size: 16}
    loss: {kind: mae}
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .losses import LossSpec
from .preprocessing import PairingConfig
from .training import TrainConfig

LEARNING = ("supervised", "adversarial")
# architecture fields derived from the data or the pairing section
_DERIVED_ARCH = {"upsampling", "scale", "sample_kind", "n_static_channels", "n_predictor_channels", "hr_shape", "statics_in_input"}


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = [problems] if isinstance(problems, str) else list(problems)
        super().__init__("invalid config:\n" + "\n".join(f"  - {p}" for p in self.problems))


@dataclass
class VariableRef:
    path: str
    variable: str
    missing_value: float | None = None


@dataclass
class DataConfig:
    synthetic: dict | None = None
    predictand_hr: VariableRef | None = None
    predictand_lr: VariableRef | None = None
    predictors: list[VariableRef] = field(default_factory=list)
    statics: dict | None = None
    lat_range: tuple[float, float] | None = None
    lon_range: tuple[float, float] | None = None
    holdout_fraction: float = 0.2
    scaler: str = "standard"


@dataclass
class ExperimentConfig:
    label: str = "model"
    learning: str = "supervised"
    seed: int = 0
    output_dir: str = "runs/model"
    data: DataConfig = field(default_factory=DataConfig)
    pairing: PairingConfig = field(default_factory=PairingConfig)
    architecture: dict = field(default_factory=dict)
    training: TrainConfig = field(default_factory=TrainConfig)
    loss: LossSpec = field(default_factory=LossSpec)
    source: str | None = None


def _ref(raw, where, problems):
    if raw is None:
        return None
    if isinstance(raw, str):
        problems.append(f"{where}: expected a mapping with 'path' and 'variable'")
        return None
    try:
        return VariableRef(**raw)
    except TypeError as exc:
        problems.append(f"{where}: {exc}")
        return None


def _build(cls, raw, where, problems, **extra):
    raw = dict(raw or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        problems.append(f"{where}: unknown field(s) {unknown}")
        for k in unknown:
            raw.pop(k)
    try:
        return cls(**raw, **extra)
    except (TypeError, ValueError) as exc:
        problems.append(f"{where}: {exc}")
        return None


def parse_config(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    """Validate a raw mapping; all problems are collected into one :class:`ConfigError`."""
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping")
    problems: list[str] = []
    allowed = {"label", "learning", "seed", "output_dir", "data", "pairing", "architecture", "training", "loss"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        problems.append(f"unknown top-level field(s) {unknown}")

    learning = raw.get("learning", "supervised")
    if learning not in LEARNING:
        problems.append(f"learning: must be one of {LEARNING}, got {learning!r}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int):
        problems.append("seed: must be an integer")
        seed = 0

    draw = dict(raw.get("data") or {})
    data = DataConfig()
    if draw:
        data = _build(
            DataConfig,
            {k: v for k, v in draw.items() if k not in ("predictand_hr", "predictand_lr", "predictors")},
            "data",
            problems,
            predictand_hr=_ref(draw.get("predictand_hr"), "data.predictand_hr", problems),
            predictand_lr=_ref(draw.get("predictand_lr"), "data.predictand_lr", problems),
            predictors=[
                r for i, p in enumerate(draw.get("predictors") or [])
                if (r := _ref(p, f"data.predictors[{i}]", problems)) is not None
            ],
        ) or DataConfig()
    if data.synthetic is None and data.predictand_hr is None:
        problems.append("data: either 'synthetic' or 'predictand_hr' is required")
    if not 0 < data.holdout_fraction < 1:
        problems.append("data.holdout_fraction: must lie in (0, 1)")
    if data.scaler not in ("standard", "minmax"):
        problems.append("data.scaler: must be 'standard' or 'minmax'")

    pairing = _build(PairingConfig, raw.get("pairing"), "pairing", problems) or PairingConfig()
    if pairing.regime == "MOS" and data.synthetic is None and data.predictand_lr is None:
        problems.append("data.predictand_lr: required by the MOS regime")
    if pairing.regime == "PerfectProg" and data.predictand_lr is not None:
        problems.append("data.predictand_lr: must not be set for PerfectProg (low-res input is synthesized)")
    if data.synthetic is not None and "scale" in data.synthetic and data.synthetic["scale"] != pairing.scale:
        problems.append("data.synthetic.scale: must equal pairing.scale")

    arch = dict(raw.get("architecture") or {})
    clash = sorted(set(arch) & _DERIVED_ARCH)
    if clash:
        problems.append(f"architecture: field(s) {clash} are derived from pairing/data and must not be set")

    loss = _build(LossSpec, raw.get("loss"), "loss", problems) or LossSpec()
    traw = dict(raw.get("training") or {})
    traw.setdefault("seed", seed)
    training = _build(TrainConfig, traw, "training", problems, loss=loss) or TrainConfig(loss=loss)

    if problems:
        raise ConfigError(problems)

    def resolve(ref):
        if ref is None or base_dir is None or Path(ref.path).is_absolute():
            return ref
        return VariableRef(str(base_dir / ref.path), ref.variable, ref.missing_value)

    data.predictand_hr = resolve(data.predictand_hr)
    data.predictand_lr = resolve(data.predictand_lr)
    data.predictors = [resolve(p) for p in data.predictors]
    if data.statics and base_dir is not None and not Path(data.statics["path"]).is_absolute():
        data.statics = {**data.statics, "path": str(base_dir / data.statics["path"])}
    return ExperimentConfig(
        label=str(raw.get("label", "model")),
        learning=learning,
        seed=seed,
        output_dir=str(raw.get("output_dir", f"runs/{raw.get('label', 'model')}")),
        data=data,
        pairing=pairing,
        architecture=arch,
        training=training,
        loss=loss,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    cfg = parse_config(raw, base_dir=path.parent)
    cfg.source = str(path)
    return cfg
