"""Configuration parsing, single experiment runs and the ablation grid."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import data as data_mod
from .evaluation import (MetricsReport, classify_performance, export_report, generalization_gap,
                         regression_metrics)
from .models import (CONV2_KERNELS, FAMILIES, HEAD_VARIANTS, NORM_KINDS, RNN_CELLS, ConfigError,
                     ModelConfig, build_model, count_params, family_defaults, load_model, save_model)
from .train import (DEFAULT_CLIP_NORM, EXPERIMENT_KEYS, ExperimentConfig, History, TrainingDiverged, fit, init_rng,
                    predict)

log = logging.getLogger(__name__)

MODEL_KEYS = ("family", "norm_kind", "conv2_kernel", "head_variant", "rnn_cell", "width_multiplier")
RUN_ARTIFACTS = ("config.json", "history.csv", "metrics.json", "pred_vs_truth.csv", "bland_altman.csv")


@dataclass(frozen=True)
class DataConfig:
    """Synthetic dataset recipe plus split ratios; ``records`` switches to a clip-record file."""
    n: int = 64
    frames: int = 28
    height: int = 112
    width: int = 112
    ef_range: tuple[float, float] = (10.0, 80.0)
    noise_std: float = 0.05
    base_radius: float = 0.25
    radius_jitter: float = 0.0
    center_jitter: float = 0.0
    cycle_period: int = 20
    random_phase: bool = False
    seed: int = 0
    split: tuple[float, float, float] = (0.744, 0.128, 0.128)
    records: str | None = None

    def dataset_spec(self) -> data_mod.DatasetSpec:
        keys = {f.name for f in fields(data_mod.DatasetSpec)}
        return data_mod.DatasetSpec(**{k: v for k, v in asdict(self).items() if k in keys})


DATA_KEYS = tuple(f.name for f in fields(DataConfig))


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    experiment: ExperimentConfig
    data: DataConfig

    def to_dict(self) -> dict:
        out = {k: getattr(self.model, k) for k in MODEL_KEYS}
        out.update(asdict(self.experiment))
        out["data"] = _jsonable(asdict(self.data))
        return out


@dataclass
class GridSpec:
    families: list[str]
    norm_kinds: list[str] = field(default_factory=lambda: ["batch", "layer"])
    conv2_kernels: list[str] = field(default_factory=lambda: ["1x1x1", "3x3x3"])
    head_variants: list[str] = field(default_factory=lambda: ["A"])
    rnn_cells: list[str] = field(default_factory=lambda: ["GRU"])
    width_multiplier: float = 1.0
    overrides: dict = field(default_factory=dict)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data"] = _jsonable(d["data"])
        return {"grid": {k: d[k] for k in ("families", "norm_kinds", "conv2_kernels", "head_variants", "rnn_cells")},
                "width_multiplier": self.width_multiplier, "overrides": dict(self.overrides), "data": d["data"]}


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


# ---------------------------------------------------------------------------
# parsing

_TYPES: dict[str, tuple[type, ...]] = {
    "family": (str,), "norm_kind": (str,), "conv2_kernel": (str,), "head_variant": (str,), "rnn_cell": (str,),
    "width_multiplier": (int, float),
    "initial_lr": (int, float), "decay_period": (int,), "decay_factor": (int, float), "max_epochs": (int,),
    "patience": (int, type(None)), "batch_size": (int,), "dropout_rate": (int, float),
    "clip_norm": (int, float, bool, type(None)), "l1": (int, float), "l2": (int, float),
    "weight_decay": (int, float), "seed": (int,), "precision": (str,), "standardize_targets": (bool,),
}
_DATA_TYPES: dict[str, tuple[type, ...]] = {
    "n": (int,), "frames": (int,), "height": (int,), "width": (int,), "ef_range": (list,),
    "noise_std": (int, float), "base_radius": (int, float), "radius_jitter": (int, float),
    "center_jitter": (int, float), "cycle_period": (int,), "random_phase": (bool,), "seed": (int,),
    "split": (list,), "records": (str, type(None)),
}


def _check_type(path: str, value, types: tuple[type, ...]):
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(f"{path}: expected {'/'.join(t.__name__ for t in types)}, got bool")
    if not isinstance(value, types):
        raise ConfigError(f"{path}: expected {'/'.join(t.__name__ for t in types)}, got {type(value).__name__}")


def parse_data_config(raw: Mapping | None, prefix: str = "data") -> DataConfig:
    raw = dict(raw or {})
    for key, value in raw.items():
        if key not in _DATA_TYPES:
            raise ConfigError(f"{prefix}.{key}: unknown key")
        _check_type(f"{prefix}.{key}", value, _DATA_TYPES[key])
    for key, length in (("ef_range", 2), ("split", 3)):
        if key in raw:
            if len(raw[key]) != length:
                raise ConfigError(f"{prefix}.{key}: expected {length} numbers")
            raw[key] = tuple(float(v) for v in raw[key])
    cfg = DataConfig(**raw)
    if cfg.n < 3:
        raise ConfigError(f"{prefix}.n: need at least 3 clips")
    for key in ("frames", "height", "width", "cycle_period"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{prefix}.{key}: must be positive")
    lo, hi = cfg.ef_range
    if not 0 <= lo <= hi <= 90:
        raise ConfigError(f"{prefix}.ef_range: must satisfy 0 <= low <= high <= 90")
    if cfg.noise_std < 0:
        raise ConfigError(f"{prefix}.noise_std: must be non-negative")
    if abs(sum(cfg.split) - 1.0) > 1e-9 or min(cfg.split) <= 0:
        raise ConfigError(f"{prefix}.split: ratios must be positive and sum to 1")
    return cfg


def load_config_json(source) -> dict:
    if isinstance(source, Mapping):
        return dict(source)
    path = Path(source)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return raw


def _experiment_from(raw: Mapping, family: str, rnn_cell: str, prefix: str = "") -> ExperimentConfig:
    values = family_defaults(family, rnn_cell)
    for key, value in raw.items():
        if key not in EXPERIMENT_KEYS:
            raise ConfigError(f"{prefix}{key}: unknown key")
        _check_type(prefix + key, value, _TYPES[key])
        if key == "clip_norm" and isinstance(value, bool):
            # true enables clipping at the default threshold, false disables it
            value = DEFAULT_CLIP_NORM if value else None
        values[key] = value
    try:
        return ExperimentConfig(**values).validate()
    except ConfigError as exc:
        raise ConfigError(prefix + str(exc)) from None


def parse_run_config(source) -> RunConfig:
    raw = load_config_json(source)
    data_cfg = parse_data_config(raw.pop("data", None))
    model_raw, exp_raw = {}, {}
    for key, value in raw.items():
        if key in MODEL_KEYS:
            _check_type(key, value, _TYPES[key])
            model_raw[key] = value
        elif key in EXPERIMENT_KEYS:
            exp_raw[key] = value
        else:
            raise ConfigError(f"{key}: unknown key")
    if "family" not in model_raw:
        raise ConfigError("family: required key missing")
    model_cfg = ModelConfig(frames=data_cfg.frames, height=data_cfg.height, width=data_cfg.width,
                            **model_raw).validate()
    experiment = _experiment_from(exp_raw, model_cfg.family, model_cfg.rnn_cell)
    return RunConfig(model_cfg, experiment, data_cfg)


def parse_grid_config(source) -> GridSpec:
    raw = load_config_json(source)
    allowed = {"grid", "width_multiplier", "overrides", "data"}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"{key}: unknown key")
    axes = dict(raw.get("grid") or {})
    choices = {"families": FAMILIES, "norm_kinds": NORM_KINDS, "conv2_kernels": tuple(CONV2_KERNELS),
               "head_variants": HEAD_VARIANTS, "rnn_cells": RNN_CELLS}
    for key, value in axes.items():
        if key not in choices:
            raise ConfigError(f"grid.{key}: unknown key")
        if not isinstance(value, list) or not value:
            raise ConfigError(f"grid.{key}: expected a non-empty list")
        for i, v in enumerate(value):
            if v not in choices[key]:
                raise ConfigError(f"grid.{key}[{i}]: unknown value {v!r}")
    if "families" not in axes:
        raise ConfigError("grid.families: required key missing")
    overrides = dict(raw.get("overrides") or {})
    for key, value in overrides.items():
        if key not in EXPERIMENT_KEYS:
            raise ConfigError(f"overrides.{key}: unknown key")
        _check_type(f"overrides.{key}", value, _TYPES[key])
    width = raw.get("width_multiplier", 1.0)
    _check_type("width_multiplier", width, _TYPES["width_multiplier"])
    return GridSpec(width_multiplier=float(width), overrides=overrides,
                    data=parse_data_config(raw.get("data")), **axes)


def parse_config(source) -> RunConfig | GridSpec:
    """Parse a run config, or a grid config when the top level has a ``grid`` key."""
    raw = load_config_json(source)
    return parse_grid_config(raw) if "grid" in raw else parse_run_config(raw)


# ---------------------------------------------------------------------------
# single run

@dataclass
class RunArtifacts:
    directory: Path
    status: str
    test: MetricsReport | None
    performance: str | None

    def path(self, name: str) -> Path:
        return self.directory / name


def load_dataset(cfg: DataConfig) -> list[data_mod.VideoClip]:
    if cfg.records:
        clips = data_mod.read_records(cfg.records)
        if clips[0].shape[:3] != (cfg.frames, cfg.height, cfg.width):
            raise ConfigError(f"data.records: clip shape {clips[0].shape} does not match data frames/height/width")
        return clips
    return data_mod.generate_dataset(cfg.dataset_spec())


def _split_arrays(clips, cfg: DataConfig):
    x, y = data_mod.stack_clips(clips)
    split = data_mod.split_dataset(len(clips), cfg.split, cfg.seed)
    return {name: (x[idx], y[idx]) for name, idx in
            (("train", split.train), ("val", split.val), ("test", split.test))}


def _safe_metrics(preds, truths) -> MetricsReport | None:
    if not np.all(np.isfinite(preds)):
        return None
    try:
        return regression_metrics(preds, truths)
    except ValueError as exc:
        log.warning("metrics unavailable: %s", exc)
        return None


def resolve_run_config(cfg: RunConfig, n_train: int) -> RunConfig:
    """Clamp the batch size to the training set so desk-scale runs stay valid."""
    if cfg.experiment.batch_size > n_train:
        log.info("batch_size %d clamped to training-set size %d", cfg.experiment.batch_size, n_train)
        return replace(cfg, experiment=replace(cfg.experiment, batch_size=n_train))
    return cfg


def run_experiment(config: RunConfig | Mapping | str | Path, out_dir: str | Path) -> RunArtifacts:
    """Generate data, build, fit, evaluate at the best epoch and write every artifact."""
    cfg = config if isinstance(config, RunConfig) else parse_run_config(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = _split_arrays(load_dataset(cfg.data), cfg.data)
    if min(len(v[0]) for v in splits.values()) == 0:
        raise ConfigError("data.n: too few clips for a non-empty train/val/test split")
    cfg = resolve_run_config(cfg, len(splits["train"][0]))
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))

    exp = cfg.experiment
    model = build_model(cfg.model, exp.dropout_rate, dtype=exp.dtype, rng=init_rng(exp.seed))
    status = "completed"
    try:
        model, history = fit(model, splits["train"], splits["val"], exp)
    except TrainingDiverged as exc:
        log.warning("run diverged: %s", exc)
        status, history = "diverged", exc.history
    history.to_csv(out / "history.csv")
    save_model(model, out / "model")

    preds = {name: predict(model, x) for name, (x, _) in splits.items()}
    reports = {name: _safe_metrics(preds[name], y) for name, (_, y) in splits.items()}
    if status == "completed" and any(r is None for r in reports.values()):
        status = "diverged" if not all(np.all(np.isfinite(p)) for p in preds.values()) else status
    test = reports["test"]
    extra: dict[str, Any] = {"status": status, "best_epoch": history.best_epoch, "epochs_run": len(history),
                             "n_params": count_params(model)}
    performance = None
    if test is not None and reports["train"] is not None:
        gap, overfit = generalization_gap(reports["train"].rmse, test.rmse)
        performance = classify_performance(test, gap=gap)
        extra.update({"generalization_gap": gap, "overfit": overfit, "performance_class": performance.label})
    payload_reports = {k: v for k, v in reports.items() if v is not None}
    y_test = splits["test"][1]
    if payload_reports and np.all(np.isfinite(preds["test"])):
        export_report(out, payload_reports, (preds["test"], y_test), None, extra)
    else:
        (out / "metrics.json").write_text(json.dumps({"metrics": {}, **extra}, indent=2, sort_keys=True))
        for name in ("pred_vs_truth.csv", "bland_altman.csv"):
            header = "truth,pred\n" if name.startswith("pred") else "mean,diff\n"
            (out / name).write_text(header)
    return RunArtifacts(out, status, test, performance.label if performance else None)


def emit_plot_data(run_dir: str | Path) -> dict[str, Path]:
    """Re-create prediction, Bland-Altman and learning-curve CSVs from a run's saved model."""
    run = Path(run_dir)
    missing = [name for name in ("config.json", "history.csv", "model/model.json", "model/model.bin")
               if not (run / name).exists()]
    if missing:
        raise FileNotFoundError(f"run directory {run} is missing {missing}")
    cfg = parse_run_config(run / "config.json")
    model = load_model(run / "model")
    x, y = _split_arrays(load_dataset(cfg.data), cfg.data)["test"]
    preds = predict(model, x)
    history = History.from_csv(run / "history.csv")
    from .evaluation import write_bland_altman_csv, write_prediction_csv
    return {
        "pred_vs_truth": write_prediction_csv(preds, y, run / "pred_vs_truth.csv"),
        "bland_altman": write_bland_altman_csv(preds, y, run / "bland_altman.csv"),
        "learning_curve": history.to_csv(run / "learning_curve.csv"),
    }


def evaluate_run(run_dir: str | Path) -> dict[str, dict]:
    """Reload a saved model and recompute train/val/test metrics."""
    run = Path(run_dir)
    cfg = parse_run_config(run / "config.json")
    model = load_model(run / "model")
    out = {}
    for name, (x, y) in _split_arrays(load_dataset(cfg.data), cfg.data).items():
        report = _safe_metrics(predict(model, x), y)
        out[name] = asdict(report) if report else None
    return out


# ---------------------------------------------------------------------------
# grid

NORM_LABELS = {"batch": "BatchNorm", "layer": "LayerNorm", "mixed": "MixedNorm"}
SHORT_KERNEL = {"3x1x1": "3x1x1", "3x3x3": "3x3x3", "double_3x3x3": "2 3x3x3"}


def row_label(norm_kind: str, conv2_kernel: str) -> str:
    if conv2_kernel == "1x1x1":
        return NORM_LABELS[norm_kind]
    return f"{SHORT_KERNEL[conv2_kernel]} Conv2 + {NORM_LABELS[norm_kind]}"


def column_label(family: str, rnn_cell: str, head_variant: str, n_cells: int, n_heads: int) -> str:
    label = family
    if family == "CNN_RNN_SCRATCH" and n_cells > 1:
        label += f":{rnn_cell}"
    if n_heads > 1:
        label += f":{head_variant}"
    return label


def grid_cells(grid: GridSpec):
    """Yield (row, column, RunConfig-or-None) for every grid position; None marks inapplicable cells."""
    n_heads = len(grid.head_variants)
    for conv2 in grid.conv2_kernels:
        for norm in grid.norm_kinds:
            row = row_label(norm, conv2)
            for family in grid.families:
                cells = grid.rnn_cells if family == "CNN_RNN_SCRATCH" else grid.rnn_cells[:1]
                for cell in cells:
                    for head in grid.head_variants:
                        col = column_label(family, cell, head, len(grid.rnn_cells), n_heads)
                        try:
                            model_cfg = ModelConfig(family=family, norm_kind=norm, conv2_kernel=conv2,
                                                    head_variant=head, rnn_cell=cell,
                                                    width_multiplier=grid.width_multiplier,
                                                    frames=grid.data.frames, height=grid.data.height,
                                                    width=grid.data.width).validate()
                        except ConfigError:
                            yield row, col, None
                            continue
                        exp = _experiment_from(grid.overrides, family, cell, "overrides.")
                        yield row, col, RunConfig(model_cfg, exp, grid.data)


def _cell_dirname(cfg: RunConfig) -> str:
    m = cfg.model
    fam = f"{m.family}_{m.rnn_cell}" if m.family == "CNN_RNN_SCRATCH" else m.family
    return f"{fam}__{m.norm_kind}__{m.conv2_kernel}__{m.head_variant}"


def run_grid(grid: GridSpec | Mapping | str | Path, out_dir: str | Path) -> Path:
    """Run every applicable cell and write a Table-style summary (rows: norm/kernel, columns: families)."""
    grid = grid if isinstance(grid, GridSpec) else parse_grid_config(grid)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "grid.json").write_text(json.dumps(grid.to_dict(), indent=2, sort_keys=True))
    rows: list[str] = []
    cols: list[str] = []
    table: dict[tuple[str, str], str] = {}
    details = []
    for row, col, cfg in grid_cells(grid):
        if row not in rows:
            rows.append(row)
        if col not in cols:
            cols.append(col)
        if cfg is None:
            table[row, col] = "-"
            details.append({"row": row, "column": col, "status": "inapplicable"})
            continue
        cell_dir = out / "runs" / _cell_dirname(cfg)
        try:
            art = run_experiment(cfg, cell_dir)
            if art.test is not None:
                value = repr(art.test.rmse)
            else:
                value = art.status
            details.append({"row": row, "column": col, "status": art.status, "dir": str(cell_dir.relative_to(out)),
                            "test_rmse": art.test.rmse if art.test else None, "performance": art.performance})
        except Exception as exc:  # a failed cell is recorded and the grid continues
            log.exception("grid cell %s / %s failed", row, col)
            value = "failed"
            details.append({"row": row, "column": col, "status": "failed", "error": f"{type(exc).__name__}: {exc}"})
        table[row, col] = value
    summary = out / "summary.csv"
    with summary.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row"] + cols)
        for row in rows:
            w.writerow([row] + [table.get((row, col), "-") for col in cols])
    (out / "summary.json").write_text(json.dumps(details, indent=2, sort_keys=True))
    return summary


def read_summary(path: str | Path) -> tuple[list[str], dict[str, dict[str, str]]]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        table = {r[0]: dict(zip(header[1:], r[1:])) for r in reader}
    return header[1:], table


def rmse_or_none(value: str) -> float | None:
    try:
        v = float(value)
    except ValueError:
        return None
    return v if math.isfinite(v) else None
