"""Regression metrics, Bland-Altman agreement, generalization gap and performance classes."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

WELL_PERFORMING_RMSE = 8.5
COLLAPSE_R2 = 0.05
COLLAPSE_SPREAD = 0.5
OVERFIT_GAP = 3.0
LOA_MULTIPLIER = 1.96
CRITICAL_BAND = (40.0, 50.0)


@dataclass
class MetricsReport:
    rmse: float
    mae: float
    r2: float
    n: int
    band_mae_40_50: float | None = None
    pred_std: float = 0.0


@dataclass
class BlandAltman:
    bias: float
    sd: float
    loa_low: float
    loa_high: float


@dataclass
class PerformanceClass:
    label: str
    overfit: bool = False

    def __str__(self):
        return self.label + (" (overfit)" if self.overfit else "")


def _pair(preds, truths) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    t = np.asarray(truths, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} truths")
    if p.size < 2:
        raise ValueError("need at least two samples")
    return p, t


def regression_metrics(preds, truths) -> MetricsReport:
    p, t = _pair(preds, truths)
    resid = p - t
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("truth variance is zero; R^2 undefined")
    lo, hi = CRITICAL_BAND
    band = (t >= lo) & (t <= hi)
    return MetricsReport(
        rmse=math.sqrt(float(np.mean(resid ** 2))),
        mae=float(np.mean(np.abs(resid))),
        r2=1.0 - float(np.sum(resid ** 2)) / ss_tot,
        n=int(p.size),
        band_mae_40_50=float(np.mean(np.abs(resid[band]))) if band.any() else None,
        pred_std=float(np.std(p)),
    )


def bland_altman(preds, truths) -> BlandAltman:
    """Bias and limits of agreement using the sample (n - 1) standard deviation."""
    p, t = _pair(preds, truths)
    diff = p - t
    bias = float(diff.mean())
    sd = float(diff.std(ddof=1))
    return BlandAltman(bias, sd, bias - LOA_MULTIPLIER * sd, bias + LOA_MULTIPLIER * sd)


def generalization_gap(train_rmse: float, test_rmse: float, threshold: float = OVERFIT_GAP) -> tuple[float, bool]:
    if train_rmse < 0 or test_rmse < 0:
        raise ValueError("RMSE values must be non-negative")
    gap = test_rmse - train_rmse
    return gap, gap > threshold


def classify_performance(report: MetricsReport, pred_std: float | None = None, gap: float | None = None,
                         r2_floor: float = COLLAPSE_R2, spread_floor: float = COLLAPSE_SPREAD,
                         rmse_threshold: float = WELL_PERFORMING_RMSE,
                         gap_threshold: float = OVERFIT_GAP) -> PerformanceClass:
    """collapsed (near-constant predictor) > well_performing (RMSE <= 8.5) > ordinary."""
    spread = report.pred_std if pred_std is None else pred_std
    overfit = gap is not None and gap > gap_threshold
    if report.r2 < r2_floor or spread < spread_floor:
        return PerformanceClass("collapsed", overfit)
    if report.rmse <= rmse_threshold:
        return PerformanceClass("well_performing", overfit)
    return PerformanceClass("ordinary", overfit)


# ---------------------------------------------------------------------------
# export

PRED_COLUMNS = ("truth", "pred")
BA_COLUMNS = ("mean", "diff")


def _fmt(x: float) -> str:
    return repr(float(x))


def write_prediction_csv(preds, truths, path: str | Path) -> Path:
    p, t = _pair(preds, truths)
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PRED_COLUMNS)
        w.writerows((_fmt(ti), _fmt(pi)) for ti, pi in zip(t, p))
    return path


def write_bland_altman_csv(preds, truths, path: str | Path) -> Path:
    p, t = _pair(preds, truths)
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BA_COLUMNS)
        w.writerows((_fmt((pi + ti) / 2.0), _fmt(pi - ti)) for ti, pi in zip(t, p))
    return path


def read_csv_columns(path: str | Path) -> dict[str, np.ndarray]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        cols = reader.fieldnames or []
    return {c: np.array([float(r[c]) for r in rows]) for c in cols}


def export_report(path: str | Path, reports: Mapping[str, MetricsReport], predictions: tuple[Sequence, Sequence],
                  history=None, extra: Mapping | None = None) -> dict[str, Path]:
    """Write metrics.json, pred_vs_truth.csv, bland_altman.csv and (with a history) history.csv.

    ``predictions`` is the ``(preds, truths)`` pair plotted; ``reports`` maps
    split name to its metrics.
    """
    if not reports:
        raise ValueError("no reports to export")
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    preds, truths = predictions
    ba = bland_altman(preds, truths)
    payload = {"metrics": {k: asdict(v) for k, v in reports.items()}, "bland_altman": asdict(ba)}
    if extra:
        payload.update(extra)
    files = {
        "metrics": out / "metrics.json",
        "pred_vs_truth": out / "pred_vs_truth.csv",
        "bland_altman": out / "bland_altman.csv",
    }
    files["metrics"].write_text(json.dumps(payload, indent=2, sort_keys=True))
    write_prediction_csv(preds, truths, files["pred_vs_truth"])
    write_bland_altman_csv(preds, truths, files["bland_altman"])
    if history is not None:
        files["history"] = history.to_csv(out / "history.csv")
    return files


def load_reports(path: str | Path) -> dict[str, MetricsReport]:
    payload = json.loads(Path(path).read_text())
    return {k: MetricsReport(**v) for k, v in payload["metrics"].items()}
