"""Accuracy protocol: pixel metrics, zonal totals, error maps, correlations.

Pixel metrics are R^2, RMSE, PSNR and the global Universal Image Quality
Index, all computed in float64 over pixels valid in both grids. Variances
and the covariance use population (1/n) normalisation; PSNR uses the
reference maximum as the peak value.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .raster import GeoMismatchError, RasterGrid, check_aligned, log_transform


class EvaluationError(ValueError):
    pass


@dataclass
class MetricReport:
    r2: float
    rmse: float
    psnr_db: float
    uiqi: float
    n: int
    scale: str = "pixel"
    space: str = "radiance"
    flags: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        def clean(v):
            return None if v is None or not math.isfinite(v) else v

        out = {
            "r2": clean(self.r2),
            "rmse": self.rmse,
            "psnr_db": clean(self.psnr_db),
            "uiqi": clean(self.uiqi),
            "n": self.n,
            "scale": self.scale,
            "space": self.space,
        }
        if self.flags:
            out["flags"] = list(self.flags)
        return out


def metrics_from_arrays(y, yhat, scale: str = "pixel", space: str = "radiance") -> MetricReport:
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.shape != yhat.shape:
        raise EvaluationError(f"length mismatch {y.shape} vs {yhat.shape}")
    n = y.size
    if n < 2:
        raise EvaluationError("need at least two valid common pixels")
    flags = []
    diff = y - yhat
    sse = float(np.sum(diff * diff))
    mse = sse / n
    mean_y = float(np.mean(y))
    mean_p = float(np.mean(yhat))
    dy = y - mean_y
    dp = yhat - mean_p
    sst = float(np.sum(dy * dy))
    var_y = sst / n
    var_p = float(np.sum(dp * dp)) / n
    cov = float(np.sum(dy * dp)) / n

    if sst == 0:
        r2 = math.nan
        flags.append("r2_undefined_constant_reference")
    else:
        r2 = 1.0 - sse / sst
    peak = float(np.max(y))
    psnr = math.inf if mse == 0 else 10.0 * math.log10(peak * peak / mse)
    denom = (var_y + var_p) * (mean_y * mean_y + mean_p * mean_p)
    if denom == 0:
        uiqi = math.nan
        flags.append("uiqi_undefined_zero_denominator")
    else:
        uiqi = 4.0 * cov * (mean_y * mean_p) / denom
    return MetricReport(r2, math.sqrt(mse), psnr, uiqi, n, scale, space, flags)


def common_valid(reference: RasterGrid, prediction: RasterGrid) -> np.ndarray:
    try:
        check_aligned([reference, prediction])
    except GeoMismatchError as exc:
        raise EvaluationError(str(exc)) from exc
    return reference.valid & prediction.valid


def compute_metrics(reference: RasterGrid, prediction: RasterGrid, space: str = "radiance") -> MetricReport:
    """Pixel-scale metrics; ``space="log"`` compares ``ln(1+x)`` of both grids."""
    if space not in ("radiance", "log"):
        raise ValueError(f"unknown space {space!r}")
    mask = common_valid(reference, prediction)
    if mask.sum() < 2:
        raise EvaluationError("no overlap: fewer than two valid common pixels")
    y = reference.values[mask].astype(np.float64)
    p = prediction.values[mask].astype(np.float64)
    if space == "log":
        y, p = log_transform(np.maximum(y, 0)), log_transform(np.maximum(p, 0))
    return metrics_from_arrays(y, p, "pixel", space)


@dataclass
class ZonalRow:
    zone_id: int
    pixel_count: int
    sum_reference: float
    sum_prediction: float


@dataclass
class ZonalTable:
    rows: list[ZonalRow]

    def zone_ids(self) -> list[int]:
        return [r.zone_id for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["zone_id", "pixel_count", "sum_reference", "sum_prediction"])
        for r in self.rows:
            w.writerow([r.zone_id, r.pixel_count, repr(r.sum_reference), repr(r.sum_prediction)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ZonalTable":
        rows = []
        for row in csv.DictReader(io.StringIO(text)):
            rows.append(
                ZonalRow(int(row["zone_id"]), int(row["pixel_count"]), float(row["sum_reference"]), float(row["sum_prediction"]))
            )
        return cls(rows)


def zonal_sum(grid: RasterGrid, zones: RasterGrid, prediction: Optional[RasterGrid] = None) -> ZonalTable:
    """Per-zone totals over valid pixels, ascending zone id; label 0 is ignored.

    With ``prediction`` given, a pixel counts only if valid in both grids and
    ``sum_prediction`` holds its total; otherwise that column is NaN.
    """
    grids = [grid, zones] if prediction is None else [grid, zones, prediction]
    try:
        check_aligned(grids)
    except GeoMismatchError as exc:
        raise EvaluationError(str(exc)) from exc
    labels = np.where(zones.valid, zones.values, 0).astype(np.int64)
    ok = grid.valid & (labels != 0)
    if prediction is not None:
        ok &= prediction.valid
    lab = labels[ok]
    ids, inverse = np.unique(lab, return_inverse=True)
    counts = np.bincount(inverse, minlength=len(ids))
    ref_sum = np.bincount(inverse, weights=grid.values[ok].astype(np.float64), minlength=len(ids))
    if prediction is not None:
        pred_sum = np.bincount(inverse, weights=prediction.values[ok].astype(np.float64), minlength=len(ids))
    else:
        pred_sum = np.full(len(ids), math.nan)
    return ZonalTable(
        [ZonalRow(int(i), int(c), float(r), float(p)) for i, c, r, p in zip(ids, counts, ref_sum, pred_sum)]
    )


def city_scale_eval(reference: RasterGrid, prediction: RasterGrid, zones: RasterGrid) -> tuple[float, float, ZonalTable]:
    """R^2 and RMSE between per-zone reference and prediction totals."""
    table = zonal_sum(reference, zones, prediction)
    if len(table.rows) < 2:
        raise EvaluationError("city-scale evaluation needs at least two zones")
    y = np.array([r.sum_reference for r in table.rows])
    p = np.array([r.sum_prediction for r in table.rows])
    d = y - p
    sst = float(np.sum((y - y.mean()) ** 2))
    r2 = math.nan if sst == 0 else 1.0 - float(np.sum(d * d)) / sst
    return r2, math.sqrt(float(np.mean(d * d))), table


def error_map(reference: RasterGrid, prediction: RasterGrid) -> RasterGrid:
    """Signed ``prediction - reference``; nodata where either input is nodata."""
    mask = common_valid(reference, prediction)
    diff = prediction.values.astype(np.float32) - reference.values.astype(np.float32)
    return reference.like(np.where(mask, diff, np.float32(reference.nodata)))


def pearson(x, y) -> float:
    """Sample Pearson correlation coefficient."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size or x.size < 2:
        raise EvaluationError("pearson needs two equal-length vectors of length >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.sum(dx * dx))
    syy = float(np.sum(dy * dy))
    if sxx == 0 or syy == 0:
        raise EvaluationError("pearson is undefined for a constant input")
    r = float(np.sum(dx * dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


@dataclass
class CorrelationRow:
    indicator: str
    n_pairs: int
    pearson: float


def read_indicators(path) -> dict[str, dict[tuple[str, int], float]]:
    """Indicator CSV with ``region,year,value`` and an optional ``indicator`` column.

    Without that column the file stem names the indicator.
    """
    path = Path(path)
    out: dict[str, dict[tuple[str, int], float]] = defaultdict(dict)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            name = row.get("indicator") or path.stem
            out[name][(str(row["region"]).strip(), int(row["year"]))] = float(row["value"])
    return dict(out)


def correlation_report(
    ntl_totals: Mapping[int, ZonalTable],
    indicators: Mapping[str, Mapping[tuple[str, int], float]],
    column: str = "sum_prediction",
) -> list[CorrelationRow]:
    """Pearson coefficient per indicator over the (region, year) inner join.

    Zone ids are matched to indicator regions by their string form. A final
    ``average`` row holds the mean of the per-indicator coefficients.
    """
    ntl: dict[tuple[str, int], float] = {}
    for year, table in ntl_totals.items():
        for r in table.rows:
            ntl[(str(r.zone_id), int(year))] = getattr(r, column)
    rows = []
    for name in sorted(indicators):
        values = indicators[name]
        keys = sorted(set(ntl) & set(values))
        if not keys:
            raise EvaluationError(f"indicator {name!r} shares no (region, year) keys with the NTL totals")
        rows.append(CorrelationRow(name, len(keys), pearson([ntl[k] for k in keys], [values[k] for k in keys])))
    if rows:
        rows.append(CorrelationRow("average", min(r.n_pairs for r in rows), float(np.mean([r.pearson for r in rows]))))
    return rows


def correlation_csv(rows: Sequence[CorrelationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["indicator", "n_pairs", "pearson"])
    for r in rows:
        w.writerow([r.indicator, r.n_pairs, repr(r.pearson)])
    return buf.getvalue()


_YEAR = re.compile(r"(?<!\d)(\d{4})(?!\d)")


def year_from_name(path) -> int:
    """Year encoded in a file name such as ``zonal_2012.csv``; ``path:YEAR`` overrides."""
    text = str(path)
    if ":" in text and text.rsplit(":", 1)[1].isdigit():
        return int(text.rsplit(":", 1)[1])
    match = _YEAR.findall(Path(text).stem)
    if not match:
        raise EvaluationError(f"cannot infer a year from {text!r}; name it like zonal_2012.csv or pass PATH:YEAR")
    return int(match[-1])


def report_json(report: MetricReport, extra: Optional[dict] = None) -> str:
    d = report.to_json()
    if extra:
        d.update(extra)
    return json.dumps(d, indent=2, sort_keys=True) + "\n"
