"""Raster grids and the per-raster preprocessing steps.

Grids are stored in the EGRID format: a 64-byte little-endian header

    magic "EGRD" | u32 version | u32 rows | u32 cols | f64 x_origin |
    f64 y_origin | f64 pixel_size | f32 nodata | 20 reserved zero bytes

followed by ``rows * cols`` float32 values in row-major order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import atomic_write

EGRID_MAGIC = b"EGRD"
EGRID_VERSION = 1
_HEADER = struct.Struct("<4sIIIdddf20s")
MAX_CELLS = 2**31 - 1
DEFAULT_NODATA = np.float32(-9999.0)


class RasterError(Exception):
    """Base class for raster I/O and preprocessing failures."""


class MagicError(RasterError):
    pass


class TruncatedError(RasterError):
    pass


class DimensionError(RasterError):
    pass


class GeoMismatchError(RasterError):
    pass


@dataclass
class RasterGrid:
    values: np.ndarray
    x_origin: float = 0.0
    y_origin: float = 0.0
    pixel_size: float = 1.0
    nodata: float = float(DEFAULT_NODATA)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or 0 in self.values.shape:
            raise DimensionError(f"raster must be a non-empty 2-D array, got {self.values.shape}")
        if not self.pixel_size > 0:
            raise DimensionError("pixel_size must be positive")
        self.nodata = float(np.float32(self.nodata))

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def valid(self) -> np.ndarray:
        v = self.values
        return (v != np.float32(self.nodata)) & ~np.isnan(v)

    def like(self, values: np.ndarray) -> "RasterGrid":
        return RasterGrid(values, self.x_origin, self.y_origin, self.pixel_size, self.nodata)

    def geo(self) -> tuple:
        return (self.rows, self.cols, self.x_origin, self.y_origin, self.pixel_size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RasterGrid):
            return NotImplemented
        return (
            self.geo() == other.geo()
            and np.float32(self.nodata).tobytes() == np.float32(other.nodata).tobytes()
            and self.values.tobytes() == other.values.tobytes()
        )


def check_aligned(grids: Sequence[RasterGrid]) -> None:
    ref = grids[0].geo()
    for g in grids[1:]:
        if g.geo() != ref:
            raise GeoMismatchError(f"grids are not co-registered: {g.geo()} vs {ref}")


def egrid_bytes(grid: RasterGrid) -> bytes:
    header = _HEADER.pack(
        EGRID_MAGIC,
        EGRID_VERSION,
        grid.rows,
        grid.cols,
        grid.x_origin,
        grid.y_origin,
        grid.pixel_size,
        grid.nodata,
        bytes(20),
    )
    return header + grid.values.astype("<f4").tobytes()


def parse_egrid(blob: bytes) -> RasterGrid:
    if len(blob) < 4 or blob[:4] != EGRID_MAGIC:
        raise MagicError(f"bad magic {blob[:4]!r}")
    if len(blob) < _HEADER.size:
        raise TruncatedError("header shorter than 64 bytes")
    _, version, rows, cols, x0, y0, px, nodata, _ = _HEADER.unpack_from(blob)
    if version != EGRID_VERSION:
        raise RasterError(f"unsupported EGRID version {version}")
    if rows == 0 or cols == 0 or rows * cols > MAX_CELLS:
        raise DimensionError(f"unsupported dimensions {rows}x{cols}")
    need = _HEADER.size + rows * cols * 4
    if len(blob) < need:
        raise TruncatedError(f"payload holds {len(blob) - _HEADER.size} bytes, expected {rows * cols * 4}")
    values = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=_HEADER.size).reshape(rows, cols)
    return RasterGrid(values.astype(np.float32), x0, y0, px, nodata)


def write_egrid(grid: RasterGrid, path) -> None:
    atomic_write(path, egrid_bytes(grid))


def read_egrid(path) -> RasterGrid:
    return parse_egrid(Path(path).read_bytes())


def percentile_composite(stack: Sequence[RasterGrid], p: float) -> RasterGrid:
    """Per-pixel nearest-rank percentile of the valid observations.

    The value kept is the sorted observation at 1-based rank ``ceil(n*p/100)``;
    pixels with no valid observation become nodata.
    """
    if not stack:
        raise RasterError("empty stack")
    if not 0 < p <= 100:
        raise ValueError("percentile must lie in (0, 100]")
    check_aligned(stack)
    ref = stack[0]
    data = np.stack([g.values.astype(np.float64) for g in stack])
    valid = np.stack([g.valid for g in stack])
    # invalid observations sort to the end
    data = np.where(valid, data, np.inf)
    data.sort(axis=0)
    n = valid.sum(axis=0)
    rank = np.ceil(n * p / 100.0).astype(np.int64)
    rank = np.clip(rank, 1, None) - 1
    picked = np.take_along_axis(data, np.minimum(rank, len(stack) - 1)[None], axis=0)[0]
    out = np.where(n > 0, picked, ref.nodata).astype(np.float32)
    return ref.like(out)


def compute_cap_threshold(city_grids: Sequence[RasterGrid]) -> float:
    """Mean of the per-city maximum over valid pixels."""
    if not city_grids:
        raise RasterError("no city grids given")
    maxima = []
    for g in city_grids:
        mask = g.valid
        if not mask.any():
            raise RasterError("city grid has no valid pixels")
        maxima.append(float(g.values[mask].max()))
    return float(np.mean(maxima))


def cap_outliers(grid: RasterGrid, threshold: float) -> RasterGrid:
    """Replace values above ``threshold`` by their 5x5 neighbourhood mean.

    The mean uses original values of valid neighbours that do not themselves
    exceed the threshold. Without such neighbours, or when the mean still
    exceeds the threshold, the pixel is clamped to the threshold.
    """
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    v = grid.values.astype(np.float64)
    valid = grid.valid
    thr32 = np.float32(threshold)
    exceed = valid & (grid.values > thr32)
    if not exceed.any():
        return grid.like(grid.values.copy())
    ok = valid & ~exceed
    contrib = np.where(ok, v, 0.0)
    total = np.zeros_like(v)
    count = np.zeros_like(v)
    padded_v = np.pad(contrib, 2)
    padded_c = np.pad(ok.astype(np.float64), 2)
    rows, cols = v.shape
    for dr in range(5):
        for dc in range(5):
            if dr == 2 and dc == 2:
                continue
            total += padded_v[dr : dr + rows, dc : dc + cols]
            count += padded_c[dr : dr + rows, dc : dc + cols]
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = (total / count).astype(np.float32)
    replacement = np.where((count > 0) & (mean <= thr32), mean, thr32)
    out = np.where(exceed, replacement, grid.values)
    return grid.like(out)


def log_transform(values):
    """Natural log of ``1 + x``; accepts an array or a RasterGrid."""
    if isinstance(values, RasterGrid):
        mask = values.valid
        if np.any(values.values[mask] < 0):
            raise ValueError("log_transform needs non-negative values")
        out = np.where(mask, np.log1p(np.where(mask, values.values, 0)), values.nodata)
        return values.like(out)
    arr = np.asarray(values)
    if np.any(arr < 0):
        raise ValueError("log_transform needs non-negative values")
    return np.log1p(arr)


def inverse_log(values):
    """Inverse of :func:`log_transform`: ``exp(y) - 1``."""
    if isinstance(values, RasterGrid):
        mask = values.valid
        out = np.where(mask, np.expm1(np.where(mask, values.values, 0)), values.nodata)
        return values.like(out)
    return np.expm1(np.asarray(values))


@dataclass
class NormStats:
    mins: np.ndarray
    maxs: np.ndarray

    def to_json(self) -> dict:
        return {"bands": [{"min": float(lo), "max": float(hi)} for lo, hi in zip(self.mins, self.maxs)]}

    @classmethod
    def from_json(cls, d: dict) -> "NormStats":
        bands = d["bands"]
        return cls(
            np.array([b["min"] for b in bands], dtype=np.float32),
            np.array([b["max"] for b in bands], dtype=np.float32),
        )

    def save(self, path) -> None:
        atomic_write(path, (json.dumps(self.to_json(), indent=2) + "\n").encode())

    @classmethod
    def load(cls, path) -> "NormStats":
        return cls.from_json(json.loads(Path(path).read_text()))


def minmax_fit(stacks: Sequence[np.ndarray]) -> NormStats:
    """Per-band min and max over band-first arrays (bands, ...)."""
    if len(stacks) == 0:
        raise ValueError("cannot fit normalisation on an empty training set")
    bands = stacks[0].shape[0]
    mins = np.full(bands, np.inf, dtype=np.float32)
    maxs = np.full(bands, -np.inf, dtype=np.float32)
    for s in stacks:
        flat = s.reshape(bands, -1)
        mins = np.minimum(mins, flat.min(axis=1))
        maxs = np.maximum(maxs, flat.max(axis=1))
    return NormStats(mins, maxs)


def minmax_apply(stack: np.ndarray, stats: NormStats) -> np.ndarray:
    """Scale each band to [0, 1] with the fitted extremes; degenerate bands map to 0."""
    stack = np.asarray(stack, dtype=np.float32)
    shape = (-1,) + (1,) * (stack.ndim - 1)
    lo = stats.mins.reshape(shape)
    span = (stats.maxs - stats.mins).reshape(shape)
    safe = np.where(span > 0, span, 1)
    out = np.where(span > 0, (stack - lo) / safe, 0)
    return np.clip(out, 0, 1).astype(np.float32)


def downsample_mean(grid: RasterGrid, factor: int) -> RasterGrid:
    """Block mean over valid pixels; blocks without valid pixels become nodata."""
    r, c = grid.rows // factor, grid.cols // factor
    if r == 0 or c == 0:
        raise DimensionError("raster smaller than the pooling factor")
    v = grid.values[: r * factor, : c * factor].astype(np.float64)
    m = grid.valid[: r * factor, : c * factor]
    s = np.where(m, v, 0).reshape(r, factor, c, factor).sum(axis=(1, 3))
    n = m.reshape(r, factor, c, factor).sum(axis=(1, 3))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(n > 0, s / np.maximum(n, 1), grid.nodata).astype(np.float32)
    return RasterGrid(out, grid.x_origin, grid.y_origin, grid.pixel_size * factor, grid.nodata)

