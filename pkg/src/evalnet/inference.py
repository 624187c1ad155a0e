"""Whole-raster prediction with overlapping tiles."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .model import EvalNet
from .patches import RasterSet
from .raster import NormStats, RasterGrid, downsample_mean, inverse_log, minmax_apply


def _forward(model: EvalNet, x: np.ndarray, mask: np.ndarray, refine: bool) -> np.ndarray:
    with T.no_grad():
        initial = model.construct(T.Tensor(x[None]))
        if refine and model.dfr is not None:
            return model.refine(initial, T.Tensor(mask[None, None])).data[0, 0]
        return initial.data[0, 0]


def tile_starts(extent: int, tile: int, overlap: int) -> list[int]:
    if extent <= tile:
        return [0]
    step = tile - overlap
    if step <= 0:
        raise ValueError("overlap must be smaller than the tile size")
    starts = list(range(0, extent - tile, step))
    starts.append(extent - tile)
    return sorted(set(starts))


def _owned(starts: list[int], tile: int, extent: int) -> list[tuple[int, int]]:
    """Half-open range each tile writes: overlaps are split at their midpoint."""
    spans = []
    for i, s in enumerate(starts):
        lo = 0 if i == 0 else (starts[i - 1] + tile + s) // 2
        hi = extent if i == len(starts) - 1 else (s + tile + starts[i + 1]) // 2
        spans.append((lo, hi))
    return spans


def predict_log(
    model: EvalNet,
    inputs: np.ndarray,
    mask: np.ndarray,
    tile: Optional[int] = 256,
    overlap: int = 32,
    refine: bool = True,
) -> np.ndarray:
    """Log-space prediction for a normalised (7, H, W) stack.

    ``mask`` is the (s*H, s*W) high-resolution guidance. Extents are zero
    padded up to a multiple of 32. With ``tile=None`` the whole raster goes
    through a single forward pass; otherwise tiles of ``tile`` pixels overlap
    by ``overlap`` and each contributes only its centre region.
    """
    s = model.config.scale_ratio
    _, h, w = inputs.shape
    if mask.shape != (s * h, s * w):
        raise T.ShapeError(f"mask {mask.shape} does not match {s}x{(h, w)}")
    hp, wp = -(-h // 32) * 32, -(-w // 32) * 32
    x = np.zeros((inputs.shape[0], hp, wp), dtype=np.float32)
    x[:, :h, :w] = inputs
    m = np.zeros((s * hp, s * wp), dtype=np.float32)
    m[: s * h, : s * w] = mask

    if tile is None or (hp <= tile and wp <= tile):
        return _forward(model, x, m, refine)[:h, :w]
    if tile % 32:
        raise ValueError("tile size must be a multiple of 32")

    out = np.zeros((hp, wp), dtype=np.float32)
    rs = tile_starts(hp, tile, overlap)
    cs = tile_starts(wp, tile, overlap)
    th, tw = min(tile, hp), min(tile, wp)
    for r0, (ra, rb) in zip(rs, _owned(rs, th, hp)):
        for c0, (ca, cb) in zip(cs, _owned(cs, tw, wp)):
            pred = _forward(
                model,
                x[:, r0 : r0 + th, c0 : c0 + tw],
                m[s * r0 : s * (r0 + th), s * c0 : s * (c0 + tw)],
                refine,
            )
            out[ra:rb, ca:cb] = pred[ra - r0 : rb - r0, ca - c0 : cb - c0]
    return out[:h, :w]


def infer_raster(
    model: EvalNet,
    rasters: RasterSet,
    stats: NormStats,
    tile: Optional[int] = 256,
    overlap: int = 32,
) -> RasterGrid:
    """Radiance prediction on the DMSP grid; nodata wherever an input band is nodata.

    Negative radiance after exponentiation is clipped to zero.
    """
    if rasters.scale_ratio != model.config.scale_ratio:
        raise T.ShapeError(
            f"raster scale ratio {rasters.scale_ratio} differs from the model's {model.config.scale_ratio}"
        )
    valid = rasters.input_valid()
    stack = np.where(valid[None], rasters.input_stack(), 0)
    x = minmax_apply(stack, stats)
    mask = np.where(rasters.mask.valid, np.clip(rasters.mask.values, 0, 1), 0).astype(np.float32)
    log_pred = predict_log(model, x, mask, tile, overlap)
    radiance = np.maximum(inverse_log(log_pred.astype(np.float64)), 0).astype(np.float32)
    ref = rasters.dmsp
    return ref.like(np.where(valid, radiance, np.float32(ref.nodata)))


def export_coarse(grid: RasterGrid, factor: int = 2) -> RasterGrid:
    """Coarser product by block-averaging radiance (250 m to 500 m with ``factor=2``)."""
    return downsample_mean(grid, factor)
