"""Synthetic scenes with a known input-to-target relationship.

A high-resolution impervious mask is drawn from random settlements and road
segments. Its block mean (``density``) drives every other layer:

* DMSP-like DN: blurred density, scaled and saturated at 63;
* six Landsat-like bands: fixed linear mixtures of density and an
  independent smooth vegetation field;
* log-space target: ``ln(1 + 5 * density + 2 * blur(DN / 63))``.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .patches import PatchRecord, RasterSet, fit_normalization, normalize
from .raster import RasterGrid

_BAND_DENSITY = np.array([0.05, 0.08, 0.12, -0.20, 0.25, 0.30])
_BAND_VEG = np.array([-0.02, 0.03, -0.05, 0.40, -0.10, -0.15])
_BAND_OFFSET = np.array([0.05, 0.07, 0.06, 0.25, 0.20, 0.12])


def impervious_mask(rows: int, cols: int, rng: np.random.Generator, settlements: int = 4, roads: int = 3) -> np.ndarray:
    yy, xx = np.mgrid[0:rows, 0:cols].astype(np.float64)
    built = np.zeros((rows, cols), dtype=bool)
    for _ in range(settlements):
        cy, cx = rng.uniform(0, rows), rng.uniform(0, cols)
        ry = rng.uniform(0.04, 0.18) * rows
        rx = rng.uniform(0.04, 0.18) * cols
        core = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
        fill = rng.uniform(0.5, 0.95)
        built |= (core < 1) & (rng.random((rows, cols)) < fill)
    for _ in range(roads):
        y0, x0 = rng.uniform(0, rows), rng.uniform(0, cols)
        angle = rng.uniform(0, np.pi)
        dist = np.abs((yy - y0) * np.cos(angle) - (xx - x0) * np.sin(angle))
        built |= dist < rng.uniform(0.6, 1.5)
    return built.astype(np.float32)


def _block_mean(a: np.ndarray, s: int) -> np.ndarray:
    r, c = a.shape[0] // s, a.shape[1] // s
    return a.reshape(r, s, c, s).mean(axis=(1, 3))


def scene_layers(rows: int, cols: int, ratio: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """All layers of one scene; every array is float32 at low resolution except ``mask``."""
    area = rows * cols / 4096
    mask = impervious_mask(
        rows * ratio,
        cols * ratio,
        rng,
        settlements=max(2, int(round(4 * area))),
        roads=max(1, int(round(3 * np.sqrt(area)))),
    )
    density = _block_mean(mask.astype(np.float64), ratio)
    dn = np.minimum(63.0, np.round(90.0 * ndimage.gaussian_filter(density, 1.5, mode="nearest")))
    veg = ndimage.gaussian_filter(rng.random((rows, cols)), 4.0, mode="nearest")
    veg = (veg - veg.min()) / max(veg.max() - veg.min(), 1e-12)
    bands = (
        _BAND_DENSITY[:, None, None] * density
        + _BAND_VEG[:, None, None] * veg
        + _BAND_OFFSET[:, None, None]
        + rng.normal(0, 0.005, (6, rows, cols))
    )
    target = np.log1p(5.0 * density + 2.0 * ndimage.gaussian_filter(dn / 63.0, 1.0, mode="nearest"))
    return {
        "mask": mask,
        "density": density.astype(np.float32),
        "dmsp": dn.astype(np.float32),
        "landsat": np.clip(bands, 0, 1).astype(np.float32),
        "target": target.astype(np.float32),
    }


def synthetic_patches(
    count: int = 64,
    patch: int = 64,
    ratio: int = 5,
    n_val: int = 8,
    n_test: int = 0,
    seed: int = 0,
    normalized: bool = True,
) -> list[PatchRecord]:
    """Independent synthetic scenes, one per patch.

    The last ``n_val + n_test`` records form the val and test splits; inputs
    are min-max normalised with statistics from the train split.
    """
    rng = np.random.default_rng(seed)
    records = []
    n_train = count - n_val - n_test
    for i in range(count):
        layers = scene_layers(patch, patch, ratio, rng)
        split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
        records.append(
            PatchRecord(
                patch_id=f"s{i:06d}",
                row0=0,
                col0=0,
                inputs=np.concatenate([layers["dmsp"][None], layers["landsat"]]),
                mask=layers["mask"],
                target=layers["target"],
                stratum="synthetic",
                lit_fraction=float((layers["dmsp"] > 0).mean()),
                split=split,
            )
        )
    if normalized:
        records = normalize(records, fit_normalization(records))
    return records


def synthetic_rasters(rows: int, cols: int, ratio: int = 5, seed: int = 0, pixel_size: float = 250.0) -> RasterSet:
    """A co-registered raster set with a radiance target and two region labels."""
    rng = np.random.default_rng(seed)
    layers = scene_layers(rows, cols, ratio, rng)

    def grid(values, px=pixel_size):
        return RasterGrid(values, 0.0, 0.0, px)

    regions = np.ones((rows, cols), dtype=np.float32)
    regions[:, cols // 2 :] = 2
    return RasterSet(
        dmsp=grid(layers["dmsp"]),
        landsat=[grid(b) for b in layers["landsat"]],
        mask=grid(layers["mask"], pixel_size / ratio),
        target=grid(np.expm1(layers["target"])),
        regions=grid(regions),
    )
