"""Training patches: sampling from co-registered rasters, splits, storage."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .checkpoint import atomic_write
from .raster import NormStats, RasterError, RasterGrid, check_aligned, log_transform, minmax_apply, minmax_fit, read_egrid

SPLITS = ("train", "val", "test")
INDEX_HEADER = ["patch_id", "row0", "col0", "stratum", "lit_fraction", "split"]


@dataclass
class PatchRecord:
    patch_id: str
    row0: int
    col0: int
    inputs: np.ndarray  # (7, P, P)
    mask: np.ndarray  # (s*P, s*P), values in [0, 1]
    target: np.ndarray  # (P, P), log space
    stratum: str = "all"
    lit_fraction: float = 0.0
    split: str = "train"


@dataclass
class RasterSet:
    """Co-registered inputs for one year; the mask is ``scale_ratio`` times finer."""

    dmsp: RasterGrid
    landsat: list[RasterGrid]
    mask: RasterGrid
    target: Optional[RasterGrid] = None
    regions: Optional[RasterGrid] = None

    def __post_init__(self):
        if len(self.landsat) != 6:
            raise RasterError(f"expected 6 Landsat bands, got {len(self.landsat)}")
        grids = [self.dmsp, *self.landsat]
        if self.target is not None:
            grids.append(self.target)
        if self.regions is not None:
            grids.append(self.regions)
        check_aligned(grids)
        s = self.mask.rows // self.dmsp.rows
        if s < 1 or self.mask.rows != s * self.dmsp.rows or self.mask.cols != s * self.dmsp.cols:
            raise RasterError(
                f"mask {self.mask.rows}x{self.mask.cols} is not an integer multiple of "
                f"{self.dmsp.rows}x{self.dmsp.cols}"
            )

    @property
    def scale_ratio(self) -> int:
        return self.mask.rows // self.dmsp.rows

    def input_stack(self) -> np.ndarray:
        return np.stack([self.dmsp.values, *[b.values for b in self.landsat]])

    def input_valid(self) -> np.ndarray:
        ok = self.dmsp.valid.copy()
        for b in self.landsat:
            ok &= b.valid
        return ok

    @classmethod
    def from_manifest(cls, path) -> "RasterSet":
        """Load ``{dmsp, landsat: [6], mask, target?, regions?}``; paths relative to the file."""
        path = Path(path)
        entries = json.loads(path.read_text())
        base = path.parent

        def load(p):
            return read_egrid(base / p)

        try:
            return cls(
                dmsp=load(entries["dmsp"]),
                landsat=[load(p) for p in entries["landsat"]],
                mask=load(entries["mask"]),
                target=load(entries["target"]) if entries.get("target") else None,
                regions=load(entries["regions"]) if entries.get("regions") else None,
            )
        except KeyError as exc:
            raise RasterError(f"raster manifest missing key {exc}") from exc


class PatchBudgetExhausted(RasterError):
    def __init__(self, retained: list[PatchRecord], requested: int, attempts: int):
        self.records = retained
        self.retained = len(retained)
        self.requested = requested
        super().__init__(
            f"sampling budget of {attempts} attempts exhausted with {self.retained}/{requested} patches retained"
        )


def _window_ok(mask: np.ndarray, r: int, c: int, p: int) -> bool:
    return bool(mask[r : r + p, c : c + p].all())


def extract_patches(
    rasters: RasterSet,
    patch: int,
    count: int,
    lit_min: float = 0.01,
    seed: int = 0,
) -> list[PatchRecord]:
    """Sample ``count`` windows with uniformly random origins.

    Windows containing nodata in any band, or whose share of DMSP pixels with
    DN > 0 is below ``lit_min``, are rejected. Origins are drawn without
    repetition. Raises :class:`PatchBudgetExhausted` (carrying the retained
    records) after ``100 * count`` attempts.
    """
    if patch % 32:
        raise ValueError("patch size must be divisible by 32")
    rows, cols = rasters.dmsp.rows, rasters.dmsp.cols
    if rows < patch or cols < patch:
        raise RasterError(f"raster {rows}x{cols} smaller than patch {patch}")
    s = rasters.scale_ratio
    valid = rasters.input_valid()
    if rasters.target is not None:
        valid &= rasters.target.valid
    mask_valid = rasters.mask.valid
    stack = rasters.input_stack()
    lit = (rasters.dmsp.values > 0) & rasters.dmsp.valid

    rng = np.random.default_rng(seed)
    budget = 100 * count
    seen: set[tuple[int, int]] = set()
    records: list[PatchRecord] = []
    for _ in range(budget):
        if len(records) == count:
            break
        r = int(rng.integers(0, rows - patch + 1))
        c = int(rng.integers(0, cols - patch + 1))
        if (r, c) in seen:
            continue
        seen.add((r, c))
        frac = float(lit[r : r + patch, c : c + patch].mean())
        if frac < lit_min:
            continue
        if not _window_ok(valid, r, c, patch) or not _window_ok(mask_valid, s * r, s * c, s * patch):
            continue
        if rasters.target is not None:
            target = log_transform(rasters.target.values[r : r + patch, c : c + patch]).astype(np.float32)
        else:
            target = np.zeros((patch, patch), dtype=np.float32)
        records.append(
            PatchRecord(
                patch_id=f"p{len(records):06d}",
                row0=r,
                col0=c,
                inputs=stack[:, r : r + patch, c : c + patch].copy(),
                mask=np.clip(rasters.mask.values[s * r : s * (r + patch), s * c : s * (c + patch)], 0, 1).copy(),
                target=target,
                stratum=_majority_label(rasters.regions, r, c, patch),
                lit_fraction=frac,
            )
        )
    if len(records) < count:
        raise PatchBudgetExhausted(records, count, budget)
    return records


def _majority_label(regions: Optional[RasterGrid], r: int, c: int, p: int) -> str:
    if regions is None:
        return "all"
    win = regions.values[r : r + p, c : c + p]
    labels = win[regions.valid[r : r + p, c : c + p] & (win != 0)]
    if labels.size == 0:
        return "0"
    counts = Counter(int(v) for v in labels.ravel())
    best = max(counts.items(), key=lambda kv: (kv[1], -kv[0]))
    return str(best[0])


def stratified_split(
    records: Sequence[PatchRecord],
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    strata: Optional[Mapping[str, str]] = None,
    seed: int = 0,
) -> list[PatchRecord]:
    """Assign train/val/test within each stratum.

    Each stratum is shuffled, ``floor(n * ratio)`` records go to val and test,
    and everything left over goes to train.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    groups: dict[str, list[PatchRecord]] = defaultdict(list)
    for rec in records:
        if strata is not None:
            if rec.patch_id not in strata:
                raise KeyError(f"no stratum label for patch {rec.patch_id}")
            label = strata[rec.patch_id]
        else:
            label = rec.stratum
        groups[label].append(rec)

    rng = np.random.default_rng(seed)
    assigned: dict[str, str] = {}
    for label in sorted(groups):
        members = sorted(groups[label], key=lambda r: r.patch_id)
        order = rng.permutation(len(members))
        n = len(members)
        n_val = math.floor(n * ratios[1] + 1e-9)
        n_test = math.floor(n * ratios[2] + 1e-9)
        for rank, idx in enumerate(order):
            split = "val" if rank < n_val else "test" if rank < n_val + n_test else "train"
            assigned[members[idx].patch_id] = split
    return [replace(rec, split=assigned[rec.patch_id]) for rec in records]


def split_of(records: Sequence[PatchRecord], split: str) -> list[PatchRecord]:
    return [r for r in records if r.split == split]


def fit_normalization(records: Sequence[PatchRecord]) -> NormStats:
    return minmax_fit([r.inputs for r in split_of(records, "train")])


def normalize(records: Sequence[PatchRecord], stats: NormStats) -> list[PatchRecord]:
    return [replace(r, inputs=minmax_apply(r.inputs, stats)) for r in records]


def stack_batch(records: Sequence[PatchRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.stack([r.inputs for r in records]).astype(np.float32)
    m = np.stack([r.mask for r in records])[:, None].astype(np.float32)
    y = np.stack([r.target for r in records])[:, None].astype(np.float32)
    return x, m, y


def index_csv(records: Sequence[PatchRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(INDEX_HEADER)
    for r in records:
        w.writerow([r.patch_id, r.row0, r.col0, r.stratum, repr(float(r.lit_fraction)), r.split])
    return buf.getvalue()


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def save_patches(records: Sequence[PatchRecord], out_dir, stats: Optional[NormStats] = None) -> None:
    """Write ``inputs.npy``, ``masks.npy``, ``targets.npy``, ``index.csv`` and ``norm_stats.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if records:
        x, m, y = stack_batch(records)
        atomic_write(out / "inputs.npy", _npy_bytes(x))
        atomic_write(out / "masks.npy", _npy_bytes(m[:, 0]))
        atomic_write(out / "targets.npy", _npy_bytes(y[:, 0]))
    atomic_write(out / "index.csv", index_csv(records).encode())
    if stats is not None:
        stats.save(out / "norm_stats.json")


def load_patches(data_dir) -> list[PatchRecord]:
    d = Path(data_dir)
    index = d / "index.csv"
    if not index.exists():
        raise FileNotFoundError(f"no index.csv in {d}")
    with open(index, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return []
    x = np.load(d / "inputs.npy")
    m = np.load(d / "masks.npy")
    y = np.load(d / "targets.npy")
    if not (len(x) == len(m) == len(y) == len(rows)):
        raise RasterError("patch arrays and index.csv disagree in length")
    return [
        PatchRecord(
            patch_id=row["patch_id"],
            row0=int(row["row0"]),
            col0=int(row["col0"]),
            inputs=x[i],
            mask=m[i],
            target=y[i],
            stratum=row["stratum"],
            lit_fraction=float(row["lit_fraction"]),
            split=row["split"],
        )
        for i, row in enumerate(rows)
    ]
