import json

import numpy as np
import pytest

from evalnet.patches import (
    INDEX_HEADER,
    PatchBudgetExhausted,
    PatchRecord,
    RasterSet,
    extract_patches,
    fit_normalization,
    load_patches,
    normalize,
    save_patches,
    split_of,
    stack_batch,
    stratified_split,
)
from evalnet.raster import DEFAULT_NODATA, RasterError, RasterGrid, write_egrid
from evalnet.synthetic import synthetic_patches, synthetic_rasters


def raster_set(dmsp, s=2, target=None, regions=None):
    rows, cols = dmsp.shape
    rng = np.random.default_rng(0)
    return RasterSet(
        dmsp=RasterGrid(dmsp),
        landsat=[RasterGrid(rng.random((rows, cols))) for _ in range(6)],
        mask=RasterGrid(rng.random((s * rows, s * cols)), pixel_size=1 / s),
        target=RasterGrid(target if target is not None else np.ones((rows, cols))),
        regions=RasterGrid(regions) if regions is not None else None,
    )


def records(n, stratum="a", prefix="r"):
    return [
        PatchRecord(f"{prefix}{i:03d}", 0, 0, np.zeros((7, 1, 1)), np.zeros((1, 1)), np.zeros((1, 1)), stratum)
        for i in range(n)
    ]


class TestExtract:
    def test_all_dark(self):
        with pytest.raises(PatchBudgetExhausted) as info:
            extract_patches(raster_set(np.zeros((64, 64))), 32, 3)
        assert info.value.retained == 0

    def test_fully_lit_reproducible(self):
        rs = raster_set(np.full((96, 96), 10.0))
        a = extract_patches(rs, 32, 5, seed=3)
        b = extract_patches(rs, 32, 5, seed=3)
        assert len(a) == 5
        assert [(r.row0, r.col0) for r in a] == [(r.row0, r.col0) for r in b]
        assert len({(r.row0, r.col0) for r in a}) == 5

    def test_lit_quadrant(self):
        dn = np.zeros((128, 128))
        dn[:64, :64] = 20
        for rec in extract_patches(raster_set(dn), 32, 10, seed=1):
            assert rec.row0 < 64 and rec.col0 < 64
            assert rec.lit_fraction >= 0.01

    def test_nodata_windows_rejected(self):
        dn = np.full((64, 64), 5.0)
        dn[:, 40] = DEFAULT_NODATA
        for rec in extract_patches(raster_set(dn), 32, 3, seed=0):
            assert rec.col0 + 32 <= 40

    def test_patch_content(self):
        target = np.random.default_rng(2).random((64, 64)).astype(np.float32)
        rs = raster_set(np.full((64, 64), 1.0), s=3, target=target)
        rec = extract_patches(rs, 32, 1, seed=4)[0]
        r, c = rec.row0, rec.col0
        np.testing.assert_array_equal(rec.inputs, rs.input_stack()[:, r : r + 32, c : c + 32])
        assert rec.mask.shape == (96, 96)
        np.testing.assert_array_equal(rec.mask, rs.mask.values[3 * r : 3 * r + 96, 3 * c : 3 * c + 96])
        np.testing.assert_allclose(rec.target, np.log1p(target[r : r + 32, c : c + 32]), rtol=1e-6)

    def test_patch_size_divisible(self):
        with pytest.raises(ValueError):
            extract_patches(raster_set(np.ones((64, 64))), 30, 1)

    def test_majority_region(self):
        regions = np.ones((64, 64))
        regions[:, 20:] = 2
        rs = raster_set(np.ones((64, 64)), regions=regions)
        for rec in extract_patches(rs, 32, 5, seed=0):
            expected = "2" if rec.col0 + 32 - 20 > 20 - rec.col0 else "1"
            assert rec.stratum == expected


class TestSplit:
    def test_one_stratum(self):
        out = stratified_split(records(10))
        assert [len(split_of(out, s)) for s in ("train", "val", "test")] == [8, 1, 1]

    def test_single_record(self):
        assert stratified_split(records(1))[0].split == "train"

    def test_two_strata(self):
        out = stratified_split(records(10, "a", "a") + records(10, "b", "b"))
        for s in ("a", "b"):
            group = [r for r in out if r.stratum == s]
            assert [len(split_of(group, k)) for k in ("train", "val", "test")] == [8, 1, 1]

    def test_explicit_strata_unknown(self):
        with pytest.raises(KeyError):
            stratified_split(records(3), strata={"r000": "x"})

    def test_bad_ratios(self):
        with pytest.raises(ValueError):
            stratified_split(records(3), (0.5, 0.3, 0.3))

    def test_disjoint_cover_stable(self):
        recs = records(37, "a", "a") + records(23, "b", "b")
        a = stratified_split(recs, seed=9)
        b = stratified_split(recs, seed=9)
        assert [r.split for r in a] == [r.split for r in b]
        assert sorted(r.patch_id for r in a) == sorted(r.patch_id for r in recs)
        assert {r.split for r in a} <= {"train", "val", "test"}
        c = stratified_split(recs, seed=10)
        assert [r.split for r in a] != [r.split for r in c]


class TestStorage:
    def test_round_trip(self, tmp_path):
        recs = synthetic_patches(6, 32, ratio=2, n_val=2, seed=0)
        stats = fit_normalization(recs)
        save_patches(recs, tmp_path, stats)
        back = load_patches(tmp_path)
        assert (tmp_path / "index.csv").read_text().splitlines()[0] == ",".join(INDEX_HEADER)
        assert json.loads((tmp_path / "norm_stats.json").read_text())["bands"][0].keys() == {"min", "max"}
        for r, q in zip(recs, back):
            assert (r.patch_id, r.split, r.stratum) == (q.patch_id, q.split, q.stratum)
            np.testing.assert_array_equal(r.inputs, q.inputs)
            np.testing.assert_array_equal(r.mask, q.mask)
            np.testing.assert_array_equal(r.target, q.target)

    def test_stack_batch_shapes(self):
        recs = synthetic_patches(3, 32, ratio=2, n_val=1, seed=0)
        x, m, y = stack_batch(recs)
        assert x.shape == (3, 7, 32, 32) and m.shape == (3, 1, 64, 64) and y.shape == (3, 1, 32, 32)

    def test_normalization_uses_train_only(self):
        recs = synthetic_patches(6, 32, ratio=2, n_val=2, seed=1, normalized=False)
        stats = fit_normalization(recs)
        train = np.stack([r.inputs for r in split_of(recs, "train")])
        np.testing.assert_array_equal(stats.mins, train.min(axis=(0, 2, 3)))
        normed = normalize(recs, stats)
        tn = np.stack([r.inputs for r in split_of(normed, "train")])
        assert tn.min() == 0 and tn.max() == 1


class TestRasterSet:
    def test_manifest(self, tmp_path):
        rs = synthetic_rasters(32, 32, ratio=2, seed=0)
        names = {"dmsp": "d.egrid", "mask": "m.egrid", "target": "t.egrid"}
        for key, name in names.items():
            write_egrid(getattr(rs, key), tmp_path / name)
        bands = []
        for i, b in enumerate(rs.landsat):
            write_egrid(b, tmp_path / f"l{i}.egrid")
            bands.append(f"l{i}.egrid")
        (tmp_path / "r.json").write_text(json.dumps({**names, "landsat": bands}))
        back = RasterSet.from_manifest(tmp_path / "r.json")
        assert back.scale_ratio == 2 and back.dmsp == rs.dmsp and back.regions is None

    def test_missing_key(self, tmp_path):
        (tmp_path / "r.json").write_text("{}")
        with pytest.raises(RasterError):
            RasterSet.from_manifest(tmp_path / "r.json")

    def test_non_integer_ratio(self):
        rs = synthetic_rasters(32, 32, ratio=2, seed=0)
        with pytest.raises(RasterError):
            RasterSet(rs.dmsp, rs.landsat, RasterGrid(np.zeros((65, 64))))

    def test_misaligned_band(self):
        rs = synthetic_rasters(32, 32, ratio=2, seed=0)
        shifted = RasterGrid(rs.landsat[0].values, 10.0, 0.0, rs.dmsp.pixel_size)
        with pytest.raises(RasterError):
            RasterSet(rs.dmsp, [shifted, *rs.landsat[1:]], rs.mask)
