"""Command-line entry point: ``evalnet <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Errors are reported as a single ``evalnet: error: <kind>: <message>`` line.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, atomic_write, load_checkpoint, save_checkpoint
from .evaluator import (
    EvaluationError,
    ZonalTable,
    city_scale_eval,
    compute_metrics,
    correlation_csv,
    correlation_report,
    metrics_from_arrays,
    read_indicators,
    report_json,
    year_from_name,
)
from .inference import export_coarse, infer_raster
from .model import EvalNet, ModelConfig
from .patches import (
    PatchBudgetExhausted,
    RasterSet,
    extract_patches,
    fit_normalization,
    load_patches,
    normalize,
    save_patches,
    split_of,
    stratified_split,
)
from .raster import NormStats, RasterError, cap_outliers, compute_cap_threshold, percentile_composite, read_egrid, write_egrid
from .trainer import NumericalError, TrainConfig, TrainingError, predict_records, train_stage1, train_stage2, write_history

log = logging.getLogger("evalnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def default_config() -> dict:
    return {"model": ModelConfig().to_dict(), "train": TrainConfig().to_dict()}


def load_config(path: Optional[str]) -> tuple[ModelConfig, TrainConfig, dict]:
    raw = default_config()
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise UsageError(f"config not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config is not valid JSON: {exc}") from exc
        unknown = set(user) - {"model", "train"}
        if unknown:
            raise UsageError(f"unknown config sections {sorted(unknown)}")
        raw["model"].update(user.get("model", {}))
        raw["train"].update(user.get("train", {}))
    try:
        return ModelConfig.from_dict(raw["model"]), TrainConfig.from_dict(raw["train"]), raw
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def config_hash(raw: dict) -> str:
    return hashlib.sha256(json.dumps(raw, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_run_manifest(path, command: str, args: argparse.Namespace, outputs: Sequence[str], raw_config=None, started=None):
    manifest = {
        "command": command,
        "config_path": getattr(args, "config", None),
        "config_hash": config_hash(raw_config) if raw_config is not None else None,
        "seed": getattr(args, "seed", None),
        "inputs": {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command", "verbose") and v is not None},
        "outputs": [str(o) for o in outputs],
        "started": started or _now(),
        "finished": _now(),
        "version": __version__,
    }
    atomic_write(path, (json.dumps(manifest, indent=2, default=str) + "\n").encode())


def _beside(path: Path) -> Path:
    return path.with_name(path.name + ".manifest.json")


# commands ---------------------------------------------------------------------


def cmd_composite(args) -> int:
    started = _now()
    files = sorted(Path(args.inputs).glob("*.egrid"))
    if not files:
        raise RasterError(f"no .egrid files in {args.inputs}")
    out = percentile_composite([read_egrid(f) for f in files], args.percentile)
    write_egrid(out, args.out)
    write_run_manifest(_beside(Path(args.out)), "preprocess composite", args, [args.out], started=started)
    return EXIT_OK


def cmd_cap(args) -> int:
    started = _now()
    cities = [read_egrid(p) for p in args.cities.split(",") if p]
    threshold = compute_cap_threshold(cities)
    out = cap_outliers(read_egrid(args.input), threshold)
    write_egrid(out, args.out)
    log.info("cap threshold %.6g", threshold)
    write_run_manifest(_beside(Path(args.out)), "preprocess cap", args, [args.out], started=started)
    return EXIT_OK


def cmd_sample(args) -> int:
    started = _now()
    rasters = RasterSet.from_manifest(args.rasters)
    if rasters.target is None:
        raise RasterError("raster manifest needs a target for sampling")
    try:
        records = extract_patches(rasters, args.patch, args.count, args.lit_min, args.seed)
    except PatchBudgetExhausted as exc:
        if exc.retained == 0:
            raise
        log.warning("%s", exc)
        records = exc.records
    ratios = tuple(float(r) for r in args.ratios.split(","))
    records = stratified_split(records, ratios, seed=args.seed)
    if not split_of(records, "train"):
        raise RasterError("no patches landed in the training split")
    stats = fit_normalization(records)
    save_patches(normalize(records, stats), args.out, stats)
    outputs = [str(Path(args.out) / n) for n in ("inputs.npy", "masks.npy", "targets.npy", "index.csv", "norm_stats.json")]
    write_run_manifest(Path(args.out) / "run_manifest.json", "sample", args, outputs, started=started)
    print(f"retained {len(records)} patches in {args.out}")
    return EXIT_OK


def _load_data(data_dir: str):
    d = Path(data_dir)
    if not (d / "index.csv").exists():
        raise RasterError(f"no patch data in {data_dir}")
    records = load_patches(d)
    if not records:
        raise RasterError(f"patch set in {data_dir} is empty")
    stats = NormStats.load(d / "norm_stats.json").to_json() if (d / "norm_stats.json").exists() else None
    return records, stats


def run_training(records, model_cfg: ModelConfig, train_cfg: TrainConfig, stage: str, out_dir: Path, norm_stats, init=None):
    """Train stage 1, stage 2 or both; returns the final best checkpoint."""
    out_dir.mkdir(parents=True, exist_ok=True)
    train_cfg.checkpoint_dir = str(out_dir)
    history = []
    if init is not None:
        model = init.build_model()
    else:
        model = EvalNet(model_cfg)
    best = None
    if stage in ("1", "both"):
        res = train_stage1(model, records, train_cfg, norm_stats)
        history += res.history
        best = res.best
    if stage in ("2", "both"):
        if stage == "2" and init is None:
            path = out_dir / "stage1_best.evckpt"
            if not path.exists():
                raise TrainingError("stage 2 needs --init or a stage1_best.evckpt in the output directory")
            model = load_checkpoint(path).build_model()
        res = train_stage2(model, records, train_cfg, norm_stats)
        history += res.history
        best = res.best
    write_history(history, out_dir / "train_log.csv")
    save_checkpoint(best, out_dir / "best.evckpt")
    return best, model


def cmd_train(args) -> int:
    started = _now()
    model_cfg, train_cfg, raw = load_config(args.config)
    if args.seed is not None:
        train_cfg.seed = args.seed
    records, stats = _load_data(args.data)
    init = load_checkpoint(args.init) if args.init else None
    best, _ = run_training(records, model_cfg, train_cfg, args.stage, Path(args.out), stats, init)
    out = Path(args.out)
    if stats is not None:
        atomic_write(out / "norm_stats.json", (json.dumps(stats, indent=2) + "\n").encode())
    write_run_manifest(out / "run_manifest.json", "train", args, [str(out / "best.evckpt")], raw, started)
    print(f"best stage {best.stage} epoch {best.epoch} val_rmse_log {best.validation_rmse_log:.6f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    started = _now()
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.build_model()
    if args.norm:
        stats = NormStats.load(args.norm)
    elif ckpt.norm_stats is not None:
        stats = NormStats.from_json(ckpt.norm_stats)
    elif (Path(args.ckpt).parent / "norm_stats.json").exists():
        stats = NormStats.load(Path(args.ckpt).parent / "norm_stats.json")
    else:
        raise RasterError("no normalisation statistics: pass --norm")
    rasters = RasterSet.from_manifest(args.rasters)
    tile = None if args.tile == 0 else args.tile
    pred = infer_raster(model, rasters, stats, tile=tile, overlap=args.overlap)
    write_egrid(pred, args.out)
    outputs = [args.out]
    if args.export_500m:
        coarse = Path(args.out).with_name(Path(args.out).stem + "_500m.egrid")
        write_egrid(export_coarse(pred, 2), coarse)
        outputs.append(str(coarse))
    write_run_manifest(_beside(Path(args.out)), "infer", args, outputs, started=started)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    started = _now()
    ref = read_egrid(args.ref)
    pred = read_egrid(args.pred)
    report = compute_metrics(ref, pred, args.space)
    extra = {}
    outputs = [args.out]
    out = Path(args.out)
    if args.zones:
        zones = read_egrid(args.zones)
        r2, rmse, table = city_scale_eval(ref, pred, zones)
        extra["city_scale"] = {"r2": r2, "rmse": rmse, "zones": len(table.rows)}
        zonal_path = out.with_name(out.stem + "_zonal.csv")
        atomic_write(zonal_path, table.to_csv().encode())
        outputs.append(str(zonal_path))
    atomic_write(out, report_json(report, extra).encode())
    write_run_manifest(_beside(out), "evaluate", args, outputs, started=started)
    return EXIT_OK


def cmd_correlate(args) -> int:
    started = _now()
    totals = {}
    for item in args.zonal.split(","):
        if not item:
            continue
        year = year_from_name(item)
        path = item.rsplit(":", 1)[0] if ":" in item and item.rsplit(":", 1)[1].isdigit() else item
        totals[year] = ZonalTable.from_csv(Path(path).read_text())
    indicators = {}
    for path in args.indicators.split(","):
        if path:
            indicators.update(read_indicators(path))
    rows = correlation_report(totals, indicators, args.column)
    atomic_write(args.out, correlation_csv(rows).encode())
    write_run_manifest(_beside(Path(args.out)), "correlate", args, [args.out], started=started)
    return EXIT_OK


AXES = ("srf", "ma", "dfr")


def ablation_lattice(grid: Sequence[str]) -> list[dict[str, bool]]:
    """Configurations toggled by ``grid``.

    The full model always runs. With ``dfr`` in the grid the refiner-free
    model runs too and serves as the base for the SRF and MA removals.
    """
    unknown = set(grid) - set(AXES)
    if unknown:
        raise UsageError(f"unknown ablation axes {sorted(unknown)}")
    full = {"srf": True, "ma": True, "dfr": True}
    runs = [full]
    base = full
    if "dfr" in grid:
        base = {**full, "dfr": False}
        runs.append(base)
    for axis in ("srf", "ma"):
        if axis in grid:
            runs.append({**base, axis: False})
    return runs


def _run_name(flags: dict[str, bool]) -> str:
    return "_".join(f"{a}{int(flags[a])}" for a in AXES)


def cmd_ablate(args) -> int:
    started = _now()
    model_cfg, train_cfg, raw = load_config(args.config)
    if args.seed is not None:
        train_cfg.seed = args.seed
    records, stats = _load_data(args.data)
    grid = [g.strip() for g in args.grid.split(",") if g.strip()]
    out = Path(args.out)
    test = split_of(records, "test") or split_of(records, "val")
    rows = []
    for flags in ablation_lattice(grid):
        cfg = ModelConfig.from_dict(
            {**model_cfg.to_dict(), "srf_enabled": flags["srf"], "ma_enabled": flags["ma"], "dfr_enabled": flags["dfr"]}
        )
        name = _run_name(flags)
        stage = "both" if flags["dfr"] else "1"
        best, model = run_training(records, cfg, TrainConfig.from_dict(train_cfg.to_dict()), stage, out / name, stats)
        pred = predict_records(model, test, 2 if flags["dfr"] else 1, train_cfg.batch_size)
        target = np.stack([r.target for r in test])
        rep = metrics_from_arrays(target, pred[:, 0], space="log")
        rows.append([name, int(flags["srf"]), int(flags["ma"]), int(flags["dfr"]), best.parameter_count(),
                     rep.r2, rep.rmse, rep.psnr_db, rep.uiqi])
    lines = [["run", "srf", "ma", "dfr", "param_count", "r2", "rmse", "psnr_db", "uiqi"]]
    lines += [[r[0], *r[1:5], *(repr(float(v)) for v in r[5:])] for r in rows]
    text = "".join(",".join(str(c) for c in line) + "\n" for line in lines)
    atomic_write(out / "ablation.csv", text.encode())
    write_run_manifest(out / "run_manifest.json", "ablate", args, [str(out / "ablation.csv")], raw, started)
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synthetic import synthetic_rasters

    started = _now()
    out = Path(args.out)
    rs = synthetic_rasters(args.rows, args.cols, args.ratio, args.seed)
    names = {"dmsp": "dmsp.egrid", "mask": "mask.egrid", "target": "viirs.egrid", "regions": "regions.egrid"}
    for key, name in names.items():
        write_egrid(getattr(rs, key), out / name)
    landsat = [f"landsat_b{i + 1}.egrid" for i in range(6)]
    for grid, name in zip(rs.landsat, landsat):
        write_egrid(grid, out / name)
    manifest = {"dmsp": names["dmsp"], "landsat": landsat, "mask": names["mask"], "target": names["target"],
                "regions": names["regions"]}
    atomic_write(out / "rasters.json", (json.dumps(manifest, indent=2) + "\n").encode())
    write_run_manifest(out / "run_manifest.json", "synth", args, [str(out / "rasters.json")], started=started)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="evalnet", description="Two-stage VIIRS-like nighttime light reconstruction.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--print-config", action="store_true", help="print the default JSON config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    pre = sub.add_parser("preprocess", help="raster preprocessing")
    presub = pre.add_subparsers(dest="step", parser_class=_Parser, required=True)
    c = presub.add_parser("composite", help="annual nearest-rank percentile composite")
    c.add_argument("--inputs", required=True, help="directory of co-registered .egrid observations")
    c.add_argument("--percentile", type=float, default=10.0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_composite)
    c = presub.add_parser("cap", help="cap outliers above the mean of city maxima")
    c.add_argument("--input", required=True)
    c.add_argument("--cities", required=True, help="comma-separated city .egrid files")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_cap)

    c = sub.add_parser("sample", help="extract, split and normalise training patches")
    c.add_argument("--rasters", required=True, help="raster manifest JSON")
    c.add_argument("--patch", type=int, default=64)
    c.add_argument("--count", type=int, default=200)
    c.add_argument("--lit-min", type=float, default=0.01)
    c.add_argument("--ratios", default="0.8,0.1,0.1")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_sample)

    c = sub.add_parser("train", help="two-stage training")
    c.add_argument("--data", required=True)
    c.add_argument("--config")
    c.add_argument("--stage", choices=["1", "2", "both"], default="both")
    c.add_argument("--init", help="checkpoint to start from (stage 2)")
    c.add_argument("--seed", type=int)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_train)

    c = sub.add_parser("infer", help="tiled whole-raster inference")
    c.add_argument("--ckpt", required=True)
    c.add_argument("--rasters", required=True)
    c.add_argument("--norm", help="norm_stats.json (default: from the checkpoint or its directory)")
    c.add_argument("--tile", type=int, default=256, help="tile size in pixels; 0 for a single pass")
    c.add_argument("--overlap", type=int, default=32)
    c.add_argument("--export-500m", action="store_true", help="also write a 2x block-averaged product")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_infer)

    c = sub.add_parser("evaluate", help="pixel and city-scale metrics")
    c.add_argument("--ref", required=True)
    c.add_argument("--pred", required=True)
    c.add_argument("--zones")
    c.add_argument("--space", choices=["log", "radiance"], default="radiance")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("correlate", help="Pearson correlation of zone totals with indicators")
    c.add_argument("--zonal", required=True, help="comma-separated zonal CSVs, year in the name or PATH:YEAR")
    c.add_argument("--indicators", required=True)
    c.add_argument("--column", choices=["sum_prediction", "sum_reference"], default="sum_prediction")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_correlate)

    c = sub.add_parser("ablate", help="train the ablation lattice")
    c.add_argument("--data", required=True)
    c.add_argument("--config")
    c.add_argument("--grid", default="srf,ma,dfr")
    c.add_argument("--seed", type=int)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_ablate)

    c = sub.add_parser("synth", help="write a synthetic co-registered raster set")
    c.add_argument("--rows", type=int, default=128)
    c.add_argument("--cols", type=int, default=128)
    c.add_argument("--ratio", type=int, default=5)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_synth)
    return p


def _thread_limit():
    n = os.environ.get("EVALNET_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


def _fail(code: int, kind: str, exc: BaseException) -> int:
    msg = " ".join(str(exc).split()) or exc.__class__.__name__
    print(f"evalnet: error: {kind}: {msg}", file=sys.stderr)
    return code


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.print_config:
        print(json.dumps(default_config(), indent=2))
        return EXIT_OK
    if not getattr(args, "func", None):
        return _fail(EXIT_USAGE, "usage", UsageError("a command is required"))
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except NumericalError as exc:
        return _fail(EXIT_NUMERIC, "numeric", exc)
    except (RasterError, TrainingError, EvaluationError, CheckpointError, FileNotFoundError, ValueError, KeyError) as exc:
        return _fail(EXIT_DATA, "data", exc)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
