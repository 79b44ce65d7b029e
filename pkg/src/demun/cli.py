"""Command-line harness: run, grid, curves, eval, snr."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence


from .config import ConfigError, ExperimentConfig, GridSpec
from .data import Dataset, DatasetError, ingest, load_cache, save_cache, split
from .operators import DCT_RATES, NoiseModel, input_snr, make_operator
from .train import Checkpoint, evaluate, save_run, train

logger = logging.getLogger("demun")

OUTPUT_ROOT_ENV = "DEMUN_OUTPUT_ROOT"
SNR_SIGMAS = (0.01, 0.025, 0.05, 0.10)


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.raw["dataset"]
    cache = cfg.resolve(d["cache"])
    if cache is not None and cache.exists():
        ds = load_cache(cache)
        if ds.k != d["k"]:
            raise DatasetError(f"cached dataset has k={ds.k}, config asks for k={d['k']}")
    else:
        ds = ingest(cfg.resolve(d["dir"]), d["k"], max_images=d["max_images"])
    ds = split(ds, d["n_test"], d["n_train"], d["n_val"])
    if cache is not None and not cache.exists():
        cache.parent.mkdir(parents=True, exist_ok=True)
        save_cache(ds, cache)
    return ds


def default_out(cfg: ExperimentConfig, name: str) -> Path:
    if cfg.raw["output"]["dir"]:
        return cfg.resolve(cfg.raw["output"]["dir"])
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / name


def run_experiment(cfg: ExperimentConfig, out_dir) -> Path:
    ds = load_dataset(cfg)
    tc = cfg.train_config()
    checkpoint = train(tc, ds)
    report = evaluate(checkpoint, ds, "test")
    run_dir = save_run(out_dir, checkpoint, report)
    (run_dir / "config.yaml").write_text(cfg.to_yaml())
    return run_dir


def _apply_seed_override(raw: dict, seed: Optional[int]) -> dict:
    if seed is not None:
        raw.setdefault("train", {})["seed"] = seed
    return raw


def cli_run(config_file, out: Optional[str] = None, seed_override: Optional[int] = None) -> Path:
    import yaml

    path = Path(config_file)
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    cfg = ExperimentConfig.from_dict(_apply_seed_override(raw, seed_override), path.parent)
    out_dir = Path(out) if out else default_out(cfg, path.stem)
    return run_experiment(cfg, out_dir)


def _run_cell(args) -> dict:
    index, assignment, raw, base_dir, out_dir = args
    row = {"cell": index, **{k: v for k, v in assignment.items()}}
    try:
        cfg = ExperimentConfig.from_dict(raw, base_dir)
        tc = cfg.train_config()
        echo = dict(algorithm=tc.algorithm, loss=tc.loss, T=tc.T, residual=tc.residual, operator=tc.operator,
                    rate=tc.rate if tc.rate is not None else "", m=tc.m if tc.m is not None else "",
                    sigma=tc.sigma, seed=tc.seed, k=cfg.raw["dataset"]["k"])
        for key, value in echo.items():
            row.setdefault(key, value)  # axis values are kept as written
        run_dir = run_experiment(cfg, Path(out_dir) / f"cell_{index:03d}")
        summary = json.loads((run_dir / "summary.json").read_text())
        row.update(status="ok", mean_psnr=repr(summary["mean_psnr"]), run_dir=str(run_dir), error="")
    except Exception as exc:  # a failed cell is reported, not fatal
        logger.exception("cell %d failed", index)
        row.update(status="failed", mean_psnr="", run_dir="", error=f"{type(exc).__name__}: {exc}")
    return row


GRID_COLUMNS = ["algorithm", "loss", "T", "residual", "operator", "rate", "m", "sigma", "seed", "k", "status", "mean_psnr", "run_dir", "error"]


def cli_grid(grid_file, out: Optional[str] = None, jobs: int = 1, seed_override: Optional[int] = None) -> Path:
    grid = GridSpec.load(grid_file)
    if seed_override is not None:
        grid.base = _apply_seed_override(grid.base, seed_override)
    out_dir = Path(out) if out else Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / Path(grid_file).stem
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [(i, a, raw, grid.base_dir, out_dir) for i, (a, raw) in enumerate(grid.cells())]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_cell, tasks))
    else:
        rows = [_run_cell(t) for t in tasks]
    columns = ["cell", *grid.axes.keys(), *[c for c in GRID_COLUMNS if c not in grid.axes]]
    table = out_dir / "table.csv"
    with open(table, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow(row)
    return table


def cli_curves(run_dirs: Sequence, out) -> Path:
    rows = []
    for rd in run_dirs:
        rd = Path(rd)
        summary_path, curve_path = rd / "summary.json", rd / "curve.csv"
        if not summary_path.exists() or not curve_path.exists():
            raise FileNotFoundError(f"{rd} has no evaluated report (summary.json / curve.csv)")
        config = json.loads(summary_path.read_text())["config"]
        rate = config["rate"] if config.get("rate") is not None else config["m"]
        with open(curve_path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append([rd.name, config["algorithm"], config["loss"], rate, rec["step"], rec["psnr"]])
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run_id", "algorithm", "loss", "rate", "step", "psnr"])
        w.writerows(rows)
    return out


def cli_eval(checkpoint_path, config_file, split_name: str = "test", out: Optional[str] = None):
    cfg = ExperimentConfig.load(config_file)
    ds = load_dataset(cfg)
    ck = Checkpoint.load(checkpoint_path)
    report = evaluate(ck, ds, split_name)
    if out:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.write_report_csv(out_dir / "report.csv")
        report.write_curve_csv(out_dir / "curve.csv")
    return report


def snr_table(cfg: ExperimentConfig, rates=DCT_RATES, sigmas=SNR_SIGMAS, split_name: str = "test") -> list[list]:
    """Rows of [rate, snr(sigma_1), ...] over the given split."""
    ds = load_dataset(cfg)
    images = ds.split_tiles(split_name)
    if len(images) == 0:
        raise DatasetError(f"split {split_name!r} is empty")
    op_cfg = cfg.raw["operator"]
    rows = []
    for rate in rates:
        op = make_operator(op_cfg["kind"], ds.k, rate, op_cfg["seed"])
        rows.append([rate] + [input_snr(op, images, NoiseModel(s, cfg.raw["noise"]["seed"])) for s in sigmas])
    return rows


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="demun", description="Train and evaluate unrolled networks for y = Ax + w.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train + evaluate one config")
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    r.add_argument("--seed-override", type=int)

    g = sub.add_parser("grid", help="run the cartesian product of a grid file")
    g.add_argument("--config", required=True)
    g.add_argument("--out")
    g.add_argument("--jobs", type=int, default=1)
    g.add_argument("--seed-override", type=int)

    c = sub.add_parser("curves", help="merge per-projection PSNR curves into long format")
    c.add_argument("run_dirs", nargs="+")
    c.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="re-evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config", required=True, help="config naming the dataset")
    e.add_argument("--split", default="test")
    e.add_argument("--out")

    s = sub.add_parser("snr", help="input SNR table (rates x sigmas)")
    s.add_argument("--config", required=True)
    s.add_argument("--rates", type=_float_list, default=list(DCT_RATES))
    s.add_argument("--sigmas", type=_float_list, default=list(SNR_SIGMAS))
    s.add_argument("--out")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            run_dir = cli_run(args.config, args.out, args.seed_override)
            print(run_dir)
        elif args.command == "grid":
            print(cli_grid(args.config, args.out, args.jobs, args.seed_override))
        elif args.command == "curves":
            print(cli_curves(args.run_dirs, args.out))
        elif args.command == "eval":
            report = cli_eval(args.checkpoint, args.config, args.split, args.out)
            print(f"mean PSNR {report.mean_psnr:.4f} dB")
            print("curve " + " ".join(f"{v:.4f}" for v in report.curve))
        elif args.command == "snr":
            cfg = ExperimentConfig.load(args.config)
            rows = snr_table(cfg, args.rates, args.sigmas)
            header = ["rate"] + [f"sigma={s:g}" for s in args.sigmas]
            print("\t".join(header))
            for row in rows:
                print("\t".join([f"{row[0]:g}"] + [f"{v:.2f}" for v in row[1:]]))
            if args.out:
                with open(args.out, "w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(header)
                    w.writerows([[row[0]] + [repr(v) for v in row[1:]] for row in rows])
    except (ConfigError, DatasetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
