"""``gi`` command line: simulate, reconstruct, sweep, metrics.

Exit codes: 0 success, 1 usage, 2 invalid configuration or input, 3
numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import double_slit_metrics, image_error, slit_profile, truth_on_grid
from .config import ConfigError, PRESET_NAMES, RunConfig, load_config
from .forward import CampaignError, run_campaign
from .io import (
    FormatError,
    GRID_FORMAT_VERSION,
    load_measurement_set,
    read_grid,
    read_json,
    save_measurement_set,
    write_grid,
    write_json,
    write_pgm,
    write_profile,
)
from .optics import IntensityGrid, SamplingError
from .recon import assemble_sensing_system, centered_roi, cs_reconstruct, gi_reconstruct

log = logging.getLogger("ghostcs")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

FORMATS = {
    "grid": f"GIG1/GIC1 v{GRID_FORMAT_VERSION}",
    "buckets": "csv index,seed,bucket",
    "profile": "csv x_meters,value",
    "preview": "pgm P5 16-bit",
    "metrics": "json",
}


class NumericalFailure(RuntimeError):
    """A simulation or solver stage failed (exit code 3)."""

    def __init__(self, stage, detail):
        super().__init__(f"{stage}: {detail}")
        self.stage = stage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out, command, cfg, files, extra=None):
    manifest = {
        "command": command,
        "toolkit_version": __version__,
        "formats": FORMATS,
        "master_seed": cfg.master_seed,
        "config": cfg.to_dict(),
        "files": {name: _sha256(out / name) for name in sorted(files)},
    }
    manifest.update(extra or {})
    write_json(manifest, out / "manifest.json")


def simulate(cfg):
    """Run the campaign described by ``cfg`` in memory."""
    obj = cfg.make_object()
    try:
        return run_campaign(cfg.layout, obj, cfg.m, cfg.master_seed, n_jobs=cfg.n_jobs)
    except (CampaignError, SamplingError, FloatingPointError) as exc:
        raise NumericalFailure("simulation", exc) from exc


def _reconstruct(ms, cfg, method):
    """Returns ``(clamped estimate grid, result)``."""
    if method == "gi":
        result = gi_reconstruct(ms)
        return result.to_grid(), result
    sub = ms.subset(m=min(cfg.cs_m, len(ms)))
    roi = centered_roi(sub.frames().shape[1:], sub.frame_pitch, cfg.roi_pixels())
    try:
        result = cs_reconstruct(assemble_sensing_system(sub, roi), cfg.solver)
    except (ValueError, FloatingPointError) as exc:
        raise NumericalFailure("cs solver", exc) from exc
    if not np.all(np.isfinite(result.estimate)):
        raise NumericalFailure("cs solver", f"non-finite estimate (status "
                                            f"{result.solver_status})")
    if result.solver_status != "converged":
        # the estimate is still the closest fit reached; the status travels
        # with it into the metrics record
        log.warning("cs solver status %s, residual %.3e", result.solver_status,
                    result.final_residual)
    return result.to_grid(), result


def evaluate(image, cfg, truth_mask):
    """Profile metrics plus errors against the truth on the CS region."""
    metrics = double_slit_metrics(image, cfg.slit_a, cfg.slit_d, cfg.slit_h).to_dict()
    roi = centered_roi(image.shape, image.pitch, cfg.roi_pixels())
    rs, cs = roi.slices()
    crop = IntensityGrid(image.data[rs, cs], image.pitch)
    truth = truth_on_grid(truth_mask, image.pitch, crop.shape)
    metrics.update(image_error(crop, truth))
    return metrics


def _method_outputs(out, method, grid, result, metrics, h):
    names = [f"{method}_estimate.gig", f"{method}_estimate.pgm", f"{method}_profile.csv",
             f"{method}_metrics.json"]
    write_grid(grid, out / names[0])
    write_pgm(grid, out / names[1])
    # profile from the same band average the metrics use
    x, p = slit_profile(grid, h)
    write_profile(x, p, out / names[2])
    record = dict(metrics, method=method, iterations=int(result.iterations),
                  solver_status=result.solver_status,
                  final_residual=float(result.final_residual))
    write_json(record, out / names[3])
    return names


def _methods(cfg, override):
    if override:
        return [override]
    return ["gi", "cs"] if cfg.method == "both" else [cfg.method]


def cmd_simulate(cfg):
    ms = simulate(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = save_measurement_set(ms, out)
    _write_manifest(out, "simulate", cfg, files, {
        "seeds": ms.seeds(),
        "frame_pitch": ms.frame_pitch,
        "frame_shape": list(ms.records[0].reference_frame.shape),
    })
    log.info("wrote %d realizations to %s", len(ms), out)
    return ms


def _load_input(directory):
    directory = Path(directory)
    try:
        manifest = read_json(directory / "manifest.json")
        set_cfg = RunConfig.from_dict(manifest["config"])
        ms = load_measurement_set(directory, set_cfg.layout)
    except (OSError, KeyError, FormatError, ValueError) as exc:
        raise ConfigError(f"cannot load measurement set from {directory}: {exc}") from None
    return ms


def cmd_reconstruct(cfg, input_dir, method=None):
    ms = _load_input(input_dir)
    if ms.object_truth is None:
        raise ConfigError(f"{input_dir} holds no object mask")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files, summary = [], {}
    for meth in _methods(cfg, method):
        grid, result = _reconstruct(ms, cfg, meth)
        metrics = evaluate(grid, cfg, ms.object_truth)
        files += _method_outputs(out, meth, grid, result, metrics, cfg.slit_h)
        summary[meth] = metrics
    _write_manifest(out, "reconstruct", cfg, files, {"input": str(input_dir),
                                                     "input_seeds": ms.seeds()})
    return summary


def cmd_metrics(cfg, input_dir):
    """Recompute metrics for every ``*_estimate.gig`` in ``input_dir``."""
    input_dir = Path(input_dir)
    found = sorted(input_dir.glob("*_estimate.gig"))
    if not found:
        raise ConfigError(f"no *_estimate.gig files in {input_dir}")
    truth = cfg.make_object()
    report = {}
    for path in found:
        try:
            grid = read_grid(path)
        except (FormatError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        report[path.name[: -len("_estimate.gig")]] = evaluate(grid, cfg, truth)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(report, out / "metrics.json")
    _write_manifest(out, "metrics", cfg, ["metrics.json"], {"input": str(input_dir)})
    return report


SWEEP_COLUMNS = ("parameter", "value", "master_seed", "gi_midpoint_ratio", "gi_mse",
                 "cs_midpoint_ratio", "cs_mse")


def sweep_rows(cfg, parameter, values, timings=None):
    """One row per (seed, value); every value reuses the same seeds."""
    if not values:
        raise ConfigError("sweep needs at least one value")
    rows = []
    methods = _methods(cfg, None)
    for seed in cfg.seeds():
        for value in values:
            vcfg = cfg.with_value(parameter, value)
            vcfg = replace(vcfg, master_seed=int(seed))
            t0 = time.perf_counter()
            ms = simulate(vcfg)
            row = {"parameter": parameter, "value": float(value), "master_seed": int(seed)}
            for meth in ("gi", "cs"):
                if meth in methods:
                    grid, _ = _reconstruct(ms, vcfg, meth)
                    m = evaluate(grid, vcfg, ms.object_truth)
                    row[f"{meth}_midpoint_ratio"] = m["midpoint_ratio"]
                    row[f"{meth}_mse"] = m["mse"]
                else:
                    row[f"{meth}_midpoint_ratio"] = row[f"{meth}_mse"] = float("nan")
            if timings is not None:
                timings.append((float(value), int(seed), time.perf_counter() - t0))
            log.info("sweep %s=%g seed=%d: %s", parameter, value, seed, row)
            rows.append(row)
    return rows


def _write_table(rows, columns, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([row[c] if isinstance(row[c], str) else repr(row[c]) for c in columns])


def summarize(rows):
    """Seed-averaged rows, one per value, in first-seen order."""
    out = {}
    for row in rows:
        out.setdefault(row["value"], []).append(row)
    summary = []
    for value, group in out.items():
        s = {"parameter": group[0]["parameter"], "value": value, "n_seeds": float(len(group))}
        for c in SWEEP_COLUMNS[3:]:
            s[c] = float(np.mean([g[c] for g in group]))
        summary.append(s)
    return summary


def cmd_sweep(cfg, parameter=None, values=None, timing=False):
    parameter = parameter or cfg.sweep_parameter
    if parameter is None:
        raise ConfigError("no sweep parameter (set sweep_parameter or pass --param)")
    values = list(values if values is not None else cfg.sweep_values)
    timings = [] if timing else None
    rows = sweep_rows(cfg, parameter, values, timings)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_table(rows, SWEEP_COLUMNS, out / "sweep.csv")
    summary = summarize(rows)
    _write_table(summary, ("parameter", "value", "n_seeds") + SWEEP_COLUMNS[3:],
                 out / "sweep_summary.csv")
    files = ["sweep.csv", "sweep_summary.csv"]
    if timings is not None:
        # wall time varies between runs, so it is opt-in and kept apart
        with open(out / "sweep_timing.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["value", "master_seed", "wall_time_s"])
            for v, s, t in timings:
                w.writerow([repr(v), s, f"{t:.3f}"])
    _write_manifest(out, "sweep", cfg, files, {"sweep_parameter": parameter,
                                               "sweep_values": values,
                                               "sweep_seeds": list(cfg.seeds())})
    return rows


def build_parser():
    parser = _Parser(prog="gi", description="Ghost imaging simulation and reconstruction.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--preset", choices=PRESET_NAMES, help="override the config preset")
        p.add_argument("--seed", type=int, help="override master_seed")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        return p

    common(sub.add_parser("simulate", help="simulate a measurement set"))
    p = common(sub.add_parser("reconstruct", help="reconstruct a persisted set"))
    p.add_argument("--method", choices=("gi", "cs"))
    p.add_argument("--input", required=True, help="directory written by 'gi simulate'")
    p = common(sub.add_parser("sweep", help="sweep one parameter with paired seeds"))
    p.add_argument("--param", help="L1, reference_pixel_pitch or m")
    p.add_argument("--values", help="comma-separated values")
    p.add_argument("--timing", action="store_true", help="also write sweep_timing.csv")
    p = common(sub.add_parser("metrics", help="score estimates written by 'gi reconstruct'"))
    p.add_argument("--input", required=True, help="directory holding *_estimate.gig files")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, preset=args.preset, seed=args.seed, out_dir=args.out)
        if args.command == "simulate":
            cmd_simulate(cfg)
        elif args.command == "reconstruct":
            cmd_reconstruct(cfg, args.input, args.method)
        elif args.command == "metrics":
            cmd_metrics(cfg, args.input)
        else:
            values = None
            if args.values is not None:
                try:
                    values = [float(v) for v in args.values.split(",") if v.strip()]
                except ValueError:
                    parser.error(f"--values must be comma-separated numbers, got {args.values!r}")
            cmd_sweep(cfg, args.param, values, timing=args.timing)
    except ConfigError as exc:
        print(f"gi: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"gi: numerical failure in {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
