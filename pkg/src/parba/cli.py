"""Command-line driver: dataset generation, adjustment runs, comparisons.

Exit codes: 0 success, 2 usage or input error, 3 numerical divergence
(the convergence trace is still written in that case).  Every run writes a
versioned key-value manifest echoing the effective configuration.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__, model
from .blockio import GeneratorSpec, generate, normalize_weights, read_block, write_native
from .consensus import (
    ALL_MODES,
    ConsensusConfig,
    ConvergenceTrace,
    TraceRow,
    run_consensus,
)
from .errors import DivergenceDetected, ParbaError
from .partition import build_visibility_graph, read_partition
from .robust import RobustConfig, serial_robust_pass
from .solver import AdjustOptions, adjust

MANIFEST_VERSION = "MANIFEST1"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3


def write_manifest(path, entries: dict) -> None:
    """Atomic key-value manifest (written to a temp file, then renamed)."""
    lines = [MANIFEST_VERSION]
    for key, value in entries.items():
        lines.append(f"{key} {value}")
    directory = Path(path).parent
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".manifest-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_manifest(path) -> dict:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != MANIFEST_VERSION:
        raise ParbaError(f"not a {MANIFEST_VERSION} file: {path}")
    entries = {}
    for line in lines[1:]:
        if line.strip():
            key, _, value = line.partition(" ")
            entries[key] = value
    return entries


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def _add_generate_parser(sub):
    p = sub.add_parser("generate", help="create a synthetic aerial block")
    p.add_argument("--strips", type=int, required=True)
    p.add_argument("--cams-per-strip", type=int, required=True)
    p.add_argument("--endlap", type=float, default=0.6)
    p.add_argument("--sidelap", type=float, default=0.2)
    p.add_argument("--points-per-camera", type=int, default=100)
    p.add_argument("--noise-px", type=float, default=1.0)
    p.add_argument("--perturb-angle", type=float, default=1e-4,
                   help="camera angle perturbation sigma [rad]")
    p.add_argument("--perturb-translation", type=float, default=0.1,
                   help="camera center perturbation sigma [scene units]")
    p.add_argument("--flight-height", type=float, default=1000.0)
    p.add_argument("--focal", type=float, default=1000.0)
    p.add_argument("--image-size", type=float, default=1000.0)
    p.add_argument("--outlier-fraction", type=float, default=0.0)
    p.add_argument("--outlier-min-px", type=float, default=20.0)
    p.add_argument("--outlier-max-px", type=float, default=200.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="output directory")


def cmd_generate(args) -> int:
    spec = GeneratorSpec(
        strips=args.strips, cameras_per_strip=args.cams_per_strip,
        endlap=args.endlap, sidelap=args.sidelap,
        points_per_camera=args.points_per_camera, noise_px=args.noise_px,
        perturb_angle_rad=args.perturb_angle,
        perturb_translation=args.perturb_translation, seed=args.seed,
        flight_height=args.flight_height, focal_px=args.focal,
        image_size_px=args.image_size, outlier_fraction=args.outlier_fraction,
        outlier_min_px=args.outlier_min_px, outlier_max_px=args.outlier_max_px)
    t0 = time.perf_counter()
    truth, perturbed, labels = generate(spec)
    args.out.mkdir(parents=True, exist_ok=True)
    truth_path = args.out / "truth.block"
    perturbed_path = args.out / "perturbed.block"
    labels_path = args.out / "outliers.labels"
    write_native(truth, truth_path)
    write_native(perturbed, perturbed_path)
    labels_path.write_text("".join(f"{int(v)}\n" for v in labels))
    entries = {"command": "generate", "version": __version__}
    entries.update({k: getattr(spec, k) for k in (
        "strips", "cameras_per_strip", "endlap", "sidelap",
        "points_per_camera", "noise_px", "perturb_angle_rad",
        "perturb_translation", "seed", "flight_height", "focal_px",
        "image_size_px", "outlier_fraction", "outlier_min_px",
        "outlier_max_px")})
    entries.update({
        "truth_path": truth_path, "perturbed_path": perturbed_path,
        "labels_path": labels_path,
        "n_cameras": truth.n_cameras, "n_points": truth.n_points,
        "n_observations": truth.n_observations,
        "n_outliers": int(labels.sum()),
        "elapsed_seconds": f"{time.perf_counter() - t0:.3f}"})
    write_manifest(args.out / "manifest.txt", entries)
    print(f"generated {truth.n_cameras} cameras, {truth.n_points} points, "
          f"{truth.n_observations} observations -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# adjust
# ---------------------------------------------------------------------------

def _add_adjust_parser(sub):
    p = sub.add_parser("adjust", help="run a serial or consensus adjustment")
    p.add_argument("--input", type=Path, required=True,
                   help="native block or community-format file (auto-detected)")
    p.add_argument("--mode", default="serial",
                   choices=["serial"] + [m.replace("_", "-") for m in ALL_MODES])
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--subblocks", type=int, default=None,
                   help="requested sub-blocks (default: thread count)")
    p.add_argument("--min-cameras", type=int, default=70)
    p.add_argument("--rho", type=float, default=1000.0)
    p.add_argument("--robust", action="store_true")
    p.add_argument("--trace", type=Path, default=None, help="trace CSV path")
    p.add_argument("--out", type=Path, default=None, help="adjusted block path")
    p.add_argument("--manifest", type=Path, default=None)
    p.add_argument("--partition-file", type=Path, default=None,
                   help="replay an external camera assignment")
    p.add_argument("--seed", type=int, default=0)


def _serial_trace_rows(history, elapsed_ms):
    trace = ConvergenceTrace(n_subblocks=1, mode="serial")
    per_row = elapsed_ms / max(len(history) - 1, 1)
    for i, sig in enumerate(history[1:], start=1):
        trace.rows.append(TraceRow(i, sig, 0, 0, per_row, 0.0, [sig], [1]))
    return trace


def cmd_adjust(args) -> int:
    block = read_block(args.input)
    normalize_weights(block)
    sigma_before = model.sigma0(block)
    t0 = time.perf_counter()
    diverged = False
    deleted_obs = deleted_pts = 0

    if args.mode == "serial":
        try:
            report = adjust(block)
            if args.robust:
                rb = serial_robust_pass(block)
                deleted_obs, deleted_pts = rb.observations_deleted, rb.points_deleted
            converged = report.converged
            sigma_after = report.sigma0
            iterations = report.iterations
            trace = _serial_trace_rows(report.sigma0_history,
                                       (time.perf_counter() - t0) * 1000.0)
            trace.converged = converged
        except DivergenceDetected:
            diverged = True
            trace = ConvergenceTrace(n_subblocks=1, mode="serial")
            sigma_after = model.sigma0(block)
            iterations = 0
            converged = False
    else:
        mode = args.mode.replace("-", "_")
        config = ConsensusConfig(
            mode=mode, threads=args.threads, rho=args.rho, robust=args.robust,
            subblocks=args.subblocks, min_cameras=args.min_cameras,
            seed=args.seed)
        partition = None
        if args.partition_file is not None:
            graph = build_visibility_graph(block)
            partition = read_partition(args.partition_file, block.n_cameras,
                                       graph.node_weight)
        try:
            _, trace = run_consensus(block, config, partition)
            converged = trace.converged
        except DivergenceDetected as exc:
            diverged = True
            trace = exc.trace if exc.trace is not None else ConvergenceTrace(1)
            converged = False
        sigma_after = trace.final_sigma0 if trace.rows else model.sigma0(block)
        iterations = trace.iterations
        deleted_obs, deleted_pts = trace.total_deleted()

    elapsed = time.perf_counter() - t0
    if args.trace is not None:
        trace.to_csv(args.trace)
    if args.out is not None:
        write_native(block, args.out)
    manifest_path = args.manifest
    if manifest_path is None and args.out is not None:
        manifest_path = args.out.with_suffix(".manifest.txt")
    if manifest_path is not None:
        write_manifest(manifest_path, {
            "command": "adjust", "version": __version__,
            "input": args.input, "mode": args.mode,
            "threads": args.threads, "subblocks": args.subblocks,
            "min_cameras": args.min_cameras, "rho": args.rho,
            "robust": args.robust, "seed": args.seed,
            "partition_file": args.partition_file,
            "trace": args.trace, "out": args.out,
            "sigma0_before": f"{sigma_before:.17g}",
            "sigma0_after": f"{sigma_after:.17g}",
            "iterations": iterations, "converged": converged,
            "diverged": diverged,
            "deleted_observations": deleted_obs,
            "deleted_points": deleted_pts,
            "elapsed_seconds": f"{elapsed:.3f}"})
    status = "diverged" if diverged else ("converged" if converged else "stopped")
    print(f"{args.mode}: sigma0 {sigma_before:.4f} -> {sigma_after:.4f} "
          f"in {iterations} iterations ({status}, {elapsed:.1f}s)")
    return EXIT_DIVERGED if diverged else EXIT_OK


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

def _add_compare_parser(sub):
    p = sub.add_parser("compare", help="merge traces into a report with figures")
    p.add_argument("--inputs", type=Path, nargs="+", required=True)
    p.add_argument("--report", type=Path, required=True,
                   help="markdown report path; CSV and PNG land alongside")


def cmd_compare(args) -> int:
    from .plots import save_convergence_figure, save_deletion_figure

    traces = {}
    for path in args.inputs:
        name = path.stem
        serial = 2
        while name in traces:
            name = f"{path.stem}#{serial}"
            serial += 1
        traces[name] = ConvergenceTrace.from_csv(path)
    names = list(traces)
    max_rows = max(t.iterations for t in traces.values())

    report = args.report
    report.parent.mkdir(parents=True, exist_ok=True)
    csv_path = report.with_suffix(".csv")
    fig_path = report.with_suffix(".png")
    deletions_path = report.with_name(report.stem + "_deletions.png")

    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration"] + [f"sigma0_{n}" for n in names])
        for i in range(max_rows):
            row = [i + 1]
            for name in names:
                rows = traces[name].rows
                row.append(f"{rows[i].sigma0:.17g}" if i < len(rows) else "")
            writer.writerow(row)

    save_convergence_figure(
        {n: [r.sigma0 for r in t.rows] for n, t in traces.items()}, fig_path)
    save_deletion_figure(
        {n: [r.deleted_obs for r in t.rows] for n, t in traces.items()},
        deletions_path)

    lines = ["# Convergence comparison", ""]
    lines += ["| trace | iterations | final sigma0 | best sigma0 | "
              "deleted obs | deleted points |",
              "|---|---|---|---|---|---|"]
    for name in names:
        t = traces[name]
        d_obs, d_pts = t.total_deleted()
        lines.append(f"| {name} | {t.iterations} | {t.final_sigma0:.6g} "
                     f"| {t.best_sigma0:.6g} | {d_obs} | {d_pts} |")
    lines += ["", "## Per-iteration sigma0", ""]
    header = "| iteration | " + " | ".join(names)
    if len(names) > 1:
        header += " | diff vs " + names[0]
    lines.append(header + " |")
    lines.append("|" + "---|" * (len(names) + 1 + (1 if len(names) > 1 else 0)))
    identical = len(names) > 1
    for i in range(max_rows):
        cells = [str(i + 1)]
        vals = []
        for name in names:
            rows = traces[name].rows
            if i < len(rows):
                vals.append(rows[i].sigma0)
                cells.append(f"{rows[i].sigma0:.6g}")
            else:
                vals.append(None)
                cells.append("")
        if len(names) > 1:
            if vals[0] is not None and vals[-1] is not None:
                diff = vals[-1] - vals[0]
                if diff != 0.0:
                    identical = False
                cells.append(f"{diff:+.3g}")
            else:
                identical = False
                cells.append("")
        lines.append("| " + " | ".join(cells) + " |")
    if len(names) > 1 and identical:
        lines += ["", "Traces are identical (zero difference everywhere)."]
    reach = []
    for name in names:
        t = traces[name]
        target = 1.01 * t.best_sigma0
        hit = next((r.iteration for r in t.rows if r.sigma0 <= target),
                   t.iterations)
        reach.append(f"- {name}: within 1% of its best by iteration {hit}")
    lines += ["", "## First iteration within 1% of best", ""] + reach
    lines += ["", f"Figures: {fig_path.name}, {deletions_path.name}; "
              f"merged data: {csv_path.name}", ""]
    report.write_text("\n".join(lines))
    print(f"report -> {report} (+ {csv_path.name}, {fig_path.name})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="parba",
        description="robust parallel bundle adjustment by consensus")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    _add_generate_parser(sub)
    _add_adjust_parser(sub)
    _add_compare_parser(sub)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = {"generate": cmd_generate, "adjust": cmd_adjust,
               "compare": cmd_compare}[args.command]
    try:
        return handler(args)
    except (ParbaError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
