"""Parallel bundle adjustment by consensus over camera sub-blocks.

A block is split into sub-blocks with unambiguous cameras; points seen
from two or more sub-blocks become tie points (TPs).  Every outer
iteration runs two barrier-synchronized phases:

* phase (a), resection: each sub-block is adjusted independently (one
  worker per sub-block) with quadratic priors pulling its TPs toward the
  consensus coordinates;
* phase (b), synchronization: in the extended modes every point is
  re-estimated by fixed-camera intersection, which also yields the 3x3
  information used to weight the TP priors of the next iteration; the
  plain (ADMM) modes average the sub-block TP estimates and update dual
  variables instead, driven by the penalty parameter rho.

The extended modes never evaluate rho.  With a single sub-block the run
short-circuits to the serial adjuster, bitwise identical to calling it
directly.
"""

from __future__ import annotations

import csv
import io
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model, robust, triangulate
from .errors import DivergenceDetected, ParseError
from .model import Block, SharedCalibration
from .partition import Partition, partition_block
from .robust import RobustConfig
from .solver import AdjustOptions, TiePointPrior, adjust

MODE_PLAIN = "plain"
MODE_EXTENDED = "extended"
MODE_EXTENDED_ALL_CAMERAS = "extended_all_cameras"
MODE_EXTENDED_SCALAR = "extended_scalar"
MODE_PLAIN_REFINED = "plain_refined"

INTERSECTION_MODES = (MODE_EXTENDED, MODE_EXTENDED_ALL_CAMERAS, MODE_EXTENDED_SCALAR)
AVERAGING_MODES = (MODE_PLAIN, MODE_PLAIN_REFINED)
ALL_MODES = INTERSECTION_MODES + AVERAGING_MODES

TRACE_FIXED_COLUMNS = ["iteration", "sigma0", "deleted_obs", "deleted_points",
                       "phase_a_ms", "phase_b_ms"]


@dataclass
class ConsensusConfig:
    """Settings of one consensus session."""

    mode: str = MODE_EXTENDED
    threads: int = field(default_factory=lambda: os.cpu_count() or 1)
    rho: float = 1000.0                  # plain / scalar weighting only
    rho_growth: float = 1.01
    outer_convergence_ratio: float = 1.01
    grace_iterations: int = 1
    max_outer_iterations: int = 100
    far_coordinate_limit: float = 1e10
    robust: bool = False
    robust_config: RobustConfig = field(default_factory=RobustConfig)
    adjust_options: AdjustOptions = field(default_factory=AdjustOptions)
    subblocks: int | None = None         # requested L; defaults to threads
    min_cameras: int = 70
    seed: int = 0

    def requested_subblocks(self) -> int:
        return self.subblocks if self.subblocks is not None else max(self.threads, 1)

    def validate(self) -> None:
        if self.mode not in ALL_MODES:
            raise ValueError(f"unknown consensus mode {self.mode!r}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.mode in (MODE_PLAIN, MODE_PLAIN_REFINED, MODE_EXTENDED_SCALAR) \
                and not self.rho > 0.0:
            raise ValueError("rho must be positive in penalty-weighted modes")


@dataclass
class TraceRow:
    iteration: int
    sigma0: float
    deleted_obs: int
    deleted_points: int
    phase_a_ms: float
    phase_b_ms: float
    subblock_sigma0: list[float]
    subblock_lm_iterations: list[int]


@dataclass
class ConvergenceTrace:
    """Per-outer-iteration experimental record."""

    n_subblocks: int
    mode: str = MODE_EXTENDED
    rows: list[TraceRow] = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.rows)

    @property
    def final_sigma0(self) -> float:
        return self.rows[-1].sigma0 if self.rows else float("nan")

    @property
    def best_sigma0(self) -> float:
        return min((r.sigma0 for r in self.rows), default=float("nan"))

    def total_deleted(self) -> tuple[int, int]:
        return (sum(r.deleted_obs for r in self.rows),
                sum(r.deleted_points for r in self.rows))

    def header(self) -> list[str]:
        cols = list(TRACE_FIXED_COLUMNS)
        for ell in range(self.n_subblocks):
            cols += [f"sb{ell}_sigma0", f"sb{ell}_lm_iters"]
        return cols

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.header())
            for row in self.rows:
                record = [row.iteration, f"{row.sigma0:.17g}", row.deleted_obs,
                          row.deleted_points, f"{row.phase_a_ms:.3f}",
                          f"{row.phase_b_ms:.3f}"]
                for s, n in zip(row.subblock_sigma0, row.subblock_lm_iterations):
                    record += [f"{s:.17g}", n]
                writer.writerow(record)

    @classmethod
    def from_csv(cls, path) -> "ConvergenceTrace":
        text = Path(path).read_text()
        reader = csv.reader(io.StringIO(text))
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(1, "empty trace file") from None
        if header[:len(TRACE_FIXED_COLUMNS)] != TRACE_FIXED_COLUMNS:
            raise ParseError(1, f"unexpected trace columns {header[:6]}")
        extra = header[len(TRACE_FIXED_COLUMNS):]
        if len(extra) % 2 != 0:
            raise ParseError(1, "dangling sub-block column")
        n_sub = len(extra) // 2
        trace = cls(n_subblocks=n_sub)
        for ln, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise ParseError(ln, f"expected {len(header)} fields, got {len(rec)}")
            try:
                sub_s = [float(rec[6 + 2 * i]) for i in range(n_sub)]
                sub_n = [int(rec[7 + 2 * i]) for i in range(n_sub)]
                trace.rows.append(TraceRow(
                    int(rec[0]), float(rec[1]), int(rec[2]), int(rec[3]),
                    float(rec[4]), float(rec[5]), sub_s, sub_n))
            except ValueError as exc:
                raise ParseError(ln, str(exc)) from exc
        return trace


@dataclass
class TiePointRecord:
    """View of one tie point's consensus bookkeeping."""

    point_index: int
    subblocks: tuple[int, ...]
    consensus_coords: np.ndarray
    prior_information: dict[int, np.ndarray]
    dual: dict[int, np.ndarray]


class TiePointRegistry:
    """Array-backed consensus state of all tie points."""

    def __init__(self, point_indices: np.ndarray, membership: np.ndarray):
        self.point_indices = point_indices          # (T,)
        self.membership = membership                # (T, L) bool
        t, ell = membership.shape
        self.n_subblocks = ell
        self.prior_info = np.zeros((t, ell, 3, 3))  # extended modes
        self.dual = np.zeros((t, ell, 3))           # plain modes
        self.local = np.zeros((t, ell, 3))          # plain modes
        self.row_of_point = {}
        for row, j in enumerate(point_indices):
            self.row_of_point[int(j)] = row

    def __len__(self) -> int:
        return len(self.point_indices)

    def alive(self, block: Block) -> np.ndarray:
        return block.point_status[self.point_indices] == model.POINT_ACTIVE

    def record(self, block: Block, point_index: int) -> TiePointRecord:
        row = self.row_of_point[point_index]
        subs = tuple(int(e) for e in np.flatnonzero(self.membership[row]))
        return TiePointRecord(
            point_index=point_index, subblocks=subs,
            consensus_coords=block.points[point_index].copy(),
            prior_information={e: self.prior_info[row, e].copy() for e in subs},
            dual={e: self.dual[row, e].copy() for e in subs})


@dataclass
class SubBlock:
    """One camera sub-block: a real Block plus maps back to the parent."""

    index: int
    block: Block
    cam_map: np.ndarray     # local camera -> parent camera
    pt_map: np.ndarray      # local point -> parent point
    obs_map: np.ndarray     # local observation -> parent observation
    owned_pts: np.ndarray   # bool over local points: observed by this sub only
    tp_rows: np.ndarray     # registry rows of the TPs present here
    tp_local: np.ndarray    # local point index of each such TP


def split(block: Block, partition: Partition):
    """Build sub-block views and the tie-point registry.

    Each sub-block holds its cameras, every point observed by at least one
    of them, and exactly the observations made by its cameras; the union of
    sub-block observations is the block's observation set.  Points spanning
    two or more sub-blocks are registered as tie points with their current
    coordinates as the initial consensus.
    """
    assignment = partition.assignment
    n_sub = partition.n_subblocks

    live = block.obs_status != model.OBS_DELETED
    obs_sub = assignment[block.obs_cam]
    seen = np.zeros((block.n_points, n_sub), dtype=bool)
    seen[block.obs_pt[live], obs_sub[live]] = True
    span = seen.sum(axis=1)
    tp_points = np.flatnonzero(span >= 2)
    registry = TiePointRegistry(tp_points, seen[tp_points])

    subblocks = []
    for ell in range(n_sub):
        cams = np.flatnonzero(assignment == ell)
        cam_local = np.full(block.n_cameras, -1, dtype=np.int64)
        cam_local[cams] = np.arange(len(cams))
        obs_sel = np.flatnonzero(obs_sub == ell)
        pts = np.unique(block.obs_pt[obs_sel])
        pt_local = np.full(block.n_points, -1, dtype=np.int64)
        pt_local[pts] = np.arange(len(pts))

        sub_blk = Block(
            [block.cameras[int(i)].copy() for i in cams],
            block.points[pts].copy(),
            {"cam": cam_local[block.obs_cam[obs_sel]],
             "pt": pt_local[block.obs_pt[obs_sel]],
             "xy": block.obs_xy[obs_sel].copy(),
             "w": block.obs_w[obs_sel].copy(),
             "status": block.obs_status[obs_sel].copy()},
            shared_calibration=(SharedCalibration.from_array(
                block.shared_calibration.as_array())
                if block.shared_calibration is not None else None))
        sub_blk.point_status[:] = block.point_status[pts]

        owned = span[pts] <= 1
        tp_here = np.array([j for j in pts if span[j] >= 2 and seen[j, ell]],
                           dtype=np.int64)
        tp_rows = np.array([registry.row_of_point[int(j)] for j in tp_here],
                           dtype=np.int64)
        subblocks.append(SubBlock(ell, sub_blk, cams, pts, obs_sel, owned,
                                  tp_rows, pt_local[tp_here]))
    return subblocks, registry


def _refresh_subblock(sub: SubBlock, parent: Block) -> None:
    """Pull current point coordinates, statuses, and weights from the parent."""
    sub.block.points[...] = parent.points[sub.pt_map]
    sub.block.point_status[...] = parent.point_status[sub.pt_map]
    sub.block.obs_status[...] = parent.obs_status[sub.obs_map]
    sub.block.obs_w[...] = parent.obs_w[sub.obs_map]
    if sub.block.model_tag == model.SHARED_CALIBRATION:
        sub.block.shared_calibration = SharedCalibration.from_array(
            parent.shared_calibration.as_array())


def _write_back(sub: SubBlock, parent: Block, registry: TiePointRegistry) -> None:
    """Push camera parameters, owned points, and TP local estimates upstream."""
    for local_i, global_i in enumerate(sub.cam_map):
        parent.cameras[int(global_i)] = sub.block.cameras[local_i].copy()
    owned = np.flatnonzero(sub.owned_pts)
    parent.points[sub.pt_map[owned]] = sub.block.points[owned]
    if len(sub.tp_rows):
        registry.local[sub.tp_rows, sub.index] = sub.block.points[sub.tp_local]


def _build_priors(mode: str, registry: TiePointRegistry, parent: Block,
                  rho: float, sub: SubBlock) -> list[TiePointPrior]:
    """TP priors of one sub-block for the current outer iteration."""
    priors = []
    alive = registry.alive(parent)
    for row, local_idx in zip(sub.tp_rows, sub.tp_local):
        if not alive[row]:
            continue
        j = int(registry.point_indices[row])
        if mode in (MODE_PLAIN, MODE_PLAIN_REFINED):
            target = parent.points[j] - registry.dual[row, sub.index]
        else:
            target = parent.points[j]
        if mode in (MODE_PLAIN, MODE_EXTENDED_SCALAR):
            information = rho * np.eye(3)
        else:
            information = registry.prior_info[row, sub.index]
            if not information.any():
                continue
        priors.append(TiePointPrior(int(local_idx), target.copy(), information.copy()))
    return priors


def _serial_trace(block: Block, config: ConsensusConfig, mode: str):
    """L = 1 short-circuit: plain serial adjustment, same code path."""
    start = time.perf_counter()
    report = adjust(block, options=config.adjust_options)
    if config.robust:
        robust.serial_robust_pass(block, config.robust_config, config.adjust_options)
    elapsed_ms = (time.perf_counter() - start) * 1000.0
    trace = ConvergenceTrace(n_subblocks=1, mode=mode, converged=report.converged)
    history = report.sigma0_history
    per_row = elapsed_ms / max(len(history) - 1, 1)
    for i, sig in enumerate(history[1:], start=1):
        trace.rows.append(TraceRow(i, sig, 0, 0, per_row, 0.0, [sig], [1]))
    return block, trace


def _far_point_filter(block: Block, limit: float) -> tuple[int, int]:
    """Delete points with runaway coordinates; returns (points, observations)."""
    active = block.point_status == model.POINT_ACTIVE
    runaway = active & (np.abs(block.points).max(axis=1) > limit)
    bad = np.flatnonzero(runaway)
    n_obs = block.delete_points(bad) if bad.size else 0
    return int(bad.size), n_obs


def _intersection_phase(block: Block, registry: TiePointRegistry,
                        assignment: np.ndarray, mode: str,
                        config: ConsensusConfig, robust_active: bool):
    """Phase (b) of the extended modes; returns (deleted_pts, deleted_obs)."""
    active_pts = np.flatnonzero(block.active_point_mask())
    deleted_pts = deleted_obs = 0
    if active_pts.size:
        batch = triangulate.intersect_batch(block, active_pts, config.adjust_options)
        ok = ~batch.diverged
        block.points[active_pts[ok]] = batch.coords[ok]
        doomed = active_pts[batch.diverged]
        if doomed.size:
            deleted_obs += block.delete_points(doomed)
            deleted_pts += int(doomed.size)
    n_far, n_far_obs = _far_point_filter(block, config.far_coordinate_limit)
    deleted_pts += n_far
    deleted_obs += n_far_obs

    if robust_active:
        report = robust.parallel_robust_pass(
            block, np.flatnonzero(block.active_point_mask()),
            config.robust_config, config.adjust_options)
        deleted_pts += report.points_deleted
        deleted_obs += report.observations_deleted

    n_pts, n_obs = block.prune_underobserved_points()
    deleted_pts += n_pts
    deleted_obs += n_obs

    # Refresh the TP prior weights at the new coordinates.
    alive_rows = np.flatnonzero(registry.alive(block))
    if alive_rows.size:
        tp_idx = registry.point_indices[alive_rows]
        if mode == MODE_EXTENDED:
            registry.prior_info[alive_rows] = triangulate.reduced_information_batch(
                block, tp_idx, assignment, registry.n_subblocks)
        elif mode == MODE_EXTENDED_ALL_CAMERAS:
            totals = triangulate.information_totals(block, tp_idx)
            registry.prior_info[alive_rows] = totals[:, None, :, :]
    return deleted_pts, deleted_obs


def _averaging_phase(block: Block, registry: TiePointRegistry,
                     assignment: np.ndarray, mode: str,
                     config: ConsensusConfig) -> tuple[int, int]:
    """Phase (b) of the plain modes: average TPs, update the duals."""
    alive_rows = np.flatnonzero(registry.alive(block))
    if alive_rows.size:
        member = registry.membership[alive_rows]
        local = registry.local[alive_rows]
        z = (local * member[:, :, None]).sum(axis=1) / member.sum(axis=1)[:, None]
        block.points[registry.point_indices[alive_rows]] = z
        registry.dual[alive_rows] += np.where(
            member[:, :, None], local - z[:, None, :], 0.0)

    deleted_pts, deleted_obs = _far_point_filter(block, config.far_coordinate_limit)
    n_pts, n_obs = block.prune_underobserved_points()
    deleted_pts += n_pts
    deleted_obs += n_obs

    if mode == MODE_PLAIN_REFINED:
        alive_rows = np.flatnonzero(registry.alive(block))
        if alive_rows.size:
            registry.prior_info[alive_rows] = triangulate.reduced_information_batch(
                block, registry.point_indices[alive_rows], assignment,
                registry.n_subblocks)
    return deleted_pts, deleted_obs


def run_consensus(block: Block, config: ConsensusConfig,
                  partition: Partition | None = None):
    """Run the configured consensus mode; returns (block, ConvergenceTrace).

    The block is adjusted in place.  Raises DivergenceDetected (with the
    trace attached) when the global sigma0 exceeds ten times its initial
    value for three consecutive outer iterations.
    """
    config.validate()
    if partition is None:
        partition = partition_block(block, config.requested_subblocks(),
                                    config.min_cameras, config.seed)
    if partition.n_subblocks == 1:
        return _serial_trace(block, config, config.mode)

    mode = config.mode
    if config.robust and mode not in INTERSECTION_MODES:
        raise ValueError("robust consensus requires an intersection phase; "
                         "use an extended mode or the serial path")

    subblocks, registry = split(block, partition)
    assignment = partition.assignment
    trace = ConvergenceTrace(n_subblocks=partition.n_subblocks, mode=mode)
    uses_rho = mode in (MODE_PLAIN, MODE_PLAIN_REFINED, MODE_EXTENDED_SCALAR)
    rho = config.rho if uses_rho else float("nan")

    # Initial TP weights: one intersection pass at the starting parameters
    # for the intersection modes, reduced normals at the starting
    # coordinates for plain_refined; plain needs none.
    if mode in INTERSECTION_MODES:
        _intersection_phase(block, registry, assignment, mode, config,
                            robust_active=False)
    elif mode == MODE_PLAIN_REFINED:
        alive_rows = np.flatnonzero(registry.alive(block))
        if alive_rows.size:
            registry.prior_info[alive_rows] = triangulate.reduced_information_batch(
                block, registry.point_indices[alive_rows], assignment,
                registry.n_subblocks)

    sig_initial = model.sigma0(block)
    sig_best = sig_initial
    grace_left = config.grace_iterations
    diverge_run = 0
    robust_active = False
    deletions_last = 0

    with ThreadPoolExecutor(max_workers=config.threads) as pool:
        for outer in range(1, config.max_outer_iterations + 1):
            t0 = time.perf_counter()
            reports = list(pool.map(
                lambda sub: _adjust_subblock(sub, block, registry, mode, rho, config),
                subblocks))
            for sub in subblocks:
                _write_back(sub, block, registry)
            if block.model_tag == model.SHARED_CALIBRATION:
                stacked = np.stack([sub.block.shared_calibration.as_array()
                                    for sub in subblocks])
                block.shared_calibration = SharedCalibration.from_array(
                    stacked.mean(axis=0))
            t1 = time.perf_counter()

            if mode in INTERSECTION_MODES:
                del_pts, del_obs = _intersection_phase(
                    block, registry, assignment, mode, config, robust_active)
            else:
                del_pts, del_obs = _averaging_phase(
                    block, registry, assignment, mode, config)
            if uses_rho:
                rho *= config.rho_growth
            t2 = time.perf_counter()

            sig_cur = model.sigma0(block)
            trace.rows.append(TraceRow(
                outer, sig_cur, del_obs, del_pts,
                (t1 - t0) * 1000.0, (t2 - t1) * 1000.0,
                [r.sigma0 for r in reports], [r.iterations for r in reports]))
            deletions_last = del_pts + del_obs

            if sig_cur > 10.0 * max(sig_initial, 1e-12):
                diverge_run += 1
                if diverge_run >= 3:
                    raise DivergenceDetected(
                        f"global sigma0 {sig_cur:.4g} stayed above 10x initial "
                        f"{sig_initial:.4g} for 3 outer iterations", trace)
            else:
                diverge_run = 0

            ratio = sig_best / sig_cur if sig_cur > 0 else float("inf")
            sig_best = min(sig_best, sig_cur)
            if ratio < config.outer_convergence_ratio:
                if config.robust and mode in INTERSECTION_MODES and not robust_active:
                    robust_active = True
                    sig_best = sig_cur
                    grace_left = config.grace_iterations
                    continue
                if robust_active and deletions_last > 0:
                    continue
                if grace_left > 0:
                    grace_left -= 1
                    continue
                trace.converged = True
                break
    return block, trace


def _adjust_subblock(sub: SubBlock, parent: Block, registry: TiePointRegistry,
                     mode: str, rho: float, config: ConsensusConfig):
    _refresh_subblock(sub, parent)
    priors = _build_priors(mode, registry, parent, rho, sub)
    return adjust(sub.block, priors=priors, options=config.adjust_options)


def run_extended(block: Block, config: ConsensusConfig | None = None,
                 partition: Partition | None = None):
    """Extended consensus: intersection-based TPs with reduced-info weights."""
    config = config or ConsensusConfig()
    config.mode = MODE_EXTENDED
    return run_consensus(block, config, partition)


def run_plain(block: Block, config: ConsensusConfig | None = None,
              partition: Partition | None = None):
    """Plain ADMM consensus: TP averaging, duals, penalty parameter rho."""
    config = config or ConsensusConfig()
    config.mode = MODE_PLAIN
    return run_consensus(block, config, partition)


def run_ablation_variant(block: Block, config: ConsensusConfig,
                         partition: Partition | None = None):
    """Weighting-source ablations of the extended/plain schemes."""
    if config.mode not in (MODE_EXTENDED_ALL_CAMERAS, MODE_EXTENDED_SCALAR,
                           MODE_PLAIN_REFINED):
        raise ValueError(f"not an ablation mode: {config.mode!r}")
    return run_consensus(block, config, partition)
