"""Outlier handling: MAD-scaled residual tests, down-weighting, deletion.

The scale of the weighted residuals is estimated robustly from the
whitened residual components (two per observation, approximately normal
for clean data) via the median absolute deviation, by camera when enough
observations are available.  An observation is flagged when its
per-coordinate RMS weighted residual sqrt(v^T W v / 2) exceeds t_v times
that scale.

Serial scheme: flagged observations are down-weighted strongly, the block
is re-adjusted, the flagged observations are deleted, and points left with
fewer than two observations are eliminated; rounds repeat until no new
flags appear.  Parallel scheme: the test runs inside the point
intersections with whole-point elimination (see
:func:`parallel_robust_pass`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model, triangulate
from .model import Block, ParamState
from .solver import AdjustOptions, adjust


@dataclass
class RobustConfig:
    """Thresholds of the two-step robust scheme."""

    t_v_serial: float = 3.0
    t_v_parallel: float = 4.0
    downweight_factor: float = 1e-4
    mad_scale: float = 1.4826
    per_camera: bool = True
    max_rounds: int = 10
    min_group: int = 10         # smaller camera groups fall back to the global scale
    mad_floor: float = 1e-12


@dataclass
class DeletionReport:
    """Bookkeeping of one robust pass."""

    rounds: int = 0
    observations_deleted: int = 0
    points_deleted: int = 0
    flagged_per_round: list[int] = field(default_factory=list)


def mad_sigma(values: np.ndarray, group_ids: np.ndarray | None = None,
              n_groups: int | None = None,
              config: RobustConfig | None = None) -> float | np.ndarray:
    """MAD-based normal-scale estimate, per group or global.

    sigma_hat = 1.4826 * median(|r - median(r)|); groups with fewer than
    ``config.min_group`` values fall back to the global estimate, and a
    zero MAD is floored to keep later divisions finite.

    Args:
        values: sample (e.g. whitened residual components).
        group_ids: optional group of each value (e.g. camera index).
        n_groups: number of groups when ``group_ids`` is given.

    Returns:
        A scalar without grouping, else an array of length ``n_groups``.
    """
    config = config or RobustConfig()
    values = np.asarray(values, dtype=np.float64)

    def estimate(sample: np.ndarray) -> float:
        if sample.size == 0:
            return config.mad_floor
        med = float(np.median(sample))
        mad = float(np.median(np.abs(sample - med)))
        return max(config.mad_scale * mad, config.mad_floor)

    overall = estimate(values)
    if group_ids is None:
        return overall
    group_ids = np.asarray(group_ids)
    out = np.full(n_groups, overall)
    for g in range(n_groups):
        sample = values[group_ids == g]
        if sample.size >= config.min_group:
            out[g] = estimate(sample)
    return out


#: Lower clip for redundancy numbers; near-determining coordinates would
#: otherwise blow the studentized statistic up on pure noise.
_REDUNDANCY_FLOOR = 0.05


def _redundancy_factors(block: Block, state: ParamState,
                        obs_idx: np.ndarray) -> np.ndarray:
    """Per-coordinate redundancy numbers sqrt(r_i), (k, 2).

    With cameras frozen, the whitened residual of observation k of point j
    has covariance I - A V^-1 A^T where A is its whitened point Jacobian
    and V the point's information.  A fitted residual coordinate shrinks
    by sqrt(r_i) of the measurement noise; dividing by it studentizes the
    residuals so one scale serves every viewing multiplicity (camera
    parameters are shared across many points and are neglected).
    """
    live = np.flatnonzero(block.active_obs_mask()
                          & np.isin(block.obs_pt, block.obs_pt[obs_idx]))
    _, _, jp, _ = model.residual_jacobian_batch(
        state, block.obs_cam[live].astype(np.int64),
        block.obs_pt[live].astype(np.int64), block.obs_xy[live],
        want_camera=False, want_point=True, want_shared=False)
    chol = np.linalg.cholesky(block.obs_w[live])
    white_jp = np.einsum("kji,kje->kie", chol, jp)       # A = L^T J, (k, 2, 3)
    v_info = np.zeros((block.n_points, 3, 3))
    np.add.at(v_info, block.obs_pt[live],
              np.einsum("kie,kif->kef", white_jp, white_jp))
    # Tiny ridge keeps degenerate (e.g. collinear-ray) points invertible.
    tr = np.einsum("jee->j", v_info)
    v_info += (1e-12 * np.maximum(tr, 1e-30))[:, None, None] * np.eye(3)
    vinv = np.linalg.inv(v_info)

    pos_of = np.full(block.n_observations, -1, dtype=np.int64)
    pos_of[live] = np.arange(len(live))
    rows = pos_of[obs_idx]
    a = white_jp[rows]
    h = np.einsum("kie,kef,kjf->kij", a, vinv[block.obs_pt[obs_idx]], a)
    r = 1.0 - np.einsum("kii->ki", h)
    reliable = r >= _REDUNDANCY_FLOOR
    return np.sqrt(np.clip(r, _REDUNDANCY_FLOOR, 1.0)), reliable


def whitened_residuals(block: Block, state: ParamState | None = None,
                       obs_idx: np.ndarray | None = None,
                       studentize: bool = False):
    """(components (k, 2), rms (k,)) of weighted residuals.

    Components are Cholesky-whitened so each is ~N(0, sigma0) on clean
    data; rms is the per-coordinate magnitude sqrt(v^T W v / 2).  With
    ``studentize`` both are divided by the approximate redundancy factor,
    which evens out the leverage of poorly vs richly observed points.
    """
    if state is None:
        state = ParamState.from_block(block)
    if obs_idx is None:
        obs_idx = np.flatnonzero(block.active_obs_mask())
    pix, depth = model.project_batch(state, block.obs_cam[obs_idx].astype(np.int64),
                                     block.obs_pt[obs_idx].astype(np.int64))
    v = pix - block.obs_xy[obs_idx]
    chol = np.linalg.cholesky(block.obs_w[obs_idx])      # W = C C^T
    comp = np.einsum("kij,ki->kj", chol, v)
    comp = np.where((depth > 0.0)[:, None], comp, np.inf)
    if studentize:
        factors, _ = _redundancy_factors(block, state, obs_idx)
        comp = comp / factors
    rms = np.sqrt(0.5 * np.einsum("kj,kj->k", comp, comp))
    return comp, rms


def residual_scales(block: Block, config: RobustConfig,
                    state: ParamState | None = None,
                    sample_idx: np.ndarray | None = None) -> np.ndarray:
    """Per-camera sigma estimates from fully active observations, (M,)."""
    if sample_idx is None:
        sample_idx = np.flatnonzero(block.obs_status == model.OBS_ACTIVE)
    if state is None:
        state = ParamState.from_block(block)
    comp, _ = whitened_residuals(block, state, sample_idx, studentize=True)
    # Floor-clipped coordinates carry a deflated scale; keep them out of
    # the sample (they are still tested, just never trusted for sigma).
    _, reliable = _redundancy_factors(block, state, sample_idx)
    keep = reliable & np.isfinite(comp)
    values = comp[keep]
    cams = np.broadcast_to(block.obs_cam[sample_idx][:, None], comp.shape)[keep]
    if not config.per_camera:
        return np.full(block.n_cameras, mad_sigma(values, config=config))
    return np.asarray(mad_sigma(values, cams, block.n_cameras, config))


def flag_observations(block: Block, t_v: float, config: RobustConfig,
                      state: ParamState | None = None,
                      worst_per_point: bool = False) -> np.ndarray:
    """Indices of fully active observations exceeding t_v * sigma_hat.

    With ``worst_per_point`` only the largest offender of each point is
    returned (classical data snooping): a gross outlier drags its point
    off position and every consistent ray over the threshold with it, so
    deleting more than the worst ray per round would destroy the point.
    """
    idx = np.flatnonzero(block.obs_status == model.OBS_ACTIVE)
    if idx.size == 0:
        return idx
    if state is None:
        state = ParamState.from_block(block)
    sigma = residual_scales(block, config, state, idx)
    _, rms = whitened_residuals(block, state, idx, studentize=True)
    rms = np.where(np.isfinite(rms), rms, np.inf)
    exceed = rms > t_v * sigma[block.obs_cam[idx]]
    if not worst_per_point:
        return idx[exceed]
    flagged = idx[exceed]
    if flagged.size == 0:
        return flagged
    severity = rms[exceed] / sigma[block.obs_cam[flagged]]
    order = np.lexsort((severity, block.obs_pt[flagged]))
    pts_sorted = block.obs_pt[flagged][order]
    last_of_group = np.flatnonzero(np.r_[pts_sorted[1:] != pts_sorted[:-1], True])
    return np.sort(flagged[order[last_of_group]])


def serial_robust_pass(block: Block, config: RobustConfig | None = None,
                       options: AdjustOptions | None = None) -> DeletionReport:
    """Down-weight, re-adjust, then delete observations that keep failing.

    Expects a block already adjusted to basic convergence.  Each round
    flags observations beyond the threshold, down-weights them by
    ``downweight_factor`` and re-adjusts; the flags are then re-evaluated
    with raw weights at the re-adjusted state, so consistent observations
    dragged over the threshold by a true outlier are rescued once the
    outlier has lost its influence.  Observations still failing are
    deleted, points left with fewer than two observations are eliminated,
    and rounds repeat until no new flags appear or ``max_rounds`` is hit.
    """
    config = config or RobustConfig()
    options = options or AdjustOptions()
    report = DeletionReport()
    for _ in range(config.max_rounds):
        flagged = flag_observations(block, config.t_v_serial, config,
                                    worst_per_point=True)
        if flagged.size == 0:
            break
        report.rounds += 1
        report.flagged_per_round.append(int(flagged.size))
        block.down_weight_observations(flagged, config.downweight_factor)
        adjust(block, options=options)

        # Re-test the flagged observations with their raw weights; the
        # scale comes from the observations that stayed fully active.
        block.obs_w[flagged] /= config.downweight_factor
        state = ParamState.from_block(block)
        sigma = residual_scales(block, config, state)
        _, rms = whitened_residuals(block, state, flagged, studentize=True)
        still_bad = (rms > config.t_v_serial * sigma[block.obs_cam[flagged]]) \
            | ~np.isfinite(rms)
        block.obs_status[flagged[~still_bad]] = model.OBS_ACTIVE
        block.delete_observations(flagged[still_bad])
        report.observations_deleted += int(still_bad.sum())
        n_pts, n_obs = block.prune_underobserved_points()
        report.points_deleted += n_pts
        report.observations_deleted += n_obs
        if not still_bad.any():
            break
    if report.rounds:
        adjust(block, options=options)
    return report


def parallel_robust_pass(block: Block, point_indices: np.ndarray,
                         config: RobustConfig | None = None,
                         options: AdjustOptions | None = None) -> DeletionReport:
    """Robust weighting inside the intersections, deleting whole points.

    For each point whose observations exceed the parallel threshold, the
    flagged observations are down-weighted within a re-intersection; if any
    observation still fails at the re-intersected position (checked with
    the raw weights), the complete point is eliminated instead of
    individual observations.  Clean candidates keep their robustly
    re-estimated coordinates.

    Intended to run inside the consensus intersection phase after basic
    outer convergence; mutates coordinates and statuses of ``block``.
    """
    config = config or RobustConfig()
    options = options or AdjustOptions()
    report = DeletionReport(rounds=1)
    point_indices = np.asarray(point_indices, dtype=np.int64)

    state = ParamState.from_block(block)
    sigma = residual_scales(block, config, state)
    live = block.active_obs_mask()
    idx = np.flatnonzero(live & np.isin(block.obs_pt, point_indices))
    if idx.size == 0:
        return report
    _, rms = whitened_residuals(block, state, idx, studentize=True)
    threshold = config.t_v_parallel * sigma[block.obs_cam[idx]]
    flagged = (rms > threshold) | ~np.isfinite(rms)
    report.flagged_per_round.append(int(flagged.sum()))
    if not flagged.any():
        return report

    candidates = np.unique(block.obs_pt[idx[flagged]])
    scale = np.ones(block.n_observations)
    scale[idx[flagged]] = config.downweight_factor
    redo = triangulate.intersect_batch(block, candidates, options, weight_scale=scale)

    # Re-test every observation of each candidate at its new position.
    trial = ParamState.from_block(block)
    trial.points[candidates] = redo.coords
    cand_obs = np.flatnonzero(live & np.isin(block.obs_pt, candidates))
    _, rms_new = whitened_residuals(block, trial, cand_obs, studentize=True)
    still_bad = (rms_new > config.t_v_parallel * sigma[block.obs_cam[cand_obs]]) \
        | ~np.isfinite(rms_new)
    contaminated = np.unique(block.obs_pt[cand_obs[still_bad]])
    contaminated = np.union1d(contaminated, redo.point_indices[redo.diverged])

    clean = np.setdiff1d(candidates, contaminated)
    if clean.size:
        rows = {int(j): r for r, j in enumerate(redo.point_indices)}
        block.points[clean] = redo.coords[[rows[int(j)] for j in clean]]
    if contaminated.size:
        report.observations_deleted += block.delete_points(contaminated)
        report.points_deleted += int(contaminated.size)
        n_pts, n_obs = block.prune_underobserved_points()
        report.points_deleted += n_pts
        report.observations_deleted += n_obs
    return report
