"""Serial bundle adjustment of one (sub-)block.

Builds the weighted normal equations from per-observation outer products
(the design matrix is never formed), eliminates the 3x3 point blocks via
the Schur complement to obtain the reduced camera system, and solves that
with block-Jacobi preconditioned conjugate gradients inside a
Levenberg-Marquardt loop.  Tie-point priors -- quadratic penalties
``(X - target)^T W (X - target)`` on individual points -- plug into the
same machinery; they are how the consensus modes anchor sub-blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model
from .errors import CgStagnated, DivergenceDetected, SingularPointBlock
from .model import Block, ParamState, orthonormalize, rodrigues

_POSE_PARAMS = 6


@dataclass
class TiePointPrior:
    """Quadratic prior pulling one point toward a target position.

    ``information`` is a symmetric PSD 3x3 weight in scene units^-2; a
    rank-deficient matrix is a valid (partial) constraint.
    """

    point_index: int
    target: np.ndarray
    information: np.ndarray

    def __post_init__(self) -> None:
        self.target = np.asarray(self.target, dtype=np.float64).reshape(3)
        self.information = np.asarray(self.information, dtype=np.float64).reshape(3, 3)


@dataclass
class AdjustOptions:
    """Tuning knobs of the LM / CG pipeline."""

    damping: float = 1e-4
    convergence_ratio: float = 1.01
    grace_iterations: int = 1
    max_lm_iterations: int = 100
    cg_tolerance: float = 1e-6
    cg_max_iterations: int | None = None   # resolved to min(10 * #cameras, 1000)
    covariance_lambda: float = 1e-6
    damping_max: float = 1e6
    damping_min: float = 1e-6
    max_step_retries: int = 100

    def resolved_cg_cap(self, n_cameras: int) -> int:
        if self.cg_max_iterations is not None:
            return self.cg_max_iterations
        return max(1, min(10 * max(n_cameras, 1), 1000))


@dataclass
class AdjustReport:
    """Outcome of one adjustment run."""

    iterations: int
    sigma0: float
    initial_sigma0: float
    converged: bool
    cg_iterations_total: int
    sigma0_history: list[float] = field(default_factory=list)


@dataclass
class GaugeFix:
    """Datum definition: first camera pose plus one point coordinate."""

    camera_index: int | None = None
    point_index: int | None = None
    point_axis: int | None = None

    @property
    def n_fixed(self) -> int:
        n = 0
        if self.camera_index is not None:
            n += _POSE_PARAMS
        if self.point_index is not None:
            n += 1
        return n


def default_gauge(block: Block, state: ParamState) -> GaugeFix:
    """Hold camera 0's pose and one coordinate of the farthest point.

    The farthest active point from camera 0 fixes the scale; the axis with
    the largest offset is the best conditioned choice.
    """
    active = np.flatnonzero(block.active_point_mask())
    if block.n_cameras == 0 or active.size == 0:
        return GaugeFix()
    center = -state.rotations[0].T @ state.translations[0]
    offsets = state.points[active] - center
    dist = np.einsum("ji,ji->j", offsets, offsets)
    far = active[int(np.argmax(dist))]
    axis = int(np.argmax(np.abs(state.points[far] - center)))
    return GaugeFix(camera_index=0, point_index=int(far), point_axis=axis)


class ParameterLayout:
    """Index bookkeeping for the stacked parameter vector.

    Cameras come first (p parameters each), then the optional shared
    calibration block, then the active points (3 each, handled separately
    through the Schur complement).
    """

    def __init__(self, block: Block):
        self.n_cameras = block.n_cameras
        self.p = block.camera_param_count
        self.s = block.shared_param_count
        self.cam_dim = self.n_cameras * self.p + self.s
        self.slot_pt = np.flatnonzero(block.active_point_mask())
        self.n_slots = len(self.slot_pt)
        self.pt_slot = np.full(block.n_points, -1, dtype=np.int64)
        self.pt_slot[self.slot_pt] = np.arange(self.n_slots)


@dataclass
class NormalSystem:
    """Damped weighted normal equations in point/camera split form."""

    layout: ParameterLayout
    lam: float
    ncc: np.ndarray                 # (M, p, p) camera diagonal blocks
    nss: np.ndarray | None          # (7, 7) shared block
    ncs: np.ndarray | None          # (M, p, 7) camera-shared coupling
    v: np.ndarray                   # (n_slots, 3, 3) point blocks (+priors)
    wcp: np.ndarray                 # (ka, p, 3) per-observation couplings
    wsp: np.ndarray | None          # (n_slots, 7, 3) shared-point couplings
    b_cam: np.ndarray               # (M, p)
    b_shared: np.ndarray | None     # (7,)
    b_pt: np.ndarray                # (n_slots, 3)
    obs_cam: np.ndarray             # (ka,)
    obs_slot: np.ndarray            # (ka,)


@dataclass
class _RawSystem:
    """Pre-damping accumulation shared by every retry of one LM step."""

    layout: ParameterLayout
    ncc: np.ndarray
    nss: np.ndarray | None
    ncs: np.ndarray | None
    v: np.ndarray
    wcp: np.ndarray
    wsp: np.ndarray | None
    b_cam: np.ndarray
    b_shared: np.ndarray | None
    b_pt: np.ndarray
    obs_cam: np.ndarray
    obs_slot: np.ndarray
    fixed_cam_mask: np.ndarray      # (M, p) bool, True when held by the gauge
    fixed_pt_mask: np.ndarray       # (n_slots, 3) bool


@dataclass
class SchurArtifacts:
    """Intermediates kept from the reduction for back-substitution."""

    vinv: np.ndarray                # (n_slots, 3, 3)


def _assemble(block: Block, state: ParamState, priors, gauge: GaugeFix) -> _RawSystem:
    layout = ParameterLayout(block)
    m, p, s = layout.n_cameras, layout.p, layout.s
    has_shared = s > 0
    idx = np.flatnonzero(block.active_obs_mask())
    cam_idx = block.obs_cam[idx].astype(np.int64)
    pt_idx = block.obs_pt[idx].astype(np.int64)
    slot = layout.pt_slot[pt_idx]

    r, jc, jp, js = model.residual_jacobian_batch(
        state, cam_idx, pt_idx, block.obs_xy[idx],
        want_camera=True, want_point=True, want_shared=has_shared)
    w = block.obs_w[idx]

    fixed_cam = np.zeros((m, p), dtype=bool)
    fixed_pt = np.zeros((layout.n_slots, 3), dtype=bool)
    if gauge.camera_index is not None and m > 0:
        fixed_cam[gauge.camera_index, :_POSE_PARAMS] = True
        jc[cam_idx == gauge.camera_index, :, :_POSE_PARAMS] = 0.0
    if gauge.point_index is not None:
        g_slot = layout.pt_slot[gauge.point_index]
        if g_slot >= 0:
            fixed_pt[g_slot, gauge.point_axis] = True
            jp[slot == g_slot, :, gauge.point_axis] = 0.0

    wjc = np.einsum("kab,kbp->kap", w, jc)
    wjp = np.einsum("kab,kbe->kae", w, jp)
    neg_wr = -np.einsum("kab,kb->ka", w, r)

    ncc = np.zeros((m, p, p))
    np.add.at(ncc, cam_idx, np.einsum("kai,kaj->kij", jc, wjc))
    b_cam = np.zeros((m, p))
    np.add.at(b_cam, cam_idx, np.einsum("kap,ka->kp", jc, neg_wr))

    v = np.zeros((layout.n_slots, 3, 3))
    np.add.at(v, slot, np.einsum("kai,kaj->kij", jp, wjp))
    b_pt = np.zeros((layout.n_slots, 3))
    np.add.at(b_pt, slot, np.einsum("kae,ka->ke", jp, neg_wr))

    wcp = np.einsum("kap,kae->kpe", jc, wjp)

    nss = ncs = wsp = b_shared = None
    if has_shared:
        nss = np.einsum("kai,kaj->ij", js, np.einsum("kab,kbj->kaj", w, js))
        ncs = np.zeros((m, p, 7))
        np.add.at(ncs, cam_idx, np.einsum("kap,kaq->kpq", jc,
                                          np.einsum("kab,kbq->kaq", w, js)))
        wsp = np.zeros((layout.n_slots, 7, 3))
        np.add.at(wsp, slot, np.einsum("kaq,kae->kqe", js, wjp))
        b_shared = np.einsum("kaq,ka->q", js, neg_wr)

    for prior in priors:
        p_slot = layout.pt_slot[prior.point_index]
        if p_slot < 0:
            continue
        v[p_slot] += prior.information
        b_pt[p_slot] += prior.information @ (prior.target - state.points[prior.point_index])

    return _RawSystem(layout, ncc, nss, ncs, wsp=wsp, v=v, wcp=wcp,
                      b_cam=b_cam, b_shared=b_shared, b_pt=b_pt,
                      obs_cam=cam_idx, obs_slot=slot,
                      fixed_cam_mask=fixed_cam, fixed_pt_mask=fixed_pt)


def _finalize(raw: _RawSystem, lam: float) -> NormalSystem:
    """Apply multiplicative damping and pin gauge-fixed / empty parameters."""
    scale = 1.0 + lam
    ncc = raw.ncc.copy()
    diag = np.arange(raw.layout.p)
    ncc[:, diag, diag] *= scale
    dead = (ncc[:, diag, diag] == 0.0) | raw.fixed_cam_mask
    ncc[:, diag, diag] = np.where(dead, 1.0, ncc[:, diag, diag])
    b_cam = np.where(raw.fixed_cam_mask, 0.0, raw.b_cam)

    v = raw.v.copy()
    d3 = np.arange(3)
    v[:, d3, d3] *= scale
    dead_pt = (v[:, d3, d3] == 0.0) | raw.fixed_pt_mask
    v[:, d3, d3] = np.where(dead_pt, 1.0, v[:, d3, d3])
    b_pt = np.where(raw.fixed_pt_mask, 0.0, raw.b_pt)

    nss = None
    if raw.nss is not None:
        nss = raw.nss.copy()
        d7 = np.arange(7)
        nss[d7, d7] *= scale
        nss[d7, d7] = np.where(nss[d7, d7] == 0.0, 1.0, nss[d7, d7])

    return NormalSystem(raw.layout, lam, ncc, nss, raw.ncs, v, raw.wcp,
                        raw.wsp, b_cam, raw.b_shared, b_pt,
                        raw.obs_cam, raw.obs_slot)


def build_normal_system(block: Block, priors=(), lam: float = 1e-4,
                        state: ParamState | None = None,
                        gauge: GaugeFix | None = None) -> NormalSystem:
    """Accumulate J^T W J and J^T W (-v) plus priors, then damp the diagonal.

    ``gauge`` defaults to the serial datum (camera 0 pose + one point
    coordinate) when no priors are given, and to no fixing otherwise.
    """
    if state is None:
        state = ParamState.from_block(block)
    if gauge is None:
        gauge = default_gauge(block, state) if not priors else GaugeFix()
    return _finalize(_assemble(block, state, priors, gauge), lam)


def _self_pairs(obs_slot: np.ndarray):
    """All ordered observation pairs sharing a point, vectorized."""
    order = np.argsort(obs_slot, kind="stable")
    slots_sorted = obs_slot[order]
    _, starts, counts = np.unique(slots_sorted, return_index=True, return_counts=True)
    per_group = counts * counts
    total = int(per_group.sum())
    group = np.repeat(np.arange(len(counts)), per_group)
    pair_start = np.concatenate([[0], np.cumsum(per_group)[:-1]])
    within = np.arange(total) - pair_start[group]
    m = counts[group]
    k1 = order[starts[group] + within // m]
    k2 = order[starts[group] + within % m]
    return k1, k2


def schur_reduce(system: NormalSystem):
    """Reduced camera system S = N_CC - N_XC^T N_XX^-1 N_XC and its rhs.

    Returns (S, y_C, artifacts); S is dense symmetric of camera dimension
    (#cameras * p + shared), with an off-diagonal block (i, j) exactly when
    cameras i and j share an active point.

    Raises:
        SingularPointBlock: a 3x3 point block could not be inverted.
    """
    lay = system.layout
    m, p, s = lay.n_cameras, lay.p, lay.s
    det = np.linalg.det(system.v)
    bad = ~(np.isfinite(det) & (np.abs(det) > 1e-300))
    if bad.any():
        raise SingularPointBlock(int(lay.slot_pt[int(np.flatnonzero(bad)[0])]))
    vinv = np.linalg.inv(system.v)

    s_blocks = np.zeros((m, m, p, p))
    rows = np.arange(m)
    s_blocks[rows, rows] = system.ncc
    y_cam = system.b_cam.copy()

    if len(system.obs_cam):
        t = np.einsum("kpe,kef->kpf", system.wcp, vinv[system.obs_slot])
        k1, k2 = _self_pairs(system.obs_slot)
        np.add.at(s_blocks, (system.obs_cam[k1], system.obs_cam[k2]),
                  -np.einsum("xpe,xqe->xpq", t[k1], system.wcp[k2]))
        np.add.at(y_cam, system.obs_cam,
                  -np.einsum("kpe,ke->kp", t, system.b_pt[system.obs_slot]))

    dim = m * p + s
    s_mat = np.zeros((dim, dim))
    s_mat[:m * p, :m * p] = s_blocks.transpose(0, 2, 1, 3).reshape(m * p, m * p)
    y = np.zeros(dim)
    y[:m * p] = y_cam.reshape(-1)

    if s > 0:
        cs = system.ncs.copy()
        if len(system.obs_cam):
            np.add.at(cs, system.obs_cam,
                      -np.einsum("xpe,xfe->xpf", t, system.wsp[system.obs_slot]))
        s_mat[:m * p, m * p:] = cs.reshape(m * p, 7)
        s_mat[m * p:, :m * p] = cs.reshape(m * p, 7).T
        s_mat[m * p:, m * p:] = (system.nss
                                 - np.einsum("jae,jef,jbf->ab", system.wsp, vinv, system.wsp))
        y[m * p:] = (system.b_shared
                     - np.einsum("jae,jef,jf->a", system.wsp, vinv, system.b_pt))

    s_mat = 0.5 * (s_mat + s_mat.T)
    return s_mat, y, SchurArtifacts(vinv=vinv)


def _block_preconditioner(s_mat: np.ndarray, layout: ParameterLayout):
    m, p, s = layout.n_cameras, layout.p, layout.s
    cam_part = s_mat[:m * p, :m * p].reshape(m, p, m, p)
    diag_blocks = cam_part[np.arange(m), :, np.arange(m), :]
    inv_cam = np.linalg.inv(diag_blocks)
    inv_shared = np.linalg.inv(s_mat[m * p:, m * p:]) if s else None

    def apply(r: np.ndarray) -> np.ndarray:
        out = np.empty_like(r)
        out[:m * p] = np.einsum("mpq,mq->mp", inv_cam,
                                r[:m * p].reshape(m, p)).reshape(-1)
        if s:
            out[m * p:] = inv_shared @ r[m * p:]
        return out

    return apply


def pcg_solve(s_mat: np.ndarray, y: np.ndarray, layout: ParameterLayout,
              options: AdjustOptions) -> tuple[np.ndarray, int]:
    """Block-Jacobi preconditioned conjugate gradients on the camera system.

    Stops when the relative preconditioned residual drops below
    ``options.cg_tolerance``; returns the best iterate seen.  At the
    iteration cap the best iterate is still returned if it reduced the
    residual substantially, otherwise CgStagnated is raised so the caller
    can increase the damping and retry.
    """
    y_norm = float(np.linalg.norm(y))
    if y_norm == 0.0:
        return np.zeros_like(y), 0
    prec = _block_preconditioner(s_mat, layout)
    cap = options.resolved_cg_cap(layout.n_cameras)

    x = np.zeros_like(y)
    r = y.copy()
    z = prec(r)
    d = z.copy()
    gamma = float(r @ z)
    gamma0 = gamma
    best_x = x.copy()
    best_rel = 1.0
    for it in range(1, cap + 1):
        q = s_mat @ d
        dq = float(d @ q)
        if dq <= 0.0 or not np.isfinite(dq):
            break
        alpha = gamma / dq
        x = x + alpha * d
        r = r - alpha * q
        z = prec(r)
        gamma_new = float(r @ z)
        rel = np.sqrt(max(gamma_new, 0.0) / gamma0)
        if rel < best_rel:
            best_rel = rel
            best_x = x.copy()
        if rel < options.cg_tolerance:
            return x, it
        beta = gamma_new / gamma
        d = z + beta * d
        gamma = gamma_new
    if best_rel < 1e-2:
        return best_x, cap
    raise CgStagnated(cap, best_rel)


def back_substitute(system: NormalSystem, artifacts: SchurArtifacts,
                    camera_update: np.ndarray) -> np.ndarray:
    """Recover point updates from the camera solution, (n_slots, 3)."""
    lay = system.layout
    m, p = lay.n_cameras, lay.p
    xc = camera_update[:m * p].reshape(m, p)
    rhs = system.b_pt.copy()
    if len(system.obs_cam):
        np.add.at(rhs, system.obs_slot,
                  -np.einsum("kpe,kp->ke", system.wcp, xc[system.obs_cam]))
    if lay.s > 0:
        rhs -= np.einsum("jae,a->je", system.wsp, camera_update[m * p:])
    return np.einsum("jef,jf->je", artifacts.vinv, rhs)


def apply_update(state: ParamState, layout: ParameterLayout,
                 camera_update: np.ndarray, point_update: np.ndarray) -> ParamState:
    """New parameter state; rotation increments composed on the left."""
    new = state.copy()
    m, p = layout.n_cameras, layout.p
    xc = camera_update[:m * p].reshape(m, p)
    for i in range(m):
        new.rotations[i] = orthonormalize(rodrigues(xc[i, 0:3]) @ state.rotations[i])
    new.translations += xc[:, 3:6]
    if state.model_tag == model.PER_CAMERA_FOCAL_RADIAL:
        new.intrinsics += xc[:, 6:8]
    if layout.s > 0:
        new.shared = state.shared + camera_update[m * p:]
    new.points[layout.slot_pt] += point_update
    return new


def evaluate_cost(block: Block, state: ParamState, priors) -> tuple[float, float]:
    """(total cost, measurement part); total includes the prior penalties."""
    meas = model.weighted_residual_sum(block, state)
    prior_cost = 0.0
    for prior in priors:
        if block.point_status[prior.point_index] != model.POINT_ACTIVE:
            continue
        dx = state.points[prior.point_index] - prior.target
        prior_cost += float(dx @ prior.information @ dx)
    return meas + prior_cost, meas


def adjust(block: Block, priors=(), options: AdjustOptions | None = None,
           gauge: GaugeFix | None = None) -> AdjustReport:
    """Levenberg-Marquardt adjustment of the block in place.

    Steps are accepted only when the total weighted cost (measurements plus
    prior terms) decreases; rejected steps multiply the damping by 10 and
    re-solve.  Iteration stops when the best-so-far / current sigma0 ratio
    falls below the convergence ratio after one grace iteration, or at the
    iteration cap.  Without priors the gauge is fixed per
    :func:`default_gauge`; priors anchor the block instead.

    Raises:
        DivergenceDetected: sigma0 exceeded 10x its initial value for three
            consecutive iterations.
    """
    options = options or AdjustOptions()
    priors = list(priors)
    state = ParamState.from_block(block)
    if gauge is None:
        gauge = default_gauge(block, state) if not priors else GaugeFix()

    n_active = int(block.active_obs_mask().sum())
    redundancy = max(
        2 * n_active - (model.free_parameter_count(block) - gauge.n_fixed), 1)

    cost, meas = evaluate_cost(block, state, priors)
    sig_initial = float(np.sqrt(meas / redundancy))
    sig_best = sig_initial
    sig_cur = sig_initial
    history = [sig_initial]

    lam = options.damping
    grace_left = options.grace_iterations
    accept_streak = 0
    diverge_run = 0
    cg_total = 0
    iterations = 0
    converged = False

    while iterations < options.max_lm_iterations:
        iterations += 1
        raw = _assemble(block, state, priors, gauge)
        accepted = False
        lam_try = lam
        for _ in range(options.max_step_retries):
            system = _finalize(raw, lam_try)
            try:
                s_mat, y, art = schur_reduce(system)
                xc, cg_iters = pcg_solve(s_mat, y, system.layout, options)
            except CgStagnated:
                lam_try *= 10.0
                if lam_try > options.damping_max:
                    break
                continue
            cg_total += cg_iters
            dpts = back_substitute(system, art, xc)
            candidate = apply_update(state, system.layout, xc, dpts)
            new_cost, new_meas = evaluate_cost(block, candidate, priors)
            if new_cost < cost:
                state, cost, meas = candidate, new_cost, new_meas
                accepted = True
                break
            lam_try *= 10.0
            if lam_try > options.damping_max:
                break
        if not accepted:
            converged = True
            break
        lam = lam_try
        accept_streak += 1
        if accept_streak >= 2:
            lam = max(lam / 10.0, options.damping_min)
            accept_streak = 0

        sig_cur = float(np.sqrt(meas / redundancy))
        history.append(sig_cur)
        if sig_cur > 10.0 * max(sig_initial, 1e-12):
            diverge_run += 1
            if diverge_run >= 3:
                state.write_to_block(block)
                raise DivergenceDetected(
                    f"sigma0 {sig_cur:.4g} grew beyond 10x initial "
                    f"{sig_initial:.4g} for 3 iterations")
        else:
            diverge_run = 0

        if sig_cur <= 1e-15:
            sig_best = min(sig_best, sig_cur)
            converged = True
            break
        ratio = sig_best / sig_cur
        sig_best = min(sig_best, sig_cur)
        if ratio < options.convergence_ratio:
            if grace_left > 0:
                grace_left -= 1
            else:
                converged = True
                break

    state.write_to_block(block)
    return AdjustReport(iterations=iterations, sigma0=sig_best,
                        initial_sigma0=sig_initial, converged=converged,
                        cg_iterations_total=cg_total, sigma0_history=history)


def camera_covariance(block: Block, priors=(), options: AdjustOptions | None = None,
                      gauge: GaugeFix | None = None) -> np.ndarray:
    """Dense inverse of the reduced camera system at light damping.

    Intended for variance-ratio reporting after convergence; restricted to
    blocks of at most 2000 cameras because the inverse is dense.
    """
    if block.n_cameras > 2000:
        raise ValueError("covariance extraction limited to 2000 cameras")
    options = options or AdjustOptions()
    state = ParamState.from_block(block)
    if gauge is None:
        gauge = default_gauge(block, state) if not priors else GaugeFix()
    raw = _assemble(block, state, list(priors), gauge)
    system = _finalize(raw, options.covariance_lambda)
    s_mat, _, _ = schur_reduce(system)
    return np.linalg.inv(s_mat)
