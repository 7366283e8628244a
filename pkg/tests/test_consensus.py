"""Consensus orchestration tests: split bookkeeping, modes, traces."""

import numpy as np
import pytest

from helpers import make_synthetic_block, perturb_block

from parba import consensus, model
from parba.consensus import (
    ConsensusConfig,
    ConvergenceTrace,
    TraceRow,
    run_consensus,
    run_extended,
    run_plain,
    split,
    _build_priors,
)
from parba.errors import ParseError
from parba.model import Block, Camera, Observation, Point3D
from parba.partition import Partition, partition_block
from parba.solver import AdjustOptions, adjust


def fake_partition(assignment):
    assignment = np.asarray(assignment, dtype=np.int64)
    return Partition(assignment, int(assignment.max()) + 1, 1.0)


def consensus_block(seed=0, n_cameras=8, n_points=80, noise=0.002):
    blk, _ = make_synthetic_block(n_cameras, n_points, noise=noise, seed=seed,
                                  keep_prob=0.8)
    return perturb_block(blk, angle_sigma=2e-4, translation_sigma=0.01,
                         seed=seed + 1)


# ---------------------------------------------------------------------------
# split
# ---------------------------------------------------------------------------

def test_split_single_subblock_has_no_tps():
    blk = consensus_block()
    subs, registry = split(blk, fake_partition(np.zeros(blk.n_cameras)))
    assert len(subs) == 1
    assert len(registry) == 0
    assert subs[0].block.n_observations == blk.n_observations


def test_split_two_cameras_sharing_one_point():
    cams = [Camera(np.eye(3), np.zeros(3)),
            Camera(np.eye(3), np.array([1.0, 0.0, 0.0]))]
    pts = [Point3D(np.array([0.5, 0.0, -6.0]))]
    obs = [Observation(i, 0, model.project(cams[i], None, pts[0].coords))
           for i in range(2)]
    blk = Block(cams, pts, obs)
    subs, registry = split(blk, fake_partition([0, 1]))
    assert len(registry) == 1
    rec = registry.record(blk, 0)
    assert rec.subblocks == (0, 1)
    assert np.allclose(rec.consensus_coords, pts[0].coords)
    assert all(len(s.tp_rows) == 1 for s in subs)


def test_split_observations_partition_exactly():
    blk = consensus_block(seed=5)
    part = partition_block(blk, 3, min_cameras=2)
    subs, _ = split(blk, part)
    seen = np.concatenate([s.obs_map for s in subs])
    assert len(seen) == blk.n_observations
    assert np.array_equal(np.sort(seen), np.arange(blk.n_observations))
    # Every observation lands in the sub-block of its camera.
    for s in subs:
        assert np.all(part.assignment[blk.obs_cam[s.obs_map]] == s.index)


# ---------------------------------------------------------------------------
# L = 1 exactness
# ---------------------------------------------------------------------------

def test_single_subblock_matches_serial_bitwise():
    blk_serial = consensus_block(seed=11)
    blk_cons = blk_serial.copy()
    opts = AdjustOptions()
    report = adjust(blk_serial, options=opts)
    cfg = ConsensusConfig(mode="extended", threads=1,
                          adjust_options=AdjustOptions())
    _, trace = run_extended(blk_cons, cfg,
                            partition=fake_partition(np.zeros(blk_cons.n_cameras)))
    assert trace.n_subblocks == 1
    assert [r.sigma0 for r in trace.rows] == report.sigma0_history[1:]
    assert trace.final_sigma0 == report.sigma0
    assert np.array_equal(blk_serial.points, blk_cons.points)


# ---------------------------------------------------------------------------
# extended mode
# ---------------------------------------------------------------------------

def test_extended_reaches_serial_quality():
    blk = consensus_block(seed=3, n_cameras=12, n_points=150)
    serial = blk.copy()
    adjust(serial)
    sigma_serial = model.sigma0(serial, 7)

    cfg = ConsensusConfig(mode="extended", threads=2, min_cameras=3, subblocks=3)
    _, trace = run_extended(blk, cfg)
    assert trace.n_subblocks == 3
    assert trace.converged
    assert trace.iterations <= 10
    assert abs(trace.best_sigma0 - sigma_serial) / sigma_serial < 0.005


def test_extended_never_reads_rho():
    blk = consensus_block(seed=7)
    cfg = ConsensusConfig(mode="extended", threads=2, min_cameras=3,
                          subblocks=2, rho=float("nan"))
    _, trace = run_extended(blk, cfg)
    assert trace.converged
    assert np.isfinite(trace.final_sigma0)


def test_extended_trace_has_subblock_columns():
    blk = consensus_block(seed=9)
    cfg = ConsensusConfig(mode="extended", threads=2, min_cameras=3, subblocks=2)
    _, trace = run_extended(blk, cfg)
    for row in trace.rows:
        assert len(row.subblock_sigma0) == 2
        assert len(row.subblock_lm_iterations) == 2
        assert row.phase_a_ms >= 0.0 and row.phase_b_ms >= 0.0


# ---------------------------------------------------------------------------
# plain mode
# ---------------------------------------------------------------------------

def test_plain_converges_and_is_slower_than_extended():
    blk = consensus_block(seed=13, n_cameras=12, n_points=150)
    blk_plain = blk.copy()
    cfg_e = ConsensusConfig(mode="extended", threads=2, min_cameras=3, subblocks=3)
    _, trace_e = run_extended(blk, cfg_e)
    cfg_p = ConsensusConfig(mode="plain", threads=2, min_cameras=3, subblocks=3,
                            rho=200.0)
    _, trace_p = run_plain(blk_plain, cfg_p)
    assert trace_p.iterations >= trace_e.iterations
    assert trace_p.best_sigma0 >= trace_e.best_sigma0 - 1e-3


def test_rho_growth_sequence():
    cfg = ConsensusConfig(mode="plain", rho=200.0, rho_growth=1.01)
    rho = cfg.rho
    for t in range(5):
        assert abs(rho - 200.0 * 1.01 ** t) < 1e-9
        rho *= cfg.rho_growth


def test_plain_dual_update_rule_direct():
    blk = consensus_block(seed=21, n_cameras=6, n_points=60)
    part = partition_block(blk, 2, min_cameras=2)
    if part.n_subblocks < 2:
        pytest.skip("partition degenerated")
    subs, registry = split(blk, part)
    rows = np.arange(len(registry))
    registry.local[:, :, :] = 0.0
    member = registry.membership
    rng = np.random.default_rng(0)
    local = rng.normal(0.0, 1.0, registry.local.shape) * member[:, :, None]
    registry.local[...] = local
    cfg = ConsensusConfig(mode="plain")
    consensus._averaging_phase(blk, registry, part.assignment, "plain", cfg)
    z = local.sum(axis=1) / member.sum(axis=1)[:, None]
    alive = registry.alive(blk)
    assert np.allclose(blk.points[registry.point_indices[alive]], z[alive])
    expected_dual = np.where(member[:, :, None], local - z[:, None, :], 0.0)
    assert np.allclose(registry.dual[alive], expected_dual[alive], atol=1e-12)
    # A point averaged between two sub-blocks gets opposite-signed duals.
    two_way = alive & (member.sum(axis=1) == 2)
    assert two_way.any()
    assert np.allclose(registry.dual[two_way].sum(axis=1), 0.0, atol=1e-12)


# ---------------------------------------------------------------------------
# ablation variants
# ---------------------------------------------------------------------------

def test_scalar_prior_equals_extended_for_isotropic_information():
    blk = consensus_block(seed=31)
    part = partition_block(blk, 2, min_cameras=2)
    subs, registry = split(blk, part)
    rho = 41.5
    registry.prior_info[:, :, :, :] = rho * np.eye(3)
    for sub in subs:
        a = _build_priors("extended", registry, blk, float("nan"), sub)
        b = _build_priors("extended_scalar", registry, blk, rho, sub)
        assert len(a) == len(b)
        for pa, pb in zip(a, b):
            assert pa.point_index == pb.point_index
            assert np.allclose(pa.target, pb.target, atol=0.0)
            assert np.abs(pa.information - pb.information).max() < 1e-10


def test_ablation_iteration_ordering():
    base = consensus_block(seed=17, n_cameras=12, n_points=140)
    results = {}
    for mode in ("extended", "extended_all_cameras", "extended_scalar"):
        blk = base.copy()
        cfg = ConsensusConfig(mode=mode, threads=2, min_cameras=3, subblocks=3,
                              rho=200.0)
        _, trace = run_consensus(blk, cfg)
        results[mode] = trace
    assert results["extended"].iterations <= results["extended_all_cameras"].iterations
    assert results["extended_all_cameras"].iterations \
        <= results["extended_scalar"].iterations
    for trace in results.values():
        assert trace.converged


def test_plain_refined_runs_and_reports():
    blk = consensus_block(seed=23, n_cameras=10, n_points=100)
    cfg = ConsensusConfig(mode="plain_refined", threads=2, min_cameras=3,
                          subblocks=2, rho=200.0)
    _, trace = run_consensus(blk, cfg)
    assert trace.iterations >= 1
    assert np.isfinite(trace.final_sigma0)


def test_robust_requires_intersection_mode():
    blk = consensus_block(seed=1)
    cfg = ConsensusConfig(mode="plain", robust=True, threads=2, min_cameras=3,
                          subblocks=2)
    with pytest.raises(ValueError):
        run_consensus(blk, cfg)


# ---------------------------------------------------------------------------
# trace CSV
# ---------------------------------------------------------------------------

def test_trace_csv_round_trip(tmp_path):
    trace = ConvergenceTrace(n_subblocks=2, mode="extended")
    trace.rows.append(TraceRow(1, 2.5, 3, 1, 10.0, 5.0, [2.4, 2.6], [4, 5]))
    trace.rows.append(TraceRow(2, 1.25, 0, 0, 9.0, 4.0, [1.2, 1.3], [3, 3]))
    path = tmp_path / "trace.csv"
    trace.to_csv(path)
    header = path.read_text().splitlines()[0]
    assert header == ("iteration,sigma0,deleted_obs,deleted_points,"
                      "phase_a_ms,phase_b_ms,sb0_sigma0,sb0_lm_iters,"
                      "sb1_sigma0,sb1_lm_iters")
    back = ConvergenceTrace.from_csv(path)
    assert back.n_subblocks == 2
    assert [r.sigma0 for r in back.rows] == [2.5, 1.25]
    assert back.rows[0].subblock_lm_iterations == [4, 5]


def test_trace_csv_rejects_bad_schema(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("iteration,sigma0,deleted_obs\n1,1.0,0\n")
    with pytest.raises(ParseError):
        ConvergenceTrace.from_csv(path)


def test_determinism_same_seed_same_trace():
    cfg = dict(mode="extended", threads=2, min_cameras=3, subblocks=3, seed=4)
    blk_a = consensus_block(seed=41, n_cameras=10, n_points=90)
    blk_b = blk_a.copy()
    _, trace_a = run_extended(blk_a, ConsensusConfig(**cfg))
    _, trace_b = run_extended(blk_b, ConsensusConfig(**cfg))
    assert [r.sigma0 for r in trace_a.rows] == [r.sigma0 for r in trace_b.rows]
    assert np.array_equal(blk_a.points, blk_b.points)
