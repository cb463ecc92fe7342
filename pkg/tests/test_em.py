import math

import numpy as np
import pytest

from conftest import zero_drift_problem, zero_noise_problem
from qsdelab import em, estimator, history, models
from qsdelab.linalg import spectral_norm
from qsdelab.models import TimeGrid
from qsdelab.prng import ClipBound, PcgStream, noise_vector


def test_trajectory_constant_without_dynamics():
    # zero drift and zero diffusion: nothing moves
    p = zero_drift_problem(N=2, sigma_b=0.0)
    traj = em.em_trajectory(p, TimeGrid(1.0, 8), PcgStream(seed=1), 1)
    assert np.all(traj.states == traj.states[0])


def test_trajectory_single_step_formula():
    theta, sb = 1.3, 0.7
    p = models.scalar_ou(theta=theta, sigma_b=sb, x0=2.0)
    grid = TimeGrid(1.0, 4)
    stream = PcgStream(seed=2)
    traj = em.em_trajectory(p, grid, stream, 1)
    z1 = noise_vector(stream, 1, 0, 1, 4)[0]
    want = 2.0 * (1.0 - theta * grid.dt) + sb * math.sqrt(grid.dt) * z1
    assert traj.states[1, 0] == pytest.approx(want)


def test_trajectory_mean_matches_deterministic_recursion():
    theta = 1.0
    p = models.scalar_ou(theta=theta)
    r = 8
    grid = TimeGrid(1.0, r)
    states = em.em_batch_states(p, grid, PcgStream(seed=3), 1, 10_000)
    terminal = states[:, -1]
    want = (1.0 - theta * grid.dt) ** r * 1.0
    se = terminal.std(ddof=1) / math.sqrt(terminal.size)
    assert abs(terminal.mean() - want) <= 3.0 * se


def test_batch_matches_scalar_trajectories():
    p = models.diagonal_ou()
    grid = TimeGrid(1.0, 6)
    batch = em.em_batch_states(p, grid, PcgStream(seed=4), 3, 4)
    for k in range(4):
        traj = em.em_trajectory(p, grid, PcgStream(seed=4), 3 + k)
        assert np.allclose(batch[k], traj.states.ravel(), atol=1e-12)


def test_system_blocks_zero_drift(pure_noise):
    sysm = em.assemble_em_system(pure_noise, TimeGrid(1.0, 3))
    dense = history.dense_matrix(sysm)
    assert np.allclose(dense[1:2, 0:1], -np.eye(1))


def test_system_solve_reproduces_trajectory_bitwise():
    p = models.rotating_drift()
    grid = TimeGrid(1.0, 8)
    stream = PcgStream(seed=5)
    traj = em.em_trajectory(p, grid, stream, 1)
    sysm = em.assemble_em_system(p, grid)
    b = history.rhs(p, list(traj.noise))
    solved = history.forward_substitute(sysm, b)
    assert np.array_equal(solved, traj.states.ravel())


def test_system_norm_at_most_three():
    p = models.diagonal_ou()
    sysm = em.assemble_em_system(p, TimeGrid(1.0, 16))
    assert spectral_norm(history.dense_matrix(sysm)) <= 3.0


def test_norm_report_passes_at_valid_step_size():
    p = models.diagonal_ou(thetas=(1.0, 1.5), sigmas=(1.0, 0.9), x0=np.ones(2))
    r = em.min_steps(p)
    report = em.em_norm_report(p, TimeGrid(p.T, r))
    assert not report.skipped
    assert report.passed, report.rows


def test_norm_report_contraction_row():
    p = models.scalar_ou()
    report = em.em_norm_report(p, TimeGrid(1.0, 16))
    row = dict((r[0], r) for r in report.rows)["max ||I+A dt||"]
    assert row[3]
    assert row[1] <= 1.0 - p.eta * (1.0 / 16) / 4.0 + 1e-9


def test_norm_report_skips_below_threshold():
    p = models.diagonal_ou()  # alpha_A = 2, eta = 1: needs r >= 16
    report = em.em_norm_report(p, TimeGrid(1.0, 4))
    assert report.skipped
    assert "dt=" in report.reason


def test_strong_convergence_slope_ou():
    p = models.scalar_ou()
    report = em.strong_convergence(p, [8, 16, 32, 64], 100, PcgStream(seed=6))
    assert -1.2 <= report.slope <= -0.8
    # errors decrease monotonically with refinement
    errs = [e for _, e in report.rows]
    assert all(a > b for a, b in zip(errs, errs[1:]))


def test_strong_convergence_deterministic_drift():
    p = zero_noise_problem(theta=1.0)
    report = em.strong_convergence(p, [8, 16, 32, 64], 3, PcgStream(seed=7))
    assert -1.2 <= report.slope <= -0.8


def test_strong_convergence_requires_divisible_fine_grid():
    p = models.scalar_ou()
    with pytest.raises(ValueError):
        em.strong_convergence(p, [7, 16], 10, PcgStream(seed=8))


def test_strong_constant_estimate_positive():
    p = models.scalar_ou()
    report = em.strong_convergence(p, [8, 16, 32], 50, PcgStream(seed=9))
    assert em.estimate_strong_constant(report) > 0.0


def test_em_history_honest_is_exact():
    p = models.scalar_ou()
    run = em.em_history_state(p, PcgStream(seed=10), 1, 0.1)
    assert run.deviation == 0.0
    assert run.passed


def test_em_history_adversarial_within_budget():
    p = models.diagonal_ou()
    run = em.em_history_state(p, PcgStream(seed=11), 2, 0.1,
                              qlss_mode="adversarial")
    assert 0.0 < run.deviation <= run.budget
    assert run.passed


def test_em_history_normalization():
    p = models.scalar_ou()
    run = em.em_history_state(p, PcgStream(seed=12), 1, 0.25)
    mass = run.state.prefactor * np.linalg.norm(run.state.raw)
    assert mass <= 1.0 + 1e-12
    want = max(1.0, p.eta * p.T) / (8.0 * em.min_steps(p) * run.u_b)
    assert run.state.prefactor == pytest.approx(want)


def test_em_history_rejects_small_r():
    p = models.diagonal_ou()
    with pytest.raises(ValueError):
        em.em_history_state(p, PcgStream(seed=13), 1, 0.1, r=4)


def test_em_moment_bounds():
    p = models.scalar_ou()
    for d in (1, 2):
        report = estimator.moment_bound_check(p, "em", d, 4000, PcgStream(seed=14))
        assert report.passed, report


def test_rhs_norm_capped_for_every_clipped_sample():
    p = models.diagonal_ou()
    r = em.min_steps(p)
    grid = TimeGrid(p.T, r)
    bound = ClipBound(2.5)
    u_b = math.sqrt(float(p.x0 @ p.x0)
                    + p.m * p.sigma ** 2 * p.T * bound.u_sn ** 2)
    stream = PcgStream(seed=15)
    for i in range(1, 101):
        noise = [p.b_at(grid.t(n))
                 @ (math.sqrt(grid.dt) * bound.apply(noise_vector(stream, i, n, p.m, r)))
                 for n in range(r)]
        assert np.linalg.norm(history.rhs(p, noise)) <= u_b
