import math

import numpy as np
import pytest

from qsdelab import dyson, history, models
from qsdelab.linalg import spectral_norm
from qsdelab.models import TimeGrid
from qsdelab.prng import PcgStream, choose_usn, noise_vector


def exact_blocks(p, r):
    grid = TimeGrid(p.T, r)
    return [models.exact_phi(p, grid.t(n), grid.t(n + 1)) for n in range(r)]


def test_assemble_single_step_dense():
    phi = np.array([[0.5, 0.1], [0.0, 0.4]])
    sysm = history.assemble("dyson", [phi])
    dense = history.dense_matrix(sysm)
    want = np.eye(4)
    want[2:, :2] = -phi
    assert np.allclose(dense, want)


def test_assemble_padded_subdiagonal():
    phis = [0.5 * np.eye(2), 0.25 * np.eye(2)]
    sysm = history.assemble("dyson_padded", phis, R=1)
    dense = history.dense_matrix(sysm)
    assert np.allclose(dense[2:4, 0:2], -phis[0])
    assert np.allclose(dense[4:6, 2:4], -phis[1])
    assert np.allclose(dense[6:8, 4:6], -np.eye(2))


def test_assemble_zero_blocks_gives_identity_inverse():
    sysm = history.assemble("dyson", [np.zeros((2, 2))] * 3)
    row = history.norm_bound_report(sysm, eta=1.0, T=1.0, exact_blocks=True)
    assert row.measured == pytest.approx(1.0)
    assert row.passed


def test_rhs_layout_and_norm():
    p = models.diagonal_ou(thetas=(1.0, 1.0), sigmas=(1.0, 1.0), x0=np.ones(2))
    noise = [np.array([0.1, -0.2]), np.array([0.3, 0.0])]
    b = history.rhs(p, noise, R=2)
    assert np.allclose(b[:2], p.x0)
    assert np.allclose(b[2:4], noise[0])
    assert np.allclose(b[-4:], 0.0)
    # block orthogonality of the squared norm
    want = np.dot(p.x0, p.x0) + sum(np.dot(v, v) for v in noise)
    assert np.linalg.norm(b) ** 2 == pytest.approx(want)


def test_rhs_norm_capped_by_u_b():
    p = models.diagonal_ou(thetas=(1.0, 1.0), sigmas=(1.0, 1.0), x0=np.ones(2))
    r = 4
    grid = TimeGrid(p.T, r)
    bound = choose_usn(r, p.N, 100, 0.05)
    u_b = math.sqrt(float(p.x0 @ p.x0)
                    + 4.0 * p.N * p.sigma ** 2 * p.T * bound.u_sn ** 2)
    stream = PcgStream(seed=12)
    cov = dyson.build_cov_approx(p, grid, 8, 0.1)
    for i in range(1, 101):
        noise = [cov.s_tilde(n) @ bound.apply(noise_vector(stream, i, n, p.N, r))
                 for n in range(r)]
        assert np.linalg.norm(history.rhs(p, noise)) <= u_b


def test_inverse_block_cases():
    phis = [np.diag([0.5, 0.4]), np.diag([0.3, 0.2])]
    sysm = history.assemble("dyson_padded", phis, R=2)
    assert np.allclose(history.inverse_block(sysm, 1, 1), np.eye(2))
    assert np.allclose(history.inverse_block(sysm, 2, 0), phis[1] @ phis[0])
    # padded branch: n' < r < n collapses to the product ending at r-1
    assert np.allclose(history.inverse_block(sysm, 4, 1), phis[1])
    assert np.allclose(history.inverse_block(sysm, 3, 4), 0.0)
    assert np.allclose(history.inverse_block(sysm, 4, 3), np.eye(2))


def test_inverse_block_matches_dense_inverse():
    p = models.diagonal_ou(thetas=(1.0, 1.6), sigmas=(1.0, 0.9), x0=np.ones(2))
    sysm = history.assemble("dyson_padded", exact_blocks(p, 3), R=2)
    inv = np.linalg.inv(history.dense_matrix(sysm))
    n = sysm.N
    for i in range(sysm.r + sysm.R + 1):
        for j in range(sysm.r + sysm.R + 1):
            got = history.inverse_block(sysm, i, j)
            want = inv[i * n:(i + 1) * n, j * n:(j + 1) * n]
            assert np.max(np.abs(got - want)) <= 1e-10


def test_inverse_block_decay_bound():
    p = models.diagonal_ou(thetas=(1.0, 1.6), sigmas=(1.0, 0.9), x0=np.ones(2))
    r = 8
    sysm = history.assemble("dyson", exact_blocks(p, r))
    dt = p.T / r
    for n in range(r + 1):
        for npr in range(n):
            norm = spectral_norm(history.inverse_block(sysm, n, npr))
            assert norm <= math.exp(-p.eta * (n - npr) * dt) + 1e-12


def test_solve_propagates_initial_condition():
    p = models.rotating_drift()
    r = 6
    sysm = history.assemble("dyson", exact_blocks(p, r))
    b = history.rhs(p, [np.zeros(p.N)] * r)
    state = history.solve(sysm, b, eta_T=p.eta * p.T, u_b=10.0)
    grid = TimeGrid(p.T, r)
    for n in range(r + 1):
        want = models.exact_phi(p, 0.0, grid.t(n)) @ p.x0
        assert np.linalg.norm(state.block(n, p.N) - want) <= 1e-10


def test_solve_recurrence_residual():
    p = models.diagonal_ou()
    r = 5
    blocks = exact_blocks(p, r)
    sysm = history.assemble("dyson", blocks)
    rng = np.random.default_rng(3)
    b = rng.standard_normal(sysm.size)
    state = history.solve(sysm, b, eta_T=p.eta * p.T, u_b=float(np.linalg.norm(b)))
    for n in range(r):
        resid = state.block(n + 1, p.N) - blocks[n] @ state.block(n, p.N) \
            - b[(n + 1) * p.N:(n + 2) * p.N]
        assert np.linalg.norm(resid) <= 1e-12


def test_solve_padded_tail_replicates_terminal_block():
    p = models.diagonal_ou()
    r, R = 4, 3
    sysm = history.assemble("dyson_padded", exact_blocks(p, r), R=R)
    rng = np.random.default_rng(4)
    b = np.concatenate([rng.standard_normal((r + 1) * p.N), np.zeros(R * p.N)])
    state = history.solve(sysm, b, eta_T=p.eta * p.T, u_b=float(np.linalg.norm(b)))
    xr = state.block(r, p.N)
    for k in range(1, R + 1):
        assert np.array_equal(state.block(r + k, p.N), xr)


def test_forward_substitute_matches_dense_solve():
    p = models.rotating_drift()
    sysm = history.assemble("dyson_padded", exact_blocks(p, 8), R=4)
    rng = np.random.default_rng(5)
    b = rng.standard_normal(sysm.size)
    got = history.forward_substitute(sysm, b)
    want = np.linalg.solve(history.dense_matrix(sysm), b)
    assert np.max(np.abs(got - want)) <= 1e-10


def test_solve_adversarial_injection_norm():
    p = models.diagonal_ou()
    sysm = history.assemble("dyson", exact_blocks(p, 4))
    rng = np.random.default_rng(6)
    b = rng.standard_normal(sysm.size)
    qlss = 0.05
    honest = history.solve(sysm, b, qlss, eta_T=1.0, u_b=10.0, mode="honest")
    adv = history.solve(sysm, b, qlss, eta_T=1.0, u_b=10.0, mode="adversarial")
    dev = np.linalg.norm(adv.raw - honest.raw)
    assert dev == pytest.approx(qlss * np.linalg.norm(b))
    assert honest.qlss_eps == adv.qlss_eps == qlss


def test_norm_bound_report_exact_blocks():
    p = models.diagonal_ou(thetas=(1.0, 1.3), sigmas=(1.0, 0.9), x0=np.ones(2))
    for r, R in ((16, 0), (16, 8)):
        sysm = history.assemble("dyson_padded" if R else "dyson",
                                exact_blocks(p, r), R=R)
        row = history.norm_bound_report(sysm, eta=p.eta, T=p.T, exact_blocks=True)
        assert row.passed, row


def test_norm_bound_report_size_guard():
    blocks = [np.eye(64)] * 70
    sysm = history.assemble("dyson", blocks)
    with pytest.raises(history.SizeError):
        history.norm_bound_report(sysm, eta=1.0, T=1.0, exact_blocks=True)


def test_history_state_two_by_two():
    p = models.diagonal_ou(thetas=(1.0, 1.0), sigmas=(1.0, 1.0), x0=np.ones(2))
    stream = PcgStream(seed=77)
    run = history.history_state(p, stream, 1, 0.1)
    assert run.deviation <= run.budget
    assert run.passed
    # prefactor identity
    params = run.params
    want = max(1.0, p.eta * p.T) / (8.0 * params.r * params.u_b)
    assert run.state.prefactor == pytest.approx(want)


def test_history_state_padded_and_modes():
    p = models.scalar_ou()
    stream = PcgStream(seed=78)
    params = history.history_params(p, 0.25, n_samples=4, delta=0.1)
    for mode in ("honest", "adversarial"):
        run = history.history_state(p, stream, 2, 0.25, padded=True, R=3,
                                    qlss_mode=mode, params=params)
        assert run.deviation <= run.budget
        assert all(run.checks.values())
        # padded prefactor
        want = 1.0 / (2.0 * (4.0 * params.r / max(1.0, p.eta * p.T) + 3) * params.u_b)
        assert run.state.prefactor == pytest.approx(want)


def test_history_state_eps_chain_checks():
    p = models.scalar_ou()
    run = history.history_state(p, PcgStream(seed=79), 1, 0.1)
    assert run.checks["varepsilon<=eps1"]
    assert run.checks["noise_chain<=eps2"]
    assert run.checks["amplitude_mass"]
    assert run.checks["rhs_norm<=U_B"]


def test_history_state_adversarial_root_mode():
    # root error topped up to its full allowance, alone and combined with
    # the worst-case inversion error: the end-to-end budget still holds
    p = models.diagonal_ou(thetas=(1.0, 1.0), sigmas=(1.0, 1.0), x0=np.ones(2))
    stream = PcgStream(seed=91)
    eps = 0.25
    params = history.history_params(p, eps, n_samples=4, delta=0.1)
    honest = history.history_state(p, stream, 1, eps, params=params)
    adv_root = history.history_state(p, stream, 1, eps, params=params,
                                     sqrt_mode="adversarial")
    both = history.history_state(p, stream, 1, eps, params=params,
                                 sqrt_mode="adversarial",
                                 qlss_mode="adversarial")
    assert honest.deviation < adv_root.deviation <= adv_root.budget
    assert both.deviation <= both.budget


def test_history_state_all_builtin_models():
    # the end-to-end deviation bound must hold for every built-in model
    stream = PcgStream(seed=90)
    for p in (models.scalar_ou(), models.diagonal_ou(),
              models.rotating_drift(), models.time_dependent_scalar()):
        for eps in (0.25, 0.1):
            run = history.history_state(p, stream, 1, eps,
                                        qlss_mode="adversarial")
            assert run.deviation <= run.budget, (p.name, eps)


def test_history_samples_are_uncorrelated():
    from qsdelab import estimator
    p = models.scalar_ou()
    plan = estimator.EstimationPlan(
        mode="dyson_multi", eps=1.0, delta=0.2, delta_prime=0.1, d=1,
        eps_prime=0.1, n_samples=2000, u_sn=4.0, u_b=3.0, K=8, r=4, M=64,
        R=0, eps_oe=0.1, scale_out=1.0, varepsilon=0.01)
    states = estimator.dyson_batch_states(p, plan, PcgStream(seed=80), 1, 2000)
    xt = states[:, -1]
    corr = np.corrcoef(xt[0::2], xt[1::2])[0, 1]
    assert abs(corr) <= 0.1
