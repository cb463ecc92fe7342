import dataclasses
import math

import numpy as np
import pytest

from qsdelab import dyson, models
from qsdelab.linalg import spectral_norm, sqrt_psd
from qsdelab.models import TimeGrid
from qsdelab.prng import ClipBound, PcgStream, noise_vector


def test_series_zero_drift_is_identity(pure_noise):
    grid = TimeGrid(1.0, 2, 3)
    for K in (0, 3, 9):
        assert np.allclose(dyson.truncated_dyson(pure_noise, grid, K, 0, 1),
                           np.eye(1))


def test_series_constant_drift_truncated_exponential():
    p = models.diagonal_ou(thetas=(1.0, 2.0), sigmas=(1.0, 1.0), x0=np.ones(2))
    grid = TimeGrid(1.0, 2, 1)
    a_dt = p.drift_const * grid.dt
    want = np.eye(2) + a_dt + a_dt @ a_dt / 2.0
    assert np.allclose(dyson.truncated_dyson(p, grid, 2, 0, 0), want)


def test_series_vs_propagator_time_dependent():
    p = models.time_dependent_scalar(a0=1.0, a1=1.0)
    # coarse outer grid: the deviation obeys the truncation bound
    grid = TimeGrid(1.0, 2, 64)
    approx = dyson.truncated_dyson(p, grid, 8, 0, 0)
    exact = models.exact_phi(p, 0.0, grid.t(1))
    truncation_bound = 3.0 / math.factorial(9) * (p.alpha_A * grid.dt) ** 9 \
        + 2.0 * p.alpha_dA * p.T ** 2 / (grid.r ** 2 * grid.M)
    assert spectral_norm(approx - exact) <= truncation_bound
    # fine outer grid: K=8, M=64 reaches 1e-8 per step
    grid = TimeGrid(1.0, 1000, 64)
    approx = dyson.truncated_dyson(p, grid, 8, 0, 0)
    exact = models.exact_phi(p, 0.0, grid.t(1))
    assert spectral_norm(approx - exact) <= 1e-8


def test_generic_path_matches_unordered_oracle(nonnormal_tdep):
    grid = TimeGrid(1.0, 2, 4)
    for K in (0, 1, 2, 3):
        got = dyson.truncated_dyson(nonnormal_tdep, grid, K, 1, 2)
        want = dyson.dyson_oracle_unordered(nonnormal_tdep, grid, K, 1, 2)
        assert np.max(np.abs(got - want)) <= 1e-13


def test_fast_paths_match_generic():
    grid = TimeGrid(1.0, 3, 5)
    const = models.rotating_drift()
    got = dyson.truncated_dyson(const, grid, 4, 1, 2)
    want = dyson.truncated_dyson(
        dataclasses.replace(const, drift_const=None), grid, 4, 1, 2)
    assert np.max(np.abs(got - want)) <= 1e-13

    tdep = models.time_dependent_scalar()
    got = dyson.truncated_dyson(tdep, grid, 5, 2, 1)
    want = dyson.truncated_dyson(
        dataclasses.replace(tdep, drift_diag_poly=None), grid, 5, 2, 1)
    assert np.max(np.abs(got - want)) <= 1e-13


def test_choose_krm_phi_examples():
    p = models.scalar_ou()
    K, r, M = dyson.choose_krm_phi(p, 0.5)
    assert K == 7  # floor dominates log(6)
    K, _, _ = dyson.choose_krm_phi(p, 1e-6)
    assert K == math.ceil(math.log(3e6)) == 15
    _, _, M = dyson.choose_krm_phi(p, 1e-3)
    assert M == 1  # constant drift needs no sub-grid


def test_choose_krm_phi_rejects_bad_eps():
    with pytest.raises(ValueError):
        dyson.choose_krm_phi(models.scalar_ou(), 1.5)


def test_error_check_constant_diagonal():
    p = models.diagonal_ou(thetas=(1.0, 2.0), sigmas=(1.0, 1.0), x0=np.ones(2))
    K, r, M = dyson.choose_krm_phi(p, 1e-2)
    row = dyson.dyson_error_bound_check(p, TimeGrid(p.T, r, M), K, 1e-2)
    assert row.passed


def test_error_check_time_dependent_tight():
    p = models.time_dependent_scalar()
    K, r, M = dyson.choose_krm_phi(p, 1e-4)
    row = dyson.dyson_error_bound_check(p, TimeGrid(p.T, r, M), K, 1e-4)
    assert row.passed and row.measured_error <= 1e-4


def test_error_check_negative_control_flags_failure():
    p = models.scalar_ou()
    K, r, M = dyson.choose_krm_phi(p, 1e-2)
    # order 0 keeps only the identity: the report must flag the miss
    row = dyson.dyson_error_bound_check(p, TimeGrid(p.T, r, M), 0, 1e-2)
    assert row.measured_error > 1e-2
    assert not row.passed
    # weakened-order runs must still report consistently
    row = dyson.dyson_error_bound_check(p, TimeGrid(p.T, r, M), max(K - 3, 0), 1e-2)
    assert row.passed == (row.measured_error <= 1e-2)


def test_covariance_pure_noise(pure_noise):
    grid = TimeGrid(1.0, 4, 8)
    got = dyson.approx_covariance(pure_noise, grid, 5, 2)
    assert np.allclose(got, grid.dt * np.eye(1), atol=1e-14)


def test_covariance_vs_analytic_variance():
    p = models.scalar_ou(theta=1.0, sigma_b=1.0)
    eps = 1e-2
    K, r, M = dyson.choose_krm_sigma(p, eps)
    grid = TimeGrid(p.T, r, M)
    got = dyson.approx_covariance(p, grid, K, 0)[0, 0]
    _, want = models.ou_analytic_moments(1.0, 1.0, 0.0, grid.dt)
    assert abs(got - want) <= eps * p.sigma ** 2 * grid.dt


def test_covariance_is_psd(nonnormal_tdep):
    grid = TimeGrid(1.0, 2, 32)
    sig = dyson.approx_covariance(nonnormal_tdep, grid, 7, 0)
    assert np.allclose(sig, sig.T, atol=1e-12)
    assert np.linalg.eigvalsh(sig)[0] >= -1e-12


def test_covariance_quadrature_matches_direct():
    for p in (models.scalar_ou(), models.time_dependent_scalar(),
              models.rotating_drift()):
        grid = TimeGrid(p.T, 2, 4096)
        direct = dyson._covariance_direct(p, grid, 8, 1)
        quad = dyson._covariance_quadrature(p, grid, 8, 1)
        assert np.max(np.abs(direct - quad)) <= 1e-8 * grid.dt


def test_choose_krm_sigma_examples():
    p = models.scalar_ou()
    K, _, _ = dyson.choose_krm_sigma(p, 1.0)
    assert K == 7
    K, _, _ = dyson.choose_krm_sigma(p, 1e-4)
    assert K == math.ceil(math.log(18e4)) == 13


def test_covariance_subgrid_term_scales_with_dt():
    # the coefficient-drift term of the sub-grid requirement is linear in dt
    p = models.scalar_ou()
    eps = 1e-3

    def m2(dt):
        return 2.0 * (2.0 * p.alpha_A + p.alpha_dBBT / p.sigma ** 2) * dt / eps

    assert m2(0.25) == pytest.approx(m2(0.5) / 2.0)


def test_choose_krm_sqrt_examples():
    p = dataclasses.replace(models.scalar_ou(), kappa_BBT=2.0)
    K, r, M = dyson.choose_krm_sqrt(p, 0.1)
    assert r == 8  # ceil(4 * 2 * 1 * 1)
    inner = 4.0 * 2.0 * math.log(8.0 / 0.1)
    want_k = max(math.ceil(math.log(
        1152.0 * math.pi * (math.log2(inner) + 1.0) ** 2
        * math.log(8.0 / 0.1) / 0.1)), 7)
    assert K == want_k and K >= 7


def test_choose_krm_sqrt_monotone():
    p = models.scalar_ou()
    k1, _, m1 = dyson.choose_krm_sqrt(p, 0.5)
    k2, _, m2 = dyson.choose_krm_sqrt(p, 0.05)
    assert k2 >= k1 and m2 >= m1


def test_choose_krm_sqrt_requires_full_rank():
    with pytest.raises(dyson.ContainmentError):
        dyson.choose_krm_sqrt(models.degenerate_ou(), 0.1)


def test_sqrt_with_budget_diagonal():
    p = models.scalar_ou()
    grid = TimeGrid(1.0, 4)
    cov = grid.dt * np.eye(1)
    root, spec = dyson.sqrt_with_budget(cov, p, grid, 0.1)
    assert root[0, 0] == pytest.approx(math.sqrt(grid.dt))
    assert spectral_norm(root) <= 2.0 * math.sqrt(p.sigma ** 2 * grid.dt)
    assert spec.alpha == pytest.approx(2.0 * math.sqrt(p.sigma ** 2 * grid.dt))


def test_sqrt_multiply_back_at_required_steps():
    p = models.scalar_ou()
    eps = 0.05
    K, r, M = dyson.choose_krm_sqrt(p, eps)
    grid = TimeGrid(p.T, r, M)
    cov = dyson.approx_covariance(p, grid, K, 0)
    root, _ = dyson.sqrt_with_budget(cov, p, grid, eps, n=0)
    assert spectral_norm(root @ root - cov) <= 1e-10


def test_sqrt_budget_verified_against_exact_root():
    p = models.diagonal_ou()
    eps = 0.1
    K, r, M = dyson.choose_krm_sqrt(p, eps)
    grid = TimeGrid(p.T, r, M)
    for n in (0, r // 2, r - 1):
        cov = dyson.approx_covariance(p, grid, K, n)
        root, spec = dyson.sqrt_with_budget(cov, p, grid, eps, n=n)
        exact = sqrt_psd(models.exact_sigma(p, grid.t(n), grid.t(n + 1)), tol=1e-9)
        assert spectral_norm(root - exact) <= spec.epsilon


def test_sqrt_containment_error():
    p = models.scalar_ou()
    grid = TimeGrid(1.0, 4)
    with pytest.raises(dyson.ContainmentError):
        dyson.sqrt_with_budget(10.0 * grid.dt * np.eye(1), p, grid, 1e-3)


def test_eigenvalue_containment_across_models():
    for p in (models.scalar_ou(), models.diagonal_ou(), models.rotating_drift()):
        r = math.ceil(4.0 * p.kappa_BBT * p.alpha_A * p.T)
        grid = TimeGrid(p.T, r)
        lo = p.sigma ** 2 * grid.dt / (2.0 * p.kappa_BBT)
        hi = p.sigma ** 2 * grid.dt
        for n in range(r):
            eig = np.linalg.eigvalsh(models.exact_sigma(p, grid.t(n), grid.t(n + 1)))
            assert eig[0] >= lo - 1e-10
            assert eig[-1] <= hi + 1e-10


def test_cov_approx_symmetry_and_root_norm():
    p = models.diagonal_ou()
    eps = 0.1
    K, r, M = dyson.choose_krm_sqrt(p, eps)
    grid = TimeGrid(p.T, r, M)
    cov = dyson.build_cov_approx(p, grid, K, eps)
    cap = 2.0 * math.sqrt(p.sigma ** 2 * grid.dt)
    for n in range(r):
        sig = cov.sigma_tilde(n)
        assert np.max(np.abs(sig - sig.T)) <= 1e-12
        root = cov.s_tilde(n)
        assert np.max(np.abs(root - root.T)) <= 1e-12
        assert spectral_norm(root) <= cap


def test_noise_sample_examples():
    p = models.diagonal_ou(thetas=(1.0, 1.0), sigmas=(1.0, 1.0), x0=np.ones(2))
    grid = TimeGrid(1.0, 2, 4)
    cov = dyson.build_cov_approx(p, grid, 8, 0.1)
    stream = PcgStream(seed=21)
    bound = ClipBound(3.0)
    sample = dyson.noise_sample(p, grid, cov, stream, 1, 0, bound)
    z = bound.apply(noise_vector(stream, 1, 0, 2, 2))
    assert np.allclose(sample.vector, cov.s_tilde(0) @ z)
    assert sample.amplitude_scale == pytest.approx(
        1.0 / (2.0 * math.sqrt(2.0 * grid.dt) * 3.0))
    # identity root passes the noise through unchanged
    ident = dataclasses.replace(cov, roots=(np.eye(2),) * 2)
    v = dyson.noise_sample(p, grid, ident, stream, 1, 0, ClipBound(9.0)).vector
    assert np.allclose(v, noise_vector(stream, 1, 0, 2, 2))
    # zero root kills it
    zero = dataclasses.replace(cov, roots=(np.zeros((2, 2)),) * 2)
    assert np.allclose(dyson.noise_sample(p, grid, zero, stream, 1, 0, bound).vector, 0.0)


def test_noise_sample_empirical_covariance():
    p = models.diagonal_ou(thetas=(1.0, 1.0), sigmas=(1.0, 0.8), x0=np.ones(2))
    grid = TimeGrid(1.0, 4, 16)
    cov = dyson.build_cov_approx(p, grid, 8, 0.1)
    stream = PcgStream(seed=33)
    bound = ClipBound(8.0)
    n_mc = 10_000
    vecs = np.array([dyson.noise_sample(p, grid, cov, stream, i, 0, bound).vector
                     for i in range(1, n_mc + 1)])
    emp = vecs.T @ vecs / n_mc
    target = cov.s_tilde(0) @ cov.s_tilde(0).T
    rel = np.linalg.norm(emp - target) / np.linalg.norm(target)
    assert rel <= 0.05


def test_be_product_identity():
    ident = dyson.BlockEncodingSpec(np.eye(2), 1.0, 0, 0.0)
    prod = dyson.be_product(ident, ident)
    assert np.allclose(prod.target, np.eye(2))
    assert (prod.alpha, prod.ancillas, prod.epsilon) == (1.0, 0, 0.0)


def test_be_product_normalization_chain():
    # propagator-series encodings (alpha = e) sandwiching a diffusion
    # encoding (alpha = sigma^2) multiply to e^2 sigma^2
    sigma2 = 1.7
    phi = dyson.BlockEncodingSpec(0.5 * np.eye(2), math.e, 3, 0.0)
    bbt = dyson.BlockEncodingSpec(sigma2 * np.eye(2), sigma2, 2, 0.0)
    spec = dyson.be_product(dyson.be_product(phi, bbt), phi)
    assert spec.alpha == pytest.approx(math.e ** 2 * sigma2)
    assert spec.ancillas == 8


def test_be_product_alpha_dominates_norm():
    g = np.random.default_rng(5)
    for _ in range(10):
        a = g.standard_normal((3, 3))
        b = g.standard_normal((3, 3))
        sa = dyson.BlockEncodingSpec(a, spectral_norm(a) + 0.1, 1, 0.01)
        sb = dyson.BlockEncodingSpec(b, spectral_norm(b) + 0.2, 2, 0.02)
        prod = dyson.be_product(sa, sb)
        assert prod.alpha >= spectral_norm(prod.target) - prod.epsilon - 1e-12


def test_be_product_rejects_mismatch():
    a = dyson.BlockEncodingSpec(np.ones((2, 3)), 3.0, 0, 0.0)
    with pytest.raises(ValueError):
        dyson.be_product(a, a)


def test_be_lcu_average():
    one = dyson.BlockEncodingSpec(2.0 * np.eye(2), 2.0, 1, 0.0)
    out = dyson.be_lcu_average([one], 0.25)
    assert np.allclose(out.target, 0.5 * np.eye(2))
    assert out.alpha == pytest.approx(0.25 * 2.0)

    # M copies at weight dt/M: alpha = e^2 sigma^2 dt
    sigma2, dt, m_terms = 1.3, 0.125, 8
    spec = dyson.BlockEncodingSpec(sigma2 * np.eye(2), math.e ** 2 * sigma2, 4, 0.0)
    avg = dyson.be_lcu_average([spec] * m_terms, dt / m_terms)
    assert avg.alpha == pytest.approx(math.e ** 2 * sigma2 * dt)
    assert avg.alpha >= spectral_norm(avg.target)


def test_be_lcu_average_rejects_empty():
    with pytest.raises(ValueError):
        dyson.be_lcu_average([], 1.0)


def test_generic_path_caps_subgrid(nonnormal_tdep):
    grid = TimeGrid(1.0, 1, dyson.GENERIC_M_CAP * 2)
    with pytest.raises(dyson.FeasibilityError):
        dyson.truncated_dyson(nonnormal_tdep, grid, 3, 0, 0)
    with pytest.raises(dyson.FeasibilityError):
        dyson.approx_covariance(nonnormal_tdep, grid, 3, 0)
