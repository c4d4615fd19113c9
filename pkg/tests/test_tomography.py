import numpy as np
import pytest

from looptomo import (
    ConfigError,
    LoopParams,
    POVMSet,
    ProbeMatrix,
    SmoothingConfig,
    build_model_povm,
    dark_count_probability,
    epsilon_sweep,
    l_curve_corner,
    project_rows_to_simplex,
    reconstruct,
    reconstruct_reference,
    simulate_bin_totals,
    smoothness_seminorm,
    uncertainty_band,
)
from looptomo.ingest import bin_probabilities, outcome_probabilities
from looptomo.probe_states import poisson_row

DEVICE3 = LoopParams(0.89613, 0.9064, 0.4912, 3)


def small_problem(noise_pulses=None, seed=0, n_bins=3, trunc=60, mu_max=25.0, d=15):
    """Linear probe ladder; noiseless P or multinomially sampled rows."""
    params = DEVICE3.with_bins(n_bins)
    theta_true = build_model_povm(params, trunc).theta
    means = mu_max * np.arange(d) / (d - 1)
    f_mat = np.vstack([poisson_row(m, trunc) for m in means])
    p_mat = f_mat @ theta_true
    if noise_pulses:
        rng = np.random.default_rng(seed)
        p_mat = np.vstack(
            [rng.multinomial(noise_pulses, row) / noise_pulses for row in p_mat]
        )
    return f_mat, p_mat, theta_true, means


class TestSimplexProjection:
    def test_idempotent_on_feasible(self):
        rows = np.array([[0.2, 0.3, 0.5], [1.0, 0.0, 0.0]])
        np.testing.assert_allclose(project_rows_to_simplex(rows), rows, atol=1e-15)

    def test_rows_feasible_after_projection(self):
        rng = np.random.default_rng(0)
        y = rng.normal(size=(200, 11)) * 3
        x = project_rows_to_simplex(y)
        assert x.min() >= 0.0
        np.testing.assert_allclose(x.sum(axis=1), 1.0, atol=1e-12)

    def test_matches_bruteforce_kkt(self):
        # projection of a 2-vector has a closed form
        x = project_rows_to_simplex(np.array([[2.0, 0.0]]))
        np.testing.assert_allclose(x, [[1.0, 0.0]], atol=1e-15)
        x = project_rows_to_simplex(np.array([[0.6, 0.6]]))
        np.testing.assert_allclose(x, [[0.5, 0.5]], atol=1e-15)


class TestReconstruct:
    def test_noiseless_recovery_on_supported_rows(self):
        f_mat, p_mat, theta_true, _ = small_problem()
        povm, report = reconstruct(f_mat, p_mat, SmoothingConfig(epsilon=1e-6))
        sup = povm.supported
        err = np.linalg.norm((povm.theta - theta_true)[sup]) / np.linalg.norm(
            theta_true[sup]
        )
        assert err < 1e-2
        assert report.converged

    def test_feasibility_is_machine_exact(self):
        f_mat, p_mat, _, _ = small_problem(noise_pulses=10**5, seed=3)
        povm, _ = reconstruct(f_mat, p_mat, SmoothingConfig(epsilon=1e-4))
        assert povm.theta.min() >= 0.0
        assert np.abs(povm.theta.sum(axis=1) - 1.0).max() < 1e-8

    def test_vacuum_only_pins_first_row(self):
        f_mat = poisson_row(0.0, 5)[None, :]
        p_mat = np.zeros((1, 4))
        p_mat[0, 0] = 1.0
        povm, _ = reconstruct(f_mat, p_mat, SmoothingConfig(epsilon=1e-9))
        assert povm.theta[0, 0] >= 1.0 - 1e-6

    def test_objective_descent(self):
        f_mat, p_mat, _, _ = small_problem(noise_pulses=10**4, seed=5)
        _, report = reconstruct(f_mat, p_mat, SmoothingConfig(epsilon=1e-3))
        trace = np.array(report.objective_trace)
        assert np.all(np.diff(trace) <= 1e-12)

    def test_objective_equals_residual_plus_penalty(self):
        f_mat, p_mat, _, _ = small_problem(noise_pulses=10**4, seed=6)
        _, report = reconstruct(f_mat, p_mat, SmoothingConfig(epsilon=1e-3))
        assert report.objective == pytest.approx(
            report.residual + report.penalty, rel=1e-12
        )
        assert report.penalty == pytest.approx(
            report.epsilon * report.smoothness, rel=1e-12
        )

    def test_permutation_equivariance(self):
        f_mat, p_mat, _, _ = small_problem(noise_pulses=10**5, seed=7)
        cfg = SmoothingConfig(epsilon=1e-4)
        povm_a, _ = reconstruct(f_mat, p_mat, cfg)
        perm = np.random.default_rng(1).permutation(f_mat.shape[0])
        povm_b, _ = reconstruct(f_mat[perm], p_mat[perm], cfg)
        np.testing.assert_allclose(povm_a.theta, povm_b.theta, atol=1e-8)

    def test_zero_epsilon_reproduces_pure_least_squares(self):
        # trunc small enough that every Fock column is data-supported and
        # the least-squares optimum is unique
        f_mat, p_mat, _, _ = small_problem(
            noise_pulses=10**5, seed=8, trunc=10, mu_max=4.0
        )
        povm_off, rep_off = reconstruct(f_mat, p_mat, SmoothingConfig(epsilon=0.0))
        povm_tiny, _ = reconstruct(f_mat, p_mat, SmoothingConfig(epsilon=1e-30))
        assert rep_off.penalty == 0.0
        np.testing.assert_allclose(povm_off.theta, povm_tiny.theta, atol=1e-7)

    def test_unsupported_rows_are_flagged(self):
        f_mat, p_mat, _, _ = small_problem()
        povm, report = reconstruct(f_mat, p_mat, SmoothingConfig(epsilon=1e-4))
        col_mass = f_mat.sum(axis=0)
        np.testing.assert_array_equal(povm.supported, col_mass > 1e-3)
        assert report.n_unsupported == int((col_mass <= 1e-3).sum())

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigError):
            reconstruct(np.ones((3, 5)), np.ones((4, 2)) / 2, SmoothingConfig(1e-4))

    def test_accepts_probe_matrix_wrapper(self):
        f_mat, p_mat, _, means = small_problem()
        wrapper = ProbeMatrix(f_mat, means, 60)
        povm, _ = reconstruct(wrapper, p_mat, SmoothingConfig(epsilon=1e-4))
        assert povm.theta.shape == (61, 4)


class TestReferenceAgreement:
    def test_small_scale_oracle_equivalence(self):
        # independent interior-point solve of the same objective
        f_mat, p_mat, _, _ = small_problem(
            noise_pulses=10**6, seed=42, n_bins=2, trunc=20, mu_max=5.5
        )
        eps = 1e-2
        _, report = reconstruct(f_mat, p_mat, SmoothingConfig(epsilon=eps))
        _, obj_ref = reconstruct_reference(f_mat, p_mat, eps, gap_tol=1e-11)
        assert abs(report.objective - obj_ref) / obj_ref < 1e-6

    def test_reference_refuses_large_problems(self):
        with pytest.raises(ConfigError):
            reconstruct_reference(np.ones((2, 3000)), np.ones((2, 4)) / 4, 1e-3)


class TestDarkCountProbability:
    def test_ideal_model_povm(self):
        povm = build_model_povm(DEVICE3.with_bins(10), 40)
        assert dark_count_probability(povm) == 0.0

    def test_analytic_dark_value(self):
        # ten bins at 3e-8 each
        assert 1.0 - (1.0 - 3e-8) ** 10 == pytest.approx(3e-7, rel=1e-6)

    def test_reconstructed_dark_rate(self):
        params = DEVICE3.with_bins(10)
        dark = 1e-5
        n_pulses = 10**7
        rows = []
        means = [0.0, 1.0, 4.0]
        for k, mu in enumerate(means):
            counts = simulate_bin_totals(params, mu, n_pulses, seed=k, dark_prob=dark)
            rows.append(outcome_probabilities(bin_probabilities(counts, n_pulses)))
        f_mat = np.vstack([poisson_row(m, 16) for m in means])
        povm, _ = reconstruct(f_mat, np.vstack(rows), SmoothingConfig(epsilon=1e-9))
        expected = 1.0 - (1.0 - dark) ** 10
        assert dark_count_probability(povm) == pytest.approx(expected, rel=0.3)


class TestUncertaintyBand:
    def test_zero_error_collapses(self):
        f_mat, p_mat, _, means = small_problem(trunc=30, mu_max=12.0, d=8)
        wrapper = ProbeMatrix(f_mat, means, 30)
        cfg = SmoothingConfig(epsilon=1e-4, max_iterations=1500)
        band = uncertainty_band(
            wrapper, p_mat, cfg, amplitude_rel_err=0.0, n_mc=2, seed=1
        )
        povm, _ = reconstruct(wrapper, p_mat, cfg)
        np.testing.assert_allclose(band.lo, povm.theta, atol=1e-7)
        np.testing.assert_allclose(band.hi, povm.theta, atol=1e-7)

    def test_band_contains_noiseless_solution(self):
        # five-percent amplitude draws around noiseless data: the envelope
        # must cover the generating POVM on data-supported rows, up to the
        # smoothing suppression of near-zero entries
        f_mat, p_mat, theta_true, means = small_problem()
        wrapper = ProbeMatrix(f_mat, means, 60)
        cfg = SmoothingConfig(epsilon=1e-5, max_iterations=1500)
        band = uncertainty_band(
            wrapper, p_mat, cfg, amplitude_rel_err=0.05, n_mc=12, seed=2
        )
        povm, _ = reconstruct(wrapper, p_mat, cfg)
        sup = povm.supported
        lo_ok = band.lo[sup] - 5e-3 <= theta_true[sup]
        hi_ok = theta_true[sup] <= band.hi[sup] + 5e-3
        assert np.all(lo_ok) and np.all(hi_ok)
        exact = (band.lo[sup] - 1e-9 <= theta_true[sup]) & (
            theta_true[sup] <= band.hi[sup] + 1e-9
        )
        assert exact.mean() > 0.85

    def test_seeded_determinism(self):
        f_mat, p_mat, _, means = small_problem(trunc=20, mu_max=8.0, d=6)
        wrapper = ProbeMatrix(f_mat, means, 20)
        cfg = SmoothingConfig(epsilon=1e-4, max_iterations=1000)
        a = uncertainty_band(wrapper, p_mat, cfg, 0.05, n_mc=2, seed=9)
        b = uncertainty_band(wrapper, p_mat, cfg, 0.05, n_mc=2, seed=9)
        np.testing.assert_array_equal(a.lo, b.lo)
        np.testing.assert_array_equal(a.hi, b.hi)

    def test_requires_probe_matrix(self):
        f_mat, p_mat, _, _ = small_problem(trunc=20, mu_max=8.0, d=6)
        with pytest.raises(ConfigError):
            uncertainty_band(f_mat, p_mat, SmoothingConfig(1e-4), n_mc=2)


@pytest.fixture(scope="module")
def sweep():
    f_mat, p_mat, _, _ = small_problem(
        noise_pulses=10**5, seed=13, trunc=40, mu_max=16.0
    )
    return epsilon_sweep(
        f_mat, p_mat, [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1], max_iterations=1500
    )


class TestEpsilonSweep:
    def test_residual_nondecreasing(self, sweep):
        residuals = [p.residual for p in sweep.points]
        assert np.all(np.diff(residuals) >= -1e-9)
        assert not sweep.warnings

    def test_smoothness_nonincreasing(self, sweep):
        seminorms = [p.smoothness for p in sweep.points]
        assert np.all(np.diff(seminorms) <= 1e-9)

    def test_corner_within_sweep(self, sweep):
        assert sweep.corner_epsilon in [p.epsilon for p in sweep.points]

    def test_zero_epsilon_entry_has_minimal_residual(self):
        f_mat, p_mat, _, _ = small_problem(
            noise_pulses=10**4, seed=14, trunc=20, mu_max=8.0, d=8
        )
        result = epsilon_sweep(f_mat, p_mat, [0.0, 1e-3, 1e-1], max_iterations=1500)
        residuals = [p.residual for p in result.points]
        assert residuals[0] <= min(residuals) + 1e-9

    def test_empty_sweep_rejected(self):
        with pytest.raises(ConfigError):
            epsilon_sweep(np.ones((2, 3)), np.ones((2, 2)) / 2, [])


class TestPovmSetValidation:
    def test_negative_entry_rejected(self):
        with pytest.raises(ConfigError):
            POVMSet(np.array([[1.1, -0.1]]))

    def test_unnormalized_rows_rejected(self):
        with pytest.raises(ConfigError):
            POVMSet(np.array([[0.5, 0.4]]))

    def test_smoothness_seminorm(self):
        theta = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        assert smoothness_seminorm(theta) == pytest.approx(2.0)

    def test_corner_helper_short_lists(self):
        from looptomo.tomography import SweepPoint

        pts = [SweepPoint(1e-3, 0.1, 1.0, 0.2)]
        assert l_curve_corner(pts) == 1e-3
