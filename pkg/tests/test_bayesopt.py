"""GP surrogate, expected improvement and the tuning loop."""

import math

import numpy as np
import pytest

from nestner.bayesopt import (
    AcquisitionConfig,
    HyperPoint,
    HyperSpace,
    Trial,
    expected_improvement,
    gp_fit,
    gp_predict,
    kernel_eval,
    kernel_matrix,
    latin_hypercube,
    log_marginal_likelihood,
    propose_next,
    tune,
)


def reference_matern52(u, v, lengthscales, signal_var):
    """Scalar Matern 5/2, written out independently."""
    r2 = sum(((a - b) / l) ** 2 for a, b, l in zip(u, v, lengthscales))
    r = math.sqrt(r2)
    return signal_var * (1 + math.sqrt(5) * r + 5 * r * r / 3) * math.exp(-math.sqrt(5) * r)


class TestKernel:
    def test_zero_distance(self):
        assert kernel_eval([0.1, 0.2, 0.3], [0.1, 0.2, 0.3], [1, 1, 1], 2.5) == 2.5

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            u, v = rng.uniform(size=3), rng.uniform(size=3)
            ls = rng.uniform(0.1, 2.0, size=3)
            sv = float(rng.uniform(0.1, 3.0))
            assert kernel_eval(u, v, ls, sv) == pytest.approx(
                kernel_eval(v, u, ls, sv), rel=1e-14
            )

    def test_unit_distance_closed_form(self):
        value = kernel_eval([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 1.0], 1.0)
        expected = (1 + math.sqrt(5) + 5 / 3) * math.exp(-math.sqrt(5))
        assert value == pytest.approx(expected, abs=1e-12)
        assert value == pytest.approx(0.52399, abs=1e-5)

    def test_matches_reference_on_random_points(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            u, v = rng.uniform(size=3), rng.uniform(size=3)
            ls = rng.uniform(0.05, 3.0, size=3)
            sv = float(rng.uniform(0.01, 4.0))
            assert kernel_eval(u, v, ls, sv) == pytest.approx(
                reference_matern52(u, v, ls, sv), rel=1e-12
            )

    def test_invalid_parameters(self):
        with pytest.raises(ValueError):
            kernel_eval([0, 0, 0], [1, 0, 0], [0.0, 1, 1], 1.0)
        with pytest.raises(ValueError):
            kernel_eval([0, 0, 0], [1, 0, 0], [1, 1, 1], 0.0)


class TestHyperSpace:
    def test_round_trip_continuous_axes(self):
        space = HyperSpace()
        rng = np.random.default_rng(2)
        for _ in range(100):
            point = space.denormalize(rng.uniform(size=3))
            back = space.denormalize(space.normalize(point))
            assert back.learning_rate == pytest.approx(point.learning_rate, rel=1e-12)
            assert back.weight_decay == pytest.approx(point.weight_decay, rel=1e-12, abs=1e-15)
            assert back.batch_size == point.batch_size  # integers survive exactly

    def test_batch_rounding_in_bounds(self):
        space = HyperSpace()
        for u in np.linspace(0, 1, 33):
            point = space.denormalize([0.5, u, 0.5])
            assert 2 <= point.batch_size <= 32
            assert isinstance(point.batch_size, int)

    def test_all_integer_batches_recoverable(self):
        space = HyperSpace()
        for batch in range(2, 33):
            u = space.normalize(HyperPoint(1e-5, batch, 0.1))
            assert space.denormalize(u).batch_size == batch


class TestTrial:
    def test_f_bounds(self):
        with pytest.raises(ValueError):
            Trial(HyperPoint(1e-5, 8, 0.1), np.zeros(3), 1.5)
        with pytest.raises(ValueError):
            Trial(HyperPoint(1e-5, 8, 0.1), np.zeros(3), -0.1)


def make_trials(points, values, space=None):
    space = space or HyperSpace()
    return [
        Trial(space.denormalize(u), np.asarray(u, dtype=float), f)
        for u, f in zip(points, values)
    ]


class TestLogMarginalLikelihood:
    def test_two_point_hand_computation(self):
        """2x2 linear algebra by hand: explicit inverse and determinant."""
        inputs = np.array([[0.2, 0.4, 0.6], [0.7, 0.1, 0.9]])
        targets = np.array([0.55, 0.71])
        ls = np.array([0.8, 1.2, 0.5])
        sv, nv, jitter = 1.7, 1e-3, 1e-8

        k00 = reference_matern52(inputs[0], inputs[0], ls, sv) + nv + jitter
        k11 = reference_matern52(inputs[1], inputs[1], ls, sv) + nv + jitter
        k01 = reference_matern52(inputs[0], inputs[1], ls, sv)
        det = k00 * k11 - k01 * k01
        r = targets - targets.mean()
        quad = (k11 * r[0] ** 2 - 2 * k01 * r[0] * r[1] + k00 * r[1] ** 2) / det
        expected = -0.5 * quad - 0.5 * math.log(det) - math.log(2 * math.pi)

        got = log_marginal_likelihood(inputs, targets, ls, sv, nv)
        assert got == pytest.approx(expected, abs=1e-8)


class TestGpFit:
    def test_constant_targets(self):
        rng = np.random.default_rng(3)
        trials = make_trials(rng.uniform(size=(5, 3)), [0.42] * 5)
        g = gp_fit(trials, noise_var=1e-6, seed=0)
        assert g.mean == pytest.approx(0.42)
        for u in rng.uniform(size=(10, 3)):
            mu, _ = gp_predict(g, u)
            assert mu == pytest.approx(0.42, abs=1e-6)

    def test_refit_identical(self):
        rng = np.random.default_rng(4)
        trials = make_trials(rng.uniform(size=(6, 3)), rng.uniform(size=6))
        a = gp_fit(trials, noise_var=1e-4, seed=7)
        b = gp_fit(trials, noise_var=1e-4, seed=7)
        assert np.array_equal(a.lengthscales, b.lengthscales)
        assert a.signal_var == b.signal_var
        assert np.array_equal(a.chol_lower, b.chol_lower)

    def test_needs_two_trials(self):
        rng = np.random.default_rng(5)
        trials = make_trials(rng.uniform(size=(1, 3)), [0.5])
        with pytest.raises(ValueError):
            gp_fit(trials)

    def test_duplicate_inputs_merged(self):
        u = np.array([0.5, 0.5, 0.5])
        trials = make_trials([u, u, [0.1, 0.1, 0.1]], [0.2, 0.4, 0.9])
        g = gp_fit(trials, noise_var=1e-4, seed=0)
        assert len(g.targets) == 2
        assert np.isclose(g.targets, 0.3).any()  # averaged duplicate


class TestGpPredict:
    def test_interpolation_at_tiny_noise(self):
        rng = np.random.default_rng(6)
        trials = make_trials(rng.uniform(size=(6, 3)), rng.uniform(0.2, 0.9, size=6))
        g = gp_fit(trials, noise_var=1e-12, seed=0)
        for t in trials:
            mu, var = gp_predict(g, t.u)
            assert mu == pytest.approx(t.f, abs=1e-6)
            assert var <= 1e-6

    def test_variance_at_training_inputs_bounded_by_noise(self):
        rng = np.random.default_rng(7)
        for noise in (1e-6, 1e-4, 1e-2):
            trials = make_trials(rng.uniform(size=(8, 3)), rng.uniform(size=8))
            g = gp_fit(trials, noise_var=noise, seed=1)
            for t in trials:
                _, var = gp_predict(g, t.u)
                assert var <= noise + 1e-6

    def test_prior_reversion_far_from_data(self):
        from nestner.bayesopt import _cholesky_with_jitter
        from scipy.linalg import cho_solve

        inputs = np.array([[0.0, 0.0, 0.0], [0.05, 0.0, 0.0]])
        targets = np.array([0.3, 0.7])
        ls = np.array([0.01, 0.01, 0.01])  # lengthscale far below distances
        sv = 0.9
        k = kernel_matrix(inputs, inputs, ls, sv)
        k[np.diag_indices_from(k)] += 1e-6
        lower, _ = _cholesky_with_jitter(k)
        from nestner.bayesopt import GpSurrogate
        g = GpSurrogate(
            lengthscales=ls, signal_var=sv, noise_var=1e-6,
            mean=float(targets.mean()), inputs=inputs, targets=targets,
            chol_lower=lower, alpha=cho_solve((lower, True), targets - targets.mean()),
        )
        mu, var = gp_predict(g, [0.9, 0.9, 0.9])
        assert mu == pytest.approx(g.mean, abs=1e-3)
        assert var == pytest.approx(sv, abs=1e-3)

    def test_matches_dense_inverse_oracle(self):
        rng = np.random.default_rng(8)
        for trial in range(20):
            inputs = rng.uniform(size=(5, 3))
            targets = rng.uniform(size=5)
            trials = make_trials(inputs, targets)
            noise = 10.0 ** rng.uniform(-6, -2)
            g = gp_fit(trials, noise_var=noise, seed=trial)

            # dense non-Cholesky reference with the same kernel parameters
            k = np.array([
                [reference_matern52(a, b, g.lengthscales, g.signal_var) for b in inputs]
                for a in inputs
            ])
            k += (noise + 1e-8) * np.eye(5)
            k_inv = np.linalg.inv(k)
            for u in rng.uniform(size=(4, 3)):
                k_star = np.array([
                    reference_matern52(a, u, g.lengthscales, g.signal_var)
                    for a in inputs
                ])
                mu_ref = g.mean + k_star @ k_inv @ (targets - g.mean)
                var_ref = g.signal_var - k_star @ k_inv @ k_star
                mu, var = gp_predict(g, u)
                assert mu == pytest.approx(mu_ref, abs=1e-8)
                assert var == pytest.approx(max(var_ref, 0.0), abs=1e-8)


class TestExpectedImprovement:
    def test_deterministic_cases(self):
        assert expected_improvement(0.4, 0.0, 0.5) == 0.0
        assert expected_improvement(0.5, 0.0, 0.5) == 0.0
        assert expected_improvement(0.7, 0.0, 0.5) == pytest.approx(0.2)
        assert expected_improvement(0.5, 1.0, 0.5) == pytest.approx(
            1.0 / math.sqrt(2 * math.pi), abs=1e-12
        )

    def test_negative_sigma_rejected(self):
        with pytest.raises(ValueError):
            expected_improvement(0.5, -1.0, 0.5)

    def test_nonnegative_everywhere(self):
        rng = np.random.default_rng(9)
        for _ in range(500):
            mu = float(rng.normal())
            sigma = float(abs(rng.normal()))
            f_best = float(rng.normal())
            xi = float(abs(rng.normal()) * 0.1)
            assert expected_improvement(mu, sigma, f_best, xi) >= 0.0

    def test_monte_carlo_oracle(self):
        rng = np.random.default_rng(10)
        n = 10**6
        for _ in range(20):
            mu = float(rng.uniform(-1, 1))
            sigma = float(rng.uniform(0.05, 1.5))
            f_best = float(rng.uniform(-1, 1))
            samples = np.maximum(mu + sigma * rng.standard_normal(n) - f_best, 0.0)
            mc = samples.mean()
            se = samples.std() / math.sqrt(n)
            assert abs(expected_improvement(mu, sigma, f_best) - mc) <= 3 * se


U_STAR = np.array([0.3, 0.6, 0.2])


def sharp_objective(u, scale=8.0):
    return float(np.exp(-scale * np.sum((np.asarray(u) - U_STAR) ** 2)))


class TestProposeNext:
    def _surrogate(self, seed, n=12):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(size=(n, 3))
        trials = make_trials(pts, [sharp_objective(u) for u in pts])
        return gp_fit(trials, noise_var=1e-6, seed=seed), trials

    def test_beats_every_raw_candidate(self):
        from nestner.bayesopt import _ei_batch

        g, _ = self._surrogate(seed=0)
        acq = AcquisitionConfig(n_candidates=256, seed=3)
        _, u = propose_next(g, HyperSpace(), acq)
        f_best = float(np.max(g.targets))
        candidates = np.random.default_rng(acq.seed).uniform(size=(256, 3))
        raw_best = float(_ei_batch(g, candidates, f_best, 0.0).max())
        proposal_ei = float(_ei_batch(g, u[None, :], f_best, 0.0)[0])
        assert proposal_ei >= raw_best - 1e-15

    def test_deterministic(self):
        g, _ = self._surrogate(seed=1)
        a = propose_next(g, HyperSpace(), AcquisitionConfig(seed=11))
        b = propose_next(g, HyperSpace(), AcquisitionConfig(seed=11))
        assert np.array_equal(a[1], b[1])
        assert a[0] == b[0]

    def test_moves_toward_sharp_optimum(self):
        """With a dense design the EI maximum exploits the fitted peak."""
        space = HyperSpace()
        closer = 0
        for seed in range(50):
            rng = np.random.default_rng(seed + 1000)
            pts = latin_hypercube(40, rng)
            values = [sharp_objective(u, scale=4.0) for u in pts]
            trials = make_trials(pts, values)
            g = gp_fit(trials, noise_var=1e-6, seed=seed)
            _, u_prop = propose_next(g, space, AcquisitionConfig(seed=seed))
            best_obs = max(trials, key=lambda t: t.f)
            closer += np.linalg.norm(u_prop - U_STAR) < np.linalg.norm(
                best_obs.u - U_STAR
            )
        assert closer >= 35  # 70% of 50


class TestTune:
    def test_budget_equals_init_is_pure_design(self):
        calls = []

        def objective(point):
            calls.append(point)
            return 0.5

        best, history = tune(objective, budget=4, init=4, seed=0)
        assert len(history) == 4 and len(calls) == 4
        assert best.f == 0.5

    def test_history_length_and_running_max(self):
        space = HyperSpace()

        def objective(point):
            return sharp_objective(space.normalize(point))

        best, history = tune(objective, space, budget=15, init=5, seed=2)
        assert len(history) == 15
        running = np.maximum.accumulate([t.f for t in history])
        assert all(a <= b for a, b in zip(running, running[1:]))
        assert best.f == running[-1]

    def test_failures_recorded_not_fatal(self):
        def objective(point):
            if point.batch_size % 2 == 0:
                raise RuntimeError("diverged")
            return float("nan") if point.batch_size == 3 else 0.4

        best, history = tune(objective, budget=8, init=5, seed=3)
        assert len(history) == 8
        assert any(t.failed for t in history)
        for t in history:
            if t.failed:
                assert t.f == 0.0
        assert not best.failed

    def test_validates_budget(self):
        with pytest.raises(ValueError):
            tune(lambda p: 0.5, budget=3, init=5)
        with pytest.raises(ValueError):
            tune(lambda p: 0.5, budget=5, init=1)

    def test_deterministic(self):
        space = HyperSpace()

        def objective(point):
            return sharp_objective(space.normalize(point))

        a = tune(objective, space, budget=10, init=4, seed=5)
        b = tune(objective, space, budget=10, init=4, seed=5)
        assert [t.f for t in a[1]] == [t.f for t in b[1]]
        assert a[0].point == b[0].point

    def test_benchmark_beats_random_search(self):
        space = HyperSpace()
        bo_best, rs_best = [], []
        for seed in range(10):
            def objective(point):
                return sharp_objective(space.normalize(point))

            best, _ = tune(objective, space, budget=30, init=5, seed=seed)
            bo_best.append(best.f)
            rng = np.random.default_rng(seed)
            rs_best.append(max(sharp_objective(rng.uniform(size=3)) for _ in range(30)))
        assert sum(b >= 0.95 for b in bo_best) >= 8
        assert np.median(bo_best) >= np.median(rs_best)


class TestLatinHypercube:
    def test_stratification(self):
        rng = np.random.default_rng(12)
        pts = latin_hypercube(10, rng)
        assert pts.shape == (10, 3)
        for dim in range(3):
            strata = np.floor(pts[:, dim] * 10).astype(int)
            assert sorted(strata) == list(range(10))
