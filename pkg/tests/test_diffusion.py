"""Tests for the diffusion process: marginals, preconditioning, training,
sampling, and the variational bounds."""

from dataclasses import replace

import numpy as np
import pytest

from genneg import nets
from genneg.diffusion import (NoiseSchedule, ScoreModel, TrainConfig,
                              conditional_score, denoise, dsm_loss, dsm_terms,
                              elbo, forward_sample, new_score_model,
                              sample_reverse, score, train_baseline,
                              write_samples, read_samples)
from genneg.errors import ConfigError, ContractError, NumericsError


def constant_output_model(c, sigma_data=0.5, schedule=None, d=2):
    """Model whose raw network output is the constant vector c."""
    model = new_score_model(d, schedule or NoiseSchedule(), hidden=8, t_dim=4,
                            seed=0, sigma_data=sigma_data)
    arrays = {k: np.zeros_like(v) for k, v in model.params.arrays.items()}
    arrays["b_out"] = np.asarray(c, dtype=np.float64)
    return replace(model, params=replace(model.params, arrays=arrays))


def exact_gaussian_score(var0):
    def fn(x, sigma):
        s = np.asarray(sigma, dtype=np.float64)
        if s.ndim > 0:
            s = s[:, None]
        return -np.asarray(x) / (var0 + s ** 2)
    return fn


class TestNoiseSchedule:
    def test_invariants(self):
        sch = NoiseSchedule()
        grid = sch.grid(100)
        assert grid[0] == 80.0 and grid[-1] == 0.002
        assert np.all(np.diff(grid) < 0)
        assert len(grid) == 101

    def test_bad_config_rejected(self):
        with pytest.raises(ConfigError):
            NoiseSchedule(sigma_min=0.0)
        with pytest.raises(ConfigError):
            NoiseSchedule(sigma_min=2.0, sigma_max=1.0)
        with pytest.raises(ConfigError):
            NoiseSchedule().grid(0)


class TestForwardSample:
    def test_zero_time_is_identity(self):
        x0 = np.array([1.0, -1.0])
        np.testing.assert_array_equal(forward_sample(x0, 0.0, np.array([5.0, 5.0])), x0)

    def test_linear_noise_scale(self):
        got = forward_sample(np.array([0.0, 0.0]), 2.0, np.array([1.0, 0.5]))
        np.testing.assert_array_equal(got, [2.0, 1.0])

    def test_marginal_variance_monte_carlo(self):
        rng = np.random.default_rng(0)
        n, t = 100_000, 3.0
        x0 = np.array([0.4, -0.7])
        eps = rng.standard_normal((n, 2))
        xt = forward_sample(np.tile(x0, (n, 1)), t, eps)
        var = np.var(xt - x0, axis=0)
        stderr = t ** 2 * np.sqrt(2.0 / n)
        assert np.all(np.abs(var - 9.0) < 3 * stderr)

    def test_conditional_score_identity(self):
        x0 = np.array([[0.3, 0.1]])
        xt = np.array([[1.3, 0.6]])
        np.testing.assert_allclose(conditional_score(xt, x0, 2.0),
                                   -(xt - x0) / 4.0)
        with pytest.raises(ContractError):
            conditional_score(xt, x0, 0.0)


class TestDenoise:
    def test_small_sigma_limit_is_identity(self):
        sch = NoiseSchedule()
        model = constant_output_model([0.0, 0.0], schedule=sch)
        x = np.array([1.5, -0.25])
        d = denoise(model, x, sch.sigma_min)
        rel = np.max(np.abs(d - x) / np.abs(x))
        assert rel < sch.sigma_min ** 2 / model.sigma_data ** 2 + 1e-12

    def test_skip_coefficient_half(self):
        model = constant_output_model([0.0, 0.0])
        np.testing.assert_allclose(denoise(model, np.array([2.0, 0.0]), 0.5),
                                   [1.0, 0.0], atol=1e-15)

    def test_constant_correction_formula(self):
        c = [0.3, -0.8]
        model = constant_output_model(c)
        x = np.array([1.0, 2.0])
        expected = 0.2 * x + 1.0 * np.asarray(c)  # skip 0.25/1.25, out scale 1
        np.testing.assert_allclose(denoise(model, x, 1.0), expected, atol=1e-15)

    def test_canonical_out_scale_flag(self):
        c = [1.0, 0.0]
        model = replace(constant_output_model(c), canonical_out_scale=True)
        x = np.zeros(2)
        sig = 1.0
        expected = sig * 0.5 / np.sqrt(sig ** 2 + 0.25) * np.asarray(c)
        np.testing.assert_allclose(denoise(model, x, sig), expected, atol=1e-15)


class TestScore:
    def test_perfect_denoiser_zero_score(self):
        # D == x_t forces s = 0 by the conversion identity
        x = np.array([0.7, 0.7])
        np.testing.assert_array_equal((x - x) / 0.25, np.zeros(2))

    def test_identity_against_denoise(self):
        model = constant_output_model([0.2, -0.1])
        rng = np.random.default_rng(1)
        x = rng.normal(size=(7, 2))
        sig = np.exp(rng.uniform(-3, 2, size=7))
        d = denoise(model, x, sig)
        np.testing.assert_allclose(score(model, x, sig),
                                   (d - x) / sig[:, None] ** 2,
                                   rtol=1e-12, atol=1e-12)

    def test_point_mass_dataset_score(self):
        # the optimal denoiser for the dataset {0} is identically zero, so
        # the score is the exact N(0, t^2) score
        for t in (0.5, 1.0, 3.0):
            x = np.linspace(-2, 2, 9)
            d_opt = np.zeros_like(x)
            s = (d_opt - x) / t ** 2
            np.testing.assert_allclose(s, -x / t ** 2)


class TestDsmLoss:
    def test_exact_conditional_score_gives_zero(self):
        rng = np.random.default_rng(0)
        x0 = rng.normal(size=(16, 2))
        sig = np.exp(rng.uniform(-2, 1, size=16))
        xt = forward_sample(x0, sig, rng.standard_normal((16, 2)))
        terms = dsm_terms(conditional_score(xt, x0, sig), xt, x0, sig, 0.5)
        np.testing.assert_array_equal(terms, np.zeros(16))

    def test_single_term_hand_computed(self):
        x0 = np.array([[0.5, -0.5]])
        sig = np.array([0.8])
        xt = np.array([[1.0, 0.0]])
        s_val = np.array([[0.2, 0.3]])
        cond = -(xt - x0) / 0.64
        gamma = sig ** 4 * (sig ** 2 + 0.25) / (sig * 0.5) ** 2
        expected = gamma[0] * np.sum((s_val - cond) ** 2)
        got = dsm_terms(s_val, xt, x0, sig, 0.5)[0]
        assert abs(got - expected) < 1e-12

    def test_nonnegative(self):
        model = constant_output_model([0.1, 0.1])
        rng = np.random.default_rng(3)
        assert dsm_loss(model, rng.normal(size=(32, 2)), rng) >= 0.0

    def test_empty_batch_rejected(self):
        model = constant_output_model([0.0, 0.0])
        with pytest.raises(ContractError):
            dsm_loss(model, np.zeros((0, 2)), np.random.default_rng(0))


class TestTrainBaseline:
    def test_zero_iterations_returns_initialization(self):
        sch = NoiseSchedule()
        cfg = TrainConfig(iterations=0, batch_size=16, seed=5)
        rng = np.random.default_rng(2)
        model = train_baseline(rng.normal(size=(32, 2)), rng.normal(size=(8, 2)),
                               sch, cfg, hidden=16, t_dim=8)
        np.testing.assert_array_equal(model.params.arrays["w_out"],
                                      np.zeros_like(model.params.arrays["w_out"]))

    def test_loss_decreases(self):
        sch = NoiseSchedule()
        rng = np.random.default_rng(4)
        train = rng.normal(size=(64, 2)) * 0.5
        val = rng.normal(size=(32, 2)) * 0.5
        logs = []
        cfg = TrainConfig(iterations=120, batch_size=64, learning_rate=3e-4,
                          val_cadence=30, val_draws=4, seed=1)
        model = train_baseline(train, val, sch, cfg, hidden=24, t_dim=8,
                               on_log=logs.append)
        # compare the dsm loss before and after on a fixed evaluation draw
        init = train_baseline(train, val, sch, replace(cfg, iterations=0),
                              hidden=24, t_dim=8)
        loss_before = dsm_loss(init, train, np.random.default_rng(77))
        loss_after = dsm_loss(model, train, np.random.default_rng(77))
        assert loss_after < loss_before

    def test_deterministic(self):
        sch = NoiseSchedule()
        rng = np.random.default_rng(4)
        train = rng.normal(size=(32, 2))
        val = rng.normal(size=(16, 2))
        cfg = TrainConfig(iterations=40, batch_size=32, val_cadence=20,
                          val_draws=2, seed=9)
        m1 = train_baseline(train, val, sch, cfg, hidden=12, t_dim=4)
        m2 = train_baseline(train, val, sch, cfg, hidden=12, t_dim=4)
        for name in nets.PARAM_ORDER:
            np.testing.assert_array_equal(m1.params.arrays[name],
                                          m2.params.arrays[name])


class TestSampleReverse:
    def test_single_step_zero_score_is_terminal_prior(self):
        sch = NoiseSchedule()
        n = 40_000
        xs = sample_reverse(lambda x, s: np.zeros_like(x), n, 2, sch,
                            steps=1, seed=3)
        # the only transition is the noise-free final step, so the output is
        # exactly the prior draw
        rng = np.random.default_rng(3)
        np.testing.assert_array_equal(xs, sch.sigma_max * rng.standard_normal((n, 2)))

    def test_gaussian_moments_recovered(self):
        sch = NoiseSchedule()
        var0 = 0.25
        xs = sample_reverse(exact_gaussian_score(var0), 100_000, 2, sch,
                            steps=100, seed=42)
        target = var0 + sch.sigma_min ** 2
        stderr_var = target * np.sqrt(2.0 / 100_000)
        stderr_mean = np.sqrt(target / 100_000)
        assert np.all(np.abs(xs.var(axis=0) - target) < 4 * stderr_var)
        assert np.all(np.abs(xs.mean(axis=0)) < 4 * stderr_mean)

    def test_deterministic_and_chunk_invariant(self):
        sch = NoiseSchedule()
        fn = exact_gaussian_score(0.25)
        a = sample_reverse(fn, 300, 2, sch, steps=10, seed=5, chunk=64)
        b = sample_reverse(fn, 300, 2, sch, steps=10, seed=5, chunk=8192)
        np.testing.assert_array_equal(a, b)

    def test_nonfinite_state_reported(self):
        sch = NoiseSchedule()

        def bad(x, s):
            return np.full_like(x, np.nan)

        with pytest.raises(NumericsError, match="step 1"):
            sample_reverse(bad, 10, 2, sch, steps=5, seed=0)


class TestElbo:
    def test_exact_score_matches_closed_form(self):
        sch = NoiseSchedule()
        rng = np.random.default_rng(0)
        data = 0.5 * rng.standard_normal((250, 2))
        est, se = elbo(exact_gaussian_score(0.25), data, sch,
                       weighting="likelihood", mc_draws=40, seed=1)
        truth = np.mean(-np.log(2 * np.pi * 0.25) - np.sum(data ** 2, axis=1) / 0.5)
        assert abs(est - truth) < 3 * se

    def test_zero_score_strictly_worse(self):
        sch = NoiseSchedule()
        rng = np.random.default_rng(1)
        data = 0.5 * rng.standard_normal((100, 2))
        good, _ = elbo(exact_gaussian_score(0.25), data, sch, mc_draws=16, seed=2)
        flat, _ = elbo(lambda x, s: np.zeros_like(np.asarray(x)), data, sch,
                       mc_draws=16, seed=2)
        assert good > flat

    def test_stderr_scales_with_draws(self):
        sch = NoiseSchedule()
        rng = np.random.default_rng(2)
        data = 0.5 * rng.standard_normal((60, 2))
        fn = exact_gaussian_score(0.25)
        ses_small = [elbo(fn, data, sch, mc_draws=8, seed=s)[1] for s in range(10)]
        ses_big = [elbo(fn, data, sch, mc_draws=16, seed=s)[1] for s in range(10)]
        ratio = np.mean(ses_big) / np.mean(ses_small)
        assert 0.55 < ratio < 0.85  # about 1/sqrt(2)

    def test_uniform_weighting_runs(self):
        sch = NoiseSchedule()
        rng = np.random.default_rng(3)
        data = 0.5 * rng.standard_normal((50, 2))
        est, se = elbo(exact_gaussian_score(0.25), data, sch,
                       weighting="uniform", mc_draws=8, seed=4)
        assert np.isfinite(est) and se > 0

    def test_too_few_draws_rejected(self):
        sch = NoiseSchedule()
        with pytest.raises(ContractError):
            elbo(exact_gaussian_score(0.25), np.zeros((3, 2)), sch, mc_draws=1)


class TestSampleDumps:
    def test_round_trip_with_sidecar(self, tmp_path):
        pts = np.array([[0.25, -1.5], [3.0, 0.125]])
        path = tmp_path / "samples.csv"
        write_samples(path, pts, {"seed": 1, "steps": 10, "checkpoint_hash": "ab"})
        np.testing.assert_array_equal(read_samples(path), pts)
        sidecar = tmp_path / "samples.csv.meta.json"
        assert sidecar.exists()
        assert '"seed": 1' in sidecar.read_text()
