import logging
from dataclasses import replace

import numpy as np
import pytest

from vcmm import simgen
from vcmm.core import ModelParams, Partition, PenaltySpec, RandomEffectCov, VCMMError
from vcmm.estimator import FitConfig, FitResult, block_fit
from vcmm.spline import TensorSplineBasis, expand_design
from vcmm.suffstats import aggregate, compute_local


@pytest.fixture(autouse=True)
def quiet():
    logging.disable(logging.WARNING)
    yield
    logging.disable(logging.NOTSET)


class TestScenarioSpec:
    def test_example_1_defaults(self):
        parts, truth = simgen.generate(simgen.ScenarioSpec(example=1))
        assert sum(p.n for p in parts) == 1000
        assert all(p.p == 1 and p.M == 1 for p in parts)
        assert simgen.TRUE_BETA0 == 2.0
        assert truth.basis.Q == 19
        assert truth.sigma2_eps == 0.0625 and truth.sigma_alpha.values[0] == 0.25

    def test_other_defaults(self):
        s2, s3, s4 = (simgen.ScenarioSpec(example=e) for e in (2, 3, 4))
        assert s2.q == 200 and s2.correlation == 0.1
        assert s3.N == 10_000 and s3.levels == (20, 20)
        assert s4.N == 10_000 and s4.basis_sizes == (12, 12)
        assert simgen.scenario_basis(s4).Q == 144
        H = np.array([[0.1, 0.3]])
        assert simgen.beta1_true(4)(H)[0] == pytest.approx(np.sin(2 * np.pi * 0.4))

    @pytest.mark.parametrize(
        "kw",
        [dict(example=5), dict(example=1, N=3, K=4), dict(example=2, levels=(5,)), dict(example=1, basis_sizes=(5, 5)),
         dict(example=2, correlation=0.6), dict(example=1, levels=(1,)), dict(example=1, noise_sd=-1.0)],
    )
    def test_invalid_overrides(self, kw):
        with pytest.raises(VCMMError):
            simgen.ScenarioSpec(**kw)

    def test_dict_round_trip(self):
        s = simgen.ScenarioSpec(example=3, N=500, seed=9, levels=(4, 6))
        assert simgen.ScenarioSpec.from_dict(s.to_dict()) == s


class TestGenerate:
    def test_zero_noise(self):
        spec = simgen.ScenarioSpec(example=1, N=300, noise_sd=0.0)
        parts, truth = simgen.generate(spec)
        for p in parts:
            mean = simgen.TRUE_BETA0 + np.sin(2 * np.pi * p.H[:, 0]) * p.X[:, 0] + p.Z @ truth.alpha
            np.testing.assert_array_equal(p.y, mean)

    def test_example_2_adjacent_correlation(self):
        spec = simgen.ScenarioSpec(example=2, N=10, K=1)
        A = np.array([simgen.generate(replace(spec, seed=s))[1].alpha for s in range(500)])
        r = np.mean(A[:, :-1] * A[:, 1:]) / np.mean(A**2)
        assert r == pytest.approx(0.1, abs=0.03)

    def test_example_2_kernel_design(self):
        parts, truth = simgen.generate(simgen.ScenarioSpec(example=2, N=200, K=2))
        Z = parts[0].Z
        assert Z.shape[1] == 200
        np.testing.assert_allclose(Z.sum(axis=1), 1.0)
        assert truth.sigma_alpha.structure == "full"

    def test_reproducible(self):
        spec = simgen.ScenarioSpec(example=3, N=600, seed=4)
        (p1, t1), (p2, t2) = simgen.generate(spec), simgen.generate(spec)
        for a, b in zip(p1 + [t1.test], p2 + [t2.test]):
            for f in ("y", "X", "H", "Z"):
                np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
        np.testing.assert_array_equal(t1.alpha, t2.alpha)
        assert not np.array_equal(p1[0].y, simgen.generate(replace(spec, seed=5))[0][0].y)

    def test_split_sizes(self):
        parts, truth = simgen.generate(simgen.ScenarioSpec(example=1, N=1000, K=3))
        assert [p.n for p in parts] == [334, 333, 333]
        assert truth.test.n == 200

    def test_generator_moments(self):
        """t, x uniform; alpha and eps centred normal with their stated variances (500 replications)."""
        spec = simgen.ScenarioSpec(example=1, N=200, K=1, test_fraction=0.0, levels=(10,))
        t, x, a, e = [], [], [], []
        for s in range(500):
            (p,), truth = simgen.generate(replace(spec, seed=s))
            t.append(p.H[:, 0])
            x.append(p.X[:, 0])
            a.append(truth.alpha)
            e.append(p.y - simgen.TRUE_BETA0 - np.sin(2 * np.pi * p.H[:, 0]) * p.X[:, 0] - p.Z @ truth.alpha)
        t, x, a, e = (np.concatenate(v) for v in (t, x, a, e))

        def within(sample, mean, var):
            n = sample.size
            assert abs(sample.mean() - mean) <= 4 * np.sqrt(var / n)
            # var of the sample variance ~ 2 var^2 / n for a normal, (4/5) var^2 / n for a uniform
            assert abs(sample.var() - var) <= 4 * np.sqrt(2 * var**2 / n)

        within(t, 0.5, 1 / 12)
        within(x, 0.5, 1 / 12)
        assert t.min() >= 0 and t.max() <= 1
        within(e, 0.0, 0.0625)
        within(a, 0.0, 0.25)
        # normal tails for eps: fraction beyond 2 sd
        assert np.mean(np.abs(e) > 0.5) == pytest.approx(0.0455, abs=0.003)


class TestDirectOracle:
    def test_matches_summary_fit_on_example_1(self):
        spec = simgen.ScenarioSpec(example=1, seed=2)
        parts, truth, init = simgen.prepare(spec, cv=False, lam=0.1)
        mode = simgen.direct_oracle(parts, truth.basis, init.penalty, init.sigma2_eps, init.sigma_alpha)
        agg = aggregate([compute_local(p, truth.basis) for p in parts])
        res = block_fit(agg, init, FitConfig(tol_grad=1e-12, tol_param=1e-15, max_iter=5000))
        rel = np.max(np.abs(res.theta.theta - mode.theta)) / np.max(np.abs(mode.theta))
        assert rel <= 1e-8

    def test_noiseless_recovery(self):
        rng = np.random.default_rng(0)
        basis = TensorSplineBasis.cubic(8)
        n = 400
        X, H, Z = rng.uniform(size=(n, 1)), rng.uniform(size=(n, 1)), rng.normal(size=(n, 3))
        beta, alpha = rng.normal(size=16), rng.normal(size=3)
        y = expand_design(X, H, basis) @ beta + Z @ alpha
        parts = [Partition(y[:200], X[:200], H[:200], Z[:200]), Partition(y[200:], X[200:], H[200:], Z[200:])]
        # flat prior on alpha and no penalty: exact interpolation
        mode = simgen.direct_oracle(parts, basis, PenaltySpec("ridge", 0.0), 1.0, RandomEffectCov.isotropic(1e30, 3))
        np.testing.assert_allclose(mode.beta, beta, atol=1e-8)
        np.testing.assert_allclose(mode.alpha, alpha, atol=1e-8)

    def test_row_permutation_invariance(self):
        spec = simgen.ScenarioSpec(example=1, seed=3)
        parts, truth, init = simgen.prepare(spec, cv=False, lam=0.1)
        args = (truth.basis, init.penalty, init.sigma2_eps, init.sigma_alpha)
        ref = simgen.direct_oracle(parts, *args).theta
        rng = np.random.default_rng(0)
        shuffled = [p.take(rng.permutation(p.n)) for p in reversed(parts)]
        perm = simgen.direct_oracle(shuffled, *args).theta
        assert np.max(np.abs(perm - ref)) <= 1e-10 * np.max(np.abs(ref))

    def test_invariant_to_partition_count(self):
        ref = None
        for K in (1, 4, 7):
            spec = simgen.ScenarioSpec(example=1, seed=5, K=K)
            parts, truth = simgen.generate(spec)
            theta = simgen.direct_oracle(parts, truth.basis, PenaltySpec("ridge", 0.1), 0.06, truth.sigma_alpha).theta
            if ref is None:
                ref = theta
            assert np.max(np.abs(theta - ref)) <= 1e-10 * np.max(np.abs(ref))


class TestEvaluate:
    def test_truth_scores_zero(self):
        spec = simgen.ScenarioSpec(example=1, seed=6)
        parts, truth = simgen.generate(spec)
        grid = simgen.eval_grid(1)
        Phi = truth.basis.evaluate(grid)
        # best spline approximation of the true coefficient functions on the evaluation grid
        b0 = np.linalg.lstsq(Phi, np.full(grid.shape[0], simgen.TRUE_BETA0), rcond=None)[0]
        b1 = np.linalg.lstsq(Phi, truth.beta1(grid), rcond=None)[0]
        theta = ModelParams(np.r_[b0, b1], truth.alpha, truth.sigma2_eps, truth.sigma_alpha)
        rep = simgen.evaluate(FitResult(theta, 0, True, np.zeros(1), 0.0, "truth"), truth)
        assert rep.mse_beta0 <= 1e-20
        assert rep.mse_sigma2_eps == 0 and rep.mse_sigma2_alpha == [0.0] and rep.mspe_alpha == [0.0]
        # only the spline approximation error of sin(2 pi t) with 19 cubics remains
        assert rep.grid_mse_beta1 <= 1e-6 and rep.train_mse_beta1 <= 1e-6 and rep.test_mspe_beta1 <= 1e-6
        assert simgen.safe_corr(rep.beta1_curve, truth.beta1(grid)) == pytest.approx(1.0, abs=1e-6)
        assert simgen.safe_corr(theta.theta, theta.theta) == 1.0

    def test_independent_noise_fits_uncorrelated(self):
        rs = []
        for r in range(20):
            thetas = []
            for j in range(2):
                spec = simgen.ScenarioSpec(example=1, seed=100 * r + j)
                parts, truth = simgen.generate(spec)
                rng = np.random.default_rng(10_000 + 100 * r + j)
                parts = [Partition(0.25 * rng.standard_normal(p.n), p.X, p.H, p.Z, p.partition_id) for p in parts]
                init = simgen.scenario_init(parts, truth)
                thetas.append(simgen.fit_method(parts, truth.basis, init, simgen.scenario_config(spec, "ss")).theta.theta)
            rs.append(simgen.safe_corr(*thetas))
        assert all(-1 <= r <= 1 for r in rs)
        assert abs(np.mean(rs)) < 0.2

    def test_report_fields(self):
        spec = simgen.ScenarioSpec(example=3, N=1000, seed=7)
        parts, truth, init = simgen.prepare(spec, cv=False, lam=0.01)
        rep = simgen.evaluate(simgen.fit_method(parts, truth.basis, init, simgen.scenario_config(spec, "ss")), truth)
        assert len(rep.sigma2_alpha_hat) == 2 and len(rep.mspe_alpha) == 2
        sc = rep.scalars()
        assert {"mse_sigma2_alpha_1", "mse_sigma2_alpha_2", "test_mspe_beta1"} <= set(sc)
        assert all(v >= 0 for k, v in sc.items() if k.startswith(("mse", "mspe", "train", "test", "grid")))

    def test_reproducible_reports(self):
        spec = simgen.ScenarioSpec(example=1, seed=8)
        a = simgen.replicate_one(spec, ["ss", "direct"])
        b = simgen.replicate_one(spec, ["ss", "direct"])
        assert a[0] == b[0]
        for m in ("ss", "direct"):
            sa, sb = a[1][m].scalars(), b[1][m].scalars()
            sa.pop("elapsed"), sb.pop("elapsed")
            assert sa == sb

    def test_safe_corr_bounds(self):
        assert simgen.safe_corr([1, 2, 3], [3, 2, 1]) == -1.0
        assert simgen.safe_corr([1, 1], [1, 1]) == 1.0
        assert simgen.safe_corr([1, 1], [1, 2]) == 0.0


class TestReplication:
    def test_table(self, tmp_path):
        spec = simgen.ScenarioSpec(example=1, N=400, seed=1)
        table = simgen.replicate(spec, ["direct", "ss"], reps=3)
        assert table.reps == 3 and len(table.lambdas) == 3
        corr = table.correlations("direct", "ss")
        assert all(-1 <= v <= 1 for v in corr.values())
        assert corr["beta1"] > 0.99
        table.to_csv(tmp_path / "t.csv")
        rows = (tmp_path / "t.csv").read_text().splitlines()
        assert rows[0].startswith("metric")
        summ = table.summary()
        assert summ["converged"]["ss"] == (1.0, 0.0)
        assert summ["speedup"]["direct"] == (1.0, 0.0)

    def test_parallel_matches_sequential(self):
        spec = simgen.ScenarioSpec(example=1, N=300, seed=11)
        a = simgen.replicate(spec, ["ss"], reps=2)
        b = simgen.replicate(spec, ["ss"], reps=2, workers=2)
        for ra, rb in zip(a.reports["ss"], b.reports["ss"]):
            np.testing.assert_array_equal(ra.alpha_hat, rb.alpha_hat)

    def test_example_2_truncated_close_to_full(self):
        spec = simgen.ScenarioSpec(example=2, seed=3)
        parts, truth, init = simgen.prepare(spec)
        full = simgen.fit_method(parts, truth.basis, init, simgen.scenario_config(spec, "ss"))
        trunc = simgen.fit_method(parts, truth.basis, init, simgen.scenario_config(spec, "svd"))
        assert trunc.extras["rank_H_aug"] == 100
        assert simgen.safe_corr(trunc.theta.alpha, full.theta.alpha) > 0.9


class TestDatasetFiles:
    @pytest.mark.parametrize("fmt", ["text", "binary"])
    def test_round_trip(self, tmp_path, fmt):
        spec = simgen.ScenarioSpec(example=3, N=300, seed=2)
        parts, truth = simgen.generate(spec)
        simgen.save_dataset(tmp_path, parts, truth, fmt)
        back, t2 = simgen.load_dataset(tmp_path)
        assert len(back) == len(parts)
        for a, b in zip(parts, back):
            tol = 0 if fmt == "binary" else 1e-15
            np.testing.assert_allclose(b.y, a.y, rtol=tol, atol=0)
            np.testing.assert_allclose(b.Z, a.Z, rtol=tol, atol=0)
        assert t2.spec == spec
        np.testing.assert_array_equal(t2.alpha, truth.alpha)
        np.testing.assert_array_equal(t2.test.y, truth.test.y)

    def test_empty_directory(self, tmp_path):
        with pytest.raises(VCMMError, match="no partition files"):
            simgen.load_dataset(tmp_path)
