import logging
import unittest

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from dml_core import (
    FoldEstimate,
    NuisancePerturbation,
    NuisancePredictions,
    PanelIvDml,
    aggregate,
    cluster_meat,
    estimate_fold,
    learn_nuisances,
)
from errors import ConfigError, DegenerateInstrumentError
from learners import LearnerSpec
from mc_sim import DgpConfig, dgp_generate
from panel_data import DifferencedSample, block_kfold, first_difference
from weak_iv import f_statistic, null_variance

LINEAR = LearnerSpec(kind="linear")


def sample_from_residuals(u, w, v, units=None, cluster=None) -> tuple[DifferencedSample, NuisancePredictions]:
    """Differenced sample whose residuals against zero nuisances are u, w, v."""
    v = np.asarray(v, dtype=float).reshape(len(u), -1)
    units = np.arange(len(u)) if units is None else np.asarray(units)
    fd = DifferencedSample(
        units=units,
        times=np.full(len(u), 2),
        ytilde=np.asarray(u, dtype=float),
        dtilde=np.asarray(w, dtype=float),
        ztilde=v,
        xpair=np.zeros((len(u), 1)),
        cluster=units if cluster is None else np.asarray(cluster),
    )
    zeros = np.zeros(len(u))
    nuis = NuisancePredictions.from_predictions(
        fd, zeros, zeros, np.zeros_like(v), np.ones(len(u), dtype=int)
    )
    return fd, nuis


def simulated_sample(n_units=60, n_periods=5, seed=0, **overrides) -> DifferencedSample:
    cfg = DgpConfig(n_units=n_units, n_periods=n_periods, n_covariates=3, seed=seed, **overrides)
    return first_difference(dgp_generate(cfg), logger=logging.getLogger("test.dml"))


class EstimateFoldTests(unittest.TestCase):
    def setUp(self):
        self.logger = logging.getLogger("test.dml")
        self.rng = np.random.default_rng(0)

    def test_noiseless_design_recovers_parameters_exactly(self):
        v = self.rng.normal(size=40)
        w = 0.8 * v
        u = 0.5 * w
        lhat, rhat, mhat = (self.rng.normal(size=40) for _ in range(3))
        fd = DifferencedSample(
            units=np.arange(40),
            times=np.full(40, 2),
            ytilde=u + lhat,
            dtilde=w + rhat,
            ztilde=(v + mhat)[:, None],
            xpair=np.zeros((40, 1)),
            cluster=np.arange(40),
        )
        nuis = NuisancePredictions.from_predictions(fd, lhat, rhat, mhat, np.ones(40, dtype=int))

        fold = estimate_fold(fd, nuis, fold=1, logger=self.logger)

        self.assertAlmostEqual(fold.theta, 0.5, places=12)
        self.assertAlmostEqual(fold.pi[0], 0.8, places=12)
        self.assertAlmostEqual(fold.delta[0], 0.4, places=12)

    def test_hand_computed_scalar_case(self):
        fd, nuis = sample_from_residuals(u=[1, 0, 2, 1], w=[2, 3, -1, 1], v=[1, 2, -1, 0])

        fold = estimate_fold(fd, nuis, logger=self.logger)

        self.assertAlmostEqual(fold.pi[0], 9 / 6, places=14)
        self.assertAlmostEqual(fold.delta[0], -1 / 6, places=14)
        self.assertAlmostEqual(fold.theta, -1 / 9, places=14)
        self.assertAlmostEqual(fold.q_vr, 1.5 * 9, places=12)

    def test_scaling_outcome_residual_scales_theta_and_delta(self):
        u, w, v = self.rng.normal(size=(3, 30))
        base = estimate_fold(*sample_from_residuals(u, w, v), logger=self.logger)
        doubled = estimate_fold(*sample_from_residuals(2 * u, w, v), logger=self.logger)

        self.assertAlmostEqual(doubled.theta, 2 * base.theta, places=12)
        assert_allclose(doubled.delta, 2 * base.delta, rtol=1e-12)
        assert_allclose(doubled.pi, base.pi, rtol=1e-12)

    def test_moment_conditions_hold_at_the_solution(self):
        v = self.rng.normal(size=(80, 2))
        w = v @ np.array([0.7, -0.4]) + self.rng.normal(size=80)
        u = 0.3 * w + self.rng.normal(size=80)

        fold = estimate_fold(*sample_from_residuals(u, w, v), logger=self.logger)

        v_perp = v @ fold.pi
        structural = v_perp @ (u - w * fold.theta)
        first_stage = v.T @ (w - v @ fold.pi)
        self.assertLessEqual(abs(structural), 1e-8 * np.abs(v_perp * u).sum())
        self.assertLessEqual(np.max(np.abs(first_stage)), 1e-8 * np.abs(v * w[:, None]).sum())

    def test_reduced_form_equals_first_stage_times_theta(self):
        u, w, v = self.rng.normal(size=(3, 50))

        fold = estimate_fold(*sample_from_residuals(u, w, v), logger=self.logger)

        self.assertLessEqual(abs(fold.delta[0] - fold.pi[0] * fold.theta), 1e-10)

    def test_collinear_instruments_are_degenerate(self):
        v = self.rng.normal(size=20)

        with self.assertRaisesRegex(DegenerateInstrumentError, "degenerate instrument variation"):
            estimate_fold(
                *sample_from_residuals(self.rng.normal(size=20), self.rng.normal(size=20), np.column_stack([v, 2 * v])),
                logger=self.logger,
            )

    def test_orthogonal_treatment_flags_weak_denominator(self):
        v = np.array([1.0, -1.0, 1.0, -1.0])
        w = np.array([1.0, 1.0, 2.0, 2.0])

        with self.assertLogs("test.dml", level="WARNING"):
            fold = estimate_fold(*sample_from_residuals([1.0, 2.0, 0.0, 1.0], w, v), logger=self.logger)

        self.assertTrue(fold.weak_denominator)
        self.assertTrue(np.isnan(fold.theta))

    def test_singleton_clusters_give_heteroskedasticity_robust_variance(self):
        v = self.rng.normal(size=(60, 1))
        w = 0.5 * v[:, 0] + self.rng.normal(size=60)
        u = self.rng.normal(size=60)

        fold = estimate_fold(*sample_from_residuals(u, w, v), logger=self.logger)

        q_inv = 1.0 / float(v[:, 0] @ v[:, 0])
        first_stage_residual = w - v[:, 0] * fold.pi[0]
        robust = q_inv * np.sum((v[:, 0] * first_stage_residual) ** 2) * q_inv
        displayed = q_inv * np.sum((v[:, 0] * u) ** 2) * q_inv
        self.assertAlmostEqual(fold.var_pi[0, 0], robust, places=12)
        self.assertAlmostEqual(fold.var_delta_fixed[0, 0], displayed, places=12)

    def test_first_stage_f_grows_with_instrument_strength(self):
        v = self.rng.normal(size=(300, 1))
        noise = self.rng.normal(size=300)
        u = self.rng.normal(size=300)

        folds = [
            estimate_fold(*sample_from_residuals(u, pi * v[:, 0] + noise, v), logger=self.logger)
            for pi in (0.5, 1.0, 10.0, 1000.0)
        ]
        stats = [f_statistic(fold.pi, fold.var_pi) for fold in folds]

        self.assertTrue(all(low < high for low, high in zip(stats[:-1], stats[1:])))
        # the first-stage residual does not depend on π, so neither does Σππ
        for fold in folds[1:]:
            assert_allclose(fold.var_pi, folds[0].var_pi, rtol=1e-8)
        self.assertGreater(stats[-1], 1e6)

    def test_null_variance_is_the_variance_of_the_restricted_reduced_form(self):
        v = self.rng.normal(size=(120, 1))
        w = 0.6 * v[:, 0] + self.rng.normal(size=120)
        u = 0.5 * w + self.rng.normal(size=120)
        units = np.repeat(np.arange(40), 3)

        fold = estimate_fold(*sample_from_residuals(u, w, v, units=units), logger=self.logger)

        theta0 = 0.3
        q_inv = 1.0 / float(v[:, 0] @ v[:, 0])
        score = v[:, 0] * ((u - v[:, 0] * fold.delta[0]) - theta0 * (w - v[:, 0] * fold.pi[0]))
        expected = q_inv * cluster_meat(score, units)[0, 0] * q_inv
        restricted = null_variance(theta0, fold.var_delta, fold.var_pi, fold.cov_delta_pi)
        self.assertAlmostEqual(restricted[0, 0], expected, places=12)


class ClusterMeatTests(unittest.TestCase):
    def test_sums_scores_within_clusters(self):
        scores = np.array([[1.0], [2.0], [-1.0], [4.0]])

        meat = cluster_meat(scores, np.array(["a", "a", "b", "b"]))

        self.assertAlmostEqual(meat[0, 0], 3.0**2 + 3.0**2)

    def test_singleton_clusters_sum_outer_products(self):
        scores = np.random.default_rng(1).normal(size=(10, 2))

        assert_allclose(cluster_meat(scores, np.arange(10)), scores.T @ scores, rtol=1e-12)


def fold_estimate(fold, theta, n_units, var_theta=0.0):
    return FoldEstimate(
        fold=fold,
        n_units=n_units,
        n_rows=n_units,
        theta=theta,
        pi=np.array([1.0]),
        delta=np.array([theta]),
        q_vv=np.eye(1),
        q_vr=1.0,
        var_theta=var_theta,
        var_pi=np.eye(1) * 0.1,
        var_delta=np.eye(1) * 0.2,
        cov_delta_pi=np.eye(1) * 0.05,
    )


class AggregateTests(unittest.TestCase):
    def setUp(self):
        self.fd, self.nuis = sample_from_residuals(np.ones(10), np.ones(10), np.arange(10.0))

    def test_identical_folds_have_no_dispersion(self):
        estimate = aggregate(
            [fold_estimate(1, 0.7, 5, var_theta=0.02), fold_estimate(2, 0.7, 5, var_theta=0.02)],
            self.fd,
            self.nuis,
        )

        self.assertAlmostEqual(estimate.theta, 0.7)
        self.assertAlmostEqual(estimate.sigma_theta, 0.02 * 5 / 10)

    def test_dispersion_correction(self):
        estimate = aggregate(
            [fold_estimate(1, 1.0, 5), fold_estimate(2, 3.0, 5)], self.fd, self.nuis
        )

        self.assertAlmostEqual(estimate.theta, 2.0)
        # avar = 0.5·(1 - 2)² + 0.5·(3 - 2)² = 1 over N = 10 units
        self.assertAlmostEqual(estimate.sigma_theta, 0.1)
        self.assertAlmostEqual(estimate.sigma_delta[0, 0], 0.2 * 5 / 10 + 0.1)
        self.assertAlmostEqual(estimate.sigma_pi[0, 0], 0.1 * 5 / 10)

    def test_one_fold_is_rejected(self):
        with self.assertRaisesRegex(ConfigError, "K ≥ 2 required"):
            aggregate([fold_estimate(1, 1.0, 5)], self.fd, self.nuis)


class LearnNuisancesTests(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(2)
        n_units, per_unit = 12, 4
        self.units = np.repeat(np.arange(n_units), per_unit)
        xpair = rng.normal(size=(self.units.size, 3))
        self.fd = DifferencedSample(
            units=self.units,
            times=np.tile(np.arange(2, 2 + per_unit), n_units),
            ytilde=xpair @ np.array([1.0, -2.0, 0.5]) + 3.0,
            dtilde=xpair @ np.array([0.2, 0.1, -1.0]),
            ztilde=(xpair @ np.array([-0.5, 0.4, 0.3]))[:, None],
            xpair=xpair,
            cluster=self.units,
        )
        self.folds = block_kfold(np.arange(n_units), 2, seed=4)

    def test_noiseless_linear_targets_are_recovered(self):
        nuis = learn_nuisances(self.fd, self.folds, LINEAR)

        assert_allclose(nuis.lhat, self.fd.ytilde, atol=1e-8)
        self.assertLess(nuis.mse_l, 1e-16)

    def test_predictions_never_come_from_own_rows(self):
        nuis = learn_nuisances(self.fd, self.folds, LINEAR)

        for unit, fold in zip(self.units, nuis.fold_ids):
            self.assertEqual(self.folds.folds[unit], fold)
            self.assertNotIn(unit, nuis.training_units[fold])

    def test_thread_count_does_not_change_predictions(self):
        spec = LearnerSpec(kind="boosting", nrounds=20, seed=1)

        serial = learn_nuisances(self.fd, self.folds, spec, n_jobs=1)
        threaded = learn_nuisances(self.fd, self.folds, spec, n_jobs=2)

        assert_array_equal(serial.lhat, threaded.lhat)
        assert_array_equal(serial.mhat, threaded.mhat)


def cross_fitted_partialling_out(fd: DifferencedSample, n_folds: int, seed: int) -> float:
    fold_ids = block_kfold(fd.unit_ids, n_folds, seed).fold_of(fd.units)
    design = np.column_stack([np.ones(fd.n_rows), fd.xpair])
    targets = np.column_stack([fd.ytilde, fd.dtilde, fd.ztilde[:, 0]])

    thetas = []
    for k in range(1, n_folds + 1):
        train, test = fold_ids != k, fold_ids == k
        coefficients = np.linalg.lstsq(design[train], targets[train], rcond=None)[0]
        residual = targets[test] - design[test] @ coefficients
        u, w, v = residual.T
        thetas.append((v @ u) / (v @ w))
    return float(np.mean(thetas))


class PanelIvDmlTests(unittest.TestCase):
    def setUp(self):
        self.fd = simulated_sample()

    def test_linear_learners_match_partialling_out_oracle(self):
        estimate = PanelIvDml(LINEAR, n_folds=2, seed=6).fit(self.fd)

        self.assertLessEqual(abs(estimate.theta - cross_fitted_partialling_out(self.fd, 2, 6)), 1e-10)

    def test_estimate_shapes_and_variances(self):
        estimate = PanelIvDml(LINEAR, n_folds=3, seed=1).fit(self.fd)

        self.assertEqual(estimate.n_folds, 3)
        self.assertEqual(estimate.n_units, 60)
        self.assertEqual(estimate.n_rows, 60 * 4)
        self.assertEqual(estimate.n_clusters, 60)
        self.assertGreaterEqual(estimate.sigma_theta, 0.0)
        assert_allclose(estimate.sigma_pi, estimate.sigma_pi.T)
        self.assertTrue(np.all(np.linalg.eigvalsh(estimate.sigma_delta) >= 0))
        self.assertGreater(estimate.model_rmse, 0.0)
        self.assertEqual(estimate.estimator, "panel_iv_dml")

    def test_single_fold_is_rejected(self):
        with self.assertRaisesRegex(ConfigError, "K ≥ 2 required"):
            PanelIvDml(LINEAR, n_folds=1)

    def test_zero_perturbation_changes_nothing(self):
        model = PanelIvDml(LINEAR, n_folds=3, seed=2)
        model.fit(self.fd)
        direction = NuisancePerturbation(
            dl=np.ones(self.fd.n_rows), dr=np.ones(self.fd.n_rows), dm=np.ones(self.fd.n_rows)
        )

        self.assertEqual(model.probe(self.fd, direction, 0.0), 0.0)

    def test_instrument_perturbation_orthogonal_to_residuals_leaves_theta(self):
        model = PanelIvDml(LINEAR, n_folds=3, seed=2)
        model.fit(self.fd)
        nuis = model.nuisances_
        u = self.fd.ytilde - nuis.lhat
        w = self.fd.dtilde - nuis.rhat

        rng = np.random.default_rng(3)
        dm = np.zeros(self.fd.n_rows)
        for k in np.unique(nuis.fold_ids):
            rows = nuis.fold_ids == k
            basis, _ = np.linalg.qr(np.column_stack([u[rows], w[rows]]))
            draw = rng.normal(size=rows.sum())
            dm[rows] = draw - basis @ (basis.T @ draw)
        direction = NuisancePerturbation(dl=np.zeros(self.fd.n_rows), dr=np.zeros(self.fd.n_rows), dm=dm)

        self.assertAlmostEqual(model.probe(self.fd, direction, 0.1), 0.0, places=12)

    def test_orthogonal_direction_moves_theta_quadratically(self):
        model = PanelIvDml(LINEAR, n_folds=3, seed=2)
        estimate = model.fit(self.fd)
        nuis = model.nuisances_
        u = self.fd.ytilde - nuis.lhat
        w = self.fd.dtilde - nuis.rhat
        v = (self.fd.ztilde - nuis.mhat)[:, 0]

        rng = np.random.default_rng(4)
        dm = np.zeros(self.fd.n_rows)
        dr = np.zeros(self.fd.n_rows)
        for fold in estimate.fold_estimates:
            rows = nuis.fold_ids == fold.fold
            structural = u[rows] - w[rows] * fold.theta
            # first-order terms vanish when dm ⟂ structural residual and dr ⟂ V
            draw_m = rng.normal(size=rows.sum())
            draw_r = rng.normal(size=rows.sum())
            dm[rows] = draw_m - structural * (structural @ draw_m) / (structural @ structural)
            dr[rows] = draw_r - v[rows] * (v[rows] @ draw_r) / (v[rows] @ v[rows])
            if dm[rows] @ dr[rows] < 0:
                dr[rows] *= -1.0
        dm *= 0.05 * np.linalg.norm(v) / np.linalg.norm(dm)
        dr *= 0.05 * np.linalg.norm(w) / np.linalg.norm(dr)
        direction = NuisancePerturbation(dl=np.zeros(self.fd.n_rows), dr=dr, dm=dm)

        eps = np.array([1e-1, 1e-2, 1e-3])
        changes = np.array([abs(model.probe(self.fd, direction, e)) for e in eps])
        slope = np.polyfit(np.log(eps), np.log(changes), 1)[0]

        self.assertTrue(np.all(changes / eps < 1.0))
        self.assertLess(abs(slope - 2.0), 0.3)


if __name__ == "__main__":
    unittest.main()
