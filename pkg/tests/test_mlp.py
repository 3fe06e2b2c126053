import unittest

import numpy as np
from numpy.testing import assert_allclose

from errors import ConfigError, DivergenceError
from mlp import fit_mlp, mlp_loss_and_grad, parameter_count


class MlpGradientTests(unittest.TestCase):
    def test_analytic_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(15, 3))
        y = rng.normal(size=15)
        size, decay, step = 3, 0.3, 1e-6
        n_params = parameter_count(3, size)

        for _ in range(20):
            params = rng.uniform(-1, 1, n_params)
            _, grad = mlp_loss_and_grad(params, x, y, size, decay)

            numeric = np.zeros(n_params)
            for index in range(n_params):
                offset = np.zeros(n_params)
                offset[index] = step
                upper, _ = mlp_loss_and_grad(params + offset, x, y, size, decay)
                lower, _ = mlp_loss_and_grad(params - offset, x, y, size, decay)
                numeric[index] = (upper - lower) / (2 * step)

            relative = np.linalg.norm(numeric - grad) / max(np.linalg.norm(grad), 1e-8)
            self.assertLessEqual(relative, 1e-4)


class MlpFitTests(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(1)

    def test_constant_outcome(self):
        model = fit_mlp(self.rng.normal(size=(30, 2)), np.full(30, 2.5), size=3)

        assert_allclose(model.predict(self.rng.normal(size=(5, 2))), np.full(5, 2.5), atol=1e-6)

    def test_learns_a_line(self):
        x = self.rng.uniform(-2, 2, size=(500, 2))
        y = 3.0 * x[:, 0] + 1.0
        x_test = self.rng.uniform(-2, 2, size=(200, 2))
        y_test = 3.0 * x_test[:, 0] + 1.0

        model = fit_mlp(x, y, size=4, decay=0.0, maxit=500, seed=2)

        error = np.sqrt(np.mean((model.predict(x_test) - y_test) ** 2))
        self.assertLessEqual(error, 0.1 * np.std(y))

    def test_heavy_decay_predicts_the_mean(self):
        x = self.rng.normal(size=(100, 2))
        y = x[:, 0] + self.rng.normal(scale=0.2, size=100)

        model = fit_mlp(x, y, size=3, decay=1e6, maxit=200)

        assert_allclose(model.predict(x), np.full(100, y.mean()), atol=0.01 * np.std(y))

    def test_same_seed_same_fit(self):
        x = self.rng.normal(size=(40, 2))
        y = np.tanh(x[:, 0])

        first = fit_mlp(x, y, size=3, seed=7).predict(x)
        second = fit_mlp(x, y, size=3, seed=7).predict(x)

        assert_allclose(first, second, rtol=0, atol=0)

    def test_invalid_sizes_are_rejected(self):
        with self.assertRaises(ConfigError):
            fit_mlp(np.ones((4, 2)), np.arange(4.0), size=0)
        with self.assertRaisesRegex(ConfigError, "2000"):
            fit_mlp(np.ones((4, 1000)), np.arange(4.0), size=2)

    def test_non_finite_loss_aborts(self):
        x = self.rng.normal(size=(10, 2))
        x[3, 1] = np.inf

        with self.assertRaisesRegex(DivergenceError, "divergence"):
            fit_mlp(x, np.arange(10.0), size=2)


if __name__ == "__main__":
    unittest.main()
