import logging

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from errors import ConfigError, DivergenceError
from models import ConstantModel, FittedModel, rmse, standardize_columns

logger = logging.getLogger("learners")

MAX_WEIGHTS = 2000
INIT_RANGE = 0.7


def parameter_count(n_features: int, size: int) -> int:
    return size * (n_features + 2) + 1


def unpack(params: np.ndarray, n_features: int, size: int):
    split = n_features * size
    w_hidden = params[:split].reshape(n_features, size)
    b_hidden = params[split : split + size]
    w_out = params[split + size : split + 2 * size]
    b_out = params[-1]
    return w_hidden, b_hidden, w_out, b_out


def mlp_loss_and_grad(
    params: np.ndarray, x: np.ndarray, y: np.ndarray, size: int, decay: float
) -> tuple[float, np.ndarray]:
    """Penalized sum of squares and its gradient for one logistic hidden layer."""
    w_hidden, b_hidden, w_out, b_out = unpack(params, x.shape[1], size)

    hidden = expit(x @ w_hidden + b_hidden)
    residual = hidden @ w_out + b_out - y
    loss = float(residual @ residual + decay * (params @ params))

    d_out = 2.0 * residual
    d_hidden = np.outer(d_out, w_out) * hidden * (1.0 - hidden)
    grad = np.concatenate(
        [
            (x.T @ d_hidden).ravel(),
            d_hidden.sum(axis=0),
            hidden.T @ d_out,
            [d_out.sum()],
        ]
    )
    grad += 2.0 * decay * params
    return loss, grad


class MlpModel(FittedModel):
    kind = "mlp"

    def __init__(
        self,
        params: np.ndarray,
        size: int,
        x_center: np.ndarray,
        x_scale: np.ndarray,
        y_center: float,
        y_scale: float,
        train_rmse: float = 0.0,
    ):
        super().__init__(len(x_center), train_rmse)
        self.params = params
        self.size = size
        self.x_center = x_center
        self.x_scale = x_scale
        self.y_center = y_center
        self.y_scale = y_scale

    def _predict(self, x: np.ndarray) -> np.ndarray:
        xs = (x - self.x_center) / self.x_scale
        w_hidden, b_hidden, w_out, b_out = unpack(self.params, xs.shape[1], self.size)
        output = expit(xs @ w_hidden + b_hidden) @ w_out + b_out
        return self.y_center + self.y_scale * output


def fit_mlp(
    x: np.ndarray,
    y: np.ndarray,
    size: int = 2,
    decay: float = 0.0,
    maxit: int = 100,
    seed: int = 0,
) -> FittedModel:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)

    if size < 1:
        raise ConfigError("mlp size must be at least 1")

    n_params = parameter_count(x.shape[1], size)
    if n_params > MAX_WEIGHTS:
        raise ConfigError(
            f"mlp with {n_params} weights exceeds the cap of {MAX_WEIGHTS}"
        )

    y_center = float(np.mean(y))
    y_scale = float(np.std(y))
    if y_scale <= 1e-12 * max(1.0, abs(y_center)):
        return ConstantModel(x.shape[1], y_center)

    x_center, x_scale, _ = standardize_columns(x)
    xs = (x - x_center) / x_scale
    ys = (y - y_center) / y_scale

    rng = np.random.default_rng(seed)
    start = rng.uniform(-INIT_RANGE, INIT_RANGE, size=n_params)

    def objective(params: np.ndarray) -> tuple[float, np.ndarray]:
        loss, grad = mlp_loss_and_grad(params, xs, ys, size, decay)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise DivergenceError(f"mlp divergence: non-finite loss {loss}")
        return loss, grad

    result = minimize(
        objective,
        start,
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": maxit},
    )

    model = MlpModel(result.x, size, x_center, x_scale, y_center, y_scale)
    model.train_rmse = rmse(y, model.predict(x))
    logger.debug(
        "MLP fit: size %s, decay %s, %s iterations, train RMSE %.6g",
        size,
        decay,
        result.nit,
        model.train_rmse,
    )
    return model
