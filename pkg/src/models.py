import numpy as np


class FittedModel:
    """Immutable fitted regression model shared by every learner kind."""

    kind = "model"

    def __init__(self, n_features: int, train_rmse: float):
        self.n_features = n_features
        self.train_rmse = train_rmse

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :] if self.n_features > 1 else x[:, None]

        if x.shape[1] != self.n_features:
            raise ValueError(
                f"{self.kind} model expects {self.n_features} features, got {x.shape[1]}"
            )

        return self._predict(x)

    def _predict(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class ConstantModel(FittedModel):
    kind = "constant"

    def __init__(self, n_features: int, value: float, train_rmse: float = 0.0):
        super().__init__(n_features, train_rmse)
        self.value = float(value)

    def _predict(self, x: np.ndarray) -> np.ndarray:
        return np.full(x.shape[0], self.value)


def rmse(y: np.ndarray, prediction: np.ndarray) -> float:
    return float(np.sqrt(np.mean((np.asarray(y) - prediction) ** 2)))


def standardize_columns(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Column means, scales and the mask of columns with non-zero variance."""
    center = x.mean(axis=0)
    scale = x.std(axis=0)
    varying = scale > 1e-12 * np.maximum(1.0, np.abs(center))
    scale = np.where(varying, scale, 1.0)
    return center, scale, varying
