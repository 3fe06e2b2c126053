import logging

import numpy as np
from sklearn.tree import DecisionTreeRegressor

from models import ConstantModel, FittedModel, rmse

logger = logging.getLogger("learners")

MIN_SAMPLES_LEAF = 2


class BoostingModel(FittedModel):
    kind = "boosting"

    def __init__(
        self,
        n_features: int,
        baseline: float,
        shrinkage: float,
        trees: list[tuple[DecisionTreeRegressor, np.ndarray]],
        train_mse_path: list[float],
    ):
        super().__init__(n_features, float(np.sqrt(train_mse_path[-1])))
        self.baseline = baseline
        self.shrinkage = shrinkage
        self.trees = trees
        self.train_mse_path = train_mse_path

    @property
    def nrounds(self) -> int:
        return len(self.trees)

    def _predict(self, x: np.ndarray) -> np.ndarray:
        prediction = np.full(x.shape[0], self.baseline)
        for tree, leaf_values in self.trees:
            prediction += self.shrinkage * leaf_values[tree.apply(x)]
        return prediction


def fit_boosting(
    x: np.ndarray,
    y: np.ndarray,
    nrounds: int = 100,
    maxdepth: int = 2,
    l2_lambda: float = 0.0,
    shrinkage: float = 0.1,
    seed: int = 0,
) -> FittedModel:
    """Stagewise squared-error boosting.

    Each round grows a variance-reduction tree on the current residuals and
    replaces its leaf outputs with sum(residuals) / (n_leaf + l2_lambda).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)

    if nrounds < 0:
        raise ValueError("nrounds must be non-negative")

    baseline = float(np.mean(y))
    fitted = np.full(len(y), baseline)
    residual = y - fitted
    mse_path = [float(np.mean(residual**2))]

    if nrounds == 0:
        return ConstantModel(x.shape[1], baseline, train_rmse=float(np.sqrt(mse_path[0])))

    trees = []
    for round_index in range(nrounds):
        tree = DecisionTreeRegressor(
            max_depth=maxdepth,
            min_samples_leaf=MIN_SAMPLES_LEAF,
            random_state=seed,
        )
        tree.fit(x, residual)

        leaves = tree.apply(x)
        leaf_values = np.zeros(tree.tree_.node_count)
        sums = np.bincount(leaves, weights=residual, minlength=tree.tree_.node_count)
        counts = np.bincount(leaves, minlength=tree.tree_.node_count)
        occupied = counts > 0
        leaf_values[occupied] = sums[occupied] / (counts[occupied] + l2_lambda)

        step = shrinkage * leaf_values[leaves]
        fitted += step
        residual -= step
        trees.append((tree, leaf_values))
        mse_path.append(float(np.mean(residual**2)))

    logger.debug(
        "Boosting fit: %s rounds, depth %s, train RMSE %.6g",
        nrounds,
        maxdepth,
        rmse(y, fitted),
    )
    return BoostingModel(x.shape[1], baseline, shrinkage, trees, mse_path)
