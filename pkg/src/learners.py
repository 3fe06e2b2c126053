import logging
from dataclasses import dataclass, fields, replace
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np
from sklearn.linear_model import LinearRegression, lasso_path
from sklearn.model_selection import KFold

from boosting import fit_boosting
from errors import ConfigError
from mlp import fit_mlp
from models import ConstantModel, FittedModel, rmse, standardize_columns

logger = logging.getLogger("learners")

LEARNER_KINDS = ("lasso", "boosting", "mlp", "linear")
LAMBDA_RATIO = 1e-4


@dataclass(frozen=True)
class LearnerSpec:
    kind: str = "lasso"
    lambda_grid: tuple[float, ...] | None = None
    n_lambda: int = 100
    cv_folds: int = 5
    dictionary: bool = False
    interactions: bool = True
    nrounds: int = 100
    maxdepth: int = 2
    l2_lambda: float = 0.0
    shrinkage: float = 0.1
    size: int = 2
    decay: float = 0.0
    maxit: int = 100
    tune: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.kind not in LEARNER_KINDS:
            raise ConfigError(
                f"unknown learner {self.kind!r}; expected one of {', '.join(LEARNER_KINDS)}"
            )
        if self.lambda_grid is not None and (
            not self.lambda_grid or min(self.lambda_grid) <= 0
        ):
            raise ConfigError("lasso lambda grid must hold positive values")
        if self.n_lambda < 1 or self.cv_folds < 2:
            raise ConfigError("lasso needs n_lambda ≥ 1 and cv_folds ≥ 2")
        if self.nrounds < 0 or self.maxdepth < 1:
            raise ConfigError("boosting needs nrounds ≥ 0 and maxdepth ≥ 1")
        if self.l2_lambda < 0 or not 0 < self.shrinkage <= 1:
            raise ConfigError("boosting needs lambda ≥ 0 and eta in (0, 1]")
        if self.size < 1 or self.decay < 0 or self.maxit < 0:
            raise ConfigError("mlp needs size ≥ 1, decay ≥ 0 and maxit ≥ 0")


class LassoModel(FittedModel):
    kind = "lasso"

    def __init__(
        self,
        n_features: int,
        intercept: float,
        coef: np.ndarray,
        alpha: float,
        dictionary: bool = False,
        interactions: bool = True,
        train_rmse: float = 0.0,
    ):
        super().__init__(n_features, train_rmse)
        self.intercept = intercept
        self.coef = coef
        self.alpha = alpha
        self.dictionary = dictionary
        self.interactions = interactions

    def _predict(self, x: np.ndarray) -> np.ndarray:
        if self.dictionary:
            x = extended_dictionary(x, self.interactions)
        return self.intercept + x @ self.coef


class LinearModel(FittedModel):
    kind = "linear"

    def __init__(self, n_features: int, regression: LinearRegression, train_rmse: float):
        super().__init__(n_features, train_rmse)
        self.regression = regression

    @property
    def coef(self) -> np.ndarray:
        return self.regression.coef_

    @property
    def intercept(self) -> float:
        return float(self.regression.intercept_)

    def _predict(self, x: np.ndarray) -> np.ndarray:
        return self.regression.predict(x)


def extended_dictionary(x: np.ndarray, interactions: bool = True) -> np.ndarray:
    """Linears, squares, cubes, then pairwise products in (j, k) order."""
    x = np.asarray(x, dtype=float)
    products = []
    if interactions:
        products = [x[:, j] * x[:, k] for j, k in combinations(range(x.shape[1]), 2)]
    product_block = np.column_stack(products) if products else np.empty((x.shape[0], 0))
    return np.hstack([x, x**2, x**3, product_block])


def lambda_max(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.max(np.abs(x.T @ (y - y.mean()))) / len(y))


def auto_lambda_grid(x: np.ndarray, y: np.ndarray, n_lambda: int = 100) -> np.ndarray:
    top = lambda_max(x, y)
    if top <= 0:
        return np.array([1.0])
    return np.geomspace(top, top * LAMBDA_RATIO, n_lambda)


def _lasso_coefficients(
    x: np.ndarray, y: np.ndarray, alphas: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Path on the standardized scale, mapped back to original-scale slopes."""
    center, scale, varying = standardize_columns(x)
    coef = np.zeros((x.shape[1], len(alphas)))
    if varying.any():
        xs = (x[:, varying] - center[varying]) / scale[varying]
        _, path, _ = lasso_path(xs, y - y.mean(), alphas=alphas)
        coef[varying] = path / scale[varying, None]
    intercept = y.mean() - center @ coef
    return intercept, coef, varying


def fit_lasso(
    x: np.ndarray,
    y: np.ndarray,
    lambda_grid: Sequence[float] | str = "auto",
    cv_folds: int = 5,
    n_lambda: int = 100,
    dictionary: bool = False,
    interactions: bool = True,
    seed: int = 0,
) -> FittedModel:
    """Lasso at the penalty with the smallest mean cross-validated error.

    Inputs are standardized inside every fit; the intercept is not penalized
    and slopes are reported on the original scale.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n_features = x.shape[1]
    design = extended_dictionary(x, interactions) if dictionary else x

    if len(y) < cv_folds:
        raise ConfigError(f"lasso needs at least {cv_folds} rows, got {len(y)}")

    center, scale, varying = standardize_columns(design)
    if np.std(y) <= 1e-12 * max(1.0, abs(np.mean(y))) or not varying.any():
        return ConstantModel(n_features, float(np.mean(y)), train_rmse=float(np.std(y)))

    if isinstance(lambda_grid, str):
        standardized = (design[:, varying] - center[varying]) / scale[varying]
        alphas = auto_lambda_grid(standardized, y, n_lambda)
    else:
        alphas = np.sort(np.asarray(lambda_grid, dtype=float))[::-1]

    if len(alphas) == 1:
        best = 0
    else:
        folds = KFold(n_splits=cv_folds, shuffle=True, random_state=seed)
        cv_errors = np.zeros((cv_folds, len(alphas)))
        for fold_index, (train, test) in enumerate(folds.split(design)):
            intercept, coef, _ = _lasso_coefficients(design[train], y[train], alphas)
            prediction = intercept + design[test] @ coef
            cv_errors[fold_index] = np.mean((y[test, None] - prediction) ** 2, axis=0)
        best = int(np.argmin(cv_errors.mean(axis=0)))

    intercept, coef, _ = _lasso_coefficients(design, y, alphas[: best + 1])
    model = LassoModel(
        n_features,
        float(intercept[-1]),
        coef[:, -1],
        float(alphas[best]),
        dictionary=dictionary,
        interactions=interactions,
    )
    model.train_rmse = rmse(y, model.predict(x))
    logger.debug(
        "Lasso fit: lambda %.6g (%s of %s), %s active of %s",
        model.alpha,
        best + 1,
        len(alphas),
        int(np.count_nonzero(model.coef)),
        design.shape[1],
    )
    return model


def fit_linear(x: np.ndarray, y: np.ndarray) -> FittedModel:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    regression = LinearRegression().fit(x, y)
    return LinearModel(x.shape[1], regression, rmse(y, regression.predict(x)))


def fit_learner(
    spec: LearnerSpec, x: np.ndarray, y: np.ndarray, seed: int | None = None
) -> FittedModel:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    seed = spec.seed if seed is None else seed

    if x.shape[1] == 0:
        return ConstantModel(0, float(np.mean(y)), train_rmse=float(np.std(y)))

    if spec.kind == "lasso":
        return fit_lasso(
            x,
            y,
            lambda_grid=spec.lambda_grid or "auto",
            cv_folds=spec.cv_folds,
            n_lambda=spec.n_lambda,
            dictionary=spec.dictionary,
            interactions=spec.interactions,
            seed=seed,
        )

    if spec.kind == "boosting":
        return fit_boosting(
            x,
            y,
            nrounds=spec.nrounds,
            maxdepth=spec.maxdepth,
            l2_lambda=spec.l2_lambda,
            shrinkage=spec.shrinkage,
            seed=seed,
        )

    if spec.kind == "mlp":
        return fit_mlp(
            x, y, size=spec.size, decay=spec.decay, maxit=spec.maxit, seed=seed
        )

    return fit_linear(x, y)


# Config keys follow the tuning table names; lasso and boosting penalties are
# kept apart as lasso_lambda and lambda.
CONFIG_KEYS = {
    "kind": "kind",
    "lasso_lambda": "lambda_grid",
    "nlambda": "n_lambda",
    "cv_folds": "cv_folds",
    "dictionary": "dictionary",
    "interactions": "interactions",
    "nrounds": "nrounds",
    "maxdepth": "maxdepth",
    "lambda": "l2_lambda",
    "eta": "shrinkage",
    "size": "size",
    "decay": "decay",
    "maxit": "maxit",
    "tune": "tune",
    "seed": "seed",
}


def learner_spec_to_config(spec: LearnerSpec, prefix: str = "learner") -> dict[str, str]:
    values = {}
    for key, attribute in CONFIG_KEYS.items():
        value = getattr(spec, attribute)
        if attribute == "lambda_grid":
            value = "auto" if value is None else ",".join(repr(float(v)) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        values[f"{prefix}.{key}"] = str(value)
    return values


def learner_spec_from_config(
    values: Mapping[str, str | None],
    prefix: str = "learner",
    base: LearnerSpec | None = None,
) -> LearnerSpec:
    base = base or LearnerSpec()
    types = {field.name: field.type for field in fields(LearnerSpec)}
    overrides = {}

    for key, raw_value in values.items():
        if not key.startswith(prefix + "."):
            continue

        name = key[len(prefix) + 1 :]
        if "." in name:
            continue

        if name not in CONFIG_KEYS:
            raise ConfigError(f"unknown learner key: {key}")

        attribute = CONFIG_KEYS[name]
        overrides[attribute] = _parse_value(key, attribute, types[attribute], raw_value)

    return replace(base, **overrides)


def _parse_value(key: str, attribute: str, annotation, raw_value: str | None):
    text = (raw_value or "").strip()
    try:
        if attribute == "lambda_grid":
            if text.lower() in ("", "auto"):
                return None
            return tuple(float(part) for part in text.split(","))
        if annotation in (bool, "bool"):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if annotation in (int, "int"):
            return int(text)
        if annotation in (float, "float"):
            return float(text)
        return text
    except ValueError as error:
        raise ConfigError(f"invalid value for {key}: {raw_value!r}") from error
