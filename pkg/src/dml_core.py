"""Cross-fitted orthogonal estimation for the first-differenced panel IV model.

Per fold k, with u = Ỹ - l̂, w = D̃ - r̂ and V = Z̃ - M̂:

    π̂_k = (V'V)⁻¹ V'w        first stage
    δ̂_k = (V'V)⁻¹ V'u        reduced form
    θ̂_k = (Vπ̂_k)'u / (Vπ̂_k)'w

Point estimates are fold means. Variances are cluster-robust sandwiches pooled
on the asymptotic scale with the fold-dispersion correction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from errors import ConfigError, DegenerateInstrumentError, NuisanceFitError
from learners import LearnerSpec, fit_learner
from models import FittedModel
from panel_data import DifferencedSample, FoldAssignment, block_kfold
from tuning import grid_search_tune

logger = logging.getLogger("dml")

WEAK_DENOMINATOR_TOL = 1e-10
CONDITION_LIMIT = 1e12


@dataclass(frozen=True, eq=False)
class NuisancePerturbation:
    dl: np.ndarray
    dr: np.ndarray
    dm: np.ndarray


@dataclass(frozen=True, eq=False)
class NuisancePredictions:
    lhat: np.ndarray
    rhat: np.ndarray
    mhat: np.ndarray
    fold_ids: np.ndarray
    mse_l: float = 0.0
    mse_r: float = 0.0
    mse_m: float = 0.0
    training_units: dict = field(default_factory=dict)

    @classmethod
    def from_predictions(
        cls,
        fd: DifferencedSample,
        lhat: np.ndarray,
        rhat: np.ndarray,
        mhat: np.ndarray,
        fold_ids: np.ndarray,
    ) -> NuisancePredictions:
        mhat = np.asarray(mhat, dtype=float).reshape(fd.n_rows, -1)
        return cls(
            lhat=np.asarray(lhat, dtype=float),
            rhat=np.asarray(rhat, dtype=float),
            mhat=mhat,
            fold_ids=np.asarray(fold_ids, dtype=int),
            mse_l=float(np.mean((fd.ytilde - lhat) ** 2)),
            mse_r=float(np.mean((fd.dtilde - rhat) ** 2)),
            mse_m=float(np.mean((fd.ztilde - mhat) ** 2)),
        )

    def subset(self, mask: np.ndarray) -> NuisancePredictions:
        return replace(
            self,
            lhat=self.lhat[mask],
            rhat=self.rhat[mask],
            mhat=self.mhat[mask],
            fold_ids=self.fold_ids[mask],
        )

    def perturbed(self, direction: NuisancePerturbation, eps: float) -> NuisancePredictions:
        return replace(
            self,
            lhat=self.lhat + eps * direction.dl,
            rhat=self.rhat + eps * direction.dr,
            mhat=self.mhat + eps * np.asarray(direction.dm).reshape(self.mhat.shape),
        )


@dataclass(frozen=True, eq=False)
class FoldEstimate:
    fold: int
    n_units: int
    n_rows: int
    theta: float
    pi: np.ndarray
    delta: np.ndarray
    q_vv: np.ndarray
    q_vr: float
    var_theta: float
    var_pi: np.ndarray
    var_delta: np.ndarray
    cov_delta_pi: np.ndarray
    weak_denominator: bool = False
    var_delta_fixed: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class DmlEstimate:
    theta: float
    pi: np.ndarray
    delta: np.ndarray
    sigma_theta: float
    sigma_pi: np.ndarray
    sigma_delta: np.ndarray
    sigma_delta_pi: np.ndarray
    fold_estimates: tuple[FoldEstimate, ...]
    n_units: int
    n_rows: int
    n_clusters: int
    model_rmse: float
    mse_l: float
    mse_r: float
    mse_m: float
    weak_denominator: bool = False
    estimator: str = "panel_iv_dml"
    sigma_delta_fixed: np.ndarray | None = None

    @property
    def n_folds(self) -> int:
        return len(self.fold_estimates)

    @property
    def n_instruments(self) -> int:
        return len(self.pi)

    @property
    def se_theta(self) -> float:
        return float(np.sqrt(self.sigma_theta))

    @property
    def rmse_l(self) -> float:
        return float(np.sqrt(self.mse_l))

    @property
    def rmse_r(self) -> float:
        return float(np.sqrt(self.mse_r))

    @property
    def rmse_m(self) -> float:
        return float(np.sqrt(self.mse_m))


def _fit_target(
    spec: LearnerSpec, x: np.ndarray, y: np.ndarray, seed: int
) -> FittedModel:
    if spec.tune:
        spec = grid_search_tune(spec, x, y, cv_folds=spec.cv_folds, seed=seed)
    return fit_learner(spec, x, y, seed=seed)


def learn_nuisances(
    fd: DifferencedSample,
    folds: FoldAssignment,
    spec_l: LearnerSpec,
    spec_r: LearnerSpec | None = None,
    spec_m: LearnerSpec | None = None,
    n_jobs: int = 1,
    logger: logging.Logger = logger,
) -> NuisancePredictions:
    spec_r = spec_r or spec_l
    spec_m = spec_m or spec_l
    fold_ids = folds.fold_of(fd.units)

    def fit_fold(k: int):
        fold_logger = logger.getChild(f"fold_{k}")
        train = fold_ids != k
        test = fold_ids == k
        if not train.any():
            raise ConfigError(f"fold {k} leaves no training rows")

        predictions = {}
        targets = [("l", spec_l, fd.ytilde), ("r", spec_r, fd.dtilde)] + [
            (f"m{j + 1}", spec_m, fd.ztilde[:, j]) for j in range(fd.n_instruments)
        ]
        for target, spec, y in targets:
            try:
                model = _fit_target(spec, fd.xpair[train], y[train], spec.seed + k)
                predictions[target] = model.predict(fd.xpair[test])
            except ConfigError:
                raise
            except Exception as error:
                fold_logger.error("Fitting %s failed: %s", target, error)
                raise NuisanceFitError(k, target, error) from error

            if not np.all(np.isfinite(predictions[target])):
                raise NuisanceFitError(k, target, ValueError("non-finite predictions"))

        fold_logger.debug(
            "Fitted nuisances on %s rows, predicted %s rows", train.sum(), test.sum()
        )
        return k, test, predictions

    results = Parallel(n_jobs=n_jobs, backend="threading")(
        delayed(fit_fold)(k) for k in range(1, folds.n_folds + 1)
    )

    lhat = np.zeros(fd.n_rows)
    rhat = np.zeros(fd.n_rows)
    mhat = np.zeros((fd.n_rows, fd.n_instruments))
    training_units = {}
    for k, test, predictions in results:
        lhat[test] = predictions["l"]
        rhat[test] = predictions["r"]
        for j in range(fd.n_instruments):
            mhat[test, j] = predictions[f"m{j + 1}"]
        training_units[k] = frozenset(
            unit for unit, fold in folds.folds.items() if fold != k
        )

    nuisances = NuisancePredictions.from_predictions(fd, lhat, rhat, mhat, fold_ids)
    nuisances = replace(nuisances, training_units=training_units)
    logger.info(
        "Out-of-fold RMSE: l %.4g, r %.4g, m %.4g",
        np.sqrt(nuisances.mse_l),
        np.sqrt(nuisances.mse_r),
        np.sqrt(nuisances.mse_m),
    )
    return nuisances


def cluster_meat(scores: np.ndarray, clusters: np.ndarray) -> np.ndarray:
    """Sum over clusters of the outer product of within-cluster score sums."""
    scores = np.asarray(scores, dtype=float)
    if scores.ndim == 1:
        scores = scores[:, None]
    codes, uniques = pd.factorize(clusters)
    sums = np.zeros((len(uniques), scores.shape[1]))
    np.add.at(sums, codes, scores)
    return sums.T @ sums


def estimate_fold(
    fd_k: DifferencedSample,
    nuis_k: NuisancePredictions,
    fold: int = 0,
    logger: logging.Logger = logger,
) -> FoldEstimate:
    u = fd_k.ytilde - nuis_k.lhat
    w = fd_k.dtilde - nuis_k.rhat
    v = fd_k.ztilde - nuis_k.mhat
    n_rows = len(u)

    q_vv = v.T @ v
    condition = np.linalg.cond(q_vv) if n_rows >= v.shape[1] else np.inf
    if not np.isfinite(condition) or condition > CONDITION_LIMIT:
        raise DegenerateInstrumentError(
            f"fold {fold}: degenerate instrument variation"
        )

    q_vv_inv = np.linalg.inv(q_vv)
    pi = q_vv_inv @ (v.T @ w)
    delta = q_vv_inv @ (v.T @ u)
    v_perp = v @ pi
    q_vr = float(v_perp @ w)

    scale = np.std(fd_k.dtilde) if n_rows > 1 else 0.0
    weak = abs(q_vr) / n_rows < WEAK_DENOMINATOR_TOL * scale or q_vr == 0.0
    if weak:
        logger.warning(
            "Fold %s: weak denominator |V⊥'(D̃ - r̂)| = %.3g; defer inference to AR",
            fold,
            abs(q_vr),
        )

    theta = float(v_perp @ u) / q_vr if q_vr != 0.0 else float("nan")

    var_theta = float("nan")
    if q_vr != 0.0:
        structural_score = v_perp * (u - w * theta)
        var_theta = float(cluster_meat(structural_score, fd_k.cluster)[0, 0]) / q_vr**2

    # first-stage and reduced-form scores are centred at their own estimates
    r = v.shape[1]
    first_stage_score = v * (w - v @ pi)[:, None]
    reduced_form_score = v * (u - v @ delta)[:, None]
    joint = cluster_meat(np.hstack([first_stage_score, reduced_form_score]), fd_k.cluster)
    var_pi = q_vv_inv @ joint[:r, :r] @ q_vv_inv
    var_delta = q_vv_inv @ joint[r:, r:] @ q_vv_inv
    cov_delta_pi = q_vv_inv @ joint[r:, :r] @ q_vv_inv

    # Σδδ from the raw reduced-form products, used by the fixed-variance AR
    var_delta_fixed = q_vv_inv @ cluster_meat(v * u[:, None], fd_k.cluster) @ q_vv_inv

    return FoldEstimate(
        fold=fold,
        n_units=len(fd_k.unit_ids),
        n_rows=n_rows,
        theta=theta,
        pi=pi,
        delta=delta,
        q_vv=q_vv,
        q_vr=q_vr,
        var_theta=var_theta,
        var_pi=_symmetric(var_pi),
        var_delta=_symmetric(var_delta),
        cov_delta_pi=cov_delta_pi,
        weak_denominator=weak,
        var_delta_fixed=_symmetric(var_delta_fixed),
    )


def pool_fold_estimates(
    values: list, variances: list, sizes: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Fold mean and pooled variance of one parameter block.

    avar = Σ_k w_k [N_k·V_k + (b_k - b̄)(b_k - b̄)'] with w_k = N_k/N; returns avar/N.
    """
    values = [np.atleast_1d(np.asarray(value, dtype=float)) for value in values]
    mean = np.mean(values, axis=0)
    total = sizes.sum()
    avar = np.zeros((len(mean), len(mean)))
    for value, variance, size in zip(values, variances, sizes):
        deviation = value - mean
        avar += (size / total) * (size * np.atleast_2d(variance) + np.outer(deviation, deviation))
    return mean, avar / total


def _pool_cross(fold_estimates, delta, pi, sizes: np.ndarray) -> np.ndarray:
    total = sizes.sum()
    avar = np.zeros((len(delta), len(pi)))
    for estimate, size in zip(fold_estimates, sizes):
        avar += (size / total) * (
            size * estimate.cov_delta_pi
            + np.outer(estimate.delta - delta, estimate.pi - pi)
        )
    return avar / total


def aggregate(
    fold_estimates: list[FoldEstimate],
    fd: DifferencedSample,
    nuis: NuisancePredictions,
    estimator: str = "panel_iv_dml",
) -> DmlEstimate:
    if len(fold_estimates) < 2:
        raise ConfigError("K ≥ 2 required")

    sizes = np.array([estimate.n_units for estimate in fold_estimates], dtype=float)

    _, sigma_theta = pool_fold_estimates(
        [estimate.theta for estimate in fold_estimates],
        [estimate.var_theta for estimate in fold_estimates],
        sizes,
    )
    pi, sigma_pi = pool_fold_estimates(
        [estimate.pi for estimate in fold_estimates],
        [estimate.var_pi for estimate in fold_estimates],
        sizes,
    )
    delta, sigma_delta = pool_fold_estimates(
        [estimate.delta for estimate in fold_estimates],
        [estimate.var_delta for estimate in fold_estimates],
        sizes,
    )
    sigma_delta_pi = _pool_cross(fold_estimates, delta, pi, sizes)

    sigma_delta_fixed = None
    if all(estimate.var_delta_fixed is not None for estimate in fold_estimates):
        _, sigma_delta_fixed = pool_fold_estimates(
            [estimate.delta for estimate in fold_estimates],
            [estimate.var_delta_fixed for estimate in fold_estimates],
            sizes,
        )
        sigma_delta_fixed = _symmetric(sigma_delta_fixed)

    theta = fold_mean_theta(fold_estimates)
    structural_residual = (fd.ytilde - nuis.lhat) - (fd.dtilde - nuis.rhat) * theta

    return DmlEstimate(
        theta=theta,
        pi=pi,
        delta=delta,
        sigma_theta=float(sigma_theta[0, 0]),
        sigma_pi=_symmetric(sigma_pi),
        sigma_delta=_symmetric(sigma_delta),
        sigma_delta_pi=sigma_delta_pi,
        fold_estimates=tuple(fold_estimates),
        n_units=len(fd.unit_ids),
        n_rows=fd.n_rows,
        n_clusters=len(pd.unique(fd.cluster)),
        model_rmse=float(np.sqrt(np.mean(structural_residual**2))),
        mse_l=nuis.mse_l,
        mse_r=nuis.mse_r,
        mse_m=nuis.mse_m,
        weak_denominator=any(estimate.weak_denominator for estimate in fold_estimates),
        estimator=estimator,
        sigma_delta_fixed=sigma_delta_fixed,
    )


def estimate_folds(
    fd: DifferencedSample, nuis: NuisancePredictions, logger: logging.Logger = logger
) -> list[FoldEstimate]:
    return [
        estimate_fold(
            fd.subset(nuis.fold_ids == k),
            nuis.subset(nuis.fold_ids == k),
            fold=int(k),
            logger=logger.getChild(f"fold_{k}"),
        )
        for k in np.unique(nuis.fold_ids)
    ]


def orthogonality_probe(
    fd: DifferencedSample,
    nuis: NuisancePredictions,
    estimate: DmlEstimate,
    direction: NuisancePerturbation,
    eps: float,
) -> float:
    """θ̂ recomputed at perturbed nuisances minus θ̂ at the fitted ones."""
    perturbed = nuis.perturbed(direction, eps)
    fold_estimates = estimate_folds(fd, perturbed, logger=logging.getLogger("dml.probe"))
    return fold_mean_theta(fold_estimates) - estimate.theta


def fold_mean_theta(fold_estimates: list[FoldEstimate]) -> float:
    return float(np.mean([estimate.theta for estimate in fold_estimates]))


def _symmetric(matrix: np.ndarray) -> np.ndarray:
    return (matrix + matrix.T) / 2.0


class PanelIvDml:
    def __init__(
        self,
        spec_l: LearnerSpec,
        spec_r: LearnerSpec | None = None,
        spec_m: LearnerSpec | None = None,
        n_folds: int = 3,
        seed: int = 0,
        n_jobs: int = 1,
        logger: logging.Logger | None = None,
    ):
        if n_folds < 2:
            raise ConfigError("K ≥ 2 required")

        self.spec_l = spec_l
        self.spec_r = spec_r or spec_l
        self.spec_m = spec_m or spec_l
        self.n_folds = n_folds
        self.seed = seed
        self.n_jobs = n_jobs
        self.logger = logger or logging.getLogger("dml")
        self.folds_: FoldAssignment | None = None
        self.nuisances_: NuisancePredictions | None = None
        self.estimate_: DmlEstimate | None = None

    def fit(self, fd: DifferencedSample) -> DmlEstimate:
        self.folds_ = block_kfold(fd.unit_ids, self.n_folds, self.seed)
        self.logger.info(
            "Cross-fitting %s folds over %s units (sizes %s)",
            self.n_folds,
            len(fd.unit_ids),
            self.folds_.sizes(),
        )

        self.nuisances_ = learn_nuisances(
            fd,
            self.folds_,
            self.spec_l,
            self.spec_r,
            self.spec_m,
            n_jobs=self.n_jobs,
            logger=self.logger,
        )
        fold_estimates = estimate_folds(fd, self.nuisances_, logger=self.logger)
        self.estimate_ = aggregate(fold_estimates, fd, self.nuisances_)

        self.logger.info(
            "theta %.6g (se %.4g), model RMSE %.4g",
            self.estimate_.theta,
            self.estimate_.se_theta,
            self.estimate_.model_rmse,
        )
        return self.estimate_

    def probe(self, fd: DifferencedSample, direction: NuisancePerturbation, eps: float) -> float:
        if self.nuisances_ is None or self.estimate_ is None:
            raise RuntimeError("fit must run before probing orthogonality")
        return orthogonality_probe(fd, self.nuisances_, self.estimate_, direction, eps)
