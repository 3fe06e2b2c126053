import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import pandas as pd

from dml_core import DmlEstimate, NuisancePredictions, estimate_fold
from errors import RankDeficiencyError
from panel_data import DifferencedSample
from weak_iv import WeakIvReport, weak_iv_report

logger = logging.getLogger("tsls")


@dataclass(frozen=True, eq=False)
class TslsEstimate(DmlEstimate):
    controls: tuple[str, ...] = ()
    weak_iv: WeakIvReport | None = None


def _select_controls(
    fd: DifferencedSample, controls: Sequence[str | int] | None
) -> tuple[np.ndarray, tuple[str, ...]]:
    names = fd.xpair_names
    if controls is None:
        return fd.xpair, names

    indices = []
    for control in controls:
        if isinstance(control, (int, np.integer)):
            indices.append(int(control))
        elif control in names:
            indices.append(names.index(control))
        else:
            raise RankDeficiencyError("unknown control column", [str(control)])
    return fd.xpair[:, indices], tuple(names[index] for index in indices)


def _full_rank_or_raise(design: np.ndarray, names: Sequence[str], what: str):
    kept = np.empty((design.shape[0], 0))
    offending = []
    for column, name in zip(design.T, names):
        candidate = np.column_stack([kept, column])
        if np.linalg.matrix_rank(candidate) > kept.shape[1]:
            kept = candidate
        else:
            offending.append(name)

    if offending:
        raise RankDeficiencyError(f"rank-deficient {what}", offending)


def estimate_2sls_fd(
    fd: DifferencedSample,
    controls: Sequence[str | int] | None = None,
    theta0: float = 0.0,
    level: float = 0.95,
    variance: str = "null_imposed",
    logger: logging.Logger = logger,
) -> TslsEstimate:
    """Linear IV on first differences with controls partialled out.

    An intercept always enters the control set, so with no other controls the
    estimate is the demeaned IV ratio.
    """
    control_block, control_names = _select_controls(fd, controls)
    design = np.column_stack([np.ones(fd.n_rows), control_block])
    design_names = ("intercept", *control_names)

    _full_rank_or_raise(design, design_names, "controls")
    _full_rank_or_raise(
        np.column_stack([design, fd.ztilde]),
        (*design_names, *(fd.z_names or [f"z{j + 1}" for j in range(fd.n_instruments)])),
        "instruments given the controls",
    )

    targets = np.column_stack([fd.ytilde, fd.dtilde, fd.ztilde])
    coefficients, *_ = np.linalg.lstsq(design, targets, rcond=None)
    fitted = design @ coefficients

    nuisances = NuisancePredictions.from_predictions(
        fd,
        lhat=fitted[:, 0],
        rhat=fitted[:, 1],
        mhat=fitted[:, 2:],
        fold_ids=np.zeros(fd.n_rows, dtype=int),
    )
    fold = estimate_fold(fd, nuisances, fold=0, logger=logger)

    structural_residual = (fd.ytilde - nuisances.lhat) - (fd.dtilde - nuisances.rhat) * fold.theta
    estimate = TslsEstimate(
        theta=fold.theta,
        pi=fold.pi,
        delta=fold.delta,
        sigma_theta=fold.var_theta,
        sigma_pi=fold.var_pi,
        sigma_delta=fold.var_delta,
        sigma_delta_pi=fold.cov_delta_pi,
        fold_estimates=(fold,),
        n_units=len(fd.unit_ids),
        n_rows=fd.n_rows,
        n_clusters=len(pd.unique(fd.cluster)),
        model_rmse=float(np.sqrt(np.mean(structural_residual**2))),
        mse_l=nuisances.mse_l,
        mse_r=nuisances.mse_r,
        mse_m=nuisances.mse_m,
        weak_denominator=fold.weak_denominator,
        estimator="2sls_fd",
        sigma_delta_fixed=fold.var_delta_fixed,
        controls=control_names,
    )

    logger.info(
        "2SLS-FD theta %.6g (se %.4g) with %s controls",
        estimate.theta,
        estimate.se_theta,
        len(control_names),
    )
    report = weak_iv_report(estimate, theta0=theta0, level=level, variance=variance, logger=logger)
    return replace(estimate, weak_iv=report)
