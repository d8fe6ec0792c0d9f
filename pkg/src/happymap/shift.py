"""Prediction under covariate shift, missing features and demographic parity.

Every pipeline here is a thin configuration of :func:`happymap.engine.fit`;
what changes is the mapping, the projection range and the auditor family
(propensity-ratio weights, weighted residual composites, centered groups).
Target-domain data is used for evaluation only.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from happymap.auditors import (
    Auditor,
    AuditorFamily,
    CompositeFamily,
    make_centered_family,
    make_propensity_family,
    make_shift_composite_family,
)
from happymap.chain import PredictorChain, predict_batch
from happymap.core import BasePredictor, Dataset, FitConfig, ProjectionInterval, RejectedConfig, RejectedInput, RunReport
from happymap.engine import fit
from happymap.fairness import fit_lower_bound
from happymap.mappings import DEFAULT_DENSITY_BOUND, Mapping

UNIT = ProjectionInterval.unit()


def _unit_labels(ds: Dataset, what: str) -> np.ndarray:
    y = ds.require_labels()
    if np.any(y < 0) or np.any(y > 1):
        raise RejectedInput(f"{what} labels must lie in [0, 1]")
    return y


def _default_f0(y) -> BasePredictor:
    return BasePredictor.constant(float(np.clip(np.mean(y), 0.0, 1.0)))


@dataclass(frozen=True)
class MseEval:
    """Squared error of the fitted chain and of f0 on an evaluation sample."""

    n: int
    mse: float
    mse_f0: float
    reference: str

    def as_dict(self) -> dict:
        return {"n": self.n, "mse": self.mse, "mse_f0": self.mse_f0, "reference": self.reference}


def _mse_eval(chain: PredictorChain, X, reference: np.ndarray, what: str) -> MseEval:
    f = predict_batch(chain, X)
    f0 = np.clip(chain.f0(X), chain.proj.lo, chain.proj.hi)
    return MseEval(len(reference), float(np.mean((f - reference) ** 2)), float(np.mean((f0 - reference) ** 2)), what)


def fit_universal_l2(
    source: Dataset,
    theta_grid,
    p_list: Sequence[BasePredictor],
    config: FitConfig,
    f0: BasePredictor | None = None,
    clamp=(0.05, 0.95),
    target: Dataset | None = None,
    cond_mean: Callable | None = None,
) -> tuple[PredictorChain, RunReport, MseEval | None]:
    """Residual fit on the source, audited by ratio(x) * (f(x) - p(x)).

    With ``target`` given the chain is scored there: against ``cond_mean``
    (squared error to the regression function) when supplied, otherwise
    against the target labels.
    """
    y = _unit_labels(source, "source")
    family = make_shift_composite_family(theta_grid, p_list, clamp)
    f0 = f0 if f0 is not None else _default_f0(y)
    chain, rep = fit(config, source, family, Mapping.residual(), f0, UNIT)
    ev = None
    if target is not None:
        X = target.features
        if cond_mean is not None:
            ev = _mse_eval(chain, X, np.asarray(cond_mean(X), dtype=float), "cond_mean")
        else:
            ev = _mse_eval(chain, X, target.require_labels(), "labels")
    return chain, rep, ev


def shift_propensity_family(theta_grid, clamp=(0.05, 0.95)) -> AuditorFamily:
    """Propensity-ratio family with theta = 0 (the constant auditor) always present."""
    grid = [tuple(float(t) for t in th) for th in theta_grid]
    if not grid:
        raise RejectedConfig("theta grid is empty")
    zero = tuple(0.0 for _ in grid[0])
    if zero not in grid:
        grid = [zero] + grid
    return make_propensity_family(grid, clamp, "odds")


def fit_shift_conformal(
    delta: float,
    source: Dataset,
    theta_grid,
    config: FitConfig,
    f0: BasePredictor | None = None,
    clamp=(0.05, 0.95),
    density_bound: float = DEFAULT_DENSITY_BOUND,
) -> tuple[PredictorChain, RunReport]:
    """Lower bound l whose ratio-weighted source coverage error is within
    alpha of zero for every propensity in the grid."""
    family = shift_propensity_family(theta_grid, clamp)
    return fit_lower_bound(delta, source, family, config, f0, density_bound=density_bound)


@dataclass(frozen=True)
class CoverageEval:
    n: int
    coverage: float
    target: float
    deviation: float
    se: float

    def as_dict(self) -> dict:
        return {"n": self.n, "coverage": self.coverage, "target": self.target, "deviation": self.deviation, "se": self.se}


def lower_bound_coverage(chain: PredictorChain, data: Dataset, delta: float) -> CoverageEval:
    """Empirical P(l(x) <= y) on ``data`` against the nominal 1 - delta."""
    y = data.require_labels()
    p = float(np.mean(predict_batch(chain, data.features) <= y))
    return CoverageEval(data.n, p, 1.0 - delta, p - (1.0 - delta), float(np.sqrt(p * (1.0 - p) / data.n)))


def fit_missing(
    dataset: Dataset,
    weight_family: AuditorFamily | tuple,
    config: FitConfig,
    f0: BasePredictor | None = None,
    complete_copy: Dataset | None = None,
    cond_mean: Callable | None = None,
) -> tuple[PredictorChain, RunReport, MseEval | None]:
    """Residual fit on the complete rows only, audited by weighted residual
    composites so the fit transfers to the full population.

    ``weight_family`` is either a ready family or ``(theta_grid, p_list)``,
    in which case inverse-propensity weights 1/sigma are used with sigma
    the complete-case propensity. With ``complete_copy`` given, the chain is
    scored on every row of that fully observed copy.
    """
    if dataset.complete_flag is None:
        raise RejectedInput("dataset has no completeness information")
    rows = np.flatnonzero(dataset.complete_flag)
    if rows.size == 0:
        raise RejectedInput("no complete rows to fit on")
    work = dataset.subset(rows)
    y = _unit_labels(work, "complete-row")
    if isinstance(weight_family, tuple):
        thetas, p_list = weight_family
        weight_family = make_shift_composite_family(thetas, p_list, clamp=(0.05, 0.95), form="inverse")
    f0 = f0 if f0 is not None else _default_f0(y)
    chain, rep = fit(config, work, weight_family, Mapping.residual(), f0, UNIT)
    ev = None
    if complete_copy is not None:
        X = complete_copy.features
        ref = np.asarray(cond_mean(X), dtype=float) if cond_mean is not None else complete_copy.require_labels()
        ev = _mse_eval(chain, X, ref, "cond_mean" if cond_mean is not None else "labels")
    return chain, rep, ev


def fit_multiparity(
    dataset: Dataset,
    g_family: Sequence[Auditor] | AuditorFamily,
    config: FitConfig,
    f0: BasePredictor,
) -> tuple[PredictorChain, RunReport]:
    """Push the expected selection rate f toward parity across groups:
    |mean((g - mean g) * f)| <= alpha for every group auditor g."""
    base = list(g_family.base) if hasattr(g_family, "base") else list(g_family)
    if not base:
        raise RejectedConfig("parity needs at least one group auditor")
    family = make_centered_family(base, dataset.features)
    v0 = f0(dataset.features)
    if np.any(v0 < 0) or np.any(v0 > 1):
        raise RejectedInput("parity f0 must take values in [0, 1]")
    return fit(config, dataset, family, Mapping.parity(), f0, UNIT)


def selection_rates(values, X, groups: Sequence[Auditor]) -> list[float]:
    """Mean prediction within each group."""
    out = []
    for g in groups:
        m = g(np.zeros(len(values)), X) != 0
        out.append(float(np.mean(np.asarray(values)[m])) if m.any() else float("nan"))
    return out


# --------------------------------------------------------------------------
# reports

SHIFT_HEADER = ["scenario", "n_source", "n_target", "metric", "value", "deviation", "realizable"]


def shift_report_row(scenario: str, n_source: int, n_target: int, metric: str, value: float, deviation: float, realizable: bool) -> list:
    return [scenario, n_source, n_target, metric, value, deviation, "yes" if realizable else "no"]


def write_shift_report(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SHIFT_HEADER)
        w.writerows(rows)


__all__ = [
    "CompositeFamily",
    "CoverageEval",
    "MseEval",
    "fit_missing",
    "fit_multiparity",
    "fit_shift_conformal",
    "fit_universal_l2",
    "lower_bound_coverage",
    "selection_rates",
    "shift_propensity_family",
    "write_shift_report",
]
