"""The projected auditor-driven update loop.

The fit runs on a tabular representation (one current value per working
row) and emits the equivalent compositional :class:`PredictorChain`.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from happymap.auditors import AuditorFamily, Auditor
from happymap.chain import PredictorChain, Step
from happymap.core import (
    BasePredictor,
    Dataset,
    FitConfig,
    IterationRecord,
    Mode,
    NonFiniteError,
    ProjectionInterval,
    RejectedInput,
    RunReport,
    Schedule,
    Status,
)
from happymap.mappings import Mapping

log = logging.getLogger(__name__)


@dataclass
class FitState:
    values: np.ndarray
    steps: list[Step]
    iteration: int
    potential: float


@dataclass(frozen=True)
class Updated:
    auditor: Auditor
    violation: float
    potential_before: float
    potential_after: float


@dataclass(frozen=True)
class NoViolator:
    violation: float


@dataclass(frozen=True)
class AuditReport:
    table: list[tuple[str, float]]
    max_abs_violation: float


def _labels(dataset: Dataset, mapping: Mapping):
    return dataset.require_labels() if mapping.uses_labels else None


def _check_finite(v, what):
    if not np.all(np.isfinite(v)):
        bad = int(np.flatnonzero(~np.isfinite(v))[0])
        raise NonFiniteError(f"non-finite {what} at row {bad}")


def mean_potential(values, dataset: Dataset, mapping: Mapping) -> float:
    return float(np.mean(mapping.potential(values, _labels(dataset, mapping))))


def init_state(dataset: Dataset, mapping: Mapping, f0: BasePredictor, proj: ProjectionInterval) -> FitState:
    values = proj.clamp(f0(dataset.features))
    _check_finite(values, "initial prediction")
    return FitState(values, [], 0, mean_potential(values, dataset, mapping))


def step(
    state: FitState,
    dataset: Dataset,
    family: AuditorFamily,
    mapping: Mapping,
    *,
    eta: float,
    threshold: float,
    proj: ProjectionInterval,
    rows=None,
    evaluator=None,
) -> Updated | NoViolator:
    """One pass of the loop body.

    The weak learner searches ``rows`` (all rows by default). When the best
    violation exceeds ``threshold`` every working value is moved to
    clamp(v - eta * c(v, x)); otherwise the state is left untouched.
    """
    X = dataset.features
    y = _labels(dataset, mapping)
    if rows is None:
        v_aud, y_aud = state.values, y
        ev = evaluator if evaluator is not None else family.evaluator(X)
    else:
        v_aud = state.values[rows]
        y_aud = None if y is None else y[rows]
        ev = evaluator if evaluator is not None else family.evaluator(X[rows])
    s = mapping.s(v_aud, y_aud)
    auditor, viol = ev.best(v_aud, s)
    if not viol > threshold:
        return NoViolator(viol)
    c = auditor(state.values, X)
    new = np.clip(state.values - eta * c, proj.lo, proj.hi)
    _check_finite(new, "updated prediction")
    before = state.potential
    state.values = new
    state.steps.append(Step(auditor, eta))
    state.iteration += 1
    state.potential = float(np.mean(mapping.potential(new, y)))
    return Updated(auditor, viol, before, state.potential)


def default_fold_size(alpha: float, dim_estimate: float, confidence: float = 0.05) -> int:
    return max(200, math.ceil((dim_estimate + math.log(1.0 / confidence)) * 16.0 / alpha**2))


def resolve_schedule(config: FitConfig, family: AuditorFamily, mapping: Mapping, dataset: Dataset, potential0: float) -> Schedule:
    floor = mapping.potential_floor(_labels(dataset, mapping))
    return config.resolve(mapping.kappa, family.b_bound, potential0, floor)


def fit(
    config: FitConfig,
    dataset: Dataset,
    family: AuditorFamily,
    mapping: Mapping,
    f0: BasePredictor,
    proj: ProjectionInterval | None = None,
) -> tuple[PredictorChain, RunReport]:
    """Run the update loop and return the fitted chain and its audit trail.

    Population mode audits every row each iteration against alpha.
    FreshFolds audits a new disjoint fold per iteration against 3alpha/4;
    Reuse audits the same full set against 3alpha/4 (no correction for
    adaptive reuse). Updates are always applied to every working row.
    """
    proj = proj if proj is not None else ProjectionInterval()
    if dataset.d < f0.min_dim:
        raise RejectedInput(f"f0 needs {f0.min_dim} features, data has {dataset.d}")
    state = init_state(dataset, mapping, f0, proj)
    c_lower = mapping.potential_floor(_labels(dataset, mapping))
    sched = config.resolve(mapping.kappa, family.b_bound, state.potential, c_lower)
    X = dataset.features
    n = dataset.n

    folds = None
    full_ev = family.evaluator(X)
    if config.mode is Mode.FRESH_FOLDS:
        m = config.fold_size or default_fold_size(config.alpha, family.dim_estimate)
        if m > n:
            warnings.warn(f"fold size {m} exceeds {n} rows; using one fold of all rows", stacklevel=2)
            m = n
        perm = np.random.default_rng(config.seed).permutation(n)
        n_folds = n // m
        if n_folds < sched.max_iters + 1:
            log.warning("only %d folds of size %d available for up to %d iterations", n_folds, m, sched.max_iters)
        folds = [np.sort(perm[k * m:(k + 1) * m]) for k in range(n_folds)]

    records: list[IterationRecord] = []
    status = Status.CONVERGED
    while True:
        t = state.iteration
        if folds is not None and t >= len(folds):
            status = Status.BUDGET_EXHAUSTED
            break
        if folds is not None:
            out = step(state, dataset, family, mapping, eta=sched.eta, threshold=sched.threshold, proj=proj, rows=folds[t])
        else:
            if t >= sched.max_iters:
                # budget reached: only the status depends on whether a violator remains
                probe = full_ev.best(state.values, mapping.s(state.values, _labels(dataset, mapping)))[1]
                if probe > sched.threshold:
                    status = Status.BUDGET_EXHAUSTED
                break
            out = step(state, dataset, family, mapping, eta=sched.eta, threshold=sched.threshold, proj=proj, evaluator=full_ev)
        if isinstance(out, NoViolator):
            break
        records.append(IterationRecord(t, out.auditor.auditor_id, out.violation, out.potential_before, out.potential_after))
        if folds is not None and state.iteration >= sched.max_iters:
            status = Status.BUDGET_EXHAUSTED
            break

    final = audit(state.values, dataset, family, mapping, evaluator=full_ev)
    report = RunReport(
        iterations=records,
        status=status,
        final_max_violation=final.max_abs_violation,
        alpha=config.alpha,
        mode=config.mode,
        eta=sched.eta,
        max_iters=sched.max_iters,
        auto_iters=sched.auto_iters,
        progress=sched.progress,
        potential_upper=records[0].potential_before if records else state.potential,
        potential_lower=c_lower,
        final_values=state.values,
    )
    chain = PredictorChain(f0, tuple(state.steps), proj, dataset.d)
    log.info("fit finished: %s after %d updates, max violation %.4g", status.value, len(records), final.max_abs_violation)
    return chain, report


def audit(predictions, dataset: Dataset, family: AuditorFamily, mapping: Mapping, evaluator=None) -> AuditReport:
    """Signed violation mean(c * s) for every member, and the largest magnitude."""
    v = np.asarray(predictions, dtype=float)
    if v.shape != (dataset.n,):
        raise RejectedInput("predictions must align with dataset rows")
    s = mapping.s(v, _labels(dataset, mapping))
    ev = evaluator if evaluator is not None else family.evaluator(dataset.features)
    table = ev.table(v, s)
    # Families are closed under negation, so the weak learner's correctly
    # rounded top value is the largest magnitude; it is the same number the
    # stopping rule compares against alpha.
    return AuditReport(table, abs(ev.best(v, s)[1]))
