"""Group-fair prediction intervals built on the quantile mapping.

One-sided lower bounds l with P(y >= l | c) close to 1 - delta for every
auditor c, two-sided intervals from two such bounds, intervals from a
thresholded non-conformity score, multivalid bounds, and the no-harm check.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from happymap.auditors import (
    Auditor,
    AuditorFamily,
    FiniteFamily,
    GroupIndicator,
    MultivalidityFamily,
    group_predicates,
    make_multivalidity_family,
)
from happymap.chain import PredictorChain, predict_batch
from happymap.core import BasePredictor, Dataset, FitConfig, ProjectionInterval, RejectedConfig, RunReport
from happymap.engine import fit
from happymap.mappings import DEFAULT_DENSITY_BOUND, Mapping
from happymap.synth import normals


def fit_lower_bound(
    delta: float,
    dataset: Dataset,
    family: AuditorFamily,
    config: FitConfig,
    f0: BasePredictor | None = None,
    proj: ProjectionInterval | None = None,
    density_bound: float = DEFAULT_DENSITY_BOUND,
) -> tuple[PredictorChain, RunReport]:
    """Fit l so that mean(c * ((1 - delta) - 1{l <= y})) is within alpha of 0
    for every auditor c.

    Defaults: f0 is the label mean, and predictions are clamped to the label
    range widened by one range on each side.
    """
    y = dataset.require_labels()
    if not np.all(np.isfinite(y)):
        raise RejectedConfig("labels must be finite")
    mapping = Mapping.quantile(delta, density_bound)
    if f0 is None:
        f0 = BasePredictor.constant(float(np.mean(y)))
    if proj is None:
        proj = ProjectionInterval.around_labels(y)
    return fit(config, dataset, family, mapping, f0, proj)


@dataclass(frozen=True)
class AbsResidualScore:
    """Non-conformity score |y - h(x)|; its q-sublevel set is [h - q, h + q]."""

    h: BasePredictor

    def __call__(self, X, y) -> np.ndarray:
        return np.abs(np.asarray(y, dtype=float) - self.h(X))

    def invert(self, X, q) -> tuple[np.ndarray, np.ndarray]:
        c = self.h(X)
        return c - q, c + q


@dataclass
class IntervalPredictor:
    """Prediction interval from two bound chains or from a score threshold.

    ``construction`` is ``two-chains`` or ``score-based``. A missing bound
    chain stands for an infinite endpoint.
    """

    construction: str
    lower: PredictorChain | None = None
    upper: PredictorChain | None = None
    threshold: PredictorChain | None = None
    score: Callable | None = None
    inverter: Callable | None = None
    metadata: dict = field(default_factory=dict)

    def bounds(self, X) -> tuple[np.ndarray, np.ndarray]:
        X = np.asarray(X, dtype=float)
        if self.construction == "score-based":
            return self.inverter(X, predict_batch(self.threshold, X))
        n = X.shape[0]
        lo = predict_batch(self.lower, X) if self.lower is not None else np.full(n, -np.inf)
        hi = predict_batch(self.upper, X) if self.upper is not None else np.full(n, np.inf)
        return lo, hi

    def contains(self, X, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if self.construction == "score-based":
            return self.score(X, y) <= predict_batch(self.threshold, np.asarray(X, dtype=float))
        lo, hi = self.bounds(X)
        return (lo <= y) & (y <= hi)

    def width(self, X) -> np.ndarray:
        lo, hi = self.bounds(X)
        return hi - lo


def fit_two_sided(
    delta: float,
    dataset: Dataset,
    family: AuditorFamily,
    config: FitConfig,
    f0_lower: BasePredictor | None = None,
    f0_upper: BasePredictor | None = None,
    density_bound: float = DEFAULT_DENSITY_BOUND,
) -> IntervalPredictor:
    """[l_{delta/2}, l_{1-delta/2}]: each tail gets half the miscoverage."""
    if not 0.0 < delta < 1.0:
        raise RejectedConfig("delta must lie in (0, 1)")
    lower, rep_lo = fit_lower_bound(delta / 2, dataset, family, config, f0_lower, density_bound=density_bound)
    upper, rep_hi = fit_lower_bound(1 - delta / 2, dataset, family, config, f0_upper, density_bound=density_bound)
    crossing = float(np.mean(rep_lo.final_values > rep_hi.final_values))
    if crossing > 0.05:
        warnings.warn(f"lower bound exceeds upper bound on {crossing:.1%} of training rows", stacklevel=2)
    return IntervalPredictor(
        "two-chains",
        lower=lower,
        upper=upper,
        metadata={
            "delta": delta,
            "lower_report": rep_lo,
            "upper_report": rep_hi,
            "crossing_fraction": crossing,
            "family": getattr(family, "name", type(family).__name__),
        },
    )


def fit_score_interval(
    delta: float,
    dataset: Dataset,
    score: Callable,
    inverter: Callable,
    family: AuditorFamily,
    config: FitConfig,
    f0: BasePredictor | None = None,
    density_bound: float = DEFAULT_DENSITY_BOUND,
    n_check: int = 100,
) -> IntervalPredictor:
    """Threshold q(x) on the score with P(score <= q) close to 1 - delta,
    returned as the interval ``inverter(x, q(x))``."""
    y = dataset.require_labels()
    X = dataset.features
    scores = np.asarray(score(X, y), dtype=float)
    if np.any(scores < 0):
        raise RejectedConfig("non-conformity scores must be nonnegative")
    chain, rep = fit_lower_bound(1.0 - delta, dataset.with_labels(scores), family, config, f0, density_bound=density_bound)
    rng = np.random.default_rng(config.seed)
    rows = rng.choice(dataset.n, size=min(n_check, dataset.n), replace=False)
    q = rep.final_values[rows]
    lo, hi = inverter(X[rows], q)
    inside = (lo <= y[rows]) & (y[rows] <= hi)
    if not np.array_equal(inside, scores[rows] <= q):
        raise RejectedConfig("inverter is inconsistent with the score on sampled rows")
    return IntervalPredictor(
        "score-based",
        threshold=chain,
        score=score,
        inverter=inverter,
        metadata={"delta": delta, "report": rep},
    )


def fit_multivalid(
    delta: float,
    dataset: Dataset,
    lam: float | None,
    groups: Sequence | None,
    config: FitConfig,
    f0: BasePredictor | None = None,
    proj: ProjectionInterval | None = None,
    n_bins: int | None = None,
    density_bound: float = DEFAULT_DENSITY_BOUND,
) -> tuple[PredictorChain, RunReport, MultivalidityFamily]:
    """Lower bound calibrated on every (prediction bin, group) cell.

    Bins tile the projection range, which defaults to the observed label
    range so that every bin can hold predictions. The bin width defaults to
    a tenth of that range, or to range / ``n_bins`` when given.
    """
    y = dataset.require_labels()
    proj = proj if proj is not None else ProjectionInterval(float(np.min(y)), float(np.max(y)))
    span = proj.hi - proj.lo
    if lam is None:
        lam = span / (n_bins if n_bins else 10)
    family = make_multivalidity_family(lam, base=_as_auditors(groups), lo=proj.lo, hi=proj.hi)
    chain, rep = fit_lower_bound(delta, dataset, family, config, f0, proj, density_bound)
    return chain, rep, family


def _as_auditors(groups) -> list[Auditor] | None:
    if groups is None:
        return None
    if isinstance(groups, FiniteFamily):
        return list(groups.base)
    groups = list(groups)
    if all(isinstance(g, Auditor) for g in groups):
        return groups
    return list(group_predicates(groups))


# --------------------------------------------------------------------------
# coverage tables


@dataclass(frozen=True)
class CoverageRow:
    group_id: str
    bin_id: str
    n: int
    coverage: float
    deviation: float
    mass_weighted_deviation: float
    se: float

    def as_list(self):
        return [self.group_id, self.bin_id, self.n, self.coverage, self.deviation, self.mass_weighted_deviation, self.se]


COVERAGE_HEADER = ["group_id", "bin_id", "n", "coverage", "deviation", "mass_weighted_deviation", "se"]


def _row(group_id, bin_id, cell, covered, target, n_total) -> CoverageRow:
    k = int(cell.sum())
    if k == 0:
        return CoverageRow(group_id, bin_id, 0, float("nan"), float("nan"), 0.0, 0.0)
    p = float(covered[cell].mean())
    se = float(np.sqrt(p * (1 - p) / k))
    return CoverageRow(group_id, bin_id, k, p, p - target, (k / n_total) * (p - target), se)


def group_coverage(covered, X, groups: Sequence[GroupIndicator], target: float, names=None) -> list[CoverageRow]:
    """Coverage within each group, plus an ``all`` row."""
    covered = np.asarray(covered, dtype=bool)
    n = covered.shape[0]
    rows = [_row("all", "all", np.ones(n, dtype=bool), covered, target, n)]
    for i, g in enumerate(groups):
        name = names[i] if names else g.label()
        rows.append(_row(name, "all", g.membership(X), covered, target, n))
    return rows


def cell_coverage(values, covered, X, family: MultivalidityFamily, target: float) -> list[CoverageRow]:
    """Coverage in every (group, bin) cell, bins read off the predictions."""
    covered = np.asarray(covered, dtype=bool)
    n = covered.shape[0]
    k = family.bin_index(values)
    groups = family.groups if family.groups is not None else [None]
    out = []
    for gi, g in enumerate(groups):
        gm = np.ones(n, dtype=bool) if g is None else (g(values, X) != 0)
        gid = "all" if g is None else f"g{gi}"
        for b in range(len(family.bins)):
            out.append(_row(gid, f"b{b}", gm & (k == b), covered, target, n))
    return out


def write_coverage_csv(rows: Sequence[CoverageRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COVERAGE_HEADER)
        for r in rows:
            w.writerow(r.as_list())


# --------------------------------------------------------------------------
# no-harm check


def no_harm_eval(
    dataset: Dataset,
    true_quantile,
    sigma_init: float,
    delta: float,
    family: AuditorFamily,
    config: FitConfig,
    seed: int = 0,
    density_bound: float = DEFAULT_DENSITY_BOUND,
) -> dict:
    """Start from the true quantile plus N(0, sigma_init^2) noise and compare
    the squared error to the truth before and after fitting.

    The noisy start is appended as an extra feature column so the chain can
    replay it; ``family`` must not read that column.
    """
    X = dataset.features
    l_star = np.asarray(true_quantile(X) if callable(true_quantile) else true_quantile, dtype=float)
    start = l_star + sigma_init * normals(seed, "noharm.init", dataset.n)
    work = dataset.with_extra_feature(start, "f0_score")
    f0 = BasePredictor.column(dataset.d)
    chain, rep = fit_lower_bound(delta, work, family, config, f0, density_bound=density_bound)
    mse_init = float(np.mean((start - l_star) ** 2))
    mse_final = float(np.mean((rep.final_values - l_star) ** 2))
    if mse_init > 0:
        ratio = mse_final / mse_init
    else:
        ratio = 1.0 if mse_final == 0 else float("inf")
    return {"mse_init": mse_init, "mse_final": mse_final, "ratio": ratio, "chain": chain, "report": rep, "data": work}
