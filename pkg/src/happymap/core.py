"""Shared domain types: datasets, projection sets, base predictors, fit
configuration and run reports."""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class HappyMapError(Exception):
    """Base class for all errors raised by the package."""


class RejectedInput(HappyMapError, ValueError):
    """Input data has the wrong shape or content."""


class RejectedConfig(HappyMapError, ValueError):
    """A configuration value is outside its admissible range."""


class ChainFormatError(HappyMapError, ValueError):
    """A serialized chain could not be parsed."""

    def __init__(self, message: str, position: int | str | None = None):
        self.position = position
        if position is not None:
            message = f"{message} (at {position})"
        super().__init__(message)


class NonFiniteError(HappyMapError, FloatingPointError):
    """A non-finite value appeared while fitting."""


def encode_real(x: float) -> str:
    """Lossless text form of a float (hex-float, or ``inf``/``-inf``)."""
    return float(x).hex()


def decode_real(text) -> float:
    if isinstance(text, str):
        try:
            return float.fromhex(text)
        except ValueError:
            raise ChainFormatError(f"not a hex-float literal: {text!r}") from None
    if isinstance(text, (int, float)) and not isinstance(text, bool):
        return float(text)
    raise ChainFormatError(f"expected a real, got {type(text).__name__}")


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Row-major table of features, labels and optional side columns.

    Missing feature cells are stored as NaN in ``features`` and as 0 in
    ``miss_mask``. ``complete_flag`` is derived from the mask when only the
    mask is given.
    """

    features: np.ndarray
    labels: np.ndarray | None = None
    groups: np.ndarray | None = None
    group_names: tuple[str, ...] = ()
    domain_tag: np.ndarray | None = None
    miss_mask: np.ndarray | None = None
    complete_flag: np.ndarray | None = None
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[0] < 1:
            raise RejectedInput("features must be a non-empty (n, d) matrix")
        n, d = X.shape
        object.__setattr__(self, "features", _frozen(X))
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=float).ravel()
            if y.shape[0] != n:
                raise RejectedInput(f"labels have {y.shape[0]} rows, features have {n}")
            object.__setattr__(self, "labels", _frozen(y))
        if self.groups is not None:
            G = np.asarray(self.groups, dtype=float)
            if G.ndim == 1:
                G = G[:, None]
            if G.shape[0] != n:
                raise RejectedInput("group matrix row count differs from features")
            if not np.all((G == 0) | (G == 1)):
                raise RejectedInput("group columns must be {0,1}-valued")
            object.__setattr__(self, "groups", _frozen(G))
            names = tuple(self.group_names) or tuple(f"g_{j}" for j in range(G.shape[1]))
            if len(names) != G.shape[1]:
                raise RejectedInput("group_names length differs from group columns")
            object.__setattr__(self, "group_names", names)
        if self.domain_tag is not None:
            z = np.asarray(self.domain_tag, dtype=object).ravel()
            if z.shape[0] != n or not all(t in ("so", "ta") for t in z):
                raise RejectedInput("domain_tag must hold one of 'so'/'ta' per row")
            object.__setattr__(self, "domain_tag", _frozen(z.astype(str), dtype=str))
        mask = self.miss_mask
        if mask is None and np.isnan(X).any():
            mask = (~np.isnan(X)).astype(float)
        if mask is not None:
            M = np.asarray(mask, dtype=float)
            if M.shape != X.shape or not np.all((M == 0) | (M == 1)):
                raise RejectedInput("miss_mask must be a {0,1} matrix shaped like features")
            object.__setattr__(self, "miss_mask", _frozen(M))
            derived = M.min(axis=1)
            if self.complete_flag is not None:
                R = np.asarray(self.complete_flag, dtype=float).ravel()
                if not np.array_equal(R, derived):
                    raise RejectedInput("complete_flag disagrees with miss_mask")
            object.__setattr__(self, "complete_flag", _frozen(derived))
        elif self.complete_flag is not None:
            R = np.asarray(self.complete_flag, dtype=float).ravel()
            if R.shape[0] != n or not np.all((R == 0) | (R == 1)):
                raise RejectedInput("complete_flag must be a {0,1} vector of length n")
            object.__setattr__(self, "complete_flag", _frozen(R))
        if self.feature_names:
            if len(self.feature_names) != d:
                raise RejectedInput("feature_names length differs from feature columns")
        else:
            object.__setattr__(self, "feature_names", tuple(f"x_{j}" for j in range(d)))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def require_labels(self) -> np.ndarray:
        if self.labels is None:
            raise RejectedInput("this operation needs labels (column 'y')")
        return self.labels

    def subset(self, rows) -> Dataset:
        """Return the dataset restricted to ``rows`` (indices or boolean mask)."""
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        if rows.size == 0:
            raise RejectedInput("subset would be empty")

        def pick(a):
            return None if a is None else a[rows]

        return Dataset(
            features=self.features[rows],
            labels=pick(self.labels),
            groups=pick(self.groups),
            group_names=self.group_names if self.groups is not None else (),
            domain_tag=pick(self.domain_tag),
            miss_mask=pick(self.miss_mask),
            complete_flag=pick(self.complete_flag),
            feature_names=self.feature_names,
        )

    def with_labels(self, labels) -> Dataset:
        return Dataset(
            features=self.features,
            labels=labels,
            groups=self.groups,
            group_names=self.group_names if self.groups is not None else (),
            domain_tag=self.domain_tag,
            miss_mask=self.miss_mask,
            complete_flag=self.complete_flag,
            feature_names=self.feature_names,
        )

    def with_groups(self, groups, names: Sequence[str]) -> Dataset:
        return Dataset(
            features=self.features,
            labels=self.labels,
            groups=groups,
            group_names=tuple(names),
            domain_tag=self.domain_tag,
            miss_mask=self.miss_mask,
            complete_flag=self.complete_flag,
            feature_names=self.feature_names,
        )

    def with_extra_feature(self, column, name: str) -> Dataset:
        col = np.asarray(column, dtype=float).reshape(-1, 1)
        mask = None
        if self.miss_mask is not None:
            mask = np.hstack([self.miss_mask, np.ones_like(col)])
        return Dataset(
            features=np.hstack([self.features, col]),
            labels=self.labels,
            groups=self.groups,
            group_names=self.group_names if self.groups is not None else (),
            domain_tag=self.domain_tag,
            miss_mask=mask,
            feature_names=self.feature_names + (name,),
        )


@dataclass(frozen=True)
class ProjectionInterval:
    """Closed interval [lo, hi] that every prediction is clamped into."""

    lo: float = -math.inf
    hi: float = math.inf

    def __post_init__(self):
        lo, hi = float(self.lo), float(self.hi)
        if math.isnan(lo) or math.isnan(hi) or lo > hi:
            raise RejectedConfig(f"projection interval needs lo <= hi, got [{lo}, {hi}]")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def clamp(self, v):
        return np.clip(v, self.lo, self.hi)

    @classmethod
    def unit(cls) -> ProjectionInterval:
        return cls(0.0, 1.0)

    @classmethod
    def around_labels(cls, y) -> ProjectionInterval:
        """Label range widened by one range on each side."""
        y = np.asarray(y, dtype=float)
        lo, hi = float(np.min(y)), float(np.max(y))
        width = hi - lo
        return cls(lo - width, hi + width)


def _logistic(t):
    # scipy.special.expit is accurate in both tails
    from scipy.special import expit

    return expit(t)


@dataclass(frozen=True)
class BasePredictor:
    """Closed-form predictor evaluable on raw feature vectors.

    kinds
        ``constant``  value
        ``linear``    weights . x + offset
        ``column``    x[index]            (an externally supplied score column)
        ``logistic``  lo + (hi - lo) * logistic(weights . x + offset)
    """

    kind: str
    value: float = 0.0
    weights: tuple[float, ...] = ()
    offset: float = 0.0
    index: int = -1
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if self.kind not in ("constant", "linear", "column", "logistic"):
            raise RejectedConfig(f"unknown base predictor kind {self.kind!r}")
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if self.kind in ("linear", "logistic") and not self.weights:
            raise RejectedConfig(f"{self.kind} predictor needs weights")
        if self.kind == "column" and self.index < 0:
            raise RejectedConfig("column predictor needs a non-negative index")

    @classmethod
    def constant(cls, value: float) -> BasePredictor:
        return cls("constant", value=float(value))

    @classmethod
    def linear(cls, weights, offset: float = 0.0) -> BasePredictor:
        return cls("linear", weights=tuple(weights), offset=float(offset))

    @classmethod
    def column(cls, index: int) -> BasePredictor:
        return cls("column", index=int(index))

    @classmethod
    def logistic(cls, weights, offset=0.0, lo=0.0, hi=1.0) -> BasePredictor:
        return cls("logistic", weights=tuple(weights), offset=float(offset), lo=float(lo), hi=float(hi))

    @property
    def min_dim(self) -> int:
        if self.kind == "column":
            return self.index + 1
        return len(self.weights)

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] < self.min_dim:
            raise RejectedInput(f"{self.kind} predictor reads {self.min_dim} features; data has {X.shape[1]}")
        if self.kind == "constant":
            return np.full(X.shape[0], self.value)
        if self.kind == "column":
            return X[:, self.index].copy()
        t = X @ np.asarray(self.weights) + self.offset
        if self.kind == "linear":
            return t
        return self.lo + (self.hi - self.lo) * _logistic(t)

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.kind == "constant":
            out["value"] = encode_real(self.value)
        elif self.kind == "column":
            out["index"] = self.index
        else:
            out["weights"] = [encode_real(w) for w in self.weights]
            out["offset"] = encode_real(self.offset)
            if self.kind == "logistic":
                out["lo"] = encode_real(self.lo)
                out["hi"] = encode_real(self.hi)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> BasePredictor:
        kind = d["kind"]
        if kind == "constant":
            return cls.constant(decode_real(d["value"]))
        if kind == "column":
            return cls.column(int(d["index"]))
        weights = tuple(decode_real(w) for w in d["weights"])
        offset = decode_real(d.get("offset", 0.0))
        if kind == "linear":
            return cls.linear(weights, offset)
        if kind == "logistic":
            return cls.logistic(weights, offset, decode_real(d.get("lo", 0.0)), decode_real(d.get("hi", 1.0)))
        raise ChainFormatError(f"unknown base predictor kind {kind!r}", "f0.kind")


class Mode(str, enum.Enum):
    POPULATION = "population"
    FRESH_FOLDS = "fresh-folds"
    REUSE = "reuse"

    @classmethod
    def parse(cls, value) -> Mode:
        if isinstance(value, Mode):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {"freshfolds": "fresh-folds", "fresh": "fresh-folds"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise RejectedConfig(f"unknown fit mode {value!r}") from None

    @property
    def sampled(self) -> bool:
        return self is not Mode.POPULATION


@dataclass(frozen=True)
class Schedule:
    """Resolved step size, iteration budget and guaranteed per-update progress."""

    eta: float
    max_iters: int
    auto_iters: int
    progress: float
    threshold: float


@dataclass(frozen=True)
class FitConfig:
    alpha: float
    eta: float | str = "auto"
    max_iters: int | str = "auto"
    mode: Mode = Mode.POPULATION
    fold_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        if not (self.alpha > 0 and math.isfinite(self.alpha)):
            raise RejectedConfig("alpha must be a positive real")
        if self.eta != "auto" and not (isinstance(self.eta, (int, float)) and self.eta > 0):
            raise RejectedConfig("eta must be a positive real or 'auto'")
        if self.max_iters != "auto" and not (isinstance(self.max_iters, int) and self.max_iters >= 1):
            raise RejectedConfig("max_iters must be a positive integer or 'auto'")
        object.__setattr__(self, "mode", Mode.parse(self.mode))
        if self.fold_size is not None and int(self.fold_size) < 1:
            raise RejectedConfig("fold_size must be positive")
        if not (0 <= int(self.seed) < 2**64):
            raise RejectedConfig("seed must fit in 64 unsigned bits")

    def resolve(self, kappa: float, b_bound: float, c_upper: float, c_lower: float) -> Schedule:
        """Turn ``"auto"`` entries into numbers.

        Population mode uses eta = alpha/(2 kappa B) with guaranteed
        progress alpha^2/(4 kappa B); sample modes halve eta and quarter the
        progress because a fold violation above 3alpha/4 only certifies a
        population violation above alpha/2.
        """
        a = self.alpha
        if self.mode.sampled:
            auto_eta = a / (4 * kappa * b_bound)
            progress = a * a / (16 * kappa * b_bound)
            threshold = 0.75 * a
        else:
            auto_eta = a / (2 * kappa * b_bound)
            progress = a * a / (4 * kappa * b_bound)
            threshold = a
        gap = max(c_upper - c_lower, 0.0)
        auto_iters = int(math.ceil(gap / progress))
        eta = auto_eta if self.eta == "auto" else float(self.eta)
        max_iters = auto_iters if self.max_iters == "auto" else int(self.max_iters)
        return Schedule(eta=eta, max_iters=max_iters, auto_iters=auto_iters, progress=progress, threshold=threshold)


class Status(str, enum.Enum):
    CONVERGED = "Converged"
    BUDGET_EXHAUSTED = "BudgetExhausted"


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    auditor_id: str
    empirical_violation: float
    potential_before: float
    potential_after: float


@dataclass
class RunReport:
    """Audit trail of one fit.

    ``final_values`` holds the engine's tabular predictions on the working
    rows; it is kept in memory only and never exported.
    """

    iterations: list[IterationRecord]
    status: Status
    final_max_violation: float
    alpha: float
    mode: Mode
    eta: float
    max_iters: int
    auto_iters: int
    progress: float
    potential_upper: float
    potential_lower: float
    final_values: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_updates(self) -> int:
        return len(self.iterations)

    def to_dict(self) -> dict:
        return {
            "status": self.status.value,
            "final_max_violation": self.final_max_violation,
            "alpha": self.alpha,
            "mode": self.mode.value,
            "eta": self.eta,
            "max_iters": self.max_iters,
            "auto_iters": self.auto_iters,
            "progress": self.progress,
            "potential_upper": self.potential_upper,
            "potential_lower": self.potential_lower,
            "iterations": [
                {
                    "iteration": r.iteration,
                    "auditor_id": r.auditor_id,
                    "violation": r.empirical_violation,
                    "potential_before": r.potential_before,
                    "potential_after": r.potential_after,
                }
                for r in self.iterations
            ],
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "auditor_id", "violation", "potential"])
            for r in self.iterations:
                w.writerow([r.iteration, r.auditor_id, repr(r.empirical_violation), repr(r.potential_after)])
