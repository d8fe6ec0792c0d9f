"""Auditor descriptors, auditor families and the weak learner.

An auditor is a function c(v, x) of the current prediction value ``v`` and
the raw feature vector ``x``; it never looks at labels. Families are closed
under negation: base member ``k`` appears as ``+c_k`` at closed index ``2k``
and as ``-c_k`` at ``2k + 1``. The weak learner returns the closed member
with the largest empirical correlation mean(c * s), ties going to the lowest
index.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import ClassVar, Iterable, Sequence

import numpy as np
from scipy.special import expit

from happymap.core import (
    BasePredictor,
    ChainFormatError,
    Dataset,
    RejectedConfig,
    RejectedInput,
    decode_real,
    encode_real,
)

_OPS = {
    "<=": np.less_equal,
    "<": np.less,
    ">": np.greater,
    ">=": np.greater_equal,
    "==": np.equal,
}


def _rows(X) -> np.ndarray:
    return np.atleast_2d(np.asarray(X, dtype=float))


# --------------------------------------------------------------------------
# descriptors


def _check_width(aud, X):
    if X.shape[1] < aud.min_dim:
        raise RejectedInput(f"{aud.label()} reads {aud.min_dim} features; data has {X.shape[1]}")


@dataclass(frozen=True)
class Auditor:
    """Base class. Subclasses implement ``_raw``; ``sign`` is applied on top."""

    sign: int = field(default=1, kw_only=True)

    kind: ClassVar[str] = ""
    uses_prediction: ClassVar[bool] = False

    def __post_init__(self):
        if self.sign not in (1, -1):
            raise RejectedConfig("auditor sign must be +1 or -1")

    def __call__(self, v, X) -> np.ndarray:
        X = _rows(X)
        _check_width(self, X)
        v = np.broadcast_to(np.asarray(v, dtype=float), (X.shape[0],))
        out = self._raw(v, X)
        return out if self.sign == 1 else -out

    def _raw(self, v, X) -> np.ndarray:
        raise NotImplementedError

    def negate(self) -> Auditor:
        return replace(self, sign=-self.sign)

    @property
    def min_dim(self) -> int:
        return 0

    def label(self) -> str:
        return self.kind

    @property
    def auditor_id(self) -> str:
        return ("+" if self.sign == 1 else "-") + self.label()

    def _payload(self) -> dict:
        return {}

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "sign": self.sign}
        out.update(self._payload())
        return out


@dataclass(frozen=True)
class Constant(Auditor):
    kind: ClassVar[str] = "constant"

    def _raw(self, v, X):
        return np.ones(X.shape[0])


@dataclass(frozen=True)
class GroupIndicator(Auditor):
    """scale * 1{x satisfies every (feature, op, threshold) condition}.

    An empty condition list selects every row.
    """

    conditions: tuple[tuple[int, str, float], ...] = ()
    scale: float = 1.0
    name: str = ""

    kind: ClassVar[str] = "group"

    def __post_init__(self):
        super().__post_init__()
        conds = []
        for j, op, tau in self.conditions:
            if op not in _OPS:
                raise RejectedConfig(f"unknown comparison {op!r}")
            if int(j) < 0:
                raise RejectedConfig("feature index must be non-negative")
            conds.append((int(j), str(op), float(tau)))
        object.__setattr__(self, "conditions", tuple(conds))
        object.__setattr__(self, "scale", float(self.scale))

    def membership(self, X) -> np.ndarray:
        X = _rows(X)
        _check_width(self, X)
        m = np.ones(X.shape[0], dtype=bool)
        for j, op, tau in self.conditions:
            m &= _OPS[op](X[:, j], tau)
        return m

    def _raw(self, v, X):
        return self.scale * self.membership(X).astype(float)

    @property
    def min_dim(self):
        return max((j + 1 for j, _, _ in self.conditions), default=0)

    def label(self):
        if self.name:
            return f"group({self.name})"
        body = "&".join(f"x{j}{op}{tau:.6g}" for j, op, tau in self.conditions) or "all"
        return f"group({body})"

    def _payload(self):
        return {
            "conditions": [[j, op, encode_real(t)] for j, op, t in self.conditions],
            "scale": encode_real(self.scale),
            "name": self.name,
        }


@dataclass(frozen=True)
class Stump(Auditor):
    feature: int = 0
    threshold: float = 0.0
    orientation: str = "le"

    kind: ClassVar[str] = "stump"

    def __post_init__(self):
        super().__post_init__()
        if self.orientation not in ("le", "gt"):
            raise RejectedConfig("stump orientation must be 'le' or 'gt'")
        object.__setattr__(self, "threshold", float(self.threshold))

    def _raw(self, v, X):
        col = X[:, self.feature]
        hit = col <= self.threshold if self.orientation == "le" else col > self.threshold
        return hit.astype(float)

    @property
    def min_dim(self):
        return self.feature + 1

    def label(self):
        op = "<=" if self.orientation == "le" else ">"
        return f"stump(x{self.feature}{op}{self.threshold:.6g})"

    def _payload(self):
        return {"feature": self.feature, "threshold": encode_real(self.threshold), "orientation": self.orientation}


@dataclass(frozen=True)
class Linear(Auditor):
    weights: tuple[float, ...] = ()
    offset: float = 0.0

    kind: ClassVar[str] = "linear"

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        object.__setattr__(self, "offset", float(self.offset))

    def _raw(self, v, X):
        return X @ np.asarray(self.weights) + self.offset

    @property
    def min_dim(self):
        return len(self.weights)

    def label(self):
        return "linear(" + ",".join(f"{w:.4g}" for w in self.weights) + f";{self.offset:.4g})"

    def _payload(self):
        return {"weights": [encode_real(w) for w in self.weights], "offset": encode_real(self.offset)}


@dataclass(frozen=True)
class BinIndicator(Auditor):
    """1{lo <= v < hi}, or 1{lo <= v <= hi} when ``closed_hi``."""

    lo: float = 0.0
    hi: float = 1.0
    closed_hi: bool = False

    kind: ClassVar[str] = "bin"
    uses_prediction: ClassVar[bool] = True

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "lo", float(self.lo))
        object.__setattr__(self, "hi", float(self.hi))

    def _raw(self, v, X):
        upper = v <= self.hi if self.closed_hi else v < self.hi
        return ((v >= self.lo) & upper).astype(float)

    def label(self):
        return f"bin[{self.lo:.4g},{self.hi:.4g}{']' if self.closed_hi else ')'}"

    def _payload(self):
        return {"lo": encode_real(self.lo), "hi": encode_real(self.hi), "closed_hi": self.closed_hi}


@dataclass(frozen=True)
class Product(Auditor):
    """bin(v) * base(v, x)."""

    base: Auditor = field(default_factory=Constant)
    bin: BinIndicator = field(default_factory=BinIndicator)

    kind: ClassVar[str] = "product"
    uses_prediction: ClassVar[bool] = True

    def _raw(self, v, X):
        return self.bin(v, X) * self.base(v, X)

    @property
    def min_dim(self):
        return self.base.min_dim

    def label(self):
        return f"{self.base.label()}*{self.bin.label()}"

    def _payload(self):
        return {"base": self.base.to_dict(), "bin": self.bin.to_dict()}


def _weight(theta: Sequence[float], X, c1: float, c2: float, form: str) -> np.ndarray:
    th = np.asarray(theta, dtype=float)
    if th.shape[0] != X.shape[1] + 1:
        raise RejectedInput(f"theta has {th.shape[0]} entries; expected intercept + {X.shape[1]} features")
    sigma = np.clip(expit(X @ th[1:] + th[0]), c1, c2)
    if form == "odds":
        return (1.0 - sigma) / sigma
    return 1.0 / sigma


def _check_clamp(c1, c2):
    if not 0.0 < c1 < c2 < 1.0:
        raise RejectedConfig(f"clamp needs 0 < c1 < c2 < 1, got ({c1}, {c2})")


def _check_form(form):
    if form not in ("odds", "inverse"):
        raise RejectedConfig("weight form must be 'odds' or 'inverse'")


@dataclass(frozen=True)
class PropensityRatio(Auditor):
    """(1 - sigma)/sigma (``odds``) or 1/sigma (``inverse``), where
    sigma = clamp(logistic(theta . [1, x]), c1, c2)."""

    theta: tuple[float, ...] = ()
    c1: float = 0.05
    c2: float = 0.95
    form: str = "odds"

    kind: ClassVar[str] = "propensity"

    def __post_init__(self):
        super().__post_init__()
        _check_clamp(self.c1, self.c2)
        _check_form(self.form)
        object.__setattr__(self, "theta", tuple(float(t) for t in self.theta))

    def _raw(self, v, X):
        return _weight(self.theta, X, self.c1, self.c2, self.form)

    @property
    def min_dim(self):
        return len(self.theta) - 1

    def label(self):
        return f"{self.form}(" + ",".join(f"{t:.4g}" for t in self.theta) + ")"

    def _payload(self):
        return {
            "theta": [encode_real(t) for t in self.theta],
            "c1": encode_real(self.c1),
            "c2": encode_real(self.c2),
            "form": self.form,
        }


@dataclass(frozen=True)
class ShiftComposite(Auditor):
    """weight(x) * (v - p(x)) with the weight of :class:`PropensityRatio`."""

    theta: tuple[float, ...] = ()
    baseline: BasePredictor = field(default_factory=lambda: BasePredictor.constant(0.5))
    c1: float = 0.05
    c2: float = 0.95
    form: str = "odds"

    kind: ClassVar[str] = "shift-composite"
    uses_prediction: ClassVar[bool] = True

    def __post_init__(self):
        super().__post_init__()
        _check_clamp(self.c1, self.c2)
        _check_form(self.form)
        object.__setattr__(self, "theta", tuple(float(t) for t in self.theta))

    def _raw(self, v, X):
        return _weight(self.theta, X, self.c1, self.c2, self.form) * (v - self.baseline(X))

    @property
    def min_dim(self):
        return max(len(self.theta) - 1, self.baseline.min_dim)

    def label(self):
        return f"{self.form}(" + ",".join(f"{t:.4g}" for t in self.theta) + f")*(f-p[{self.baseline.kind}])"

    def _payload(self):
        return {
            "theta": [encode_real(t) for t in self.theta],
            "baseline": self.baseline.to_dict(),
            "c1": encode_real(self.c1),
            "c2": encode_real(self.c2),
            "form": self.form,
        }


@dataclass(frozen=True)
class Centered(Auditor):
    """base(v, x) - center."""

    base: Auditor = field(default_factory=Constant)
    center: float = 0.0

    kind: ClassVar[str] = "centered"

    def __post_init__(self):
        super().__post_init__()
        object.__setattr__(self, "center", float(self.center))

    @property
    def uses_prediction(self):
        return self.base.uses_prediction

    def _raw(self, v, X):
        return self.base(v, X) - self.center

    @property
    def min_dim(self):
        return self.base.min_dim

    def label(self):
        return f"({self.base.label()}-{self.center:.4g})"

    def _payload(self):
        return {"base": self.base.to_dict(), "center": encode_real(self.center)}


def auditor_from_dict(d: dict, where: str = "auditor") -> Auditor:
    """Inverse of ``Auditor.to_dict``."""
    if not isinstance(d, dict) or "kind" not in d:
        raise ChainFormatError("auditor must be an object with a 'kind'", where)
    kind = d["kind"]
    sign = d.get("sign", 1)
    if sign not in (1, -1):
        raise ChainFormatError("auditor sign must be 1 or -1", f"{where}.sign")
    R = decode_real
    try:
        if kind == "constant":
            return Constant(sign=sign)
        if kind == "group":
            conds = tuple((int(j), op, R(t)) for j, op, t in d.get("conditions", []))
            return GroupIndicator(conds, R(d.get("scale", 1.0)), d.get("name", ""), sign=sign)
        if kind == "stump":
            return Stump(int(d["feature"]), R(d["threshold"]), d.get("orientation", "le"), sign=sign)
        if kind == "linear":
            return Linear(tuple(R(w) for w in d["weights"]), R(d.get("offset", 0.0)), sign=sign)
        if kind == "bin":
            return BinIndicator(R(d["lo"]), R(d["hi"]), bool(d.get("closed_hi", False)), sign=sign)
        if kind == "product":
            base = auditor_from_dict(d["base"], f"{where}.base")
            b = auditor_from_dict(d["bin"], f"{where}.bin")
            if not isinstance(b, BinIndicator):
                raise ChainFormatError("product needs a bin", f"{where}.bin")
            return Product(base, b, sign=sign)
        if kind == "propensity":
            return PropensityRatio(tuple(R(t) for t in d["theta"]), R(d["c1"]), R(d["c2"]), d.get("form", "odds"), sign=sign)
        if kind == "shift-composite":
            return ShiftComposite(
                tuple(R(t) for t in d["theta"]),
                BasePredictor.from_dict(d["baseline"]),
                R(d["c1"]),
                R(d["c2"]),
                d.get("form", "odds"),
                sign=sign,
            )
        if kind == "centered":
            return Centered(auditor_from_dict(d["base"], f"{where}.base"), R(d["center"]), sign=sign)
    except ChainFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ChainFormatError(f"bad {kind!r} auditor: {exc}", where) from None
    raise ChainFormatError(f"unknown auditor kind {kind!r}", f"{where}.kind")


# --------------------------------------------------------------------------
# families


class AuditorFamily:
    """A symmetric collection of auditors.

    Attributes
    ----------
    b_bound : float
        Declared bound B on mean(c^2) for every member.
    dim_estimate : float
        Rough dimension d(C), used only to size validation folds.
    """

    b_bound: float
    dim_estimate: float

    def evaluator(self, X) -> _Evaluator:
        raise NotImplementedError


class _Evaluator:
    def best(self, v, s) -> tuple[Auditor, float]:
        raise NotImplementedError

    def table(self, v, s) -> list[tuple[str, float]]:
        raise NotImplementedError


class FiniteFamily(AuditorFamily):
    """Explicit list of base auditors, closed under negation."""

    def __init__(self, base: Sequence[Auditor], b_bound: float, name: str = "finite"):
        base = [m if m.sign == 1 else m.negate() for m in base]
        if not base:
            raise RejectedConfig("auditor family is empty")
        self.base = list(base)
        self.b_bound = float(b_bound)
        self.name = name
        self.dim_estimate = math.log(2 * len(self.base))

    def __len__(self) -> int:
        return 2 * len(self.base)

    @property
    def members(self) -> list[Auditor]:
        out = []
        for m in self.base:
            out.extend((m, m.negate()))
        return out

    @property
    def min_dim(self) -> int:
        return max(m.min_dim for m in self.base)

    def evaluator(self, X) -> _MatrixEvaluator:
        return _MatrixEvaluator(self, _rows(X))

    def base_matrix(self, v, X, cache: dict) -> np.ndarray:
        """n x K matrix of base member values. ``cache`` persists per evaluator."""
        if any(m.uses_prediction for m in self.base):
            return np.column_stack([m(v, X) for m in self.base])
        if "static" not in cache:
            cache["static"] = np.column_stack([m(v, X) for m in self.base])
        return cache["static"]


class _MatrixEvaluator(_Evaluator):
    def __init__(self, family: FiniteFamily, X: np.ndarray):
        if X.shape[1] < family.min_dim:
            raise RejectedInput(f"family needs {family.min_dim} features, data has {X.shape[1]}")
        self.family = family
        self.X = X
        self.cache: dict = {}

    def _signed(self, v, s) -> tuple[np.ndarray, np.ndarray]:
        M = self.family.base_matrix(np.asarray(v, dtype=float), self.X, self.cache)
        corr = (M.T @ s) / M.shape[0]
        out = np.empty(2 * corr.shape[0])
        out[0::2] = corr
        out[1::2] = -corr
        return M, out

    def signed(self, v, s) -> np.ndarray:
        return self._signed(v, np.asarray(s, dtype=float))[1]

    def best(self, v, s):
        s = np.asarray(s, dtype=float)
        M, viol = self._signed(v, s)
        # The BLAS sums can misorder near-ties, so every member within the
        # worst-case summation error of the top is rescored with a correctly
        # rounded sum and the lowest index wins among exact ties.
        slack = 2.0 * np.finfo(float).eps * float(np.max(np.abs(M), initial=0.0)) * float(np.sum(np.abs(s)))
        cands = np.flatnonzero(viol >= viol.max() - slack)
        n = M.shape[0]
        best_j, best_val = -1, -math.inf
        for j in cands:
            col = M[:, j // 2] if j % 2 == 0 else -M[:, j // 2]
            val = math.fsum(col * s) / n
            if val > best_val:
                best_j, best_val = int(j), val
        m = self.family.base[best_j // 2]
        return (m if best_j % 2 == 0 else m.negate()), best_val

    def table(self, v, s):
        viol = self.signed(v, s)
        return [(m.auditor_id, float(x)) for m, x in zip(self.family.members, viol)]


class MultivalidityFamily(FiniteFamily):
    """Products bin(v) * g(x) over a grid of prediction bins and base groups."""

    def __init__(self, bins: Sequence[BinIndicator], groups: Sequence[Auditor] | None, name="multivalidity"):
        self.bins = list(bins)
        self.groups = list(groups) if groups else None
        if self.groups is None:
            base = list(self.bins)
        else:
            base = [Product(g, b) for g in self.groups for b in self.bins]
        super().__init__(base, 1.0, name)
        self.edges = np.array([b.lo for b in self.bins] + [self.bins[-1].hi])

    def bin_index(self, v) -> np.ndarray:
        """Bin of each value, -1 when outside every bin."""
        v = np.asarray(v, dtype=float)
        k = np.searchsorted(self.edges[1:-1], v, side="right")
        inside = (v >= self.edges[0]) & (v <= self.edges[-1])
        return np.where(inside, k, -1)

    def base_matrix(self, v, X, cache):
        if "groups" not in cache:
            if self.groups is None:
                cache["groups"] = np.ones((X.shape[0], 1))
            else:
                cache["groups"] = np.column_stack([g(v, X) for g in self.groups])
        G = cache["groups"]
        nb = len(self.bins)
        onehot = np.zeros((X.shape[0], nb))
        k = self.bin_index(v)
        rows = np.flatnonzero(k >= 0)
        onehot[rows, k[rows]] = 1.0
        return (G[:, :, None] * onehot[:, None, :]).reshape(X.shape[0], -1)


class CompositeFamily(FiniteFamily):
    """weight_theta(x) * (v - p(x)) over a theta grid and a baseline list."""

    def __init__(self, thetas, baselines, c1, c2, form="odds", name="shift-composite"):
        self.thetas = [tuple(float(t) for t in th) for th in thetas]
        self.baselines = list(baselines)
        if not self.thetas or not self.baselines:
            raise RejectedConfig("theta grid and baseline list must be non-empty")
        base = [ShiftComposite(th, p, c1, c2, form) for th in self.thetas for p in self.baselines]
        wmax = (1.0 - c1) / c1 if form == "odds" else 1.0 / c1
        super().__init__(base, (2.0 * wmax) ** 2, name)
        self.c1, self.c2, self.form = c1, c2, form

    def base_matrix(self, v, X, cache):
        if "W" not in cache:
            cache["W"] = np.column_stack([_weight(th, X, self.c1, self.c2, self.form) for th in self.thetas])
            cache["P"] = np.column_stack([p(X) for p in self.baselines])
        W, P = cache["W"], cache["P"]
        D = v[:, None] - P
        return (W[:, :, None] * D[:, None, :]).reshape(X.shape[0], -1)


class LinearFamily(AuditorFamily):
    """{ w . phi(x) : ||w||_2 <= b_w }, phi(x) = x or [1, x].

    Optimised in closed form: the best weight is b_w * g / ||g|| with
    g = mean(phi(x_i) s_i), attaining violation b_w * ||g||.
    """

    def __init__(self, b_w: float, n_features: int, intercept: bool = False, b_bound: float | None = None):
        if not b_w > 0:
            raise RejectedConfig("linear family needs b_w > 0")
        self.b_w = float(b_w)
        self.n_features = int(n_features)
        self.intercept = bool(intercept)
        self.b_bound = float(b_bound) if b_bound is not None else math.inf
        self.dim_estimate = float(self.n_features + self.intercept)

    def evaluator(self, X):
        return _LinearEvaluator(self, _rows(X))


class _LinearEvaluator(_Evaluator):
    def __init__(self, family: LinearFamily, X):
        if X.shape[1] != family.n_features:
            raise RejectedInput(f"linear family expects {family.n_features} features, got {X.shape[1]}")
        self.family = family
        self.Phi = np.hstack([np.ones((X.shape[0], 1)), X]) if family.intercept else X

    def _member(self, w) -> Linear:
        if self.family.intercept:
            return Linear(tuple(w[1:]), w[0])
        return Linear(tuple(w))

    def best(self, v, s):
        g = (self.Phi.T @ np.asarray(s, dtype=float)) / self.Phi.shape[0]
        norm = float(np.linalg.norm(g))
        if norm == 0.0:
            w = np.zeros(self.Phi.shape[1])
            w[0] = self.family.b_w
            return self._member(w), 0.0
        w = self.family.b_w * g / norm
        return self._member(w), self.family.b_w * norm

    def table(self, v, s):
        m, viol = self.best(v, s)
        return [(m.auditor_id, viol)]


class UnionFamily(AuditorFamily):
    """Concatenation of families; earlier families win ties."""

    def __init__(self, families: Sequence[AuditorFamily]):
        flat = []
        for f in families:
            flat.extend(f.families if isinstance(f, UnionFamily) else [f])
        if not flat:
            raise RejectedConfig("auditor family is empty")
        self.families = flat
        self.b_bound = max(f.b_bound for f in flat)
        self.dim_estimate = math.log(sum(math.exp(f.dim_estimate) for f in flat))

    def __len__(self):
        return sum(len(f) for f in self.families)

    @property
    def members(self) -> list[Auditor]:
        out = []
        for f in self.families:
            out.extend(f.members)
        return out

    def evaluator(self, X):
        return _UnionEvaluator([f.evaluator(X) for f in self.families])


class _UnionEvaluator(_Evaluator):
    def __init__(self, parts):
        self.parts = parts

    def best(self, v, s):
        best, best_v = None, -math.inf
        for p in self.parts:
            m, val = p.best(v, s)
            if val > best_v:
                best, best_v = m, val
        return best, best_v

    def table(self, v, s):
        out = []
        for p in self.parts:
            out.extend(p.table(v, s))
        return out


# --------------------------------------------------------------------------
# constructors


def _as_conditions(pred) -> tuple[tuple[int, str, float], ...]:
    if isinstance(pred, GroupIndicator):
        return pred.conditions
    if isinstance(pred, dict):
        pred = pred.get("conditions", pred.get("all", []))
    pred = list(pred)
    if len(pred) == 3 and isinstance(pred[1], str):
        return ((int(pred[0]), pred[1], float(pred[2])),)
    return tuple((int(j), op, float(t)) for j, op, t in pred)


def group_predicates(predicates: Iterable, depth: int = 1) -> list[GroupIndicator]:
    """Indicators for each predicate and, at depth 2, each pairwise intersection.

    A predicate is one condition ``(feature, op, threshold)`` or a list of
    them (a conjunction).
    """
    if depth not in (1, 2):
        raise RejectedConfig("intersection depth must be 1 or 2")
    base = [_as_conditions(p) for p in predicates]
    if not base:
        raise RejectedConfig("at least one group predicate is required")
    out = [GroupIndicator(c) for c in base]
    if depth == 2:
        out.extend(GroupIndicator(a + b) for a, b in itertools.combinations(base, 2))
    return out


def make_group_family(
    predicates: Iterable,
    depth: int = 1,
    X=None,
    normalize: bool = False,
    include_constant: bool = False,
) -> FiniteFamily:
    """Family of +-1{x in A} over named feature predicates.

    With ``normalize`` each indicator is scaled by 1/P(A) (mass estimated on
    ``X``), so a member's correlation with s is the group-conditional mean
    of s rather than its mass-weighted version. B becomes 1/min P(A).
    """
    groups = group_predicates(predicates, depth)
    if X is not None:
        X = _rows(X)
        masses = [float(g.membership(X).mean()) for g in groups]
        for g, m in zip(groups, masses):
            if m == 0.0:
                warnings.warn(f"group {g.label()} has no members", stacklevel=2)
    elif normalize:
        raise RejectedConfig("normalized group family needs X to estimate masses")
    b_bound = 1.0
    if normalize:
        scaled = []
        for g, m in zip(groups, masses):
            scaled.append(replace(g, scale=1.0 / m) if m > 0 else g)
        groups = scaled
        b_bound = max((1.0 / m for m in masses if m > 0), default=1.0)
    members: list[Auditor] = [Constant()] if include_constant else []
    members.extend(groups)
    return FiniteFamily(members, b_bound, "groups")


def make_constant_family() -> FiniteFamily:
    return FiniteFamily([Constant()], 1.0, "constant")


def make_stump_family(X, thresholds_per_feature: int, features: Sequence[int] | None = None) -> FiniteFamily:
    """+-1{x_j <= tau} with tau at the k/(T+1) empirical quantiles of feature j."""
    if thresholds_per_feature < 1:
        raise RejectedConfig("thresholds_per_feature must be >= 1")
    X = _rows(X)
    feats = range(X.shape[1]) if features is None else features
    qs = np.arange(1, thresholds_per_feature + 1) / (thresholds_per_feature + 1)
    members = []
    for j in feats:
        taus = np.nanquantile(X[:, j], qs)
        for tau in dict.fromkeys(float(t) for t in taus):
            members.append(Stump(int(j), tau))
    return FiniteFamily(members, 1.0, "stumps")


def make_linear_family(X, b_w: float = 1.0, intercept: bool = False) -> LinearFamily:
    X = _rows(X)
    Phi = np.hstack([np.ones((X.shape[0], 1)), X]) if intercept else X
    b = b_w**2 * float(np.max(np.sum(Phi * Phi, axis=1)))
    return LinearFamily(b_w, X.shape[1], intercept, b_bound=b)


def _theta_is_zero(th) -> bool:
    return all(t == 0.0 for t in th)


def make_propensity_family(theta_grid, clamp=(0.05, 0.95), form: str = "odds") -> FiniteFamily:
    """+-weight_theta(x) for each theta in the grid.

    theta = 0 with the odds form gives ratio 1 and is stored as the constant
    auditor.
    """
    c1, c2 = map(float, clamp)
    _check_clamp(c1, c2)
    _check_form(form)
    grid = [tuple(float(t) for t in th) for th in theta_grid]
    if not grid:
        raise RejectedConfig("theta grid is empty")
    members = []
    for th in grid:
        if form == "odds" and _theta_is_zero(th) and c1 <= 0.5 <= c2:
            members.append(Constant())
        else:
            members.append(PropensityRatio(th, c1, c2, form))
    # sup |c| per member: 1 for the constant, the clamped ratio ceiling otherwise
    wmax = (1.0 - c1) / c1 if form == "odds" else 1.0 / c1
    b = max(1.0 if isinstance(m, Constant) else wmax**2 for m in members)
    return FiniteFamily(members, b, "propensity")


def make_shift_composite_family(theta_grid, p_list, clamp=(0.05, 0.95), form: str = "odds") -> CompositeFamily:
    c1, c2 = map(float, clamp)
    _check_clamp(c1, c2)
    _check_form(form)
    return CompositeFamily(theta_grid, p_list, c1, c2, form)


def make_bins(lam: float, lo: float, hi: float) -> list[BinIndicator]:
    if not lam > 0:
        raise RejectedConfig("bin width must be positive")
    if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
        raise RejectedConfig("bin range must be a finite interval with lo < hi")
    count = max(1, math.ceil((hi - lo) / lam))
    if lam >= hi - lo:
        warnings.warn("bin width covers the whole range; using a single bin", stacklevel=3)
        count = 1
    edges = [lo + k * lam for k in range(count)] + [hi]
    return [BinIndicator(edges[k], edges[k + 1], closed_hi=(k == count - 1)) for k in range(count)]


def make_multivalidity_family(
    lam: float,
    c_bin: float | None = None,
    base: Sequence[Auditor] | FiniteFamily | None = None,
    lo: float | None = None,
    hi: float | None = None,
) -> MultivalidityFamily:
    """Bin auditors over [-c_bin, c_bin] (or [lo, hi]), optionally times groups."""
    if lo is None or hi is None:
        if c_bin is None or not c_bin > 0:
            raise RejectedConfig("multivalidity family needs c_bin > 0 or an explicit range")
        lo, hi = -float(c_bin), float(c_bin)
    bins = make_bins(lam, lo, hi)
    groups = base.base if isinstance(base, FiniteFamily) else base
    return MultivalidityFamily(bins, groups)


def make_centered_family(g_list: Sequence[Auditor], X) -> FiniteFamily:
    """Centered auditors g(x) - mean(g) with the mean taken over ``X``."""
    X = _rows(X)
    zero = np.zeros(X.shape[0])
    members = [Centered(g, float(np.mean(g(zero, X)))) for g in g_list]
    return FiniteFamily(members, 1.0, "centered")


# --------------------------------------------------------------------------
# weak learner and audit


def weak_learn(family: AuditorFamily, predictions, dataset: Dataset, mapping) -> tuple[Auditor, float]:
    """Return the maximally violating member and its violation mean(c * s)."""
    v = np.asarray(predictions, dtype=float)
    if v.shape != (dataset.n,):
        raise RejectedInput("predictions must align with dataset rows")
    y = dataset.labels if mapping.uses_labels else None
    if mapping.uses_labels:
        dataset.require_labels()
    s = mapping.s(v, y)
    return family.evaluator(dataset.features).best(v, s)
