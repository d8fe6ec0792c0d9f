"""Seeded synthetic data with analytically known ground truth.

Randomness is counter-based: the draw for (seed, stream, row) comes from a
Philox generator keyed on (seed, stream) at counter position ``row``, so any
row range can be generated independently and the result does not depend on
chunking. Gaussian draws use the inverse normal CDF of one uniform each.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit, ndtri

from happymap.auditors import group_predicates
from happymap.core import Dataset, RejectedConfig, RejectedInput

_MASK64 = (1 << 64) - 1


def _stream_id(name: str, column: int = 0) -> int:
    return (zlib.crc32(name.encode()) << 20) | (column & 0xFFFFF)


def uniforms(seed: int, name: str, n: int, column: int = 0, start: int = 0) -> np.ndarray:
    """Uniform(0, 1) draws for rows ``start .. start + n - 1`` (open interval)."""
    bg = np.random.Philox(key=np.array([int(seed) & _MASK64, _stream_id(name, column)], dtype=np.uint64))
    blocks, skip = divmod(start, 4)
    if blocks:
        bg.advance(blocks)
    raw = np.asarray(bg.random_raw(n + skip), dtype=np.uint64)[skip:]
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) / 2.0**53


def normals(seed: int, name: str, n: int, column: int = 0, start: int = 0) -> np.ndarray:
    return ndtri(uniforms(seed, name, n, column, start))


def uniform_matrix(seed, name, n, d, start=0) -> np.ndarray:
    return np.column_stack([uniforms(seed, name, n, j, start) for j in range(d)])


def normal_matrix(seed, name, n, d, start=0) -> np.ndarray:
    return np.column_stack([normals(seed, name, n, j, start) for j in range(d)])


# --------------------------------------------------------------------------
# heteroscedastic regression


@dataclass(frozen=True)
class HeteroData:
    """y = x0 + (0.1 + 0.2 x1) eps with x ~ U[0,1]^d, eps ~ N(0, 1).

    With d = 1 the noise scale uses x0 instead of x1.
    """

    dataset: Dataset
    seed: int
    density_bound: float = 1.0 / (0.1 * math.sqrt(2.0 * math.pi))

    @staticmethod
    def cond_mean(X) -> np.ndarray:
        return np.asarray(X, dtype=float)[:, 0]

    @staticmethod
    def noise_scale(X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return 0.1 + 0.2 * X[:, 1 if X.shape[1] > 1 else 0]

    def cond_quantile(self, delta: float) -> Callable[[np.ndarray], np.ndarray]:
        z = float(ndtri(delta))
        return lambda X: self.cond_mean(X) + self.noise_scale(X) * z

    def sidecar(self, deltas=(0.1,)) -> dict:
        X = self.dataset.features
        out = {
            "generator": "hetero",
            "seed": self.seed,
            "density_bound": self.density_bound,
            "cond_mean": self.cond_mean(X).tolist(),
        }
        for dl in deltas:
            out[f"cond_quantile_{dl!r}"] = self.cond_quantile(dl)(X).tolist()
        return out


def gen_hetero(n: int, d: int, seed: int, start: int = 0) -> HeteroData:
    if n < 1 or d < 1:
        raise RejectedConfig("gen_hetero needs n >= 1 and d >= 1")
    X = uniform_matrix(seed, "hetero.x", n, d, start)
    eps = normals(seed, "hetero.eps", n, 0, start)
    y = HeteroData.cond_mean(X) + HeteroData.noise_scale(X) * eps
    return HeteroData(Dataset(X, y), int(seed))


# --------------------------------------------------------------------------
# covariate shift


@dataclass(frozen=True)
class ShiftScenario:
    """Gaussian covariate shift with a shared bounded-noise conditional law.

    x | so ~ N(0, I), x | ta ~ N(mu, I);
    y = m(x) + a (2u - 1) with m(x) = a + (1 - 2a) logistic(w . x + b).
    Target labels are for evaluation only.
    """

    source: Dataset
    target: Dataset
    mu: np.ndarray
    weights: np.ndarray
    offset: float
    noise: float
    seed: int
    uniform_prior: bool = True

    @property
    def theta_star(self) -> np.ndarray:
        """True propensity parameters on [1, x]: e(x) = logistic(|mu|^2/2 - mu . x)."""
        return np.concatenate([[0.5 * float(self.mu @ self.mu)], -self.mu])

    def true_propensity(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return expit(0.5 * float(self.mu @ self.mu) - X @ self.mu)

    def ratio(self, X) -> np.ndarray:
        """p_ta(x) / p_so(x) = exp(mu . x - |mu|^2 / 2)."""
        X = np.asarray(X, dtype=float)
        return np.exp(X @ self.mu - 0.5 * float(self.mu @ self.mu))

    def cond_mean(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        a = self.noise
        return a + (1.0 - 2.0 * a) * expit(X @ self.weights + self.offset)

    def cond_quantile(self, delta: float) -> Callable[[np.ndarray], np.ndarray]:
        return lambda X: self.cond_mean(X) + self.noise * (2.0 * delta - 1.0)

    @property
    def density_bound(self) -> float:
        return 1.0 / (2.0 * self.noise)

    def bayes_predictor(self):
        from happymap.core import BasePredictor

        a = self.noise
        return BasePredictor.logistic(self.weights, self.offset, a, 1.0 - a)

    def sidecar(self) -> dict:
        return {
            "generator": "shift",
            "seed": self.seed,
            "mu": self.mu.tolist(),
            "weights": self.weights.tolist(),
            "offset": self.offset,
            "noise": self.noise,
            "theta_star": self.theta_star.tolist(),
            "density_bound": self.density_bound,
            "source_cond_mean": self.cond_mean(self.source.features).tolist(),
            "source_ratio": self.ratio(self.source.features).tolist(),
            "target_cond_mean": self.cond_mean(self.target.features).tolist(),
        }


def default_link_weights(d: int) -> np.ndarray:
    w = np.zeros(d)
    w[0] = 1.5
    if d > 1:
        w[1] = -1.0
    return w


def gen_shift(
    n_so: int,
    n_ta: int,
    mu,
    seed: int,
    weights=None,
    offset: float = 0.0,
    noise: float = 0.1,
) -> ShiftScenario:
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    d = mu.shape[0]
    w = default_link_weights(d) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (d,):
        raise RejectedInput("link weights must match the shift vector dimension")
    if not 0.0 < noise < 0.5:
        raise RejectedConfig("noise half-width must lie in (0, 0.5)")
    if n_so < 1:
        raise RejectedConfig("need at least one source row")
    proto = ShiftScenario(Dataset(np.zeros((1, d))), Dataset(np.zeros((1, d))), mu, w, float(offset), float(noise), int(seed))

    def draw(name, n, shift):
        X = normal_matrix(seed, f"shift.{name}.x", n, d) + shift
        u = uniforms(seed, f"shift.{name}.noise", n)
        y = proto.cond_mean(X) + noise * (2.0 * u - 1.0)
        return Dataset(X, y, domain_tag=np.full(n, name))

    source = draw("so", n_so, 0.0)
    target = draw("ta", n_ta, mu) if n_ta > 0 else Dataset(np.zeros((1, d)), np.zeros(1), domain_tag=["ta"])
    return ShiftScenario(source, target, mu, w, float(offset), float(noise), int(seed))


# --------------------------------------------------------------------------
# missingness


@dataclass(frozen=True)
class Mechanism:
    kind: str
    rho: float | None = None
    theta: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("mcar", "mar", "mnar"):
            raise RejectedConfig(f"unknown missingness mechanism {self.kind!r}")
        if self.kind == "mcar" and not (self.rho is not None and 0.0 < self.rho <= 1.0):
            raise RejectedConfig("MCAR completion probability must lie in (0, 1]")
        if self.kind != "mcar" and not self.theta:
            raise RejectedConfig(f"{self.kind.upper()} needs a logistic parameter vector")

    @classmethod
    def mcar(cls, rho: float) -> Mechanism:
        return cls("mcar", rho=float(rho))

    @classmethod
    def mar(cls, theta_obs) -> Mechanism:
        return cls("mar", theta=tuple(float(t) for t in theta_obs))

    @classmethod
    def mnar(cls, theta_miss) -> Mechanism:
        return cls("mnar", theta=tuple(float(t) for t in theta_miss))


@dataclass(frozen=True)
class MissingData:
    dataset: Dataset
    complete_copy: Dataset
    mechanism: Mechanism
    masked_columns: tuple[int, ...]
    seed: int

    def p_complete(self, X) -> np.ndarray:
        """Oracle P(R = 1 | x), evaluated on fully observed features."""
        X = np.asarray(X, dtype=float)
        mech = self.mechanism
        if mech.kind == "mcar":
            return np.full(X.shape[0], mech.rho)
        th = np.asarray(mech.theta)
        if mech.kind == "mar":
            cols = [j for j in range(X.shape[1]) if j not in self.masked_columns]
        else:
            cols = list(self.masked_columns)
        if th.shape[0] != len(cols) + 1:
            raise RejectedConfig(f"{mech.kind.upper()} theta needs intercept + {len(cols)} coefficients")
        return expit(th[0] + X[:, cols] @ th[1:])

    def sidecar(self) -> dict:
        return {
            "generator": "missing",
            "seed": self.seed,
            "mechanism": self.mechanism.kind,
            "rho": self.mechanism.rho,
            "theta": list(self.mechanism.theta),
            "masked_columns": list(self.masked_columns),
            "p_complete": self.p_complete(self.complete_copy.features).tolist(),
            "complete_features": self.complete_copy.features.tolist(),
        }


def gen_missing(base: Dataset, mechanism: Mechanism, seed: int, masked_columns=None) -> MissingData:
    """Mask ``masked_columns`` (default: the last one) on incomplete rows."""
    if base.miss_mask is not None and base.miss_mask.min() < 1:
        raise RejectedInput("gen_missing needs a complete base dataset")
    d = base.d
    cols = (d - 1,) if masked_columns is None else tuple(int(j) for j in masked_columns)
    if not cols or any(not 0 <= j < d for j in cols):
        raise RejectedInput("masked columns must index existing features")
    if mechanism.kind == "mar" and len(cols) == d:
        raise RejectedConfig("MAR needs at least one always-observed column")
    proto = MissingData(base, base, mechanism, cols, int(seed))
    p = proto.p_complete(base.features)
    u = uniforms(seed, "missing.r", base.n)
    complete = u < p
    X = base.features.copy()
    for j in cols:
        X[~complete, j] = np.nan
    mask = np.ones_like(X)
    mask[np.isnan(X)] = 0.0
    ds = Dataset(X, base.labels, base.groups, base.group_names if base.groups is not None else (), base.domain_tag, mask, feature_names=base.feature_names)
    return MissingData(ds, base, mechanism, cols, int(seed))


# --------------------------------------------------------------------------
# group overlays


def gen_groups(dataset: Dataset, predicates, depth: int = 1) -> Dataset:
    """Append one group column per predicate (and per pairwise intersection at depth 2)."""
    groups = group_predicates(predicates, depth)
    for g in groups:
        if g.min_dim > dataset.d:
            raise RejectedInput(f"predicate {g.label()} references a feature the data does not have")
    k = len(predicates)
    names = [f"g_{i}" for i in range(k)]
    if depth == 2:
        names += [f"g_{a}&{b}" for a in range(k) for b in range(a + 1, k)]
    G = np.column_stack([g.membership(dataset.features).astype(float) for g in groups])
    if dataset.groups is not None:
        G = np.hstack([dataset.groups, G])
        names = list(dataset.group_names) + names
    return dataset.with_groups(G, names)
