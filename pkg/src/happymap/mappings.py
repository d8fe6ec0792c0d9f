"""Mapping functions s(f, y) paired with their potentials L(f, y).

Each potential is an antiderivative of its mapping in the prediction
argument, so that a step ``f -> f - eta * c`` along an auditor ``c`` that
correlates with ``s`` decreases the mean potential.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from happymap.core import RejectedConfig

DEFAULT_DENSITY_BOUND = 10.0


def s_residual(f, y):
    return np.subtract(f, y)


def L_residual(f, y):
    r = np.subtract(f, y)
    return 0.5 * r * r


def _check_delta(delta):
    if not 0.0 < delta < 1.0:
        raise RejectedConfig(f"quantile level delta must lie in (0, 1), got {delta}")


def s_quantile(l, y, delta):
    """(1 - delta) - 1{l <= y}: positive when too few labels sit above ``l``."""
    _check_delta(delta)
    return (1.0 - delta) - (np.asarray(l) <= np.asarray(y)).astype(float)


def L_quantile(l, y, delta):
    """Pinball potential (1 - delta) * l - min(l - y, 0)."""
    _check_delta(delta)
    l = np.asarray(l, dtype=float)
    return (1.0 - delta) * l - np.minimum(l - np.asarray(y, dtype=float), 0.0)


def s_raw_moment(f, y, k):
    return np.power(f, k) - np.power(y, k)


def L_raw_moment(f, y, k):
    f = np.asarray(f, dtype=float)
    return np.power(f, k + 1) / (k + 1) - np.power(y, k) * f


def s_parity_expected(f):
    # E_U[1{U < f}] for U ~ Uniform(0, 1) and f in [0, 1]
    return np.asarray(f, dtype=float).copy()


def L_parity_expected(f):
    f = np.asarray(f, dtype=float)
    return 0.5 * f * f


@dataclass(frozen=True)
class Mapping:
    """A mapping with its potential and smoothness constant.

    ``kind`` is one of ``residual``, ``quantile``, ``moment``, ``parity``.
    """

    kind: str
    delta: float | None = None
    k: int | None = None
    density_bound: float = DEFAULT_DENSITY_BOUND

    def __post_init__(self):
        if self.kind == "quantile":
            if self.delta is None:
                raise RejectedConfig("quantile mapping needs delta")
            _check_delta(self.delta)
            if not self.density_bound > 0:
                raise RejectedConfig("density bound must be positive")
        elif self.kind == "moment":
            if self.k is None or int(self.k) != self.k or self.k < 1:
                raise RejectedConfig("moment mapping needs an integer k >= 1")
            object.__setattr__(self, "k", int(self.k))
        elif self.kind not in ("residual", "parity"):
            raise RejectedConfig(f"unknown mapping {self.kind!r}")

    @classmethod
    def residual(cls) -> Mapping:
        return cls("residual")

    @classmethod
    def quantile(cls, delta: float, density_bound: float = DEFAULT_DENSITY_BOUND) -> Mapping:
        return cls("quantile", delta=float(delta), density_bound=float(density_bound))

    @classmethod
    def moment(cls, k: int) -> Mapping:
        return cls("moment", k=k)

    @classmethod
    def parity(cls) -> Mapping:
        return cls("parity")

    @classmethod
    def parse(cls, text: str, density_bound: float = DEFAULT_DENSITY_BOUND) -> Mapping:
        """Parse ``residual`` | ``quantile:<delta>`` | ``moment:<k>`` | ``parity``."""
        head, _, arg = str(text).strip().partition(":")
        try:
            if head == "residual" and not arg:
                return cls.residual()
            if head == "parity" and not arg:
                return cls.parity()
            if head == "quantile":
                return cls.quantile(float(arg), density_bound)
            if head == "moment":
                return cls.moment(int(arg))
        except ValueError as exc:
            if isinstance(exc, RejectedConfig):
                raise
            raise RejectedConfig(f"bad mapping argument in {text!r}") from None
        raise RejectedConfig(f"unknown mapping {text!r}")

    @property
    def mapping_id(self) -> str:
        if self.kind == "quantile":
            return f"quantile:{self.delta!r}"
        if self.kind == "moment":
            return f"moment:{self.k}"
        return self.kind

    @property
    def kappa(self) -> float:
        if self.kind == "quantile":
            return self.density_bound
        if self.kind == "moment":
            return self.k / 2.0
        return 0.5

    @property
    def uses_labels(self) -> bool:
        return self.kind != "parity"

    def s(self, f, y=None):
        if self.kind == "residual":
            return s_residual(f, y)
        if self.kind == "quantile":
            return s_quantile(f, y, self.delta)
        if self.kind == "moment":
            return s_raw_moment(f, y, self.k)
        return s_parity_expected(f)

    def potential(self, f, y=None):
        if self.kind == "residual":
            return L_residual(f, y)
        if self.kind == "quantile":
            return L_quantile(f, y, self.delta)
        if self.kind == "moment":
            return L_raw_moment(f, y, self.k)
        return L_parity_expected(f)

    def potential_floor(self, y=None) -> float:
        """Lower constant for the mean potential over any predictor.

        Residual and parity potentials are nonnegative. The raw-moment
        potential on [0, 1] is minimised at f = y, giving -k/(k+1) at worst.
        The pinball potential is bounded below by -(1 - delta) max|y|.
        """
        if self.kind == "quantile":
            return -(1.0 - self.delta) * float(np.max(np.abs(y)))
        if self.kind == "moment":
            return -self.k / (self.k + 1.0)
        return 0.0
