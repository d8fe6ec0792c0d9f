"""Compositional predictor chains, replay and lossless JSON serialization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from happymap.auditors import Auditor, auditor_from_dict
from happymap.core import (
    BasePredictor,
    ChainFormatError,
    ProjectionInterval,
    RejectedInput,
    decode_real,
    encode_real,
)

FORMAT_TAG = "happymap-chain-v1"

__all__ = [
    "FORMAT_TAG",
    "PredictorChain",
    "Step",
    "chain_deserialize",
    "chain_serialize",
    "decode_real",
    "encode_real",
    "predict",
    "predict_batch",
]


@dataclass(frozen=True)
class Step:
    auditor: Auditor
    eta: float


@dataclass(frozen=True)
class PredictorChain:
    """f0 followed by projected updates v <- clamp(v - eta * c(v, x))."""

    f0: BasePredictor
    steps: tuple[Step, ...] = ()
    proj: ProjectionInterval = field(default_factory=ProjectionInterval)
    n_features: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        for st in self.steps:
            if not st.eta > 0:
                raise RejectedInput("every step needs eta > 0")

    def __len__(self):
        return len(self.steps)

    def predict(self, X) -> np.ndarray:
        return predict_batch(self, X)


def _check_dim(chain: PredictorChain, X: np.ndarray):
    d = X.shape[1]
    if chain.n_features is not None and d != chain.n_features:
        raise RejectedInput(f"chain expects {chain.n_features} features, got {d}")
    need = max([chain.f0.min_dim] + [st.auditor.min_dim for st in chain.steps])
    if d < need:
        raise RejectedInput(f"chain needs at least {need} features, got {d}")


def predict_batch(chain: PredictorChain, X) -> np.ndarray:
    """Replay the chain on every row of ``X``."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise RejectedInput("predict_batch expects an (n, d) matrix")
    _check_dim(chain, X)
    lo, hi = chain.proj.lo, chain.proj.hi
    v = np.clip(chain.f0(X), lo, hi)
    for st in chain.steps:
        v = np.clip(v - st.eta * st.auditor(v, X), lo, hi)
    return v


def predict(chain: PredictorChain, x) -> float:
    """Replay the chain on a single feature vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise RejectedInput("predict expects one feature vector; use predict_batch for matrices")
    return float(predict_batch(chain, x[None, :])[0])


def chain_to_dict(chain: PredictorChain) -> dict:
    return {
        "format": FORMAT_TAG,
        "f0": chain.f0.to_dict(),
        "proj": {"lo": encode_real(chain.proj.lo), "hi": encode_real(chain.proj.hi)},
        "n_features": chain.n_features,
        "steps": [{"auditor": st.auditor.to_dict(), "eta": encode_real(st.eta)} for st in chain.steps],
    }


def chain_serialize(chain: PredictorChain) -> str:
    return json.dumps(chain_to_dict(chain), sort_keys=True, separators=(",", ":")) + "\n"


def chain_from_dict(doc) -> PredictorChain:
    if not isinstance(doc, dict):
        raise ChainFormatError("chain document must be a JSON object", 0)
    if doc.get("format") != FORMAT_TAG:
        raise ChainFormatError(f"expected format {FORMAT_TAG!r}, got {doc.get('format')!r}", "format")
    for key in ("f0", "proj", "steps"):
        if key not in doc:
            raise ChainFormatError(f"missing field {key!r}", key)
    try:
        f0 = BasePredictor.from_dict(doc["f0"])
    except ChainFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ChainFormatError(f"bad f0: {exc}", "f0") from None
    proj = doc["proj"]
    if not isinstance(proj, dict):
        raise ChainFormatError("proj must be an object", "proj")
    try:
        proj = ProjectionInterval(decode_real(proj["lo"]), decode_real(proj["hi"]))
    except (KeyError, ValueError) as exc:
        raise ChainFormatError(f"bad proj: {exc}", "proj") from None
    steps = []
    if not isinstance(doc["steps"], list):
        raise ChainFormatError("steps must be a list", "steps")
    for i, st in enumerate(doc["steps"]):
        where = f"steps[{i}]"
        if not isinstance(st, dict) or "auditor" not in st or "eta" not in st:
            raise ChainFormatError("step needs 'auditor' and 'eta'", where)
        eta = decode_real(st["eta"])
        if not eta > 0:
            raise ChainFormatError("eta must be positive", f"{where}.eta")
        steps.append(Step(auditor_from_dict(st["auditor"], f"{where}.auditor"), eta))
    nf = doc.get("n_features")
    return PredictorChain(f0, tuple(steps), proj, None if nf is None else int(nf))


def chain_deserialize(text: str) -> PredictorChain:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ChainFormatError(f"malformed JSON: {exc.msg}", exc.pos) from None
    return chain_from_dict(doc)


def save_chain(chain: PredictorChain, path) -> None:
    with open(path, "w") as fh:
        fh.write(chain_serialize(chain))


def load_chain(path) -> PredictorChain:
    with open(path) as fh:
        return chain_deserialize(fh.read())
