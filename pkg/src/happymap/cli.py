"""Command-line entry point.

    happymap <command> --config <path> [--seed N] [--out DIR] [--holdout FRACTION]

The config is a JSON object; every key is validated against the command's
schema before any computation and unknown keys are rejected. Relative
paths inside the config are resolved against the config file's directory.
On failure the command writes ``error.json`` to the output directory,
removes any partial outputs, and exits with status 1.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from happymap.auditors import (
    UnionFamily,
    group_predicates,
    make_constant_family,
    make_group_family,
    make_linear_family,
    make_multivalidity_family,
    make_propensity_family,
    make_shift_composite_family,
    make_stump_family,
)
from happymap.chain import PredictorChain, load_chain, predict_batch, save_chain
from happymap.core import BasePredictor, Dataset, FitConfig, HappyMapError, ProjectionInterval, RejectedConfig, RejectedInput
from happymap.engine import audit, fit
from happymap.fairness import (
    AbsResidualScore,
    cell_coverage,
    fit_lower_bound,
    fit_multivalid,
    fit_score_interval,
    fit_two_sided,
    write_coverage_csv,
)
from happymap.io import load_dataset, save_dataset
from happymap.mappings import DEFAULT_DENSITY_BOUND, Mapping
from happymap.shift import (
    fit_missing,
    fit_multiparity,
    fit_shift_conformal,
    fit_universal_l2,
    lower_bound_coverage,
    shift_report_row,
    write_shift_report,
)
from happymap.synth import Mechanism, gen_groups, gen_hetero, gen_missing, gen_shift

log = logging.getLogger("happymap")

METRICS_HEADER = ["metric", "subgroup", "n", "value", "se"]


class UsageError(HappyMapError):
    pass


# --------------------------------------------------------------------------
# config validation

_COMMON = {"data", "fit"}
SCHEMAS = {
    "fit": _COMMON | {"mapping", "family", "f0", "proj", "eval_data", "groups"},
    "audit": {"data", "chain", "mapping", "family"},
    "conformal": _COMMON | {"delta", "family", "f0", "density_bound", "eval_data", "groups", "score"},
    "conformal2": _COMMON | {"delta", "family", "density_bound", "eval_data", "groups"},
    "multivalid": _COMMON | {"delta", "groups", "lam", "n_bins", "f0", "density_bound", "eval_data"},
    "shift-conformal": _COMMON | {"delta", "theta_grid", "clamp", "f0", "density_bound"},
    "universal-l2": _COMMON | {"theta_grid", "p_list", "clamp", "f0"},
    "missing": _COMMON | {"theta_grid", "p_list", "clamp", "f0", "eval_data"},
    "parity": _COMMON | {"groups", "f0"},
    "synth": {"generator", "groups", "seed"},
    "eval": {"data", "chain", "chains", "task", "delta", "groups", "mapping", "family", "score"},
}
REQUIRED = {
    "fit": {"data", "fit", "family"},
    "audit": {"data", "chain", "family"},
    "conformal": {"data", "fit", "delta", "family"},
    "conformal2": {"data", "fit", "delta", "family"},
    "multivalid": {"data", "fit", "delta"},
    "shift-conformal": {"data", "fit", "delta", "theta_grid"},
    "universal-l2": {"data", "fit", "theta_grid", "p_list"},
    "missing": {"data", "fit", "theta_grid", "p_list"},
    "parity": {"data", "fit", "groups", "f0"},
    "synth": {"generator"},
    "eval": {"data", "task"},
}
FIT_KEYS = {"alpha", "eta", "max_iters", "mode", "fold_size", "seed"}
FAMILY_KEYS = {
    "constant": set(),
    "groups": {"predicates", "depth", "normalize", "include_constant"},
    "stumps": {"thresholds", "features"},
    "linear": {"b_w", "intercept"},
    "propensity": {"theta_grid", "clamp", "form"},
    "shift-composite": {"theta_grid", "p_list", "clamp", "form"},
    "multivalidity": {"lam", "c_bin", "lo", "hi", "groups"},
    "union": {"families"},
}


def _check_keys(obj, allowed, where, required=()):
    if not isinstance(obj, dict):
        raise RejectedConfig(f"{where} must be a JSON object")
    extra = sorted(set(obj) - set(allowed))
    if extra:
        raise RejectedConfig(f"{where}: unknown key(s) {extra}")
    missing = sorted(set(required) - set(obj))
    if missing:
        raise RejectedConfig(f"{where}: missing key(s) {missing}")


def validate_config(command: str, cfg: dict) -> None:
    _check_keys(cfg, SCHEMAS[command], "config", REQUIRED[command])
    if "fit" in cfg:
        _check_keys(cfg["fit"], FIT_KEYS, "fit", {"alpha"})
    if "family" in cfg:
        _validate_family(cfg["family"], "family")
    if "delta" in cfg and not (isinstance(cfg["delta"], (int, float)) and 0 < cfg["delta"] < 1):
        raise RejectedConfig("delta must lie in (0, 1)")
    if "mapping" in cfg:
        Mapping.parse(cfg["mapping"])
    if command == "eval" and cfg["task"] not in ("regression", "lower", "interval", "parity", "audit"):
        raise RejectedConfig("eval task must be regression, lower, interval, parity or audit")
    if command == "synth":
        _check_keys(cfg["generator"], {"kind", "n", "d", "n_so", "n_ta", "mu", "noise", "weights", "offset", "base", "mechanism", "masked_columns"}, "generator", {"kind"})


def _validate_family(spec, where):
    if not isinstance(spec, dict) or spec.get("kind") not in FAMILY_KEYS:
        raise RejectedConfig(f"{where}: kind must be one of {sorted(FAMILY_KEYS)}")
    _check_keys(spec, FAMILY_KEYS[spec["kind"]] | {"kind"}, where)
    if spec["kind"] == "union":
        for i, sub in enumerate(spec.get("families", [])):
            _validate_family(sub, f"{where}.families[{i}]")


def fit_config(block: dict, seed: int | None) -> FitConfig:
    kw = dict(block)
    if seed is not None:
        kw["seed"] = seed
    return FitConfig(**kw)


# --------------------------------------------------------------------------
# builders


def build_family(spec: dict, X) -> object:
    kind = spec["kind"]
    if kind == "constant":
        return make_constant_family()
    if kind == "groups":
        return make_group_family(spec["predicates"], spec.get("depth", 1), X, spec.get("normalize", False), spec.get("include_constant", False))
    if kind == "stumps":
        return make_stump_family(X, int(spec.get("thresholds", 10)), spec.get("features"))
    if kind == "linear":
        return make_linear_family(X, float(spec.get("b_w", 1.0)), bool(spec.get("intercept", False)))
    if kind == "propensity":
        return make_propensity_family(spec["theta_grid"], tuple(spec.get("clamp", (0.05, 0.95))), spec.get("form", "odds"))
    if kind == "shift-composite":
        plist = [build_predictor(p, None) for p in spec["p_list"]]
        return make_shift_composite_family(spec["theta_grid"], plist, tuple(spec.get("clamp", (0.05, 0.95))), spec.get("form", "odds"))
    if kind == "multivalidity":
        groups = group_predicates(spec["groups"]) if spec.get("groups") else None
        return make_multivalidity_family(float(spec["lam"]), spec.get("c_bin"), groups, spec.get("lo"), spec.get("hi"))
    if kind == "union":
        return UnionFamily([build_family(s, X) for s in spec["families"]])
    raise RejectedConfig(f"unknown family kind {kind!r}")


def build_predictor(spec, y) -> BasePredictor:
    """Base predictor from config: a stored predictor dict, or ``mean`` /
    ``quantile`` computed from the training labels."""
    if not isinstance(spec, dict) or "kind" not in spec:
        raise RejectedConfig("predictor spec must be an object with a 'kind'")
    kind = spec["kind"]
    if kind in ("mean", "quantile"):
        if y is None:
            raise RejectedConfig(f"predictor kind {kind!r} needs training labels")
        if kind == "mean":
            _check_keys(spec, {"kind"}, "f0")
            return BasePredictor.constant(float(np.mean(y)))
        _check_keys(spec, {"kind", "q"}, "f0", {"q"})
        return BasePredictor.constant(float(np.quantile(y, float(spec["q"]))))
    try:
        return BasePredictor.from_dict(spec)
    except (KeyError, TypeError) as exc:
        raise RejectedConfig(f"bad predictor spec: {exc}") from None


def build_proj(spec, y) -> ProjectionInterval:
    if spec is None or spec == "labels":
        return ProjectionInterval.around_labels(y) if y is not None else ProjectionInterval()
    if spec == "unit":
        return ProjectionInterval.unit()
    if spec == "none":
        return ProjectionInterval()
    if isinstance(spec, dict):
        _check_keys(spec, {"lo", "hi"}, "proj", {"lo", "hi"})
        return ProjectionInterval(float(spec["lo"]), float(spec["hi"]))
    raise RejectedConfig("proj must be 'labels', 'unit', 'none' or {lo, hi}")


# --------------------------------------------------------------------------
# metrics


def _metric(rows, metric, subgroup, n, value, se=""):
    rows.append([metric, subgroup, n, value, se])


def _groups_for(cfg, family=None):
    if cfg.get("groups"):
        return group_predicates(cfg["groups"])
    fam = cfg.get("family")
    if isinstance(fam, dict) and fam.get("kind") == "groups":
        return group_predicates(fam["predicates"], fam.get("depth", 1))
    return []


def _coverage_rows(rows, metric, covered, X, groups):
    covered = np.asarray(covered, dtype=bool)
    parts = [("all", np.ones(len(covered), dtype=bool))] + [(g.label(), g.membership(X)) for g in groups]
    for name, m in parts:
        k = int(m.sum())
        if k == 0:
            _metric(rows, metric, name, 0, "", "")
            continue
        p = float(covered[m].mean())
        _metric(rows, metric, name, k, p, math.sqrt(p * (1 - p) / k))


def _mean_rows(rows, metric, values, X, groups):
    parts = [("all", np.ones(len(values), dtype=bool))] + [(g.label(), g.membership(X)) for g in groups]
    for name, m in parts:
        k = int(m.sum())
        if k == 0:
            _metric(rows, metric, name, 0, "", "")
            continue
        v = values[m]
        se = float(v.std(ddof=1) / math.sqrt(k)) if k > 1 and np.all(np.isfinite(v)) else ""
        _metric(rows, metric, name, k, float(v.mean()), se)


@dataclass
class IntervalSpec:
    lower: PredictorChain | None = None
    upper: PredictorChain | None = None
    threshold: PredictorChain | None = None
    score: AbsResidualScore | None = None


def eval_report(predictor, dataset: Dataset, spec: dict) -> list[list]:
    """Metric rows (metric, subgroup, n, value, se) for a chain or interval.

    ``spec`` holds ``task`` and optionally ``groups``, ``delta``,
    ``mapping`` and ``family``.
    """
    task = spec["task"]
    X = dataset.features
    groups = _groups_for(spec)
    rows: list[list] = []
    if task == "interval":
        iv = predictor
        n = dataset.n
        if iv.threshold is not None:
            q = predict_batch(iv.threshold, X)
            lo, hi = iv.score.invert(X, q)
        else:
            lo = predict_batch(iv.lower, X) if iv.lower is not None else np.full(n, -np.inf)
            hi = predict_batch(iv.upper, X) if iv.upper is not None else np.full(n, np.inf)
        y = dataset.require_labels()
        _coverage_rows(rows, "coverage", (lo <= y) & (y <= hi), X, groups)
        _mean_rows(rows, "width", hi - lo, X, groups)
        return rows
    f = predict_batch(predictor, X)
    if task == "regression":
        y = dataset.require_labels()
        _mean_rows(rows, "mse", (f - y) ** 2, X, groups)
    elif task == "lower":
        y = dataset.require_labels()
        _coverage_rows(rows, "coverage", f <= y, X, groups)
        _mean_rows(rows, "lower", f, X, groups)
    elif task == "parity":
        _mean_rows(rows, "selection_rate", f, X, groups)
    elif task == "audit":
        mapping = Mapping.parse(spec.get("mapping", "residual"))
        family = build_family(spec["family"], X)
        rep = audit(f, dataset, family, mapping)
        for member, viol in rep.table:
            _metric(rows, "violation", member, dataset.n, viol)
        _metric(rows, "max_abs_violation", "all", dataset.n, rep.max_abs_violation)
    else:
        raise RejectedConfig(f"unknown eval task {task!r}")
    return rows


# --------------------------------------------------------------------------
# run context


@dataclass
class Context:
    command: str
    cfg: dict
    base_dir: Path
    out: Path
    seed: int | None
    holdout: float | None
    written: list[Path] = field(default_factory=list)

    def path(self, name: str) -> Path:
        p = self.out / name
        self.written.append(p)
        return p

    def resolve(self, rel) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p

    def dataset(self, key="data", require_labels=True) -> Dataset:
        return load_dataset(self.resolve(self.cfg[key]), require_labels=require_labels)

    def split(self, ds: Dataset) -> tuple[Dataset, Dataset | None]:
        """Training rows and the evaluation set (holdout split, eval_data, or none)."""
        if self.holdout is not None:
            if not 0 < self.holdout < 1:
                raise RejectedConfig("--holdout must lie in (0, 1)")
            perm = np.random.default_rng(self.seed or 0).permutation(ds.n)
            k = int(round(self.holdout * ds.n))
            if k < 1 or k >= ds.n:
                raise RejectedConfig("--holdout leaves an empty training or evaluation set")
            return ds.subset(np.sort(perm[k:])), ds.subset(np.sort(perm[:k]))
        if "eval_data" in self.cfg:
            return ds, self.dataset("eval_data")
        return ds, None

    def fit_config(self) -> FitConfig:
        return fit_config(self.cfg["fit"], self.seed)

    def write_metrics(self, rows, name="metrics.csv"):
        with open(self.path(name), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRICS_HEADER)
            w.writerows(rows)

    def write_fit(self, chain, report, prefix=""):
        save_chain(chain, self.path(f"{prefix}chain.json"))
        report.write_json(self.path(f"{prefix}report.json"))
        report.write_csv(self.path(f"{prefix}report.csv"))


def _report_metrics(rows, report, label="train"):
    _metric(rows, "final_max_violation", label, "", report.final_max_violation)
    _metric(rows, "iterations", label, "", report.n_updates)


# --------------------------------------------------------------------------
# commands


def cmd_fit(ctx: Context):
    ds, ev = ctx.split(ctx.dataset())
    mapping = Mapping.parse(ctx.cfg.get("mapping", "residual"))
    family = build_family(ctx.cfg["family"], ds.features)
    y = ds.labels
    f0 = build_predictor(ctx.cfg.get("f0", {"kind": "mean"}), y)
    proj = build_proj(ctx.cfg.get("proj"), y)
    chain, rep = fit(ctx.fit_config(), ds, family, mapping, f0, proj)
    ctx.write_fit(chain, rep)
    rows = []
    _report_metrics(rows, rep)
    if ev is not None:
        final = audit(predict_batch(chain, ev.features), ev, family, mapping)
        _metric(rows, "final_max_violation", "eval", ev.n, final.max_abs_violation)
    ctx.write_metrics(rows)


def cmd_audit(ctx: Context):
    ds = ctx.dataset()
    chain = load_chain(ctx.resolve(ctx.cfg["chain"]))
    mapping = Mapping.parse(ctx.cfg.get("mapping", "residual"))
    family = build_family(ctx.cfg["family"], ds.features)
    rep = audit(predict_batch(chain, ds.features), ds, family, mapping)
    with open(ctx.path("audit.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["auditor_id", "violation"])
        for member, viol in rep.table:
            w.writerow([member, repr(viol)])
    ctx.write_metrics([["max_abs_violation", "all", ds.n, rep.max_abs_violation, ""]])


def _density(ctx):
    return float(ctx.cfg.get("density_bound", DEFAULT_DENSITY_BOUND))


def cmd_conformal(ctx: Context):
    ds, ev = ctx.split(ctx.dataset())
    family = build_family(ctx.cfg["family"], ds.features)
    delta = float(ctx.cfg["delta"])
    if "score" in ctx.cfg:
        _check_keys(ctx.cfg["score"], {"kind", "h"}, "score", {"kind", "h"})
        if ctx.cfg["score"]["kind"] != "abs-residual":
            raise RejectedConfig("only the 'abs-residual' score is supported")
        score = AbsResidualScore(build_predictor(ctx.cfg["score"]["h"], None))
        f0 = build_predictor(ctx.cfg["f0"], None) if "f0" in ctx.cfg else None
        iv = fit_score_interval(delta, ds, score, score.invert, family, ctx.fit_config(), f0, _density(ctx))
        rep = iv.metadata["report"]
        ctx.write_fit(iv.threshold, rep)
        spec = IntervalSpec(threshold=iv.threshold, score=score)
        task = "interval"
    else:
        f0 = build_predictor(ctx.cfg.get("f0", {"kind": "mean"}), ds.labels)
        chain, rep = fit_lower_bound(delta, ds, family, ctx.fit_config(), f0, density_bound=_density(ctx))
        ctx.write_fit(chain, rep)
        spec, task = chain, "lower"
    rows = []
    _report_metrics(rows, rep)
    target = ev if ev is not None else ds
    rows += eval_report(spec, target, {"task": task, "groups": ctx.cfg.get("groups"), "family": ctx.cfg["family"]})
    ctx.write_metrics(rows)


def cmd_conformal2(ctx: Context):
    ds, ev = ctx.split(ctx.dataset())
    family = build_family(ctx.cfg["family"], ds.features)
    iv = fit_two_sided(float(ctx.cfg["delta"]), ds, family, ctx.fit_config(), density_bound=_density(ctx))
    ctx.write_fit(iv.lower, iv.metadata["lower_report"], "lower_")
    ctx.write_fit(iv.upper, iv.metadata["upper_report"], "upper_")
    rows = []
    _report_metrics(rows, iv.metadata["lower_report"], "train_lower")
    _report_metrics(rows, iv.metadata["upper_report"], "train_upper")
    _metric(rows, "crossing_fraction", "train", ds.n, iv.metadata["crossing_fraction"])
    target = ev if ev is not None else ds
    rows += eval_report(IntervalSpec(iv.lower, iv.upper), target, {"task": "interval", "groups": ctx.cfg.get("groups"), "family": ctx.cfg["family"]})
    ctx.write_metrics(rows)


def cmd_multivalid(ctx: Context):
    ds, ev = ctx.split(ctx.dataset())
    delta = float(ctx.cfg["delta"])
    f0 = build_predictor(ctx.cfg.get("f0", {"kind": "mean"}), ds.labels)
    chain, rep, family = fit_multivalid(
        delta, ds, ctx.cfg.get("lam"), ctx.cfg.get("groups"), ctx.fit_config(), f0, n_bins=ctx.cfg.get("n_bins"), density_bound=_density(ctx)
    )
    ctx.write_fit(chain, rep)
    target = ev if ev is not None else ds
    v = predict_batch(chain, target.features)
    cells = cell_coverage(v, v <= target.require_labels(), target.features, family, 1 - delta)
    write_coverage_csv(cells, ctx.path("cells.csv"))
    rows = []
    _report_metrics(rows, rep)
    _metric(rows, "max_mass_weighted_deviation", "eval" if ev is not None else "train", target.n, max(abs(c.mass_weighted_deviation) for c in cells))
    ctx.write_metrics(rows)


def _domain_split(ds: Dataset) -> tuple[Dataset, Dataset | None]:
    if ds.domain_tag is None:
        return ds, None
    so = np.flatnonzero(ds.domain_tag == "so")
    ta = np.flatnonzero(ds.domain_tag == "ta")
    if so.size == 0:
        raise RejectedInput("no source rows (z = so) to fit on")
    return ds.subset(so), (ds.subset(ta) if ta.size else None)


def cmd_shift_conformal(ctx: Context):
    so, ta = _domain_split(ctx.dataset())
    delta = float(ctx.cfg["delta"])
    f0 = build_predictor(ctx.cfg.get("f0", {"kind": "quantile", "q": delta}), so.labels)
    chain, rep = fit_shift_conformal(delta, so, ctx.cfg["theta_grid"], ctx.fit_config(), f0, tuple(ctx.cfg.get("clamp", (0.05, 0.95))), _density(ctx))
    ctx.write_fit(chain, rep)
    rows = []
    if ta is not None:
        c = lower_bound_coverage(chain, ta, delta)
        rows.append(shift_report_row("cli", so.n, ta.n, "target_coverage", c.coverage, c.deviation, False))
    write_shift_report(rows, ctx.path("shift_report.csv"))
    m = []
    _report_metrics(m, rep)
    ctx.write_metrics(m)


def cmd_universal_l2(ctx: Context):
    so, ta = _domain_split(ctx.dataset())
    plist = [build_predictor(p, None) for p in ctx.cfg["p_list"]]
    f0 = build_predictor(ctx.cfg["f0"], so.labels) if "f0" in ctx.cfg else None
    chain, rep, ev = fit_universal_l2(so, ctx.cfg["theta_grid"], plist, ctx.fit_config(), f0, tuple(ctx.cfg.get("clamp", (0.05, 0.95))), target=ta)
    ctx.write_fit(chain, rep)
    rows = []
    if ev is not None:
        rows.append(shift_report_row("cli", so.n, ta.n, "target_mse", ev.mse, ev.mse - ev.mse_f0, False))
    write_shift_report(rows, ctx.path("shift_report.csv"))
    m = []
    _report_metrics(m, rep)
    ctx.write_metrics(m)


def cmd_missing(ctx: Context):
    ds = ctx.dataset()
    plist = [build_predictor(p, None) for p in ctx.cfg["p_list"]]
    fam = make_shift_composite_family(ctx.cfg["theta_grid"], plist, tuple(ctx.cfg.get("clamp", (0.05, 0.95))), "inverse")
    f0 = build_predictor(ctx.cfg["f0"], None) if "f0" in ctx.cfg else None
    full = ctx.dataset("eval_data") if "eval_data" in ctx.cfg else None
    chain, rep, ev = fit_missing(ds, fam, ctx.fit_config(), f0, complete_copy=full)
    ctx.write_fit(chain, rep)
    rows = []
    _report_metrics(rows, rep)
    _metric(rows, "complete_fraction", "train", ds.n, float(np.mean(ds.complete_flag)) if ds.complete_flag is not None else 1.0)
    if ev is not None:
        _metric(rows, "full_mse", "eval", ev.n, ev.mse)
        _metric(rows, "full_mse_f0", "eval", ev.n, ev.mse_f0)
    ctx.write_metrics(rows)


def cmd_parity(ctx: Context):
    ds = ctx.dataset(require_labels=False)
    groups = group_predicates(ctx.cfg["groups"])
    f0 = build_predictor(ctx.cfg["f0"], None)
    chain, rep = fit_multiparity(ds, groups, ctx.fit_config(), f0)
    ctx.write_fit(chain, rep)
    rows = []
    _report_metrics(rows, rep)
    _mean_rows(rows, "selection_rate_init", np.clip(f0(ds.features), 0, 1), ds.features, groups)
    _mean_rows(rows, "selection_rate", predict_batch(chain, ds.features), ds.features, groups)
    ctx.write_metrics(rows)


def _json_dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True)
        fh.write("\n")


def _generate(spec: dict, seed: int):
    kind = spec["kind"]
    if kind == "hetero":
        g = gen_hetero(int(spec.get("n", 1000)), int(spec.get("d", 2)), seed)
        return g.dataset, g.sidecar(), None
    if kind == "shift":
        sc = gen_shift(int(spec.get("n_so", 1000)), int(spec.get("n_ta", 1000)), spec.get("mu", [1.0, 0.0]), seed, spec.get("weights"), float(spec.get("offset", 0.0)), float(spec.get("noise", 0.1)))
        so, ta = sc.source, sc.target
        both = Dataset(
            np.vstack([so.features, ta.features]),
            np.concatenate([so.labels, ta.labels]),
            domain_tag=np.concatenate([so.domain_tag, ta.domain_tag]),
        )
        return both, sc.sidecar(), None
    if kind == "missing":
        if "base" not in spec or "mechanism" not in spec:
            raise RejectedConfig("missing generator needs 'base' and 'mechanism'")
        base, _, _ = _generate(spec["base"], seed)
        if base.domain_tag is not None:
            base = Dataset(base.features, base.labels)
        mech = spec["mechanism"]
        _check_keys(mech, {"kind", "rho", "theta"}, "mechanism", {"kind"})
        if mech["kind"] == "mcar":
            m = Mechanism.mcar(mech.get("rho", 0.5))
        elif mech["kind"] == "mar":
            m = Mechanism.mar(mech.get("theta", ()))
        else:
            m = Mechanism.mnar(mech.get("theta", ()))
        md = gen_missing(base, m, seed, spec.get("masked_columns"))
        return md.dataset, md.sidecar(), md.complete_copy
    raise RejectedConfig(f"unknown generator kind {kind!r}")


def cmd_synth(ctx: Context):
    seed = ctx.seed if ctx.seed is not None else int(ctx.cfg.get("seed", 0))
    ds, side, complete = _generate(ctx.cfg["generator"], seed)
    if ctx.cfg.get("groups"):
        g = ctx.cfg["groups"]
        preds = g["predicates"] if isinstance(g, dict) else g
        depth = g.get("depth", 1) if isinstance(g, dict) else 1
        ds = gen_groups(ds, preds, depth)
    save_dataset(ds, ctx.path("data.csv"))
    if complete is not None:
        save_dataset(complete, ctx.path("complete.csv"))
    _json_dump(side, ctx.path("oracle.json"))


def cmd_eval(ctx: Context):
    ds = ctx.dataset(require_labels=ctx.cfg["task"] not in ("parity",))
    if ctx.holdout is not None:
        _, ds = ctx.split(ds)
    task = ctx.cfg["task"]
    if task == "interval":
        ch = ctx.cfg.get("chains")
        if not isinstance(ch, dict):
            raise RejectedConfig("interval evaluation needs 'chains': {lower, upper} or {threshold}")
        _check_keys(ch, {"lower", "upper", "threshold"}, "chains")
        spec = IntervalSpec(
            lower=load_chain(ctx.resolve(ch["lower"])) if "lower" in ch else None,
            upper=load_chain(ctx.resolve(ch["upper"])) if "upper" in ch else None,
        )
        if "threshold" in ch:
            if "score" not in ctx.cfg:
                raise RejectedConfig("a threshold chain needs a 'score' spec")
            spec.threshold = load_chain(ctx.resolve(ch["threshold"]))
            spec.score = AbsResidualScore(build_predictor(ctx.cfg["score"]["h"], None))
        predictor = spec
    else:
        if "chain" not in ctx.cfg:
            raise RejectedConfig(f"eval task {task!r} needs 'chain'")
        predictor = load_chain(ctx.resolve(ctx.cfg["chain"]))
    ctx.write_metrics(eval_report(predictor, ds, ctx.cfg))


COMMANDS = {
    "fit": cmd_fit,
    "audit": cmd_audit,
    "conformal": cmd_conformal,
    "conformal2": cmd_conformal2,
    "multivalid": cmd_multivalid,
    "shift-conformal": cmd_shift_conformal,
    "universal-l2": cmd_universal_l2,
    "missing": cmd_missing,
    "parity": cmd_parity,
    "synth": cmd_synth,
    "eval": cmd_eval,
}


# --------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="happymap", description="Fit, audit and evaluate auditor-driven post-processing chains.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=".", help="output directory (default: current directory)")
    p.add_argument("--holdout", type=float, default=None, help="fraction of rows held out for evaluation")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _out_from_argv(argv) -> Path:
    for i, a in enumerate(argv):
        if a == "--out" and i + 1 < len(argv):
            return Path(argv[i + 1])
        if a.startswith("--out="):
            return Path(a.split("=", 1)[1])
    return Path(".")


def _error_record(exc: BaseException, command: str | None) -> dict:
    rec = {"command": command, "error": type(exc).__name__, "message": str(exc)}
    for attr in ("position", "row", "column"):
        if getattr(exc, attr, None) is not None:
            rec[attr] = getattr(exc, attr)
    return rec


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ctx = None
    command = None
    try:
        args = build_parser().parse_args(argv)
        command = args.command
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s")
        cfg_path = Path(args.config)
        try:
            with open(cfg_path) as fh:
                cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise RejectedConfig(f"{cfg_path}: malformed JSON at position {exc.pos}: {exc.msg}") from None
        except OSError as exc:
            raise RejectedConfig(f"cannot read config: {exc}") from None
        validate_config(command, cfg)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        stale = out / "error.json"
        if stale.exists():
            stale.unlink()
        ctx = Context(command, cfg, cfg_path.resolve().parent, out, args.seed, args.holdout)
        COMMANDS[command](ctx)
        log.info("%s finished; wrote %s", command, ", ".join(p.name for p in ctx.written))
        return 0
    except (HappyMapError, ValueError, KeyError, TypeError, OSError) as exc:
        if ctx is not None:
            for p in ctx.written:
                if p.exists():
                    p.unlink()
        out = ctx.out if ctx is not None else _out_from_argv(argv)
        try:
            out.mkdir(parents=True, exist_ok=True)
            _json_dump(_error_record(exc, command), out / "error.json")
        except OSError:
            pass
        print(f"happymap: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
