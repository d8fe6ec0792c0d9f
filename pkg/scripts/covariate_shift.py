"""Shift conformal, universal l2 and missing-data fits on Gaussian shift data.

Each scenario is fitted on source rows only and scored on target rows.
Results go to one shift_report.csv.

    python3 scripts/covariate_shift.py --n 20000 --out runs/shift
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from happymap.auditors import make_shift_composite_family
from happymap.chain import predict_batch
from happymap.core import BasePredictor, FitConfig, ProjectionInterval
from happymap.engine import fit
from happymap.mappings import Mapping
from happymap.shift import fit_missing, fit_shift_conformal, fit_universal_l2, lower_bound_coverage, shift_report_row, write_shift_report
from happymap.synth import Mechanism, gen_missing, gen_shift


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=20000, help="rows per domain")
    ap.add_argument("--delta", type=float, default=0.1)
    ap.add_argument("--eta", type=float, default=0.05, help="step size for the residual fits")
    ap.add_argument("--max-iters", type=int, default=2000, help="update budget for the residual fits")
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--out", default="runs/shift")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []

    sc = gen_shift(args.n, args.n, [1.0, 0.0], args.seed)
    th = sc.theta_star
    f0 = BasePredictor.constant(float(np.quantile(sc.source.labels, args.delta)))
    grids = {"realizable": [tuple(th), tuple(0.5 * th), tuple(1.5 * th)], "misspecified": [(0.0, 0.0, 0.0)]}
    for name, grid in grids.items():
        chain, rep = fit_shift_conformal(args.delta, sc.source, grid, FitConfig(alpha=0.03), f0, density_bound=sc.density_bound)
        ev = lower_bound_coverage(chain, sc.target, args.delta)
        rows.append(shift_report_row(f"shift-conformal/{name}", args.n, args.n, "target_coverage", ev.coverage, ev.deviation, name == "realizable"))
        print(f"shift conformal ({name}): {rep.n_updates} updates, target coverage {ev.coverage:.4f}")

    p_list = [sc.bayes_predictor(), BasePredictor.constant(0.5), BasePredictor.linear([0.2, -0.1], 0.5)]
    cfg = FitConfig(alpha=0.02, eta=args.eta, max_iters=args.max_iters)
    _, rep, ev = fit_universal_l2(sc.source, [tuple(th), (0.0, 0.0, 0.0), tuple(0.5 * th)], p_list, cfg, BasePredictor.constant(0.3), target=sc.target, cond_mean=sc.cond_mean)
    rows.append(shift_report_row("universal-l2", args.n, args.n, "target_mse_to_bayes", ev.mse, ev.mse - ev.mse_f0, True))
    print(f"universal l2: {rep.n_updates} updates, target MSE-to-Bayes {ev.mse:.4f} (f0 {ev.mse_f0:.4f})")

    base = gen_shift(args.n, args.n, [0.0, 0.0], args.seed + 2)
    md = gen_missing(base.source, Mechanism.mar([0.0, 1.5]), args.seed + 4)
    grid = [(0.0, 1.5, 0.0), (0.0, 0.0, 0.0), (0.0, 0.75, 0.0)]
    p_list = [base.bayes_predictor(), BasePredictor.constant(0.5), BasePredictor.linear([0.2, -0.1], 0.5)]
    # an explicit step carries no decrease guarantee, so cap the budget
    cfg = FitConfig(alpha=0.02, eta=args.eta, max_iters=args.max_iters)
    chain, rep, _ = fit_missing(md.dataset, (grid, p_list), cfg, BasePredictor.constant(0.3))
    oracle, _ = fit(cfg, md.complete_copy, make_shift_composite_family(grid, p_list, form="inverse"), Mapping.residual(), BasePredictor.constant(0.3), ProjectionInterval.unit())
    test = base.target
    mse = float(np.mean((predict_batch(chain, test.features) - test.labels) ** 2))
    o_mse = float(np.mean((predict_batch(oracle, test.features) - test.labels) ** 2))
    rows.append(shift_report_row("missing/mar", int(md.dataset.complete_flag.sum()), test.n, "test_mse", mse, mse - o_mse, True))
    print(f"missing data: {rep.status.value}, {np.mean(md.dataset.complete_flag):.1%} complete, test MSE {mse:.5f} vs complete-data oracle {o_mse:.5f}")

    write_shift_report(rows, out / "shift_report.csv")


if __name__ == "__main__":
    main()
