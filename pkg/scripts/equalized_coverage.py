"""One-sided, two-sided and multivalid coverage on the heteroscedastic generator.

Writes per-group holdout coverage for the lower bound and the two-sided
interval, and the (group, bin) table of the multivalid bound.

    python3 scripts/equalized_coverage.py --n 40000 --out runs/coverage
"""

from __future__ import annotations

import argparse
from pathlib import Path

from happymap.auditors import group_predicates, make_group_family
from happymap.chain import predict_batch
from happymap.core import BasePredictor, FitConfig
from happymap.fairness import cell_coverage, fit_lower_bound, fit_multivalid, fit_two_sided, group_coverage, no_harm_eval, write_coverage_csv
from happymap.synth import gen_hetero

PREDICATES = [[(0, "<=", 0.5)], [(1, ">", 0.6)], [(2, "<=", 0.3)], [(3, ">", 0.85)]]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=40000)
    ap.add_argument("--delta", type=float, default=0.1)
    ap.add_argument("--alpha", type=float, default=0.03)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--out", default="runs/coverage")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    tr = gen_hetero(args.n, 4, args.seed)
    ho = gen_hetero(args.n, 4, args.seed, start=args.n).dataset
    groups = group_predicates(PREDICATES)
    family = make_group_family(PREDICATES, 1, tr.dataset.features, normalize=True, include_constant=True)
    cfg = FitConfig(alpha=args.alpha, seed=args.seed)

    chain, rep = fit_lower_bound(args.delta, tr.dataset, family, cfg, density_bound=tr.density_bound)
    covered = predict_batch(chain, ho.features) <= ho.labels
    rows = group_coverage(covered, ho.features, groups, 1 - args.delta)
    write_coverage_csv(rows, out / "lower_coverage.csv")
    print(f"lower bound: {rep.n_updates} updates, {rep.status.value}")
    for r in rows:
        print(f"  {r.group_id:<18} n={r.n:<6} coverage={r.coverage:.4f} deviation={r.deviation:+.4f}")

    iv = fit_two_sided(2 * args.delta, tr.dataset, family, cfg, density_bound=tr.density_bound)
    rows = group_coverage(iv.contains(ho.features, ho.labels), ho.features, groups, 1 - 2 * args.delta)
    write_coverage_csv(rows, out / "interval_coverage.csv")
    print(f"two-sided at level {1 - 2 * args.delta:.2f}, crossing fraction {iv.metadata['crossing_fraction']:.4f}")
    for r in rows:
        print(f"  {r.group_id:<18} n={r.n:<6} coverage={r.coverage:.4f} deviation={r.deviation:+.4f}")

    mv_chain, mv_rep, mv_family = fit_multivalid(
        args.delta, tr.dataset, None, [[(1, "<=", 0.5)], [(1, ">", 0.5)]], FitConfig(alpha=0.05, seed=args.seed), BasePredictor.column(0), n_bins=4, density_bound=tr.density_bound
    )
    v = predict_batch(mv_chain, ho.features)
    cells = cell_coverage(v, v <= ho.labels, ho.features, mv_family, 1 - args.delta)
    write_coverage_csv(cells, out / "multivalid_cells.csv")
    print(f"multivalid: {mv_rep.n_updates} updates, holdout max mass-weighted deviation {max(abs(c.mass_weighted_deviation) for c in cells):.4f}")

    nh = no_harm_eval(tr.dataset, tr.cond_quantile(args.delta), 0.1, args.delta, family, cfg, density_bound=tr.density_bound)
    print(f"no-harm: mse_init={nh['mse_init']:.5f} mse_final={nh['mse_final']:.5f} ratio={nh['ratio']:.4f}")


if __name__ == "__main__":
    main()
