from __future__ import annotations

import csv

import numpy as np
import pytest
from scipy.special import ndtri

from happymap.auditors import group_predicates, make_constant_family, make_group_family
from happymap.chain import predict_batch
from happymap.core import BasePredictor, Dataset, FitConfig, ProjectionInterval, RejectedConfig, Status
from happymap.engine import audit
from happymap.fairness import (
    COVERAGE_HEADER,
    AbsResidualScore,
    cell_coverage,
    fit_lower_bound,
    fit_multivalid,
    fit_score_interval,
    fit_two_sided,
    group_coverage,
    no_harm_eval,
    write_coverage_csv,
)
from happymap.mappings import Mapping
from happymap.synth import gen_hetero, normals, uniforms


@pytest.fixture(scope="module")
def uniform_data():
    n = 10**5
    return Dataset(uniforms(1, "fx", n)[:, None], uniforms(1, "fy", n))


def test_constant_family_recovers_uniform_quantile(uniform_data):
    chain, rep = fit_lower_bound(0.1, uniform_data, make_constant_family(), FitConfig(alpha=0.01), density_bound=1.0)
    l = rep.final_values[0]
    y = uniform_data.labels
    cov = np.mean(y >= l)
    assert abs(cov - 0.9) <= 0.01
    # empirical-quantile oracle: the U(0,1) 0.1-quantile is 0.1
    assert abs(l - np.quantile(y, 0.1)) <= 0.01 + 1e-3
    assert rep.status is Status.CONVERGED


def test_median_under_symmetric_noise():
    n = 20000
    y = normals(2, "med", n)
    ds = Dataset(np.zeros((n, 1)), y)
    _, rep = fit_lower_bound(0.5, ds, make_constant_family(), FitConfig(alpha=0.005), density_bound=0.4)
    assert abs(rep.final_values[0] - np.median(y)) < 0.05


def test_true_quantile_start_needs_few_steps():
    g = gen_hetero(20000, 2, 3)
    ds = g.dataset
    fam = make_group_family([[(0, "<=", 0.5)], [(1, ">", 0.5)]], 1, ds.features)
    # the true quantile enters as a score column so the chain can replay it
    q = g.cond_quantile(0.1)(ds.features)
    work = ds.with_extra_feature(q, "q_true")
    chain, rep = fit_lower_bound(0.1, work, fam, FitConfig(alpha=0.02), BasePredictor.column(2), density_bound=g.density_bound)
    assert rep.n_updates <= 3 and rep.status is Status.CONVERGED
    cov = np.mean(ds.labels >= rep.final_values)
    assert abs(cov - 0.9) <= 0.02 + 3 * np.sqrt(0.09 / ds.n)


def test_one_sided_training_audit_after_convergence():
    g = gen_hetero(10000, 3, 4)
    fam = make_group_family([[(0, "<=", 0.4)], [(2, ">", 0.5)]], 2, g.dataset.features, include_constant=True)
    chain, rep = fit_lower_bound(0.2, g.dataset, fam, FitConfig(alpha=0.03), density_bound=g.density_bound)
    assert rep.status is Status.CONVERGED
    a = audit(predict_batch(chain, g.dataset.features), g.dataset, fam, Mapping.quantile(0.2))
    assert a.max_abs_violation <= 0.03


def test_two_sided_uniform(uniform_data):
    alpha = 0.01
    iv = fit_two_sided(0.2, uniform_data, make_constant_family(), FitConfig(alpha=alpha), density_bound=1.0)
    X, y = uniform_data.features, uniform_data.labels
    lo, hi = iv.bounds(X[:1])
    assert lo[0] == pytest.approx(0.1, abs=0.015) and hi[0] == pytest.approx(0.9, abs=0.015)
    assert iv.width(X[:1])[0] == pytest.approx(0.8, abs=0.03)
    inside = iv.contains(X, y)
    assert abs(inside.mean() - 0.8) <= 2 * alpha
    # indicator decomposition with continuous labels
    lo, hi = iv.bounds(X)
    assert np.array_equal(inside.astype(int), (lo <= y).astype(int) - (hi < y).astype(int))
    assert iv.construction == "two-chains"
    assert iv.metadata["crossing_fraction"] == 0.0


def test_two_sided_crossing_warns(uniform_data):
    with pytest.warns(UserWarning, match="lower bound exceeds"):
        fit_two_sided(
            0.2,
            uniform_data,
            make_constant_family(),
            FitConfig(alpha=0.01, max_iters=1),
            f0_lower=BasePredictor.constant(0.9),
            f0_upper=BasePredictor.constant(0.1),
        )


def test_score_interval_half_normal_quantile():
    n = 50000
    X = uniforms(5, "sx", n)[:, None]
    h = BasePredictor.linear([2.0], 0.5)
    y = h(X) + normals(5, "sy", n)
    ds = Dataset(X, y)
    score = AbsResidualScore(h)
    iv = fit_score_interval(0.1, ds, score, score.invert, make_constant_family(), FitConfig(alpha=0.005), density_bound=0.8)
    q = predict_batch(iv.threshold, X[:1])[0]
    assert q == pytest.approx(ndtri(0.95), abs=0.05)
    lo, hi = iv.bounds(X)
    inside = (lo <= y) & (y <= hi)
    assert np.array_equal(inside, score(X, y) <= predict_batch(iv.threshold, X))
    assert np.array_equal(inside, iv.contains(X, y))


def test_score_interval_boundary_and_bad_inverter():
    h = BasePredictor.constant(1.0)
    score = AbsResidualScore(h)
    lo, hi = score.invert(np.zeros((3, 1)), np.zeros(3))
    assert np.array_equal(lo, hi) and np.all(lo == 1.0)
    rng = np.random.default_rng(6)
    ds = Dataset(rng.random((500, 1)), rng.normal(size=500))
    shifted = lambda X, q: (h(X) - q + 0.5, h(X) + q + 0.5)  # noqa: E731
    with pytest.raises(RejectedConfig):
        fit_score_interval(0.1, ds, score, shifted, make_constant_family(), FitConfig(alpha=0.05))


def test_multivalid_single_bin_collapses_to_constant_family(uniform_data):
    proj = ProjectionInterval(0.0, 1.0)
    with pytest.warns(UserWarning):
        chain, rep, fam = fit_multivalid(0.1, uniform_data, 2.0, None, FitConfig(alpha=0.01), proj=proj, density_bound=1.0)
    _, ref = fit_lower_bound(0.1, uniform_data, make_constant_family(), FitConfig(alpha=0.01), proj=proj, density_bound=1.0)
    assert np.array_equal(rep.final_values, ref.final_values)
    assert rep.n_updates == ref.n_updates


@pytest.fixture(scope="module")
def multivalid_run():
    g = gen_hetero(20000, 3, 7)
    groups = [[(1, "<=", 0.5)], [(1, ">", 0.5)]]
    chain, rep, fam = fit_multivalid(0.1, g.dataset, None, groups, FitConfig(alpha=0.05), BasePredictor.column(0), n_bins=4, density_bound=g.density_bound)
    return g, chain, rep, fam


def test_multivalid_cells_within_alpha(multivalid_run):
    g, chain, rep, fam = multivalid_run
    assert len(fam) == 16
    v = rep.final_values
    cells = cell_coverage(v, v <= g.dataset.labels, g.dataset.features, fam, 0.9)
    assert len(cells) == 8
    assert max(abs(c.mass_weighted_deviation) for c in cells) <= 0.05


def test_cell_table_matches_groupby(multivalid_run):
    g, chain, rep, fam = multivalid_run
    X, y, v = g.dataset.features, g.dataset.labels, rep.final_values
    cov = v <= y
    cells = {(c.group_id, c.bin_id): c for c in cell_coverage(v, cov, X, fam, 0.9)}
    gid = np.where(X[:, 1] <= 0.5, 0, 1)
    edges = fam.edges
    bid = np.clip(np.digitize(v, edges[1:-1], right=False), 0, len(edges) - 2)
    for key in set(zip(gid.tolist(), bid.tolist())):
        m = (gid == key[0]) & (bid == key[1])
        c = cells[(f"g{key[0]}", f"b{key[1]}")]
        assert c.n == m.sum()
        assert c.coverage == pytest.approx(cov[m].mean(), abs=1e-12)
        assert c.mass_weighted_deviation == pytest.approx(m.mean() * (cov[m].mean() - 0.9), abs=1e-12)
    # the audit's product members report the same mass-weighted numbers with the opposite sign
    a = dict(audit(v, g.dataset, fam, Mapping.quantile(0.1)).table)
    for i, member in enumerate(fam.base):
        c = cells[(f"g{i // 4}", f"b{i % 4}")]
        assert a[member.auditor_id] == pytest.approx(-c.mass_weighted_deviation, abs=1e-12)


def test_group_coverage_and_csv(tmp_path):
    rng = np.random.default_rng(8)
    X = rng.random((1000, 2))
    covered = rng.random(1000) < 0.8
    groups = group_predicates([[(0, "<=", 0.5)]])
    rows = group_coverage(covered, X, groups, 0.8)
    m = X[:, 0] <= 0.5
    assert rows[0].coverage == pytest.approx(covered.mean())
    assert rows[1].n == m.sum() and rows[1].coverage == pytest.approx(covered[m].mean())
    assert rows[1].se == pytest.approx(np.sqrt(rows[1].coverage * (1 - rows[1].coverage) / m.sum()))
    write_coverage_csv(rows, tmp_path / "cov.csv")
    with open(tmp_path / "cov.csv") as fh:
        table = list(csv.reader(fh))
    assert table[0] == COVERAGE_HEADER and len(table) == 3


def test_trivial_interval_covers_everything():
    from happymap.fairness import IntervalPredictor

    iv = IntervalPredictor("two-chains")
    X = np.zeros((10, 1))
    assert iv.contains(X, np.linspace(-1e9, 1e9, 10)).all()


def test_no_harm_identity_case():
    g = gen_hetero(5000, 2, 9)
    fam = make_group_family([[(0, "<=", 0.5)]], 1, g.dataset.features, include_constant=True)
    out = no_harm_eval(g.dataset, g.cond_quantile(0.1), 0.0, 0.1, fam, FitConfig(alpha=0.05), density_bound=g.density_bound)
    assert out["mse_init"] == 0.0
    assert out["report"].n_updates == 0 and out["mse_final"] == 0.0


def test_no_harm_ratio_and_mse_recomputation():
    g = gen_hetero(20000, 3, 10)
    fam = make_group_family([[(0, "<=", 0.5)], [(1, ">", 0.5)]], 2, g.dataset.features, normalize=True, include_constant=True)
    out = no_harm_eval(g.dataset, g.cond_quantile(0.1), 0.1, 0.1, fam, FitConfig(alpha=0.03), seed=3, density_bound=g.density_bound)
    l_star = g.cond_quantile(0.1)(g.dataset.features)
    start = l_star + 0.1 * normals(3, "noharm.init", g.dataset.n)
    assert out["mse_init"] == pytest.approx(np.mean((start - l_star) ** 2), rel=1e-12)
    final = predict_batch(out["chain"], out["data"].features)
    assert out["mse_final"] == pytest.approx(np.mean((final - l_star) ** 2), rel=1e-12)
    assert out["ratio"] <= 10
