from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import expit

from happymap.auditors import (
    BinIndicator,
    Centered,
    Constant,
    GroupIndicator,
    Linear,
    Product,
    PropensityRatio,
    ShiftComposite,
    Stump,
    UnionFamily,
    auditor_from_dict,
    group_predicates,
    make_centered_family,
    make_constant_family,
    make_group_family,
    make_linear_family,
    make_multivalidity_family,
    make_propensity_family,
    make_shift_composite_family,
    make_stump_family,
    weak_learn,
)
from happymap.core import BasePredictor, ChainFormatError, Dataset, RejectedConfig, RejectedInput
from happymap.mappings import Mapping


def brute_force(family, v, X, s):
    """Enumerate every closed member and evaluate mean(c * s) with math.fsum."""
    best, best_val = None, -math.inf
    for m in family.members:
        val = math.fsum(m(v, X) * s) / len(s)
        if val > best_val:
            best, best_val = m, val
    return best, best_val


def random_instance(rng, n=200, d=3):
    X = rng.random((n, d))
    v = rng.random(n)
    y = rng.random(n)
    return X, v, y


# descriptors


def test_constant_equals_signal_mean():
    fam = make_constant_family()
    s = np.full(10, 0.12)
    m, viol = fam.evaluator(np.zeros((10, 1))).best(np.zeros(10), s)
    assert m == Constant() and viol == pytest.approx(0.12)


def test_sign_and_negation():
    X = np.array([[0.2], [0.8]])
    g = Stump(0, 0.5)
    assert list(g(np.zeros(2), X)) == [1.0, 0.0]
    assert list(g.negate()(np.zeros(2), X)) == [-1.0, 0.0]
    assert g.negate().negate() == g
    assert g.auditor_id.startswith("+") and g.negate().auditor_id.startswith("-")


def test_group_indicator_conjunction_and_ops():
    X = np.array([[0.1, 5.0], [0.6, 5.0], [0.1, 1.0]])
    g = GroupIndicator(((0, "<=", 0.5), (1, ">", 2.0)))
    assert list(g.membership(X)) == [True, False, False]
    with pytest.raises(RejectedConfig):
        GroupIndicator(((0, "~", 0.5),))


def test_bins_and_products():
    b = BinIndicator(0.0, 0.5)
    v = np.array([0.0, 0.49, 0.5, 1.0])
    assert list(b(v, np.zeros((4, 1)))) == [1, 1, 0, 0]
    closed = BinIndicator(0.5, 1.0, closed_hi=True)
    assert list(closed(v, np.zeros((4, 1)))) == [0, 0, 1, 1]
    p = Product(Stump(0, 0.5), closed)
    X = np.array([[0.0], [0.0], [0.0], [0.9]])
    assert list(p(v, X)) == [0, 0, 1, 0]


def test_propensity_ratio_values_and_clamp():
    rng = np.random.default_rng(0)
    X = rng.normal(scale=3.0, size=(5000, 2))
    th = (0.3, 2.0, -1.0)
    r = PropensityRatio(th, 0.05, 0.95)(np.zeros(len(X)), X)
    sigma = np.clip(expit(0.3 + X @ np.array([2.0, -1.0])), 0.05, 0.95)
    assert np.allclose(r, (1 - sigma) / sigma, rtol=0, atol=1e-12)
    assert r.min() >= 0.05 / 0.95 - 1e-12 and r.max() <= 19.0 + 1e-12
    inv = PropensityRatio(th, 0.05, 0.95, form="inverse")(np.zeros(len(X)), X)
    assert np.allclose(inv, 1 / sigma)


def test_shift_composite_matches_ratio_times_residual():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(300, 2))
    v = rng.random(300)
    p = BasePredictor.linear([0.1, 0.2], 0.5)
    c = ShiftComposite((0.1, -0.5, 0.5), p, 0.05, 0.95)
    ratio = PropensityRatio((0.1, -0.5, 0.5), 0.05, 0.95)(v, X)
    assert np.allclose(c(v, X), ratio * (v - p(X)), atol=1e-12)
    # p equal to the prediction gives the zero auditor
    fam = make_shift_composite_family([(0.0, 0.0, 0.0)], [BasePredictor.column(0)])
    assert np.all(fam.members[0](X[:, 0], X) == 0)


@pytest.mark.parametrize(
    "aud",
    [
        Constant(),
        Stump(2, 0.25, "gt"),
        GroupIndicator(((0, "<=", 0.5), (1, "==", 1.0)), scale=2.5),
        Linear((0.1, -0.3), 0.2),
        Product(GroupIndicator(((0, ">", 0.1),)), BinIndicator(0.0, 0.5)),
        PropensityRatio((0.1, 0.2, 0.3), 0.1, 0.9, "inverse"),
        ShiftComposite((0.1, 0.2, 0.3), BasePredictor.logistic([1.0, 0.0], 0.2, 0.1, 0.9)),
        Centered(Stump(0, 0.3), 0.4),
    ],
)
def test_descriptor_serialization_round_trip(aud):
    for a in (aud, aud.negate()):
        back = auditor_from_dict(json.loads(json.dumps(a.to_dict())))
        assert back == a
        X = np.random.default_rng(2).random((20, max(a.min_dim, 1)))
        v = np.random.default_rng(3).random(20)
        assert np.array_equal(back(v, X), a(v, X))


def test_descriptor_parse_errors_carry_position():
    with pytest.raises(ChainFormatError) as err:
        auditor_from_dict({"kind": "nope"}, "steps[3].auditor")
    assert "steps[3].auditor" in str(err.value)


# families: counting and construction


def test_group_family_counting_and_intersections():
    preds = [[(0, "<=", 0.5)], [(1, ">", 0.3)], [(2, "<=", 0.7)]]
    X = np.random.default_rng(4).random((400, 3))
    assert len(make_group_family(preds, 1, X)) == 6
    fam = make_group_family(preds, 2, X)
    assert len(fam) == 12
    inter = fam.base[3].membership(X)
    assert np.array_equal(inter, (X[:, 0] <= 0.5) & (X[:, 1] > 0.3))


def test_group_covering_everything_equals_constant():
    X = np.random.default_rng(5).random((50, 1))
    fam = make_group_family([[(0, ">=", 0.0)]], 1, X)
    s = np.random.default_rng(6).normal(size=50)
    assert fam.evaluator(X).best(np.zeros(50), s)[1] == pytest.approx(make_constant_family().evaluator(X).best(np.zeros(50), s)[1])


def test_empty_group_warns_but_is_kept():
    X = np.random.default_rng(7).random((50, 1))
    with pytest.warns(UserWarning):
        fam = make_group_family([[(0, ">", 2.0)]], 1, X)
    assert len(fam) == 2


def test_normalized_groups_give_conditional_means():
    rng = np.random.default_rng(8)
    X = rng.random((1000, 1))
    s = rng.normal(size=1000)
    fam = make_group_family([[(0, "<=", 0.3)]], 1, X, normalize=True)
    m = X[:, 0] <= 0.3
    table = dict(fam.evaluator(X).table(np.zeros(1000), s))
    (ident,) = [k for k in table if k.startswith("+")]
    assert table[ident] == pytest.approx(s[m].mean(), abs=1e-12)
    assert fam.b_bound == pytest.approx(1 / m.mean())


def test_stump_family_counting_and_dedup():
    X = np.random.default_rng(9).random((100, 3))
    assert len(make_stump_family(X, 4)) == 2 * 3 * 4
    X[:, 1] = 0.5
    assert len(make_stump_family(X, 4)) == 2 * (4 + 1 + 4)
    one = make_stump_family(X[:, :1], 1)
    assert len(one) == 2 and one.base[0].threshold == pytest.approx(np.median(X[:, 0]))


def test_propensity_family():
    fam = make_propensity_family([(0.0, 0.0), (1.0, -1.0)], (0.05, 0.95))
    assert fam.base[0] == Constant()
    assert fam.b_bound == pytest.approx(361.0)
    assert make_propensity_family([(0.0, 0.0)]).b_bound == 1.0
    with pytest.raises(RejectedConfig):
        make_propensity_family([(1.0,)], (0.6, 0.4))


def test_composite_counting_and_bound():
    ps = [BasePredictor.constant(0.2), BasePredictor.constant(0.7)]
    fam = make_shift_composite_family([(0.0, 0.0), (1.0, 1.0), (0.5, -1.0)], ps, (0.05, 0.95))
    assert len(fam) == 12
    assert fam.b_bound == pytest.approx((2 * 19) ** 2)


def test_multivalidity_counting():
    groups = group_predicates([[(0, "<=", 0.5)], [(0, ">", 0.5)]])
    fam = make_multivalidity_family(0.5, c_bin=1.0, base=groups)
    assert len(fam.bins) == 4 and len(fam) == 16
    assert len(make_multivalidity_family(0.3, c_bin=1.0).bins) == math.ceil(2 / 0.3)
    with pytest.warns(UserWarning):
        single = make_multivalidity_family(2.0, c_bin=1.0)
    assert len(single.bins) == 1


def test_multivalidity_single_bin_matches_constant_inside_range():
    with pytest.warns(UserWarning):
        fam = make_multivalidity_family(2.0, c_bin=1.0)
    rng = np.random.default_rng(10)
    v = rng.uniform(-1, 1, 100)
    s = rng.normal(size=100)
    X = np.zeros((100, 1))
    assert fam.evaluator(X).best(v, s)[1] == pytest.approx(abs(s.mean()))


def test_centered_family_is_mean_zero():
    X = np.random.default_rng(11).random((500, 2))
    fam = make_centered_family(group_predicates([[(0, "<=", 0.3)], [(1, ">", 0.6)]]), X)
    for m in fam.members:
        assert abs(m(np.zeros(500), X).mean()) < 1e-12


# weak learner oracles


FAMILY_BUILDERS = {
    "groups": lambda X, rng: make_group_family([[(0, "<=", 0.5)], [(1, ">", 0.4)], [(2, "<=", 0.2)]], 2, X),
    "stumps": lambda X, rng: make_stump_family(X, 5),
    "propensity": lambda X, rng: make_propensity_family([tuple(rng.normal(size=4)) for _ in range(5)]),
    "composite": lambda X, rng: make_shift_composite_family(
        [tuple(rng.normal(size=4)) for _ in range(3)], [BasePredictor.constant(0.4), BasePredictor.column(1)]
    ),
    "multivalidity": lambda X, rng: make_multivalidity_family(0.25, lo=0.0, hi=1.0, base=group_predicates([[(0, "<=", 0.5)]])),
    "union": lambda X, rng: UnionFamily([make_constant_family(), make_stump_family(X, 3)]),
}


@pytest.mark.parametrize("kind", sorted(FAMILY_BUILDERS))
def test_finite_weak_learner_matches_brute_force(kind):
    rng = np.random.default_rng(abs(hash(kind)) % 2**32)
    mapping = Mapping.residual()
    for _ in range(100 // len(FAMILY_BUILDERS) + 1):
        X, v, y = random_instance(rng)
        fam = FAMILY_BUILDERS[kind](X, rng)
        m, viol = weak_learn(fam, v, Dataset(X, y), mapping)
        bm, bviol = brute_force(fam, v, X, mapping.s(v, y))
        assert m == bm
        assert viol == bviol


def test_weak_learner_is_deterministic_and_nonnegative():
    rng = np.random.default_rng(12)
    X, v, y = random_instance(rng)
    fam = make_stump_family(X, 4)
    a = weak_learn(fam, v, Dataset(X, y), Mapping.quantile(0.3))
    b = weak_learn(fam, v, Dataset(X, y), Mapping.quantile(0.3))
    assert a == b and a[1] >= 0


def test_zero_signal_returns_first_member():
    X = np.random.default_rng(13).random((20, 2))
    fam = make_stump_family(X, 2)
    m, viol = fam.evaluator(X).best(np.zeros(20), np.zeros(20))
    assert viol == 0.0 and m == fam.members[0]


def test_weak_learner_rejects_misaligned_predictions():
    X = np.zeros((5, 1))
    with pytest.raises(RejectedInput):
        weak_learn(make_constant_family(), np.zeros(4), Dataset(X, np.zeros(5)), Mapping.residual())


def test_linear_closed_form_matches_one_degree_grid():
    rng = np.random.default_rng(14)
    for _ in range(20):
        X = rng.normal(size=(200, 2))
        s = rng.normal(size=200) + X[:, 0] * rng.normal()
        fam = make_linear_family(X, b_w=1.0)
        m, viol = fam.evaluator(X).best(np.zeros(200), s)
        angles = np.deg2rad(np.arange(360))
        W = np.column_stack([np.cos(angles), np.sin(angles)])
        grid = (X @ W.T).T @ s / 200
        assert abs(viol - grid.max()) < 1e-3
        assert viol >= grid.max() - 1e-12
        assert np.mean(m(np.zeros(200), X) * s) == pytest.approx(viol, abs=1e-12)


def test_linear_zero_signal():
    X = np.random.default_rng(15).normal(size=(10, 3))
    m, viol = make_linear_family(X, 2.0, intercept=True).evaluator(X).best(np.zeros(10), np.zeros(10))
    assert viol == 0.0 and m.offset == 2.0


# B soundness


@given(st.integers(0, 2**32 - 1), st.sampled_from(sorted(FAMILY_BUILDERS) + ["linear", "normalized"]))
def test_declared_bound_dominates_empirical_second_moment(seed, kind):
    rng = np.random.default_rng(seed)
    X, v, y = random_instance(rng, n=100, d=3)
    if kind == "linear":
        fam = make_linear_family(X, 1.5, intercept=True)
        Xh = np.hstack([np.ones((100, 1)), X])
        W = rng.normal(size=(20, 4))
        W = 1.5 * W / np.linalg.norm(W, axis=1, keepdims=True)
        assert np.max(np.mean((Xh @ W.T) ** 2, axis=0)) <= fam.b_bound + 1e-12
        return
    if kind == "normalized":
        fam = make_group_family([[(0, "<=", 0.5)], [(1, ">", 0.8)]], 1, X, normalize=True)
    else:
        fam = FAMILY_BUILDERS[kind](X, rng)
    for m in fam.members:
        assert np.mean(m(v, X) ** 2) <= fam.b_bound + 1e-12
