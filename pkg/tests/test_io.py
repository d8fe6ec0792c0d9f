from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from happymap.core import Dataset, RejectedInput
from happymap.io import DatasetParseError, load_dataset, save_dataset


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_three_row_file(tmp_path):
    p = _write(tmp_path, "x_a,x_b,y,g_0,z\n1,2,0.5,1,so\n3,4,0.25,0,ta\n5,6,1e-3,1,so\n")
    ds = load_dataset(p)
    assert ds.n == 3 and ds.d == 2
    assert np.array_equal(ds.features, [[1, 2], [3, 4], [5, 6]])
    assert np.array_equal(ds.labels, [0.5, 0.25, 0.001])
    assert np.array_equal(ds.groups[:, 0], [1, 0, 1])
    assert list(ds.domain_tag) == ["so", "ta", "so"]
    assert ds.feature_names == ("x_a", "x_b") and ds.group_names == ("g_0",)
    assert ds.miss_mask is None


def test_empty_cell_becomes_missing(tmp_path):
    ds = load_dataset(_write(tmp_path, "x_0,x_1,y\n1,,0.1\n2,3,0.2\n"))
    assert np.isnan(ds.features[0, 1])
    assert np.array_equal(ds.miss_mask, [[1, 0], [1, 1]])
    assert np.array_equal(ds.complete_flag, [0, 1])


def test_labels_optional_unless_required(tmp_path):
    p = _write(tmp_path, "x_0\n1\n2\n")
    assert load_dataset(p).labels is None
    with pytest.raises(RejectedInput, match="'y' column"):
        load_dataset(p, require_labels=True)


@pytest.mark.parametrize(
    "text, row, column",
    [
        ("x_0,y\n1,0.1\nabc,0.2\n", 3, "x_0"),
        ("x_0,y\n1,\n", 2, "y"),
        ("x_0,y\n1,inf\n", 2, "y"),
        ("x_0,y,z\n1,0.1,xx\n", 2, "z"),
        ("x_0,y,g_a\n1,0.1,\n", 2, "g_a"),
        ("x_0,y\n1,0.1,7\n", 2, "*"),
        ("x_0,w\n1,2\n", 1, "w"),
        ("x_0,x_0\n1,2\n", 1, "x_0"),
    ],
)
def test_parse_errors_locate_the_cell(tmp_path, text, row, column):
    with pytest.raises(DatasetParseError) as err:
        load_dataset(_write(tmp_path, text))
    assert err.value.row == row and err.value.column == column


def test_structural_rejections(tmp_path):
    for text in ["", "y\n0.1\n", "x_0,y\n"]:
        with pytest.raises(RejectedInput):
            load_dataset(_write(tmp_path, text))
    with pytest.raises(RejectedInput):
        load_dataset(_write(tmp_path, "x_0,g_0\n1,2\n"))


def test_round_trip_is_byte_identical(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.normal(size=(20, 3))
    X[3, 1] = np.nan
    ds = Dataset(X, rng.random(20), groups=(rng.random((20, 2)) < 0.5).astype(float), group_names=("g_a", "g_b"), domain_tag=["so"] * 10 + ["ta"] * 10)
    save_dataset(ds, tmp_path / "a.csv")
    back = load_dataset(tmp_path / "a.csv")
    save_dataset(back, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert np.array_equal(back.features, ds.features, equal_nan=True)
    assert np.array_equal(back.labels, ds.labels)
    assert np.array_equal(back.groups, ds.groups)


@given(arrays(np.float64, (5, 2), elements=st.floats(-1e300, 1e300, allow_nan=False)), arrays(np.float64, 5, elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_floats_survive_round_trip(tmp_path_factory, X, y):
    p = tmp_path_factory.mktemp("rt") / "d.csv"
    save_dataset(Dataset(X, y), p)
    back = load_dataset(p)
    assert np.array_equal(back.features, X) and np.array_equal(back.labels, y)
