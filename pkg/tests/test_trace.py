import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rbsample.trace import GreedyTrace, format_value, read_csv


def test_format_value():
    assert format_value(None) == ""
    assert format_value(True) == "1" and format_value(np.bool_(False)) == "0"
    assert format_value(np.int64(7)) == "7"
    assert format_value(float("nan")) == "nan"
    assert format_value(np.float32(0.5)) == "0.5"
    assert format_value("adv") == "adv"


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_float_round_trip(x):
    assert float(format_value(x)) == x


def test_csv_round_trip(tmp_path):
    tr = GreedyTrace(columns=["n", "sigma", "label"])
    tr.append(n=0, sigma=1.0, label="a", hidden=3)
    tr.append(n=1, sigma=float("nan"), label=None)
    path = tmp_path / "t.csv"
    tr.to_csv(path)
    assert path.read_bytes() == b"n,sigma,label\n0,1.0,a\n1,nan,\n"
    cols, rows = read_csv(path)
    assert cols == ["n", "sigma", "label"]
    assert rows[0] == {"n": 0, "sigma": 1.0, "label": "a"}
    assert math.isnan(rows[1]["sigma"]) and rows[1]["label"] is None


def test_read_csv_errors(tmp_path):
    (tmp_path / "e.csv").write_text("")
    with pytest.raises(ValueError):
        read_csv(tmp_path / "e.csv")
    (tmp_path / "b.csv").write_text("a,b\n1\n")
    with pytest.raises(ValueError, match=":2:"):
        read_csv(tmp_path / "b.csv")
