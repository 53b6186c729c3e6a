import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bilin_sysid.errors import FormatError
from bilin_sysid.io import fmt, read_dataset, read_json, read_params, write_dataset, write_json, write_params
from bilin_sysid.model import Dataset
from bilin_sysid.simulate import simulate

from helpers import random_params

doubles = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=200)
@given(doubles)
def test_float_format_round_trips(x):
    assert float(fmt(x)) == x


def test_params_round_trip_is_bit_identical(tmp_path):
    p = random_params(np.random.default_rng(0), 3, 2, 2)
    write_params(tmp_path / "p.json", p)
    q = read_params(tmp_path / "p.json")
    assert np.array_equal(p.to_vector(), q.to_vector())
    assert p.dims == q.dims


def test_dataset_round_trip_is_bit_identical(tmp_path):
    p = random_params(np.random.default_rng(1), 2, 2, 3)
    traj = simulate(p, np.random.default_rng(2).standard_normal((25, 3)), seed=3)
    write_dataset(tmp_path / "d.csv", traj.dataset, states=traj.states)
    ds, states = read_dataset(tmp_path / "d.csv", return_states=True)
    assert np.array_equal(ds.inputs, traj.inputs)
    assert np.array_equal(ds.outputs, traj.outputs)
    assert np.array_equal(states, traj.states)
    header = (tmp_path / "d.csv").read_text().splitlines()[0]
    assert header == "t,u_1,u_2,u_3,y_1,y_2,x_1,x_2"


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(doubles, doubles), min_size=2, max_size=20))
def test_dataset_round_trip_property(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("ds") / "d.csv"
    arr = np.array(rows)
    ds = Dataset(arr[:, :1], arr[:, 1:])
    write_dataset(path, ds)
    back = read_dataset(path)
    assert np.array_equal(back.inputs, ds.inputs) and np.array_equal(back.outputs, ds.outputs)


@pytest.mark.parametrize(
    "text, line",
    [
        ("t,u_1,y_1\n0,1.0,2.0\n1,abc,3.0\n", 3),
        ("t,u_1,y_1\n0,1.0\n", 2),
        ("t,u_1,y_1\n0,1.0,2.0\n1,nan,3.0\n", 3),
        ("t,u_1,z_1\n0,1.0,2.0\n", 1),
        ("time,u_1,y_1\n", 1),
    ],
)
def test_malformed_dataset_reports_line(tmp_path, text, line):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(FormatError, match=f":{line}:"):
        read_dataset(path)


def test_params_missing_keys(tmp_path):
    write_json(tmp_path / "p.json", {"dims": {"nx": 1, "nu": 1, "ny": 1}})
    with pytest.raises(FormatError, match="missing keys"):
        read_params(tmp_path / "p.json")


def test_params_infeasible(tmp_path):
    p = random_params(np.random.default_rng(4), 1, 1, 1)
    d = p.as_dict()
    d["S_v"] = [[-1.0]]
    write_json(tmp_path / "p.json", d)
    with pytest.raises(FormatError, match="S_v not positive definite"):
        read_params(tmp_path / "p.json")


def test_invalid_json_reports_line(tmp_path):
    (tmp_path / "p.json").write_text('{\n  "a": 1,\n  oops\n}\n')
    with pytest.raises(FormatError, match=":3:"):
        read_json(tmp_path / "p.json")
