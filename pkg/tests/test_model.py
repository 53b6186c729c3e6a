import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bilin_sysid.errors import ShapeError
from bilin_sysid.model import (
    Dataset,
    Dims,
    SystemParams,
    check_input_excitation,
    check_output_excitation,
    numeric_rank,
    validate_params,
    xi_at,
    xi_sequence,
)
from bilin_sysid.systems import example1

from helpers import as_dataset, random_params

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_xi_at_zero_input_returns_c0():
    np.testing.assert_array_equal(xi_at(example1(), [0.0]), [[0.5, -0.15]])


def test_xi_at_unit_input_adds_c1():
    np.testing.assert_allclose(xi_at(example1(), [1.0]), [[0.65, -0.05]], atol=1e-15)


def test_xi_at_zero_coefficients_return_c0():
    rng = np.random.default_rng(0)
    p = random_params(rng, 2, 2, 2)
    C = np.array(p.C)
    C[1:] = 0.0
    p = p.replace(C=C)
    for u in rng.standard_normal((5, 2)):
        np.testing.assert_array_equal(xi_at(p, u), p.C[0])


def test_xi_at_rejects_wrong_length():
    with pytest.raises(ShapeError):
        xi_at(example1(), [1.0, 2.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(finite, min_size=2, max_size=2), st.lists(finite, min_size=2, max_size=2), st.floats(-2, 2))
def test_xi_at_is_affine(u1, u2, a):
    p = random_params(np.random.default_rng(1), 3, 2, 2)
    u1, u2 = np.array(u1), np.array(u2)
    lhs = xi_at(p, a * u1 + (1 - a) * u2)
    rhs = a * xi_at(p, u1) + (1 - a) * xi_at(p, u2)
    scale = 1 + np.abs(u1).max() + np.abs(u2).max()
    np.testing.assert_allclose(lhs, rhs, atol=1e-12 * scale * 10)


def test_xi_sequence_matches_xi_at():
    rng = np.random.default_rng(2)
    p = random_params(rng, 3, 2, 2)
    u = rng.standard_normal((7, 2))
    seq = xi_sequence(p, u)
    for t in range(7):
        np.testing.assert_allclose(seq[t], xi_at(p, u[t]), atol=1e-14)


def test_validate_params_accepts_example1():
    assert validate_params(example1(S_w=0.01 * np.eye(2))) == []


def test_validate_params_flags_singular_sv():
    report = validate_params(example1(S_v=[[0.0]]))
    assert "S_v not positive definite" in report


def test_validate_params_flags_shape_of_a():
    p = example1()
    bad = SystemParams(p.dims, np.zeros((2, 3)), p.B, p.C, p.D, p.mu_x0, p.S_x0, p.S_w, p.S_v)
    report = validate_params(bad)
    assert any(r.startswith("A has shape") for r in report)


def test_validate_params_flags_asymmetry():
    report = validate_params(example1(S_w=[[1.0, 0.5], [0.0, 1.0]]))
    assert "S_w not symmetric" in report


def test_dims_must_be_positive():
    with pytest.raises(ShapeError):
        Dims(0, 1, 1)


def test_dataset_requires_two_samples_and_equal_lengths():
    with pytest.raises(ShapeError):
        Dataset([[1.0]], [[1.0]])
    with pytest.raises(ShapeError):
        Dataset(np.zeros((3, 1)), np.zeros((2, 1)))


def test_params_are_read_only():
    p = example1()
    with pytest.raises(ValueError):
        p.A[0, 0] = 1.0


def test_stacked_views():
    p = example1()
    np.testing.assert_array_equal(p.M, [[0.6, -0.28, 0.5], [0.25, 0.45, -0.5]])
    np.testing.assert_array_equal(p.C_stack, [[0.5, -0.15, 0.15, 0.1]])
    np.testing.assert_array_equal(p.N, [[0.5, -0.15, 0.15, 0.1, 0.0]])


def test_dict_round_trip():
    p = random_params(np.random.default_rng(3), 2, 3, 2)
    assert SystemParams.from_dict(p.as_dict()).allclose(p)


@pytest.mark.parametrize(
    "u, expected",
    [
        ([1.0, 1.0, 1.0], False),
        ([0.0, 1.0, 0.0, 1.0], True),
    ],
)
def test_input_excitation_scalar(u, expected):
    assert check_input_excitation(as_dataset(u, np.zeros(len(u)))) is expected


def test_input_excitation_two_inputs():
    ds = Dataset([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], np.zeros((3, 1)))
    assert check_input_excitation(ds)


def test_input_excitation_is_permutation_invariant():
    rng = np.random.default_rng(4)
    for _ in range(20):
        n, nu = int(rng.integers(2, 8)), int(rng.integers(1, 3))
        u = rng.integers(0, 2, size=(n, nu)).astype(float)
        ds = Dataset(u, np.zeros((n, 1)))
        perm = Dataset(u[rng.permutation(n)], np.zeros((n, 1)))
        assert check_input_excitation(ds) == check_input_excitation(perm)


def test_output_excitation_examples():
    assert not check_output_excitation(as_dataset([1.0, 1.0], [2.0, 2.0]))
    assert check_output_excitation(as_dataset([0.0, 1.0, 0.0], [1.0, 0.0, 1.0]))


def test_output_excitation_dependent_outputs():
    rng = np.random.default_rng(5)
    u = rng.standard_normal(6)
    y1 = rng.standard_normal(6)
    ds = Dataset(u.reshape(-1, 1), np.column_stack([y1, 3.0 * y1]))
    stacked = np.vstack([u, y1, 3.0 * y1])
    assert np.linalg.matrix_rank(stacked) == 2
    assert not check_output_excitation(ds)


def test_numeric_rank_threshold():
    assert numeric_rank(np.diag([1.0, 1e-11])) == 1
    assert numeric_rank(np.diag([1.0, 1e-9])) == 2
    assert numeric_rank(np.zeros((2, 2))) == 0
