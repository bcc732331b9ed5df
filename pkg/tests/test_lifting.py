import math
from itertools import combinations_with_replacement

import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.base import clone
from sklearn.pipeline import make_pipeline

from koopman_mpc.lifting import (
    DICTIONARY_ID, DEFAULT_DICTIONARY, PRESET_NAMES, DictionaryLookupError, DictionarySpec,
    PolynomialLifter, duplicate_groups, group_of, index_of, lift, preset_eval, projection,
)

state = st.tuples(st.floats(-20, 20), st.floats(-20, 20), st.floats(-5, 5),
                  st.floats(-7, 7)).map(np.array)


@pytest.mark.parametrize("s, expected", [
    ((0, 0, 1, 0), [0, 0, 1, 0, 0, 0, 0, 1, 0, 1]),
    ((1, 2, 0, 0), [1, 2, 0, 0, 1, 4, 0, 1, 0, 0]),
    ((0, 0, 2, math.pi / 2), [0, 0, 2, math.pi / 2, 0, 0, 1, 0, 2, 0]),
])
def test_preset_examples(s, expected):
    np.testing.assert_allclose(preset_eval(s), expected, atol=1e-15)


def test_lift_dimension_and_zero_state():
    z = lift(np.zeros(4))
    assert z.shape == (65,)
    names = DEFAULT_DICTIONARY.names()
    nonzero = {names[k] for k in np.flatnonzero(z)}
    assert nonzero == {"cos_theta", "cos_theta*cos_theta"}
    assert z[index_of("cos_theta")] == 1.0


def test_lift_product_entry_and_projection():
    z = lift(np.array([1.0, 2.0, 0.0, 0.0]))
    assert z[index_of(("X", "Y"))] == 2.0
    s = np.array([1.5, -2.25, 0.75, 3.0])
    np.testing.assert_array_equal(lift(s)[:4], s)


def test_index_of_examples():
    assert index_of("X") == 0
    assert index_of("Y2") == 5
    k = index_of(("X", "cos_theta"))
    assert index_of(("cos_theta", "X")) == k == index_of("X*cos_theta")
    # graded-lex enumeration of pairs after the ten base entries
    pairs = list(combinations_with_replacement(range(10), 2))
    assert k == 10 + pairs.index((0, 7))
    s = np.array([0.4, -1.0, 2.0, 0.3])
    assert lift(s)[k] == s[0] * math.cos(s[3])
    for bad in ("Z", ("X", "nope"), ("X", "Y", "v"), 11):
        with pytest.raises(DictionaryLookupError):
            index_of(bad)
    with pytest.raises(KeyError):
        index_of(("X", "v"), DictionarySpec(degree=1))


def test_duplicate_groups_default_dictionary():
    groups = duplicate_groups()
    nontrivial = [g for g in groups if len(g) > 1]
    names = DEFAULT_DICTIONARY.names()
    found = {frozenset(names[k] for k in g) for g in nontrivial}
    expected = {
        frozenset({"X2", "X*X"}),
        frozenset({"Y2", "Y*Y"}),
        frozenset({"v_sin_theta", "v*sin_theta"}),
        frozenset({"v_cos_theta", "v*cos_theta"}),
        # both equal v*sin(theta)*cos(theta)
        frozenset({"sin_theta*v_cos_theta", "cos_theta*v_sin_theta"}),
    }
    assert found == expected
    assert all(len(g) == 2 for g in nontrivial)


def test_duplicate_groups_partition():
    for spec in (DEFAULT_DICTIONARY, DictionarySpec(degree=1)):
        groups = duplicate_groups(spec)
        flat = sorted(k for g in groups for k in g)
        assert flat == list(range(spec.n_lift))
    assert all(len(g) == 1 for g in duplicate_groups(DictionarySpec(degree=1)))
    assert group_of(index_of("X2")) == [index_of("X2"), index_of(("X", "X"))]


def test_duplicate_columns_evaluate_identically(rng):
    Z = lift(rng.normal(size=(200, 4)) * [5, 5, 2, 3])
    for g in duplicate_groups():
        for k in g[1:]:
            np.testing.assert_allclose(Z[:, k], Z[:, g[0]], rtol=1e-14, atol=1e-14)


def test_spec_determinism_and_identity():
    a, b = DictionarySpec(), DictionarySpec()
    assert a.monomials == b.monomials and a == b
    assert a.identity == DICTIONARY_ID == "poly2-preset10-v1"
    assert DictionarySpec(1).n_lift == 10
    with pytest.raises(ValueError):
        DictionarySpec(3)


def test_projection_matrices():
    s = np.array([1.0, -2.0, 0.5, 0.25])
    z = lift(s)
    np.testing.assert_array_equal(projection(4) @ z, s)
    np.testing.assert_array_equal(projection(6) @ z, [1.0, -2.0, 0.5, 0.25, 1.0, 4.0])


@given(state)
def test_multiplicativity(s):
    z = lift(s)
    p = z[:10]
    for i, j in combinations_with_replacement(range(10), 2):
        assert z[index_of((PRESET_NAMES[i], PRESET_NAMES[j]))] == p[i] * p[j]


@given(st.lists(state, min_size=1, max_size=5))
def test_lift_is_rowwise(rows):
    S = np.array(rows)
    np.testing.assert_array_equal(lift(S), np.array([lift(r) for r in rows]))


def test_transformer_api(rng):
    X = rng.normal(size=(30, 4))
    lifter = PolynomialLifter()
    Z = lifter.fit_transform(X)
    np.testing.assert_array_equal(Z, lift(X))
    assert lifter.get_feature_names_out()[index_of("X*cos_theta")] == "X*cos_theta"
    assert clone(lifter).get_params() == {"degree": 2}
    assert PolynomialLifter(degree=1).fit(X).transform(X).shape == (30, 10)
    with pytest.raises(ValueError):
        lifter.transform(X[:, :3])
    with pytest.raises(Exception):
        PolynomialLifter().transform(X)
    assert make_pipeline(PolynomialLifter()).fit_transform(X).shape == (30, 65)
