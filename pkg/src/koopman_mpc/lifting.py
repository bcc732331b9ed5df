"""Polynomial observable dictionary over a trigonometric preset.

The lifted state stacks ten base observables followed by all of their
pairwise products ``(i, j)``, ``i <= j``, in graded lexicographic order,
giving 65 observables. No constant term is included and identical
monomials (e.g. ``X^2`` and ``X*X``) are kept, so the lifted coordinates
contain a handful of exactly duplicated columns; see
:func:`duplicate_groups`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .dynamics import N_STATE

DICTIONARY_ID = "poly2-preset10-v1"

PRESET_NAMES = (
    "X", "Y", "v", "theta", "X2", "Y2",
    "sin_theta", "cos_theta", "v_sin_theta", "v_cos_theta",
)

# exponents of each preset entry over the atoms (X, Y, v, theta, sin, cos)
_PRESET_EXPONENTS = np.array([
    [1, 0, 0, 0, 0, 0],
    [0, 1, 0, 0, 0, 0],
    [0, 0, 1, 0, 0, 0],
    [0, 0, 0, 1, 0, 0],
    [2, 0, 0, 0, 0, 0],
    [0, 2, 0, 0, 0, 0],
    [0, 0, 0, 0, 1, 0],
    [0, 0, 0, 0, 0, 1],
    [0, 0, 1, 0, 1, 0],
    [0, 0, 1, 0, 0, 1],
])


class DictionaryLookupError(KeyError):
    pass


@dataclass(frozen=True)
class DictionarySpec:
    """Ordering of the lifted observables.

    ``monomials[k]`` is a tuple of preset indices: ``(i,)`` for a base
    observable and ``(i, j)`` with ``i <= j`` for a product.
    """

    degree: int = 2
    monomials: tuple = field(init=False)
    index_map: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.degree not in (1, 2):
            raise ValueError("only degree 1 or 2 dictionaries are supported")
        n = len(PRESET_NAMES)
        monos = [(i,) for i in range(n)]
        if self.degree == 2:
            monos += list(combinations_with_replacement(range(n), 2))
        object.__setattr__(self, "monomials", tuple(monos))
        object.__setattr__(self, "index_map", {m: k for k, m in enumerate(monos)})

    @property
    def preset(self):
        return PRESET_NAMES

    @property
    def n_lift(self) -> int:
        return len(self.monomials)

    @property
    def identity(self) -> str:
        return DICTIONARY_ID if self.degree == 2 else f"poly{self.degree}-preset10-v1"

    def names(self) -> list[str]:
        return ["*".join(PRESET_NAMES[i] for i in m) for m in self.monomials]

    def index_of(self, descriptor) -> int:
        return index_of(descriptor, self)


DEFAULT_DICTIONARY = DictionarySpec()


def _preset_index(name) -> int:
    if isinstance(name, (int, np.integer)):
        if 0 <= name < len(PRESET_NAMES):
            return int(name)
        raise DictionaryLookupError(name)
    try:
        return PRESET_NAMES.index(name)
    except ValueError:
        raise DictionaryLookupError(f"unknown preset observable {name!r}") from None


def index_of(descriptor, spec: DictionarySpec = DEFAULT_DICTIONARY) -> int:
    """Position of a named observable in the lifted state.

    ``descriptor`` is a preset name (``"cos_theta"``), a pair of preset
    names (``("X", "cos_theta")``, order irrelevant), or a product name as
    returned by :meth:`DictionarySpec.names` (``"X*cos_theta"``).
    """
    if isinstance(descriptor, str) and "*" in descriptor:
        descriptor = tuple(descriptor.split("*"))
    if isinstance(descriptor, tuple):
        if len(descriptor) == 1:
            key = (_preset_index(descriptor[0]),)
        elif len(descriptor) == 2:
            key = tuple(sorted(_preset_index(d) for d in descriptor))
        else:
            raise DictionaryLookupError(f"unsupported descriptor {descriptor!r}")
    else:
        key = (_preset_index(descriptor),)
    try:
        return spec.index_map[key]
    except KeyError:
        raise DictionaryLookupError(f"{descriptor!r} not in dictionary") from None


def preset_eval(s) -> np.ndarray:
    """Evaluate the ten base observables; broadcasts over leading dims."""
    s = np.asarray(s, dtype=float)
    X, Y, v, th = s[..., 0], s[..., 1], s[..., 2], s[..., 3]
    sn, cs = np.sin(th), np.cos(th)
    return np.stack([X, Y, v, th, X * X, Y * Y, sn, cs, v * sn, v * cs], axis=-1)


def _products_index(spec: DictionarySpec):
    pairs = [m for m in spec.monomials if len(m) == 2]
    if not pairs:
        return None, None
    ii = np.array([p[0] for p in pairs])
    jj = np.array([p[1] for p in pairs])
    return ii, jj


def lift(s, spec: DictionarySpec = DEFAULT_DICTIONARY) -> np.ndarray:
    """Lift states of shape ``(..., 4)`` to ``(..., spec.n_lift)``."""
    p = preset_eval(s)
    ii, jj = _products_index(spec)
    if ii is None:
        return p
    return np.concatenate([p, p[..., ii] * p[..., jj]], axis=-1)


def projection(n_out: int, spec: DictionarySpec = DEFAULT_DICTIONARY) -> np.ndarray:
    """Selector ``[I, 0]`` extracting the first ``n_out`` lifted entries."""
    C = np.zeros((n_out, spec.n_lift))
    C[:, :n_out] = np.eye(n_out)
    return C


def duplicate_groups(spec: DictionarySpec = DEFAULT_DICTIONARY) -> list[list[int]]:
    """Partition lifted positions into sets of identical monomials.

    Monomials are compared by their exponent vectors over the atoms
    ``(X, Y, v, theta, sin, cos)``. Singletons are included so every
    position appears exactly once; groups are ordered by first position.
    """
    groups: dict[tuple, list[int]] = {}
    for k, m in enumerate(spec.monomials):
        key = tuple(_PRESET_EXPONENTS[list(m)].sum(axis=0))
        groups.setdefault(key, []).append(k)
    return sorted(groups.values(), key=lambda g: g[0])


def group_of(position: int, spec: DictionarySpec = DEFAULT_DICTIONARY) -> list[int]:
    for g in duplicate_groups(spec):
        if position in g:
            return g
    raise DictionaryLookupError(position)


class PolynomialLifter(TransformerMixin, BaseEstimator):
    """Transformer mapping ``(n_samples, 4)`` unicycle states to lifted observables.

    Parameters
    ----------
    degree : int, default=2
        Maximum product degree over the preset.
    """

    def __init__(self, degree=2):
        self.degree = degree

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        if X.shape[1] != N_STATE:
            raise ValueError(f"expected {N_STATE} state columns, got {X.shape[1]}")
        self.spec_ = DictionarySpec(self.degree)
        self.n_features_in_ = N_STATE
        self.n_output_features_ = self.spec_.n_lift
        return self

    def transform(self, X):
        check_is_fitted(self, "spec_")
        X = check_array(X, dtype=float)
        if X.shape[1] != N_STATE:
            raise ValueError(f"expected {N_STATE} state columns, got {X.shape[1]}")
        return lift(X, self.spec_)

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "spec_")
        return np.asarray(self.spec_.names(), dtype=object)
