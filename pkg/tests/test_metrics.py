import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from distexit.metrics import (
    cosine_distance,
    distance_ratio,
    edr,
    edr_array,
    entropy_rows,
    normalized_entropy,
)

# (0.9 ln 0.9 + 0.1 ln 0.1) / ln 0.5, evaluated with mpmath at 30 digits
ENTROPY_09_01 = 0.468995593589281


class TestNormalizedEntropy:
    def test_uniform_is_one(self):
        assert normalized_entropy([0.5, 0.5]) == pytest.approx(1.0, abs=1e-12)

    def test_one_hot_is_zero(self):
        assert normalized_entropy([1.0, 0.0, 0.0]) == pytest.approx(0.0, abs=1e-9)

    def test_two_class_value(self):
        assert normalized_entropy([0.9, 0.1]) == pytest.approx(0.46900, abs=1e-4)
        assert normalized_entropy([0.9, 0.1]) == pytest.approx(ENTROPY_09_01, abs=1e-12)

    def test_rejects_single_class(self):
        with pytest.raises(ValueError):
            normalized_entropy([1.0])

    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError):
            normalized_entropy([0.5, 0.6])

    @given(arrays(np.float64, st.integers(2, 12), elements=st.floats(0.0, 1.0)))
    def test_range_and_permutation(self, raw):
        if raw.sum() <= 0:
            return
        p = raw / raw.sum()
        h = normalized_entropy(p)
        assert 0.0 <= h <= 1.0
        assert normalized_entropy(p[::-1]) == pytest.approx(h, abs=1e-12)

    def test_one_only_at_uniform(self):
        rng = np.random.default_rng(0)
        for k in range(2, 10):
            assert normalized_entropy(np.full(k, 1.0 / k)) == pytest.approx(1.0, abs=1e-9)
            p = rng.dirichlet(np.ones(k))
            assert normalized_entropy(p) < 1.0 - 1e-9


class TestCosineDistance:
    def test_self(self):
        assert cosine_distance([3, 4], [3, 4]) == pytest.approx(0.0, abs=1e-15)

    def test_orthogonal(self):
        assert cosine_distance([1, 0], [0, 1]) == 1.0

    def test_antipodal(self):
        assert cosine_distance([1, 0], [-2, 0]) == 2.0

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError):
            cosine_distance([0, 0], [1, 0])

    def test_symmetric_and_scale_invariant(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            u, v = rng.normal(size=(2, 5))
            a, b = rng.uniform(0.01, 100, size=2)
            d = cosine_distance(u, v)
            assert 0.0 <= d <= 2.0
            assert cosine_distance(v, u) == pytest.approx(d, abs=1e-9)
            assert cosine_distance(a * u, b * v) == pytest.approx(d, abs=1e-9)


class TestDistanceRatio:
    def test_symmetric_midpoint(self):
        assert distance_ratio(0.3, 0.3) == 0.5

    def test_coincident_with_prediction(self):
        assert distance_ratio(0.0, 0.4) == 0.0

    def test_value(self):
        assert distance_ratio(0.2, 0.6) == pytest.approx(1 / 6, abs=1e-6)

    def test_degenerate_both_zero(self):
        assert distance_ratio(0.0, 0.0) == 0.5

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            distance_ratio(-0.1, 0.5)

    @given(st.floats(0.0, 2.0), st.floats(0.0, 2.0))
    def test_ordering(self, r1, r2):
        dr = distance_ratio(r1, r2)
        assert 0.0 <= dr <= 1.0
        if max(r1, r2) < 1e-9:
            return
        if r1 < r2:
            assert dr < 0.5
        elif r1 > r2:
            assert dr > 0.5
        else:
            assert dr == 0.5


class TestEdr:
    def test_equal_arguments(self):
        for lam in (0.1, 1.0, 7.0):
            assert edr(0.4, 0.4, lam) == pytest.approx(0.4, abs=1e-12)

    def test_lambda_one(self):
        assert edr(0.25, 0.5, 1.0) == pytest.approx(1 / 3, abs=1e-9)

    def test_lambda_two(self):
        assert edr(0.3, 0.6, 2.0) == pytest.approx(0.45, abs=1e-9)

    def test_zero_argument_limit(self):
        assert edr(0.0, 0.7, 1.0) == 0.0
        assert edr(0.7, 0.0, 1.0) == 0.0

    def test_rejects_nonpositive_lambda(self):
        with pytest.raises(ValueError):
            edr(0.3, 0.3, 0.0)

    @given(st.floats(1e-6, 1.0), st.floats(1e-6, 1.0), st.floats(1e-3, 1e3))
    def test_between_arguments(self, e, d, lam):
        v = edr(e, d, lam)
        assert min(e, d) - 1e-12 <= v <= max(e, d) + 1e-12

    @given(st.floats(1e-6, 1.0), st.floats(1e-6, 1.0), st.floats(0.0, 0.5), st.floats(1e-3, 1e3))
    def test_monotone(self, e, d, step, lam):
        assert edr(min(e + step, 1.0), d, lam) >= edr(e, d, lam) - 1e-12
        assert edr(e, min(d + step, 1.0), lam) >= edr(e, d, lam) - 1e-12

    def test_large_lambda_tends_to_distance_ratio(self):
        rng = np.random.default_rng(2)
        for e, d in rng.uniform(0.01, 1.0, size=(200, 2)):
            assert edr(e, d, 1e6) == pytest.approx(d, abs=1e-3)


def test_no_nans_on_random_inputs():
    rng = np.random.default_rng(3)
    for k in rng.integers(2, 20, size=1000):
        p = rng.dirichlet(np.full(k, rng.uniform(0.05, 5)))
        h = normalized_entropy(p / p.sum())
        u, v = rng.normal(size=(2, 4))
        c = cosine_distance(u, v)
        r1, r2 = rng.uniform(0, 2, size=2)
        dr = distance_ratio(r1, r2)
        x = edr(h, dr, float(rng.uniform(0.01, 10)))
        for val, hi in ((h, 1), (c, 2), (dr, 1), (x, 1)):
            assert not math.isnan(val) and 0.0 <= val <= hi


def test_vectorized_forms_agree_with_scalar():
    rng = np.random.default_rng(4)
    probs = rng.dirichlet(np.ones(3), size=50)
    ent = entropy_rows(probs)
    for p, h in zip(probs, ent):
        assert normalized_entropy(p) == h
    e, d = rng.uniform(0, 1, size=(2, 50))
    out = edr_array(e, d, 1.5)
    for a, b, v in zip(e, d, out):
        assert edr(a, b, 1.5) == v
