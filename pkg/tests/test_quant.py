import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hfpim.errors import InvalidInput
from hfpim.quant import QuantMatrix, offset_encode, quantize, quantize_vector


def test_scale_and_rounding():
    q = quantize(np.array([[12.7, 1.27], [-3.0, 0.0]]))
    assert q.scale == pytest.approx(0.1)
    assert q.data[0, 1] == 13
    assert q.data[0, 0] == 127


def test_round_half_to_even():
    q = quantize(np.array([[127.0, 0.5, 1.5, 2.5, -0.5]]))
    np.testing.assert_array_equal(q.data, [[127, 0, 2, 2, 0]])


def test_zero_matrix():
    q = quantize(np.zeros((2, 3)))
    assert q.scale == 1.0
    assert not q.data.any()


def test_integer_matrix_lossless():
    m = np.array([[127.0, -127.0, 3.0], [0.0, -5.0, 64.0]])
    q = quantize(m)
    assert q.scale == 1.0
    np.testing.assert_array_equal(q.dequantize(), m)


def test_non_finite():
    with pytest.raises(InvalidInput):
        quantize(np.array([[np.inf]]))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-1e4, 1e4, allow_subnormal=False)))
def test_round_trip_bound(m):
    q = quantize(m)
    assert np.all(np.abs(q.dequantize() - m) <= q.scale / 2 * (1 + 1e-12))


def test_offset_endpoints():
    enc = offset_encode(QuantMatrix(np.array([[-128, 127]], dtype=np.int8), 1.0))
    np.testing.assert_array_equal(enc.words, [[0, 255]])


def test_zero_column_correction():
    enc = offset_encode(QuantMatrix(np.zeros((3, 1), dtype=np.int8), 1.0))
    assert np.all(enc.words == 128)
    a = np.array([5, -7, 9])
    raw = a @ enc.words.astype(np.int64)
    assert raw[0] == 128 * a.sum()
    assert enc.correct(raw, a)[0] == 0


def test_random_signed_gemv_through_offset():
    rng = np.random.default_rng(0)
    w = rng.integers(-128, 128, (4, 4)).astype(np.int8)
    a = rng.integers(-128, 128, 4)
    enc = offset_encode(QuantMatrix(w, 1.0))
    raw = a @ enc.words.astype(np.int64)
    expected = [sum(int(a[i]) * int(w[i, j]) for i in range(4)) for j in range(4)]
    np.testing.assert_array_equal(enc.correct(raw, a), expected)


def test_offset_exhaustive_3x3():
    vals = np.array([-128, -1, 0, 1, 127])
    rng = np.random.default_rng(5)
    # every input vector, a rotating set of weight matrices
    for a in itertools.product(vals, repeat=3):
        a = np.array(a)
        w = rng.choice(vals, (3, 3)).astype(np.int8)
        enc = offset_encode(QuantMatrix(w, 1.0))
        raw = a @ enc.words.astype(np.int64)
        np.testing.assert_array_equal(enc.correct(raw, a), a @ w.astype(np.int64))
    for w in itertools.product(vals, repeat=3):
        w = np.array(w, dtype=np.int8)[:, None]
        enc = offset_encode(QuantMatrix(w, 1.0))
        for a in itertools.product(vals, repeat=3):
            a = np.array(a)
            raw = a @ enc.words.astype(np.int64)
            assert enc.correct(raw, a)[0] == int(a @ w[:, 0].astype(np.int64))


def test_quantize_vector_batch():
    x = np.array([[1.0, -2.0], [0.5, 0.25]])
    qv = quantize_vector(x)
    assert qv.data.shape == (2, 2) and len(qv) == 2
    assert qv.scale == pytest.approx(2.0 / 127)
