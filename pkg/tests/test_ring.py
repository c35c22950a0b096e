"""Ring tensor tests against independent pure-Python oracles.

The oracles compute in unbounded Python ints and reduce mod 2^64 at
the end, so they share no code path with the numpy/Cython kernels they
check.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xpi import ring
from xpi.errors import EncodingOverflowError
from xpi.ring import RingTensor, decode_fixed, encode_fixed, truncate_plain

MOD = 1 << 64


def oracle_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = [[0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            acc = 0
            for p in range(k):
                acc += int(a[i, p]) * int(b[p, j])
            out[i][j] = acc % MOD
    return np.array(out, dtype=np.uint64)


def oracle_dconv(x, k):
    m, h, w = x.shape
    out = np.zeros((m, h, w), dtype=np.uint64)
    for c in range(m):
        for i in range(h):
            for j in range(w):
                acc = 0
                for di in range(3):
                    for dj in range(3):
                        yi, xj = i + di - 1, j + dj - 1
                        if 0 <= yi < h and 0 <= xj < w:
                            acc += int(x[c, yi, xj]) * int(k[c, di, dj])
                out[c, i, j] = acc % MOD
    return out


def to_signed(u):
    u = int(u)
    return u - MOD if u >= MOD // 2 else u


class TestEncoding:
    def test_roundtrip_exact_on_representable(self):
        vals = np.array([0.0, 1.0, -1.0, 0.5, -0.5, 1234.25, -999.75])
        t = encode_fixed(vals, 16)
        assert t.frac_bits == 16
        np.testing.assert_array_equal(decode_fixed(t), vals)

    def test_rounds_half_away_from_zero(self):
        f = 4
        # 0.03125 * 2^4 = 0.5 exactly; half rounds away from zero
        t = encode_fixed([0.03125, -0.03125, 0.09375, -0.09375], f)
        assert t.data.view(np.int64).tolist() == [1, -1, 2, -2]

    def test_negative_values_occupy_upper_half(self):
        t = encode_fixed([-1.0], 16)
        assert int(t.data[0]) == MOD - 65536

    def test_overflow_raises_and_names_index(self):
        with pytest.raises(EncodingOverflowError) as exc:
            encode_fixed([0.0, 2.0**50, 0.0], 16)
        assert "(1,)" in str(exc.value)

    def test_non_finite_raises(self):
        for bad in (np.inf, -np.inf, np.nan):
            with pytest.raises(EncodingOverflowError):
                encode_fixed([bad], 8)

    def test_bad_frac_bits_rejected(self):
        for bad in (-1, 64, 1.5):
            with pytest.raises(ValueError):
                encode_fixed([1.0], bad)

    @given(
        st.lists(
            st.floats(min_value=-1e9, max_value=1e9, allow_nan=False), min_size=1, max_size=20
        )
    )
    def test_roundtrip_within_half_ulp(self, vals):
        f = 16
        t = encode_fixed(vals, f)
        back = decode_fixed(t)
        assert np.abs(back - np.asarray(vals)).max() <= 2.0 ** -(f + 1) + 1e-12


class TestArithmetic:
    def test_add_sub_wrap(self):
        rng = np.random.default_rng(0)
        a = rng.integers(0, MOD, 50, dtype=np.uint64)
        b = rng.integers(0, MOD, 50, dtype=np.uint64)
        ta, tb = RingTensor(a, 3), RingTensor(b, 3)
        expect_add = np.array([(int(x) + int(y)) % MOD for x, y in zip(a, b)], dtype=np.uint64)
        expect_sub = np.array([(int(x) - int(y)) % MOD for x, y in zip(a, b)], dtype=np.uint64)
        np.testing.assert_array_equal(ta.add(tb).data, expect_add)
        np.testing.assert_array_equal(ta.sub(tb).data, expect_sub)
        np.testing.assert_array_equal(ta.neg().data, np.array(
            [(-int(x)) % MOD for x in a], dtype=np.uint64))

    def test_mul_square_wrap_and_scale(self):
        rng = np.random.default_rng(1)
        a = rng.integers(0, MOD, 30, dtype=np.uint64)
        b = rng.integers(0, MOD, 30, dtype=np.uint64)
        ta, tb = RingTensor(a, 5), RingTensor(b, 7)
        prod = ta.mul(tb)
        assert prod.frac_bits == 12
        np.testing.assert_array_equal(
            prod.data, np.array([(int(x) * int(y)) % MOD for x, y in zip(a, b)], dtype=np.uint64)
        )
        sq = ta.square()
        assert sq.frac_bits == 10
        np.testing.assert_array_equal(
            sq.data, np.array([(int(x) ** 2) % MOD for x in a], dtype=np.uint64)
        )

    def test_sum_wraps(self):
        rng = np.random.default_rng(2)
        a = rng.integers(0, MOD, (7, 9), dtype=np.uint64)
        t = RingTensor(a, 0)
        expect = sum(int(v) for v in a.ravel()) % MOD
        assert int(t.sum().data.reshape(-1)[0]) == expect
        col = t.sum(axis=0)
        expect_col = [(sum(int(a[i, j]) for i in range(7)) % MOD) for j in range(9)]
        np.testing.assert_array_equal(col.data, np.array(expect_col, dtype=np.uint64))

    def test_scale_mismatch_raises(self):
        a = RingTensor(np.zeros(3, dtype=np.uint64), 4)
        b = RingTensor(np.zeros(3, dtype=np.uint64), 5)
        with pytest.raises(ValueError, match="scale mismatch"):
            a.add(b)
        with pytest.raises(ValueError, match="scale mismatch"):
            a.sub(b)

    def test_immutable(self):
        t = RingTensor(np.zeros(3, dtype=np.uint64), 0)
        with pytest.raises(AttributeError):
            t.frac_bits = 5
        with pytest.raises(ValueError):
            t.data[0] = 1


class TestTruncate:
    def test_matches_floor_division_oracle(self):
        rng = np.random.default_rng(3)
        raw = rng.integers(0, MOD, 500, dtype=np.uint64)
        t = RingTensor(raw, 32)
        out = truncate_plain(t, 16)
        assert out.frac_bits == 16
        expect = np.array(
            [(to_signed(u) >> 16) % MOD for u in raw], dtype=np.uint64
        )
        np.testing.assert_array_equal(out.data, expect)

    def test_floor_semantics_on_negatives(self):
        # -3 / 4 floors to -1, not 0
        t = RingTensor(np.array([(-3) % MOD], dtype=np.uint64), 2)
        out = truncate_plain(t, 2)
        assert to_signed(out.data[0]) == -1

    def test_shift_zero_is_identity(self):
        t = encode_fixed([1.5], 4)
        assert truncate_plain(t, 0) == t

    def test_shift_out_of_range(self):
        t = encode_fixed([1.5], 4)
        with pytest.raises(ValueError):
            truncate_plain(t, 5)
        with pytest.raises(ValueError):
            truncate_plain(t, -1)

    @given(st.integers(min_value=-(2**62), max_value=2**62), st.integers(1, 40))
    @settings(max_examples=200)
    def test_truncation_is_floor_division(self, v, shift):
        t = RingTensor(np.array([v % MOD], dtype=np.uint64), 48)
        shift = min(shift, 48)
        out = truncate_plain(t, shift)
        assert to_signed(out.data[0]) == v >> shift  # python >> floors


class TestMatmul:
    def test_against_bruteforce(self):
        rng = np.random.default_rng(4)
        a = RingTensor(rng.integers(0, MOD, (5, 7), dtype=np.uint64), 2)
        b = RingTensor(rng.integers(0, MOD, (7, 4), dtype=np.uint64), 3)
        out = ring.matmul(a, b)
        assert out.frac_bits == 5
        np.testing.assert_array_equal(out.data, oracle_matmul(a.data, b.data))

    def test_extreme_values(self):
        top = np.full((3, 3), MOD - 1, dtype=np.uint64)
        out = ring.matmul(RingTensor(top), RingTensor(top))
        np.testing.assert_array_equal(out.data, oracle_matmul(top, top))

    def test_identity_doubles_scale(self):
        f = 8
        v = encode_fixed(np.array([[1.5, -2.0, 3.25, 0.125]]), f)
        eye = encode_fixed(np.eye(4), f)
        out = ring.matmul(v, eye)
        assert out.frac_bits == 2 * f
        np.testing.assert_array_equal(decode_fixed(out), decode_fixed(v))

    def test_shape_errors(self):
        a = RingTensor(np.zeros((2, 3), dtype=np.uint64))
        b = RingTensor(np.zeros((4, 2), dtype=np.uint64))
        with pytest.raises(ValueError, match="inner dimensions"):
            ring.matmul(a, b)
        with pytest.raises(ValueError, match="2-d"):
            ring.matmul(RingTensor(np.zeros(3, dtype=np.uint64)), a)


class TestDepthwiseConv:
    def test_against_bruteforce(self):
        rng = np.random.default_rng(5)
        x = RingTensor(rng.integers(0, MOD, (4, 6, 6), dtype=np.uint64), 1)
        k = RingTensor(rng.integers(0, MOD, (4, 3, 3), dtype=np.uint64), 1)
        out = ring.depthwise_conv2d(x, k)
        assert out.frac_bits == 2
        np.testing.assert_array_equal(out.data, oracle_dconv(x.data, k.data))

    def test_batched_matches_per_image(self):
        rng = np.random.default_rng(6)
        x = rng.integers(0, MOD, (3, 4, 5, 5), dtype=np.uint64)
        k = RingTensor(rng.integers(0, MOD, (4, 3, 3), dtype=np.uint64))
        full = ring.depthwise_conv2d(RingTensor(x), k)
        for i in range(3):
            single = ring.depthwise_conv2d(RingTensor(x[i]), k)
            np.testing.assert_array_equal(full.data[i], single.data)

    def test_zero_padding_at_borders(self):
        # a kernel that only picks up the top-left neighbor must read
        # zero outside the image
        x = RingTensor(np.ones((1, 3, 3), dtype=np.uint64))
        k = np.zeros((1, 3, 3), dtype=np.uint64)
        k[0, 0, 0] = 1  # selects x[i-1, j-1]
        out = ring.depthwise_conv2d(x, RingTensor(k))
        expect = np.array([[[0, 0, 0], [0, 1, 1], [0, 1, 1]]], dtype=np.uint64)
        np.testing.assert_array_equal(out.data, expect)

    def test_channel_mismatch(self):
        x = RingTensor(np.zeros((2, 4, 4), dtype=np.uint64))
        k = RingTensor(np.zeros((3, 3, 3), dtype=np.uint64))
        with pytest.raises(ValueError, match="channel mismatch"):
            ring.depthwise_conv2d(x, k)
