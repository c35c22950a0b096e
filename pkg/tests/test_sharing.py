"""Secret sharing: correctness, masking, and public linear maps."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xpi import ring
from xpi.ring import RingTensor, encode_fixed
from xpi.sharing import (
    CLIENT,
    SERVER,
    PublicLinear,
    RandomSource,
    Share,
    add_public,
    add_shares,
    linear_apply_public,
    reconstruct,
    share,
    sub_shares,
)

MOD = 1 << 64


def rand_tensor(rng, shape, frac=16):
    return RingTensor(rng.integers(0, MOD, shape, dtype=np.uint64), frac)


class TestShareReconstruct:
    def test_roundtrip_bitwise(self):
        rng = np.random.default_rng(20)
        rs = RandomSource.deterministic(21)
        for shape in [(1,), (5, 7), (2, 3, 4, 5)]:
            x = rand_tensor(rng, shape)
            s0, s1 = share(x, rs)
            assert s0.party == CLIENT and s1.party == SERVER
            assert reconstruct(s0, s1) == x
            assert reconstruct(s1, s0) == x

    def test_share_is_independent_of_secret(self):
        # the party-0 share is the mask itself: identical seeds must
        # produce identical masks no matter the secret
        rng = np.random.default_rng(22)
        x = rand_tensor(rng, (50,))
        y = rand_tensor(rng, (50,))
        s0x, _ = share(x, RandomSource.deterministic(7))
        s0y, _ = share(y, RandomSource.deterministic(7))
        assert s0x.tensor == s0y.tensor

    def test_single_share_is_not_the_secret(self):
        rng = np.random.default_rng(23)
        x = rand_tensor(rng, (1000,))
        s0, s1 = share(x, RandomSource.system())
        assert s0.tensor != x
        assert s1.tensor != x

    def test_same_party_cannot_reconstruct(self):
        rng = np.random.default_rng(24)
        x = rand_tensor(rng, (4,))
        s0, _ = share(x, RandomSource.system())
        with pytest.raises(ValueError, match="both parties"):
            reconstruct(s0, s0)

    def test_shape_mismatch(self):
        a = Share(0, RingTensor(np.zeros(3, dtype=np.uint64)))
        b = Share(1, RingTensor(np.zeros(4, dtype=np.uint64)))
        with pytest.raises(ValueError, match="shapes differ"):
            reconstruct(a, b)

    def test_bad_party_rejected(self):
        with pytest.raises(ValueError):
            Share(2, RingTensor(np.zeros(1, dtype=np.uint64)))

    @given(st.integers(0, MOD - 1), st.integers(0, 2**32))
    @settings(max_examples=100)
    def test_roundtrip_property(self, value, seed):
        x = RingTensor(np.array([value], dtype=np.uint64), 8)
        s0, s1 = share(x, RandomSource.deterministic(seed))
        assert reconstruct(s0, s1) == x


class TestLocalOps:
    def test_add_sub_shares(self):
        rng = np.random.default_rng(25)
        rs = RandomSource.deterministic(26)
        x, y = rand_tensor(rng, (9,)), rand_tensor(rng, (9,))
        x0, x1 = share(x, rs)
        y0, y1 = share(y, rs)
        assert reconstruct(add_shares(x0, y0), add_shares(x1, y1)) == x.add(y)
        assert reconstruct(sub_shares(x0, y0), sub_shares(x1, y1)) == x.sub(y)

    def test_cross_party_combination_rejected(self):
        rng = np.random.default_rng(27)
        x0, x1 = share(rand_tensor(rng, (2,)), RandomSource.system())
        with pytest.raises(ValueError, match="parties"):
            add_shares(x0, x1)

    def test_add_public_goes_to_party_zero(self):
        rng = np.random.default_rng(28)
        rs = RandomSource.deterministic(29)
        x = rand_tensor(rng, (6,))
        c = rand_tensor(rng, (6,))
        x0, x1 = share(x, rs)
        assert reconstruct(add_public(x0, c), add_public(x1, c)) == x.add(c)
        assert add_public(x1, c).tensor == x1.tensor

    def test_deterministic_source_reproduces(self):
        a = RandomSource.deterministic(5).uint64((10,))
        b = RandomSource.deterministic(5).uint64((10,))
        np.testing.assert_array_equal(a, b)

    def test_system_source_yields_distinct_draws(self):
        rs = RandomSource.system()
        assert not np.array_equal(rs.uint64((32,)), rs.uint64((32,)))


class TestPublicLinear:
    def test_matmul_commutes_with_sharing(self):
        rng = np.random.default_rng(30)
        rs = RandomSource.deterministic(31)
        x = rand_tensor(rng, (4, 6), frac=8)
        w = rand_tensor(rng, (6, 3), frac=8)
        lin = PublicLinear("matmul", w)
        x0, x1 = share(x, rs)
        got = reconstruct(linear_apply_public(x0, lin), linear_apply_public(x1, lin))
        assert got == lin.apply_plain(x)

    def test_dconv_commutes_with_sharing(self):
        rng = np.random.default_rng(32)
        rs = RandomSource.deterministic(33)
        x = rand_tensor(rng, (2, 5, 5), frac=4)
        k = rand_tensor(rng, (2, 3, 3), frac=4)
        lin = PublicLinear("dconv", k)
        x0, x1 = share(x, rs)
        got = reconstruct(linear_apply_public(x0, lin), linear_apply_public(x1, lin))
        assert got == lin.apply_plain(x)

    def test_affine_with_bias(self):
        rng = np.random.default_rng(34)
        rs = RandomSource.deterministic(35)
        x = rand_tensor(rng, (7,), frac=8)
        scale = rand_tensor(rng, (7,), frac=8)
        bias = rand_tensor(rng, (7,), frac=16)
        lin = PublicLinear("affine", scale, bias)
        x0, x1 = share(x, rs)
        got = reconstruct(linear_apply_public(x0, lin), linear_apply_public(x1, lin))
        assert got == x.mul(scale).add(bias)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown linear kind"):
            PublicLinear("relu", RingTensor(np.zeros(1, dtype=np.uint64)))

    def test_decoded_semantics(self):
        # shared fixed-point matmul decodes to the float product
        x = encode_fixed([[0.5, -1.5]], 16)
        w = encode_fixed([[2.0], [1.0]], 16)
        x0, x1 = share(x, RandomSource.deterministic(36))
        lin = PublicLinear("matmul", w)
        out = reconstruct(linear_apply_public(x0, lin), linear_apply_public(x1, lin))
        assert ring.decode_fixed(out)[0, 0] == pytest.approx(-0.5)
