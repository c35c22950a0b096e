"""Additive 2-of-2 secret sharing over Z_{2^64}.

A tensor x is split as x = [x]_0 + [x]_1 mod 2^64 with [x]_0 sampled
uniformly, so either share alone is statistically independent of x.
Linear maps with public coefficients apply to each share locally;
public constants are added by party 0 only.
"""

import os
from dataclasses import dataclass

import numpy as np

from xpi import ring
from xpi.ring import RingTensor

CLIENT = 0
SERVER = 1


class RandomSource:
    """Stream of uniform uint64 words, seeded or OS-entropy backed."""

    def __init__(self, generator=None):
        self._gen = generator

    @classmethod
    def deterministic(cls, seed: int) -> "RandomSource":
        return cls(np.random.Generator(np.random.PCG64(seed)))

    @classmethod
    def system(cls) -> "RandomSource":
        return cls(None)

    def uint64(self, shape) -> np.ndarray:
        if self._gen is not None:
            return self._gen.integers(0, 1 << 64, size=shape, dtype=np.uint64)
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        buf = os.urandom(8 * max(n, 1))
        return np.frombuffer(buf, dtype="<u8").reshape(shape).copy()

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        if self._gen is None:
            raise ValueError("normal sampling needs a deterministic source")
        return self._gen.normal(0.0, scale, size=shape)


@dataclass(frozen=True)
class Share:
    """One party's additive share of a ring tensor."""

    party: int
    tensor: RingTensor

    def __post_init__(self):
        if self.party not in (CLIENT, SERVER):
            raise ValueError(f"party must be 0 or 1, got {self.party!r}")
        if not isinstance(self.tensor, RingTensor):
            raise TypeError(f"tensor must be a RingTensor, got {type(self.tensor)!r}")

    @property
    def shape(self) -> tuple:
        return self.tensor.shape

    @property
    def frac_bits(self) -> int:
        return self.tensor.frac_bits


def share(x: RingTensor, rand: RandomSource) -> tuple:
    """Split x into (party-0 share, party-1 share)."""
    mask = RingTensor(rand.uint64(x.shape), x.frac_bits)
    return Share(CLIENT, mask), Share(SERVER, x.sub(mask))


def reconstruct(a: Share, b: Share) -> RingTensor:
    """Recombine the two shares of one tensor.

    Requires one share from each party; a single party's material can
    never reconstruct.
    """
    if a.party == b.party:
        raise ValueError(f"need shares from both parties, got two from party {a.party}")
    if a.shape != b.shape:
        raise ValueError(f"share shapes differ: {a.shape} vs {b.shape}")
    return a.tensor.add(b.tensor)


def _check_same_party(a: Share, b: Share) -> None:
    if a.party != b.party:
        raise ValueError(f"cannot combine shares held by parties {a.party} and {b.party}")


def add_shares(a: Share, b: Share) -> Share:
    """[x]_i + [y]_i, a local step of computing x + y."""
    _check_same_party(a, b)
    return Share(a.party, a.tensor.add(b.tensor))


def sub_shares(a: Share, b: Share) -> Share:
    """[x]_i - [y]_i, a local step of computing x - y."""
    _check_same_party(a, b)
    return Share(a.party, a.tensor.sub(b.tensor))


def add_public(s: Share, c: RingTensor) -> Share:
    """Add a public constant: party 0 absorbs it, party 1 is unchanged."""
    if s.party == CLIENT:
        return Share(s.party, s.tensor.add(c))
    s.tensor._check_scale(c)
    return s


@dataclass(frozen=True)
class PublicLinear:
    """A public linear map y = op(x) * weight (+ bias).

    kind selects the operation: "matmul" right-multiplies 2-d inputs by
    ``weight``; "dconv" applies a 3x3 depthwise kernel; "affine" scales
    elementwise (broadcasting). ``bias``, if present, must be at the
    scale of the product and is added by party 0 only.
    """

    kind: str
    weight: RingTensor
    bias: RingTensor | None = None

    def __post_init__(self):
        if self.kind not in ("matmul", "dconv", "affine"):
            raise ValueError(f"unknown linear kind {self.kind!r}")

    def apply_plain(self, x: RingTensor) -> RingTensor:
        if self.kind == "matmul":
            out = ring.matmul(x, self.weight)
        elif self.kind == "dconv":
            out = ring.depthwise_conv2d(x, self.weight)
        else:
            out = x.mul(self.weight)
        if self.bias is not None:
            out = out.add(self.bias)
        return out


def linear_apply_public(s: Share, lin: PublicLinear) -> Share:
    """Apply a public linear map to a share locally.

    Additive sharing commutes with linear maps, so each party applies
    the weight to its own share; the public bias goes to party 0 only.
    """
    if lin.kind == "matmul":
        out = ring.matmul(s.tensor, lin.weight)
    elif lin.kind == "dconv":
        out = ring.depthwise_conv2d(s.tensor, lin.weight)
    else:
        out = s.tensor.mul(lin.weight)
    result = Share(s.party, out)
    if lin.bias is not None:
        result = add_public(result, lin.bias)
    return result
