"""Online protocol steps over an open channel.

The engine's entire online interaction is built from one primitive:
both parties simultaneously open a masked tensor (one round, 8 bytes
per element each way). Squaring consumes a dealer square pair, the
dealer-pair truncation consumes a truncation pair, and the local
truncation needs no communication at all.

Squaring identity, with e = x - a opened and all arithmetic mod 2^64:
    x*x = e*e + 2*e*a + a*a
Party 0 absorbs the public e*e term; e*a and a*a are linear in the
shares of a and a*a, so each party evaluates its own share locally.
"""

import numpy as np

from xpi import ring
from xpi.correlations import (
    TRUNC_EXACT,
    TRUNC_LOCAL,
    TRUNC_MODES,
    TRUNC_PAIR,
    SquarePair,
    TruncPair,
)
from xpi.errors import AbortError, CorrelationError, DesyncError
from xpi.ring import RingTensor
from xpi.sharing import CLIENT, RandomSource, Share, sub_shares
from xpi.transport import MSG_CONTROL, MSG_OPEN, Endpoint, Frame


def tensor_bytes(t: RingTensor) -> bytes:
    return t.data.astype("<u8", copy=False).tobytes()


def tensor_from_bytes(data: bytes, shape, frac_bits: int) -> RingTensor:
    need = 8 * int(np.prod(shape, dtype=np.int64))
    if len(data) != need:
        raise DesyncError(f"expected {need} payload bytes for shape {shape}, got {len(data)}")
    return RingTensor(np.frombuffer(data, dtype="<u8").reshape(shape).copy(), frac_bits)


def expect_frame(frame: Frame, msg_type: int) -> Frame:
    if frame.msg_type == MSG_CONTROL:
        raise AbortError(frame.payload.decode("utf-8", errors="replace"))
    if frame.msg_type != msg_type:
        raise DesyncError(
            f"expected frame type {msg_type}, peer sent {frame.msg_type}"
        )
    return frame


def open_tensor(x: Share, chan: Endpoint) -> RingTensor:
    """Reveal a shared tensor to both parties: one exchanged frame."""
    frame = chan.exchange(Frame(MSG_OPEN, tensor_bytes(x.tensor)))
    expect_frame(frame, MSG_OPEN)
    theirs = tensor_from_bytes(frame.payload, x.tensor.shape, x.tensor.frac_bits)
    return x.tensor.add(theirs)


def square_shares(x: Share, pair: SquarePair, chan: Endpoint) -> Share:
    """x -> x*x on shares; one round, one square pair.

    The result carries doubled fraction bits; a truncation step brings
    it back to the working scale.
    """
    pair.consume()
    if pair.a.party != x.party:
        raise ValueError(f"pair dealt to party {pair.a.party}, held by {x.party}")
    if pair.a.tensor.shape != x.tensor.shape:
        raise CorrelationError(
            f"square pair shape {pair.a.tensor.shape} does not match input {x.tensor.shape}"
        )
    e = open_tensor(sub_shares(x, pair.a), chan)
    y = e.mul(pair.a.tensor).mul_public_int(2).add(pair.a2.tensor)
    if x.party == CLIENT:
        y = y.add(e.square())
    return Share(x.party, y)


def truncate_shares(
    x: Share,
    shift: int,
    mode: str,
    chan: Endpoint | None = None,
    pair: TruncPair | None = None,
) -> Share:
    """Reduce the scale of a shared tensor by 2^shift.

    exact: opens the value, truncates in plaintext, and re-shares it as
    (result, 0). Bit-exact against the plaintext oracle and one round,
    but it reveals the tensor to both parties; test and debugging use
    only, never a private deployment.

    local: each party arithmetic-shifts its own share. Zero rounds; the
    result is within one unit of the plaintext truncation except with
    probability about |value| / 2^63 per element, where a share
    straddling the ring modulus loses the carry.

    pair: opens x + r for a dealer-supplied uniform r, truncates the
    opened value publicly, and subtracts the dealt shares of the
    truncated r. One round, within one unit, and reveals nothing.
    """
    if mode not in TRUNC_MODES:
        raise ValueError(f"unknown truncation mode {mode!r}")
    t = x.tensor
    if mode == TRUNC_LOCAL:
        shifted = (t.data.view(np.int64) >> np.int64(shift)).view(np.uint64)
        return Share(x.party, RingTensor(shifted, t.frac_bits - shift))
    if mode == TRUNC_PAIR and pair is None:
        raise ValueError("pair truncation needs a dealer truncation pair")
    if chan is None:
        raise ValueError(f"{mode} truncation needs a channel")
    if mode == TRUNC_EXACT:
        opened = open_tensor(x, chan)
        truncated = ring.truncate_plain(opened, shift)
        if x.party == CLIENT:
            return Share(x.party, truncated)
        return Share(x.party, ring.zeros(t.shape, t.frac_bits - shift))
    pair.consume()
    if pair.r.party != x.party:
        raise ValueError(f"pair dealt to party {pair.r.party}, held by {x.party}")
    if pair.r.tensor.shape != t.shape:
        raise CorrelationError(
            f"truncation pair shape {pair.r.tensor.shape} does not match input {t.shape}"
        )
    masked = open_tensor(Share(x.party, t.add(pair.r.tensor)), chan)
    if x.party == CLIENT:
        out = ring.truncate_plain(masked, shift).sub(pair.r_trunc.tensor)
    else:
        out = pair.r_trunc.tensor.neg()
    return Share(x.party, out)


class BeaverTriple:
    """Shares of (a, b, a*b) for one general product; single use."""

    def __init__(self, a: Share, b: Share, c: Share):
        self.a = a
        self.b = b
        self.c = c
        self._consumed = False

    def consume(self) -> None:
        if self._consumed:
            raise CorrelationError("Beaver triple consumed twice")
        self._consumed = True


def gen_beaver_triples(count: int, frac_bits: int, rand: RandomSource) -> tuple:
    """Deal one site of general multiplication triples to both parties."""
    a = rand.uint64(count)
    b = rand.uint64(count)
    c = a * b
    a0, b0, c0 = rand.uint64(count), rand.uint64(count), rand.uint64(count)
    f = frac_bits

    def pair(party, av, bv, cv):
        return BeaverTriple(
            Share(party, RingTensor(av, f)),
            Share(party, RingTensor(bv, f)),
            Share(party, RingTensor(cv, 2 * f)),
        )

    return pair(0, a0, b0, c0), pair(1, a - a0, b - b0, c - c0)


def mul_shares(x: Share, y: Share, triple: BeaverTriple, chan: Endpoint) -> Share:
    """General product on shares via a Beaver triple; one round.

    Both maskings open in a single exchanged frame: the payload is the
    concatenation of x - a and y - b.
    """
    triple.consume()
    e_share = sub_shares(x, triple.a)
    d_share = sub_shares(y, triple.b)
    payload = tensor_bytes(e_share.tensor) + tensor_bytes(d_share.tensor)
    frame = chan.exchange(Frame(MSG_OPEN, payload))
    expect_frame(frame, MSG_OPEN)
    half = len(frame.payload) // 2
    e = e_share.tensor.add(
        tensor_from_bytes(frame.payload[:half], x.tensor.shape, x.frac_bits)
    )
    d = d_share.tensor.add(
        tensor_from_bytes(frame.payload[half:], y.tensor.shape, y.frac_bits)
    )
    z = e.mul(triple.b.tensor).add(d.mul(triple.a.tensor)).add(triple.c.tensor)
    if x.party == CLIENT:
        z = z.add(e.mul(d))
    return Share(x.party, z)
