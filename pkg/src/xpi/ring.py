"""Fixed-point tensors over the ring Z_{2^64}.

Real values are embedded as x -> round(x * 2^f) mod 2^64 with
round-half-away-from-zero, where f is the fraction-bit count carried on
the tensor. Negative values live in the upper half of the ring
(two's complement). Multiplying two tensors adds their fraction bits;
``truncate_plain`` shifts the scale back down with an arithmetic right
shift, i.e. floor division by 2^f on the signed interpretation.
"""

import numpy as np

from xpi.errors import EncodingOverflowError
from xpi.kernels import dconv3x3_u64, matmul_u64

MODULUS_BITS = 64
# Encoded magnitudes must stay clear of the top of the signed range so a
# single product of two encoded values cannot cross the sign boundary.
_ENCODE_LIMIT = float(1 << 62)


class RingTensor:
    """An n-dimensional tensor of Z_{2^64} elements with a fixed scale.

    Instances take ownership of the backing array and freeze it; all
    operations return new tensors. ``frac_bits`` counts the fraction
    bits of the fixed-point scale and is tracked through arithmetic so
    scale mismatches fail loudly instead of silently mixing encodings.
    """

    __slots__ = ("data", "frac_bits")

    def __init__(self, data: np.ndarray, frac_bits: int = 0):
        if not isinstance(frac_bits, int) or frac_bits < 0 or frac_bits >= MODULUS_BITS:
            raise ValueError(f"frac_bits must be an int in [0, 64), got {frac_bits!r}")
        arr = np.ascontiguousarray(data, dtype=np.uint64)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "frac_bits", frac_bits)

    def __setattr__(self, name, value):
        raise AttributeError("RingTensor is immutable")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"RingTensor(shape={self.shape}, frac_bits={self.frac_bits})"

    def _check_scale(self, other: "RingTensor") -> None:
        if self.frac_bits != other.frac_bits:
            raise ValueError(
                f"scale mismatch: {self.frac_bits} vs {other.frac_bits} fraction bits"
            )

    def add(self, other: "RingTensor") -> "RingTensor":
        self._check_scale(other)
        return RingTensor(self.data + other.data, self.frac_bits)

    def sub(self, other: "RingTensor") -> "RingTensor":
        self._check_scale(other)
        return RingTensor(self.data - other.data, self.frac_bits)

    def neg(self) -> "RingTensor":
        return RingTensor(np.negative(self.data), self.frac_bits)

    def mul(self, other: "RingTensor") -> "RingTensor":
        """Elementwise product; fraction bits add. Broadcasts like numpy."""
        return RingTensor(self.data * other.data, self.frac_bits + other.frac_bits)

    def square(self) -> "RingTensor":
        return RingTensor(self.data * self.data, 2 * self.frac_bits)

    def mul_public_int(self, c: int) -> "RingTensor":
        """Multiply by a public ring element; the scale is unchanged."""
        return RingTensor(self.data * np.uint64(c % (1 << MODULUS_BITS)), self.frac_bits)

    def sum(self, axis=None) -> "RingTensor":
        """Exact ring sum (wraps mod 2^64); the scale is unchanged."""
        return RingTensor(np.add.reduce(self.data, axis=axis), self.frac_bits)

    def reshape(self, *shape) -> "RingTensor":
        return RingTensor(self.data.reshape(*shape), self.frac_bits)

    def transpose(self, *axes) -> "RingTensor":
        return RingTensor(np.ascontiguousarray(self.data.transpose(*axes)), self.frac_bits)

    def with_frac_bits(self, frac_bits: int) -> "RingTensor":
        """Relabel the scale without touching the payload."""
        return RingTensor(self.data, frac_bits)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RingTensor):
            return NotImplemented
        return (
            self.frac_bits == other.frac_bits
            and self.shape == other.shape
            and bool(np.array_equal(self.data, other.data))
        )

    def __hash__(self):
        raise TypeError("RingTensor is not hashable")


def encode_fixed(values, frac_bits: int) -> RingTensor:
    """Embed real values into the ring at scale 2^frac_bits.

    Rounds half away from zero. Raises EncodingOverflowError, naming the
    first offending index, if any |value| * 2^frac_bits reaches 2^62 or
    is not finite.
    """
    if not isinstance(frac_bits, int) or frac_bits < 0 or frac_bits >= MODULUS_BITS:
        raise ValueError(f"frac_bits must be an int in [0, 64), got {frac_bits!r}")
    arr = np.asarray(values, dtype=np.float64)
    scaled = arr * float(1 << frac_bits)
    bad = ~np.isfinite(scaled) | (np.abs(scaled) >= _ENCODE_LIMIT)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise EncodingOverflowError(
            f"value {arr[idx]!r} at index {idx} does not fit "
            f"{frac_bits} fraction bits"
        )
    rounded = np.copysign(np.floor(np.abs(scaled) + 0.5), scaled)
    return RingTensor(rounded.astype(np.int64).view(np.uint64), frac_bits)


def decode_fixed(t: RingTensor) -> np.ndarray:
    """Map ring elements back to floats via the signed interpretation."""
    return t.data.view(np.int64).astype(np.float64) * (2.0 ** -t.frac_bits)


def truncate_plain(t: RingTensor, shift: int) -> RingTensor:
    """Arithmetic right shift by ``shift`` bits on the signed view.

    This is floor division by 2^shift, the plaintext reference that the
    shared truncation protocols are measured against. The scale label
    drops by the same amount.
    """
    if shift < 0 or shift > t.frac_bits:
        raise ValueError(f"shift {shift} out of range for {t.frac_bits} fraction bits")
    if shift == 0:
        return t
    shifted = (t.data.view(np.int64) >> np.int64(shift)).view(np.uint64)
    return RingTensor(shifted, t.frac_bits - shift)


def matmul(a: RingTensor, b: RingTensor) -> RingTensor:
    """(m, k) @ (k, n) over the ring; fraction bits add."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul needs 2-d tensors, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return RingTensor(matmul_u64(a.data, b.data), a.frac_bits + b.frac_bits)


def depthwise_conv2d(x: RingTensor, kernel: RingTensor) -> RingTensor:
    """3x3 depthwise convolution with zero padding; fraction bits add.

    x has shape (channels, h, w) or (batch, channels, h, w); kernel has
    shape (channels, 3, 3) and is applied per channel.
    """
    if kernel.data.ndim != 3 or kernel.shape[1:] != (3, 3):
        raise ValueError(f"kernel must have shape (channels, 3, 3), got {kernel.shape}")
    channels = kernel.shape[0]
    if x.data.ndim == 3:
        if x.shape[0] != channels:
            raise ValueError(f"channel mismatch: input {x.shape}, kernel {kernel.shape}")
        out = dconv3x3_u64(x.data, kernel.data)
    elif x.data.ndim == 4:
        if x.shape[1] != channels:
            raise ValueError(f"channel mismatch: input {x.shape}, kernel {kernel.shape}")
        batch, _, h, w = x.shape
        flat = np.ascontiguousarray(x.data.reshape(batch * channels, h, w))
        tiled = np.ascontiguousarray(np.tile(kernel.data, (batch, 1, 1)))
        out = dconv3x3_u64(flat, tiled).reshape(batch, channels, h, w)
    else:
        raise ValueError(f"input must be 3-d or 4-d, got shape {x.shape}")
    return RingTensor(out, x.frac_bits + kernel.frac_bits)


def zeros(shape, frac_bits: int = 0) -> RingTensor:
    return RingTensor(np.zeros(shape, dtype=np.uint64), frac_bits)
