"""Dealer-side correlated randomness: square pairs and truncation pairs.

A trusted dealer, run offline, samples for every square site a uniform
ring tensor a and shares (a, a*a), and for every truncation site a
uniform r and shares (r, r >> shift). The online phase consumes one
entry per site in program order; each entry is single-use and the
element counts are derived from the same program the engine executes,
so any mismatch fails loudly before the protocol can desync.
"""

import struct

import numpy as np

from xpi.errors import CorrelationError, FormatError
from xpi.model import CORR_MAGIC, FORMAT_VERSION, ModelConfig
from xpi.pipeline import build_program
from xpi.ring import RingTensor
from xpi.sharing import RandomSource, Share

TRUNC_EXACT = "exact"
TRUNC_LOCAL = "local"
TRUNC_PAIR = "pair"
TRUNC_MODES = (TRUNC_EXACT, TRUNC_LOCAL, TRUNC_PAIR)


class SquarePair:
    """Shares of (a, a*a) for one square site; single use."""

    __slots__ = ("a", "a2", "_consumed")

    def __init__(self, a: Share, a2: Share):
        self.a = a
        self.a2 = a2
        self._consumed = False

    @property
    def count(self) -> int:
        return self.a.tensor.size

    def consume(self) -> None:
        if self._consumed:
            raise CorrelationError("square pair consumed twice")
        self._consumed = True


class TruncPair:
    """Shares of (r, r >> shift) for one truncation site; single use."""

    __slots__ = ("r", "r_trunc", "_consumed")

    def __init__(self, r: Share, r_trunc: Share):
        self.r = r
        self.r_trunc = r_trunc
        self._consumed = False

    @property
    def count(self) -> int:
        return self.r.tensor.size

    def consume(self) -> None:
        if self._consumed:
            raise CorrelationError("truncation pair consumed twice")
        self._consumed = True


class _Site:
    __slots__ = ("lo", "hi", "consumed")

    def __init__(self, lo: np.ndarray, hi: np.ndarray):
        self.lo = lo
        self.hi = hi
        self.consumed = False


class CorrelatedRandomness:
    """One party's bundle of per-site dealer randomness."""

    def __init__(self, party: int, frac_bits: int):
        self.party = party
        self.frac_bits = frac_bits
        self._squares = []
        self._truncs = []

    def add_square_site(self, a: np.ndarray, a2: np.ndarray) -> None:
        self._squares.append(_Site(a, a2))

    def add_trunc_site(self, r: np.ndarray, r_trunc: np.ndarray) -> None:
        self._truncs.append(_Site(r, r_trunc))

    @property
    def square_sites(self) -> int:
        return len(self._squares)

    @property
    def trunc_sites(self) -> int:
        return len(self._truncs)

    def _pop(self, sites: list, idx: int, shape, what: str) -> _Site:
        if idx >= len(sites):
            raise CorrelationError(
                f"no {what} randomness for site {idx}: only {len(sites)} sites dealt"
            )
        site = sites[idx]
        if site.consumed:
            raise CorrelationError(f"{what} randomness for site {idx} already consumed")
        need = int(np.prod(shape, dtype=np.int64))
        if site.lo.size != need:
            raise CorrelationError(
                f"{what} site {idx} holds {site.lo.size} elements, "
                f"the program needs {need}"
            )
        site.consumed = True
        return site

    def pop_square(self, idx: int, shape) -> SquarePair:
        site = self._pop(self._squares, idx, shape, "square")
        f = self.frac_bits
        return SquarePair(
            Share(self.party, RingTensor(site.lo.reshape(shape), f)),
            Share(self.party, RingTensor(site.hi.reshape(shape), 2 * f)),
        )

    def pop_trunc(self, idx: int, shape) -> TruncPair:
        site = self._pop(self._truncs, idx, shape, "truncation")
        f = self.frac_bits
        return TruncPair(
            Share(self.party, RingTensor(site.lo.reshape(shape), 2 * f)),
            Share(self.party, RingTensor(site.hi.reshape(shape), f)),
        )


def gen_square_site(count: int, frac_bits: int, rand: RandomSource) -> tuple:
    """Sample (a, a*a) and additively share both; returns per-party arrays."""
    a = rand.uint64(count)
    a2 = a * a
    a_mask = rand.uint64(count)
    a2_mask = rand.uint64(count)
    return (a_mask, a2_mask), (a - a_mask, a2 - a2_mask)


def gen_trunc_site(count: int, shift: int, rand: RandomSource) -> tuple:
    """Sample r uniform and share (r, arithmetic_shift(r, shift))."""
    r = rand.uint64(count)
    r_trunc = (r.view(np.int64) >> np.int64(shift)).view(np.uint64)
    r_mask = rand.uint64(count)
    rt_mask = rand.uint64(count)
    return (r_mask, rt_mask), (r - r_mask, r_trunc - rt_mask)


def deal(
    cfg: ModelConfig,
    batch: int,
    frac_bits: int,
    trunc_mode: str,
    rand: RandomSource,
) -> tuple:
    """Generate both parties' bundles for one batched inference."""
    if trunc_mode not in TRUNC_MODES:
        raise ValueError(f"unknown truncation mode {trunc_mode!r}")
    if batch <= 0:
        raise ValueError(f"batch must be positive, got {batch}")
    program = build_program(cfg)
    b0 = CorrelatedRandomness(0, frac_bits)
    b1 = CorrelatedRandomness(1, frac_bits)
    for per_image in program.square_counts:
        (a0, s0), (a1, s1) = gen_square_site(per_image * batch, frac_bits, rand)
        b0.add_square_site(a0, s0)
        b1.add_square_site(a1, s1)
    if trunc_mode == TRUNC_PAIR:
        for per_image in program.trunc_counts:
            (r0, t0), (r1, t1) = gen_trunc_site(per_image * batch, frac_bits, rand)
            b0.add_trunc_site(r0, t0)
            b1.add_trunc_site(r1, t1)
    return b0, b1


class LazyCorrelatedRandomness:
    """Dealer randomness regenerated per site on demand.

    Functionally the dealer's output, but nothing is materialized until
    a site is popped, which keeps huge batched sessions within memory.
    Both parties construct it with the same seed; each pop regenerates
    the site's full tuple from a per-site seed stream and keeps only
    the calling party's half, so the parties stay algebraically
    consistent without ever touching a file.
    """

    def __init__(
        self,
        party: int,
        frac_bits: int,
        cfg: ModelConfig,
        batch: int,
        trunc_mode: str,
        seed: int,
    ):
        if trunc_mode not in TRUNC_MODES:
            raise ValueError(f"unknown truncation mode {trunc_mode!r}")
        if batch <= 0:
            raise ValueError(f"batch must be positive, got {batch}")
        program = build_program(cfg)
        self.party = party
        self.frac_bits = frac_bits
        self._batch = batch
        self._seed = seed
        self._square_counts = [c * batch for c in program.square_counts]
        self._trunc_counts = (
            [c * batch for c in program.trunc_counts] if trunc_mode == TRUNC_PAIR else []
        )
        self._square_used = set()
        self._trunc_used = set()

    @property
    def square_sites(self) -> int:
        return len(self._square_counts)

    @property
    def trunc_sites(self) -> int:
        return len(self._trunc_counts)

    def _site_source(self, tag: int, idx: int) -> RandomSource:
        seq = np.random.SeedSequence(entropy=self._seed, spawn_key=(tag, idx))
        return RandomSource(np.random.Generator(np.random.PCG64(seq)))

    def _check(self, counts, used, idx, shape, what: str) -> int:
        if idx >= len(counts):
            raise CorrelationError(
                f"no {what} randomness for site {idx}: only {len(counts)} sites dealt"
            )
        if idx in used:
            raise CorrelationError(f"{what} randomness for site {idx} already consumed")
        need = int(np.prod(shape, dtype=np.int64))
        if counts[idx] != need:
            raise CorrelationError(
                f"{what} site {idx} holds {counts[idx]} elements, the program needs {need}"
            )
        used.add(idx)
        return need

    def pop_square(self, idx: int, shape) -> SquarePair:
        need = self._check(self._square_counts, self._square_used, idx, shape, "square")
        halves = gen_square_site(need, self.frac_bits, self._site_source(0, idx))
        lo, hi = halves[self.party]
        f = self.frac_bits
        return SquarePair(
            Share(self.party, RingTensor(lo.reshape(shape), f)),
            Share(self.party, RingTensor(hi.reshape(shape), 2 * f)),
        )

    def pop_trunc(self, idx: int, shape) -> TruncPair:
        need = self._check(self._trunc_counts, self._trunc_used, idx, shape, "truncation")
        halves = gen_trunc_site(need, self.frac_bits, self._site_source(1, idx))
        lo, hi = halves[self.party]
        f = self.frac_bits
        return TruncPair(
            Share(self.party, RingTensor(lo.reshape(shape), 2 * f)),
            Share(self.party, RingTensor(hi.reshape(shape), f)),
        )


def lazy_pair(
    cfg: ModelConfig, batch: int, frac_bits: int, trunc_mode: str, seed: int
) -> tuple:
    """Both parties' lazy bundles for one batched inference."""
    return (
        LazyCorrelatedRandomness(0, frac_bits, cfg, batch, trunc_mode, seed),
        LazyCorrelatedRandomness(1, frac_bits, cfg, batch, trunc_mode, seed),
    )


def save_correlations(bundle: CorrelatedRandomness, path: str) -> None:
    with open(path, "wb") as f:
        f.write(CORR_MAGIC)
        f.write(struct.pack("<H", FORMAT_VERSION))
        f.write(struct.pack("<B", bundle.party))
        f.write(struct.pack("<I", len(bundle._squares)))
        for site in bundle._squares:
            f.write(struct.pack("<Q", site.lo.size))
            f.write(site.lo.astype("<u8", copy=False).tobytes())
            f.write(site.hi.astype("<u8", copy=False).tobytes())
        f.write(struct.pack("<I", len(bundle._truncs)))
        for site in bundle._truncs:
            f.write(struct.pack("<Q", site.lo.size))
            f.write(site.lo.astype("<u8", copy=False).tobytes())
            f.write(site.hi.astype("<u8", copy=False).tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file while reading {what}")
    return data


def load_correlations(path: str, frac_bits: int) -> CorrelatedRandomness:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != CORR_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {CORR_MAGIC!r}")
        (version,) = struct.unpack("<H", _read_exact(f, 2, "version"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported correlation version {version}")
        (party,) = struct.unpack("<B", _read_exact(f, 1, "party"))
        if party not in (0, 1):
            raise FormatError(f"party must be 0 or 1, got {party}")
        bundle = CorrelatedRandomness(party, frac_bits)
        (n_sq,) = struct.unpack("<I", _read_exact(f, 4, "square site count"))
        for i in range(n_sq):
            (count,) = struct.unpack("<Q", _read_exact(f, 8, f"square site {i} count"))
            lo = np.frombuffer(
                _read_exact(f, 8 * count, f"square site {i} shares"), dtype="<u8"
            ).copy()
            hi = np.frombuffer(
                _read_exact(f, 8 * count, f"square site {i} product shares"), dtype="<u8"
            ).copy()
            bundle.add_square_site(lo, hi)
        (n_tr,) = struct.unpack("<I", _read_exact(f, 4, "truncation site count"))
        for i in range(n_tr):
            (count,) = struct.unpack("<Q", _read_exact(f, 8, f"truncation site {i} count"))
            lo = np.frombuffer(
                _read_exact(f, 8 * count, f"truncation site {i} masks"), dtype="<u8"
            ).copy()
            hi = np.frombuffer(
                _read_exact(f, 8 * count, f"truncation site {i} shifted masks"),
                dtype="<u8",
            ).copy()
            bundle.add_trunc_site(lo, hi)
        if f.read(1):
            raise FormatError("trailing bytes after the last site")
    return bundle
