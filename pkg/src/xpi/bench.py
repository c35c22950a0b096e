"""Benchmarks: square protocol, kernel backends, and latency breakdown."""

import time
from dataclasses import dataclass

import numpy as np

from xpi import engine, ring
from xpi.correlations import SquarePair, gen_square_site, lazy_pair
from xpi.kernels import available_backends
from xpi.model import QuantizedModel
from xpi.pipeline import forward_plain_fixed
from xpi.protocol import square_shares
from xpi.ring import RingTensor
from xpi.sharing import RandomSource, Share, share
from xpi.transport import loopback_pair


def bench_square(sizes, frac_bits: int = 16, repeats: int = 5, seed: int = 1) -> list:
    """Time the online square protocol per tensor size over loopback.

    Returns one row per size with the median wall time, exact payload
    bytes per party per direction, and derived per-element cost.
    """
    import threading

    rows = []
    for n in sizes:
        rs = RandomSource.deterministic(seed)
        x = RingTensor(rs.uint64((n,)), frac_bits)
        x0, x1 = share(x, rs)
        times = []
        bytes_per_dir = None
        for rep in range(repeats):
            (a0, s0), (a1, s1) = gen_square_site(n, frac_bits, rs)
            p0 = SquarePair(
                Share(0, RingTensor(a0, frac_bits)), Share(0, RingTensor(s0, 2 * frac_bits))
            )
            p1 = SquarePair(
                Share(1, RingTensor(a1, frac_bits)), Share(1, RingTensor(s1, 2 * frac_bits))
            )
            c0, c1 = loopback_pair()
            err = []

            def server():
                try:
                    square_shares(x1, p1, c1)
                except BaseException as exc:
                    err.append(exc)

            th = threading.Thread(target=server, daemon=True)
            t0 = time.perf_counter()
            th.start()
            square_shares(x0, p0, c0)
            th.join(timeout=60)
            times.append(time.perf_counter() - t0)
            if err:
                raise err[0]
            bytes_per_dir = c0.counters.bytes_sent - 12 * c0.counters.frames_sent
            c0.close()
            c1.close()
        med = sorted(times)[len(times) // 2]
        rows.append(
            {
                "elements": n,
                "seconds": med,
                "payload_bytes_per_direction": bytes_per_dir,
                "microseconds_per_element": 1e6 * med / n,
                "rounds": 1,
            }
        )
    return rows


def bench_kernels(seed: int = 2) -> list:
    """Compare compiled and fallback kernels on model-shaped workloads."""
    rng = np.random.default_rng(seed)
    backends = available_backends()
    rows = []
    cases = [
        ("matmul 2048x256 @ 256x256", "matmul_u64",
         (rng.integers(0, 1 << 64, (2048, 256), dtype=np.uint64),
          rng.integers(0, 1 << 64, (256, 256), dtype=np.uint64))),
        ("matmul 64x48 @ 48x256", "matmul_u64",
         (rng.integers(0, 1 << 64, (64, 48), dtype=np.uint64),
          rng.integers(0, 1 << 64, (48, 256), dtype=np.uint64))),
        ("dconv3x3 256 channels 8x8", "dconv3x3_u64",
         (rng.integers(0, 1 << 64, (256, 8, 8), dtype=np.uint64),
          rng.integers(0, 1 << 64, (256, 3, 3), dtype=np.uint64))),
        ("dconv3x3 2048 slices 8x8", "dconv3x3_u64",
         (rng.integers(0, 1 << 64, (2048, 8, 8), dtype=np.uint64),
          rng.integers(0, 1 << 64, (2048, 3, 3), dtype=np.uint64))),
    ]
    for label, fn_name, args in cases:
        row = {"case": label}
        reference = None
        for backend_name, mod in sorted(backends.items()):
            fn = getattr(mod, fn_name)
            fn(*args)  # warm up
            reps = 3
            t0 = time.perf_counter()
            for _ in range(reps):
                out = fn(*args)
            row[backend_name + "_seconds"] = (time.perf_counter() - t0) / reps
            if reference is None:
                reference = out
            elif not np.array_equal(reference, out):
                raise AssertionError(f"backends disagree on {label}")
        if "compiled_seconds" in row and "fallback_seconds" in row:
            row["speedup"] = row["fallback_seconds"] / row["compiled_seconds"]
        rows.append(row)
    return rows


@dataclass
class BreakdownRow:
    model: str
    batch: int
    trunc_mode: str
    linear_seconds: float
    nonlinear_seconds: float
    total_seconds: float
    payload_bytes_sent: int
    payload_bytes_received: int
    rounds: int
    argmax_agreement: float

    def as_dict(self) -> dict:
        return self.__dict__.copy()


def breakdown(
    qm: QuantizedModel,
    model_digest: bytes,
    model_name: str,
    batches,
    trunc_mode: str = "local",
    seed: int = 3,
    check_oracle: bool = True,
    transport: str = "loopback",
) -> list:
    """Latency/communication breakdown per batch size.

    Runs a full two-party session per batch with lazily dealt
    randomness, and scores argmax agreement against the plaintext
    fixed-point forward when check_oracle is set.
    """
    rows = []
    for batch in batches:
        images = RandomSource.deterministic(seed + batch).normal(
            (batch, 3, qm.cfg.image_size, qm.cfg.image_size)
        )
        c0, c1 = lazy_pair(qm.cfg, batch, qm.frac_bits, trunc_mode, seed + 7 * batch)
        result, _ = engine.run_local_session(
            qm,
            c0,
            c1,
            images,
            trunc_mode,
            model_digest,
            RandomSource.deterministic(seed + 13 * batch),
            transport=transport,
        )
        t = result.transcript
        if check_oracle:
            oracle = ring.decode_fixed(forward_plain_fixed(qm, images))
            agree = float((result.logits.argmax(1) == oracle.argmax(1)).mean())
        else:
            agree = float("nan")
        rows.append(
            BreakdownRow(
                model=model_name,
                batch=batch,
                trunc_mode=trunc_mode,
                linear_seconds=t.linear_seconds,
                nonlinear_seconds=t.nonlinear_seconds,
                total_seconds=t.total_seconds,
                payload_bytes_sent=t.bytes_sent - 12 * t.frames_sent,
                payload_bytes_received=t.bytes_received - 12 * t.frames_received,
                rounds=t.rounds,
                argmax_agreement=agree,
            )
        )
    return rows
