"""Two-party online inference engine.

Roles: party 0 (client) holds the input and learns the logits; party 1
(server) contributes compute and learns neither. Both parties hold the
public weights and walk the same program; every linear step is local,
every square consumes one dealer pair and one communication round.

The flow is: handshake (parameters and model digest must match), the
client shares its encoded input and sends the server's share, both
parties execute the program on shares, the server sends its logit
share back, and the client reconstructs and decodes.

Every step lands in the transcript as a LayerRecord carrying exact
wire-byte deltas from the transport counters, a round count, and wall
time, so the per-layer sums reconcile exactly with the channel totals.
"""

import struct
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from xpi import ring
from xpi.correlations import (
    TRUNC_EXACT,
    TRUNC_LOCAL,
    TRUNC_MODES,
    TRUNC_PAIR,
    CorrelatedRandomness,
)
from xpi.errors import HandshakeError, XpiError
from xpi.model import QuantizedModel
from xpi.pipeline import Program, Step, build_program, check_purity
from xpi.protocol import (
    expect_frame,
    open_tensor,
    square_shares,
    tensor_bytes,
    tensor_from_bytes,
    truncate_shares,
)
from xpi.ring import RingTensor
from xpi.sharing import (
    CLIENT,
    SERVER,
    RandomSource,
    Share,
    add_public,
    add_shares,
    reconstruct,
    share,
)
from xpi.transport import (
    MSG_CONTROL,
    MSG_HANDSHAKE,
    MSG_IO,
    Endpoint,
    Frame,
    paired_channels,
)

PROTOCOL_VERSION = 1
_TRUNC_CODE = {TRUNC_EXACT: 0, TRUNC_LOCAL: 1, TRUNC_PAIR: 2}
_TRUNC_NAME = {v: k for k, v in _TRUNC_CODE.items()}

# version u16, party u8, frac_bits u8, trunc mode u8, batch u32, digest 32B
_HANDSHAKE = struct.Struct("<HBBBI32s")


@dataclass(frozen=True)
class LayerRecord:
    name: str
    kind: str
    bucket: str
    bytes_sent: int
    bytes_received: int
    frames_sent: int
    frames_received: int
    rounds: int
    seconds: float


@dataclass
class Transcript:
    party: int
    trunc_mode: str
    frac_bits: int
    batch: int
    model_digest: str
    records: list = field(default_factory=list)
    total_seconds: float = 0.0
    wire_digest_sent: str = ""
    wire_digest_received: str = ""

    def add(self, record: LayerRecord) -> None:
        self.records.append(record)

    def _sum(self, attr: str, bucket: str | None = None) -> float:
        return sum(
            getattr(r, attr) for r in self.records if bucket is None or r.bucket == bucket
        )

    @property
    def bytes_sent(self) -> int:
        return self._sum("bytes_sent")

    @property
    def bytes_received(self) -> int:
        return self._sum("bytes_received")

    @property
    def frames_sent(self) -> int:
        return self._sum("frames_sent")

    @property
    def frames_received(self) -> int:
        return self._sum("frames_received")

    @property
    def rounds(self) -> int:
        return self._sum("rounds")

    @property
    def linear_seconds(self) -> float:
        return self._sum("seconds", "linear")

    @property
    def nonlinear_seconds(self) -> float:
        return self._sum("seconds", "nonlinear")

    def to_dict(self) -> dict:
        return {
            "party": self.party,
            "trunc_mode": self.trunc_mode,
            "frac_bits": self.frac_bits,
            "batch": self.batch,
            "model_digest": self.model_digest,
            "total_seconds": self.total_seconds,
            "linear_seconds": self.linear_seconds,
            "nonlinear_seconds": self.nonlinear_seconds,
            "bytes_sent": self.bytes_sent,
            "bytes_received": self.bytes_received,
            "rounds": self.rounds,
            "wire_digest_sent": self.wire_digest_sent,
            "wire_digest_received": self.wire_digest_received,
            "records": [asdict(r) for r in self.records],
        }


@dataclass
class InferenceResult:
    logits: np.ndarray
    ring_logits: RingTensor
    transcript: Transcript


class _Recorder:
    """Times a block and captures the exact transport counter delta."""

    def __init__(self, transcript: Transcript, chan: Endpoint):
        self.transcript = transcript
        self.chan = chan

    def record(self, name: str, kind: str, bucket: str, rounds: int, fn):
        # the counter bookkeeping stays inside the timed window so the
        # per-record seconds sum reconciles with the session wall time
        t0 = time.perf_counter()
        before = self.chan.counters.snapshot()
        out = fn()
        d = self.chan.counters.delta(before)
        dt = time.perf_counter() - t0
        self.transcript.add(
            LayerRecord(
                name,
                kind,
                bucket,
                d.bytes_sent,
                d.bytes_received,
                d.frames_sent,
                d.frames_received,
                rounds,
                dt,
            )
        )
        return out


class ShareExecutor:
    """Program executor over one party's shares."""

    def __init__(
        self,
        qm: QuantizedModel,
        party: int,
        chan: Endpoint,
        corr: CorrelatedRandomness,
        trunc_mode: str,
        recorder: _Recorder,
    ):
        if corr.party != party:
            raise XpiError(
                f"correlation bundle dealt to party {corr.party}, engine runs party {party}"
            )
        self.cfg = qm.cfg
        self.params = qm.params
        self.frac_bits = qm.frac_bits
        self.party = party
        self.chan = chan
        self.corr = corr
        self.trunc_mode = trunc_mode
        self.recorder = recorder
        self.pool_scale = ring.encode_fixed(1.0 / qm.cfg.tokens, qm.frac_bits)

    def apply(self, step: Step, x: Share, residuals: list) -> Share:
        rounds = 0
        if step.op == "square":
            rounds = 1
        elif step.op == "truncate" and self.trunc_mode != TRUNC_LOCAL:
            rounds = 1
        return self.recorder.record(
            step.name,
            step.op,
            step.bucket,
            rounds,
            lambda: getattr(self, "op_" + step.op)(step, x, residuals),
        )

    def _wrap(self, t: RingTensor) -> Share:
        return Share(self.party, t)

    def op_save_residual(self, step, x, residuals):
        residuals.append(x)
        return x

    def op_add_residual(self, step, x, residuals):
        return add_shares(x, residuals.pop())

    def op_patches(self, step, x, residuals):
        cfg = self.cfg
        k = x.tensor.shape[0]
        n, p = cfg.grid, cfg.patch_size
        t = x.tensor.reshape(k, 3, n, p, n, p).transpose(0, 2, 4, 1, 3, 5)
        return self._wrap(t.reshape(k * n * n, cfg.patch_dim))

    def op_to_grid(self, step, x, residuals):
        n, d = self.cfg.grid, self.cfg.embed_dim
        k = x.tensor.shape[0] // (n * n)
        return self._wrap(x.tensor.reshape(k, n, n, d).transpose(0, 3, 1, 2))

    def op_to_tokens(self, step, x, residuals):
        k, d, n, _ = x.tensor.shape
        return self._wrap(x.tensor.transpose(0, 2, 3, 1).reshape(k * n * n, d))

    def op_matmul(self, step, x, residuals):
        return self._wrap(ring.matmul(x.tensor, self.params[step.param]))

    def op_dconv(self, step, x, residuals):
        return self._wrap(ring.depthwise_conv2d(x.tensor, self.params[step.param]))

    def op_affine(self, step, x, residuals):
        return self._wrap(x.tensor.mul(self.params[step.param]))

    def op_bias(self, step, x, residuals):
        return add_public(x, self.params[step.param])

    def op_mean(self, step, x, residuals):
        return self._wrap(x.tensor.sum(axis=(2, 3)).mul(self.pool_scale))

    def op_square(self, step, x, residuals):
        pair = self.corr.pop_square(step.site, x.tensor.shape)
        return square_shares(x, pair, self.chan)

    def op_truncate(self, step, x, residuals):
        shift = x.tensor.frac_bits - self.frac_bits
        pair = None
        if self.trunc_mode == TRUNC_PAIR:
            pair = self.corr.pop_trunc(step.site, x.tensor.shape)
        return truncate_shares(x, shift, self.trunc_mode, self.chan, pair)


def _do_handshake(
    chan: Endpoint,
    party: int,
    frac_bits: int,
    trunc_mode: str,
    batch: int,
    model_digest: bytes,
) -> None:
    if len(model_digest) != 32:
        raise HandshakeError(f"model digest must be 32 bytes, got {len(model_digest)}")
    mine = _HANDSHAKE.pack(
        PROTOCOL_VERSION, party, frac_bits, _TRUNC_CODE[trunc_mode], batch, model_digest
    )
    frame = expect_frame(chan.exchange(Frame(MSG_HANDSHAKE, mine)), MSG_HANDSHAKE)
    if len(frame.payload) != _HANDSHAKE.size:
        raise HandshakeError(
            f"handshake payload has {len(frame.payload)} bytes, expected {_HANDSHAKE.size}"
        )
    version, peer_party, peer_f, peer_mode, peer_batch, peer_digest = _HANDSHAKE.unpack(
        frame.payload
    )
    if version != PROTOCOL_VERSION:
        raise HandshakeError(f"peer speaks protocol {version}, this is {PROTOCOL_VERSION}")
    if peer_party == party:
        raise HandshakeError(f"both endpoints claim party {party}")
    if peer_f != frac_bits:
        raise HandshakeError(f"fraction bits differ: mine {frac_bits}, peer {peer_f}")
    if peer_mode != _TRUNC_CODE[trunc_mode]:
        raise HandshakeError(
            f"truncation modes differ: mine {trunc_mode!r}, "
            f"peer {_TRUNC_NAME.get(peer_mode, peer_mode)!r}"
        )
    if peer_batch != batch:
        raise HandshakeError(f"batch sizes differ: mine {batch}, peer {peer_batch}")
    if peer_digest != model_digest:
        raise HandshakeError("model digests differ; the parties loaded different weights")


def _abort(chan: Endpoint, reason: str) -> None:
    try:
        chan.send_frame(Frame(MSG_CONTROL, reason.encode("utf-8")[:4096]))
    except XpiError:
        pass


def _finish(transcript: Transcript, chan: Endpoint, t0: float) -> None:
    transcript.total_seconds = time.perf_counter() - t0
    digests = chan.wire_digests()
    transcript.wire_digest_sent = digests["sent"]
    transcript.wire_digest_received = digests["received"]


def client_infer(
    chan: Endpoint,
    qm: QuantizedModel,
    corr: CorrelatedRandomness,
    images: np.ndarray,
    trunc_mode: str,
    model_digest: bytes,
    rand: RandomSource | None = None,
) -> InferenceResult:
    """Run party 0: share the input, evaluate, learn the logits."""
    if trunc_mode not in TRUNC_MODES:
        raise ValueError(f"unknown truncation mode {trunc_mode!r}")
    rand = rand or RandomSource.system()
    images = np.asarray(images, dtype=np.float64)
    program = build_program(qm.cfg)
    check_purity(program)
    batch = images.shape[0]
    transcript = Transcript(
        CLIENT, trunc_mode, qm.frac_bits, batch, model_digest.hex()
    )
    rec = _Recorder(transcript, chan)
    ex = ShareExecutor(qm, CLIENT, chan, corr, trunc_mode, rec)
    try:
        t0 = time.perf_counter()
        rec.record(
            "session.handshake",
            "handshake",
            "linear",
            1,
            lambda: _do_handshake(chan, CLIENT, qm.frac_bits, trunc_mode, batch, model_digest),
        )

        def send_input():
            encoded = ring.encode_fixed(images, qm.frac_bits)
            mine, theirs = share(encoded, rand)
            chan.send_frame(Frame(MSG_IO, tensor_bytes(theirs.tensor)))
            return mine

        x = rec.record("input.share", "io", "linear", 1, send_input)
        residuals = []
        for step in program.steps:
            x = ex.apply(step, x, residuals)

        def recv_output():
            frame = expect_frame(chan.recv_frame(), MSG_IO)
            theirs = Share(
                SERVER, tensor_from_bytes(frame.payload, x.tensor.shape, x.tensor.frac_bits)
            )
            return reconstruct(x, theirs)

        ring_logits = rec.record("output.reveal", "io", "linear", 1, recv_output)
        _finish(transcript, chan, t0)
        return InferenceResult(ring.decode_fixed(ring_logits), ring_logits, transcript)
    except XpiError as exc:
        _abort(chan, f"party 0 aborted: {exc}")
        raise


def server_serve(
    chan: Endpoint,
    qm: QuantizedModel,
    corr: CorrelatedRandomness,
    trunc_mode: str,
    model_digest: bytes,
    batch: int,
) -> Transcript:
    """Run party 1: evaluate on shares, learn nothing about the input."""
    if trunc_mode not in TRUNC_MODES:
        raise ValueError(f"unknown truncation mode {trunc_mode!r}")
    program = build_program(qm.cfg)
    check_purity(program)
    transcript = Transcript(
        SERVER, trunc_mode, qm.frac_bits, batch, model_digest.hex()
    )
    rec = _Recorder(transcript, chan)
    ex = ShareExecutor(qm, SERVER, chan, corr, trunc_mode, rec)
    try:
        t0 = time.perf_counter()
        rec.record(
            "session.handshake",
            "handshake",
            "linear",
            1,
            lambda: _do_handshake(chan, SERVER, qm.frac_bits, trunc_mode, batch, model_digest),
        )
        s = qm.cfg.image_size

        def recv_input():
            frame = expect_frame(chan.recv_frame(), MSG_IO)
            return Share(
                SERVER, tensor_from_bytes(frame.payload, (batch, 3, s, s), qm.frac_bits)
            )

        x = rec.record("input.share", "io", "linear", 1, recv_input)
        residuals = []
        for step in program.steps:
            x = ex.apply(step, x, residuals)
        rec.record(
            "output.reveal",
            "io",
            "linear",
            1,
            lambda: chan.send_frame(Frame(MSG_IO, tensor_bytes(x.tensor))),
        )
        _finish(transcript, chan, t0)
        return transcript
    except XpiError as exc:
        _abort(chan, f"party 1 aborted: {exc}")
        raise


def run_local_session(
    qm: QuantizedModel,
    corr0: CorrelatedRandomness,
    corr1: CorrelatedRandomness,
    images: np.ndarray,
    trunc_mode: str,
    model_digest: bytes,
    rand: RandomSource | None = None,
    inject_rtt_ms: float = 0.0,
    transport: str = "loopback",
) -> tuple:
    """Run both parties in one process, over loopback or localhost TCP.

    The server runs on a worker thread; numpy releases the GIL inside
    the heavy kernels, so the parties genuinely interleave. Returns
    (client InferenceResult, server Transcript).
    """
    c_chan, s_chan = paired_channels(transport, inject_rtt_ms)
    batch = np.asarray(images).shape[0]
    server_result: list = []
    server_error: list = []

    def run_server():
        try:
            server_result.append(
                server_serve(s_chan, qm, corr1, trunc_mode, model_digest, batch)
            )
        except BaseException as exc:
            server_error.append(exc)

    worker = threading.Thread(target=run_server, name="party1", daemon=True)
    worker.start()
    try:
        result = client_infer(c_chan, qm, corr0, images, trunc_mode, model_digest, rand)
    finally:
        c_chan.close()
        worker.join(timeout=60.0)
        s_chan.close()
    if server_error:
        raise server_error[0]
    if not server_result:
        raise XpiError("server thread produced no transcript")
    return result, server_result[0]
