"""Command line front end.

Subcommands cover the whole deployment surface: generating weights,
dealing correlated randomness to per-party files, serving and running
private inference over TCP, plaintext reference runs, a self test, and
benchmarks. Set XPI_LOG=debug|info|... for progress logging on stderr.

Exit codes: 0 success, 1 generic engine failure or failed check,
2 bad usage or argument values, 3 missing file, 4 handshake mismatch,
5 correlation mismatch, 6 transport failure, 7 malformed file,
8 fixed-point overflow, 9 protocol desync, 10 peer abort.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from xpi import bench, engine, ring
from xpi.correlations import (
    TRUNC_MODES,
    deal,
    lazy_pair,
    load_correlations,
    save_correlations,
)
from xpi.errors import CorrelationError, XpiError
from xpi.kernels import BACKEND
from xpi.model import (
    PRESETS,
    ModelConfig,
    digest_weights,
    fold_model,
    load_vectors,
    load_weights,
    param_count,
    quantize_model,
    random_model,
    save_vectors,
    save_weights,
)
from xpi.pipeline import build_program, forward_plain_fixed, forward_plain_float
from xpi.sharing import RandomSource
from xpi.transport import Listener, connect_endpoint

log = logging.getLogger("xpi.cli")


def _setup_logging() -> None:
    level_name = os.environ.get("XPI_LOG", "").strip()
    if not level_name:
        return
    level = getattr(logging, level_name.upper(), None)
    if not isinstance(level, int):
        print(f"warning: XPI_LOG={level_name!r} is not a log level", file=sys.stderr)
        level = logging.INFO
    logging.basicConfig(
        level=level, stream=sys.stderr, format="%(asctime)s %(name)s %(levelname)s %(message)s"
    )


def _parse_addr(text: str) -> tuple:
    host, sep, port = text.rpartition(":")
    if not sep:
        raise ValueError(f"address must look like host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def _parse_int_list(text: str) -> list:
    try:
        values = [int(part) for part in text.split(",") if part != ""]
    except ValueError:
        raise ValueError(f"expected comma-separated integers, got {text!r}") from None
    if not values or any(v <= 0 for v in values):
        raise ValueError(f"expected positive integers, got {text!r}")
    return values


def _parse_config(text: str) -> ModelConfig:
    parts = _parse_int_list(text)
    if len(parts) != 6:
        raise ValueError(
            "config needs 6 integers: "
            "image_size,patch_size,embed_dim,channel_mix_dim,depth,num_classes"
        )
    return ModelConfig(*parts)


def _add_model_source(p: argparse.ArgumentParser, weights_only: bool = False) -> None:
    p.add_argument("--weights", metavar="PATH", help="weights file")
    if not weights_only:
        p.add_argument("--preset", choices=sorted(PRESETS), help="built-in architecture")
        p.add_argument(
            "--config",
            metavar="I,P,D,M,DEPTH,CLASSES",
            help="explicit architecture instead of a preset",
        )
        p.add_argument(
            "--model-seed",
            type=int,
            default=11,
            help="seed for generated weights when no --weights file is given",
        )


def _resolve_config(args) -> ModelConfig:
    if getattr(args, "config", None):
        return _parse_config(args.config)
    if getattr(args, "preset", None):
        return PRESETS[args.preset]
    if getattr(args, "weights", None):
        return load_weights(args.weights).cfg
    raise ValueError("give one of --weights, --preset, or --config")


def _resolve_model(args, frac_bits: int) -> tuple:
    """Returns (label, quantized model, digest) from --weights or a preset."""
    if getattr(args, "weights", None):
        w = load_weights(args.weights)
        label = os.path.basename(args.weights)
    elif getattr(args, "preset", None) or getattr(args, "config", None):
        cfg = _parse_config(args.config) if getattr(args, "config", None) else PRESETS[args.preset]
        w = random_model(cfg, args.model_seed)
        label = args.preset or "custom"
    else:
        raise ValueError("give one of --weights, --preset, or --config")
    digest = digest_weights(w)
    qm = quantize_model(fold_model(w), frac_bits)
    log.info("model %s: %s, digest %s", label, w.cfg.astuple(), digest.hex()[:16])
    return label, qm, digest


def _load_images(args, cfg: ModelConfig) -> tuple:
    """Returns (images (k,3,s,s) float64, reference logits or None)."""
    s = cfg.image_size
    if getattr(args, "input", None):
        flat, ref = load_vectors(args.input)
        if flat.shape[1] != 3 * s * s:
            raise ValueError(
                f"vectors carry {flat.shape[1]} values per image, "
                f"the model wants {3 * s * s}"
            )
        return flat.astype(np.float64).reshape(-1, 3, s, s), ref.astype(np.float64)
    k = getattr(args, "random", None)
    if k:
        rand = RandomSource.deterministic(args.seed if args.seed is not None else 0)
        return rand.normal((k, 3, s, s)), None
    raise ValueError("give --input FILE or --random COUNT")


def _write_logits(path: str, logits: np.ndarray) -> None:
    np.savetxt(path, np.asarray(logits, dtype=np.float64), fmt="%.9g", delimiter=",")


def _check_logits(got: np.ndarray, ref, args) -> int:
    """Compare against file logits; returns a process exit code."""
    if ref is None:
        if args.tol_abs is not None or args.tol_argmax is not None:
            raise ValueError("tolerances need reference logits (--input with --check)")
        return 0
    diff = float(np.max(np.abs(got - ref))) if got.size else 0.0
    agree = float(np.mean(got.argmax(1) == ref.argmax(1))) if got.size else 1.0
    print(f"check: max_abs_diff={diff:.6g} argmax_agreement={agree:.4f}")
    failed = False
    if args.tol_abs is not None and diff > args.tol_abs:
        print(f"check FAILED: max_abs_diff {diff:.6g} exceeds {args.tol_abs:g}")
        failed = True
    if args.tol_argmax is not None and agree < args.tol_argmax:
        print(f"check FAILED: argmax_agreement {agree:.4f} below {args.tol_argmax:g}")
        failed = True
    return 1 if failed else 0


def _print_transcript(t) -> None:
    print(
        f"party {t.party}: total {t.total_seconds:.3f}s "
        f"(linear {t.linear_seconds:.3f}s, nonlinear {t.nonlinear_seconds:.3f}s), "
        f"sent {t.bytes_sent} bytes / {t.frames_sent} frames, "
        f"received {t.bytes_received} bytes / {t.frames_received} frames, "
        f"{t.rounds} rounds"
    )
    print(f"wire sha256 sent={t.wire_digest_sent} received={t.wire_digest_received}")


def _dump_transcript(path, t) -> None:
    if path:
        with open(path, "w") as f:
            json.dump(t.to_dict(), f, indent=2)
        log.info("transcript written to %s", path)


# ---------------------------------------------------------------- commands


def cmd_gen_model(args) -> int:
    if not (args.preset or args.config):
        raise ValueError("give --preset or --config")
    cfg = _parse_config(args.config) if args.config else PRESETS[args.preset]
    w = random_model(cfg, args.seed)
    save_weights(w, args.out)
    digest = digest_weights(w)
    print(f"wrote {args.out}: config {cfg.astuple()}, "
          f"{param_count(cfg)} parameters, digest {digest.hex()}")
    if args.vectors:
        if not args.vectors_out:
            raise ValueError("--vectors needs --vectors-out")
        s = cfg.image_size
        images = RandomSource.deterministic(args.seed + 1).normal((args.vectors, 3, s, s))
        logits = forward_plain_float(fold_model(w), images)
        save_vectors(args.vectors_out, images.reshape(args.vectors, -1), logits)
        print(f"wrote {args.vectors_out}: {args.vectors} reference vectors")
    return 0


def cmd_dealer(args) -> int:
    cfg = _resolve_config(args)
    rand = (
        RandomSource.deterministic(args.seed) if args.seed is not None else RandomSource.system()
    )
    b0, b1 = deal(cfg, args.batch, args.frac_bits, args.trunc_mode, rand)
    paths = (args.out + ".party0.xpc", args.out + ".party1.xpc")
    save_correlations(b0, paths[0])
    save_correlations(b1, paths[1])
    for path in paths:
        print(f"wrote {path}: {b0.square_sites} square sites, "
              f"{b0.trunc_sites} truncation sites, {os.path.getsize(path)} bytes")
    return 0


def cmd_serve(args) -> int:
    _, qm, digest = _resolve_model(args, args.frac_bits)
    corr = load_correlations(args.corr, args.frac_bits)
    if corr.party != 1:
        raise CorrelationError(f"serve needs a party 1 bundle, {args.corr} is party {corr.party}")
    host, port = _parse_addr(args.addr)
    listener = Listener(host, port)
    print(f"listening on {host}:{listener.port}", flush=True)
    chan = listener.accept(args.inject_rtt_ms, args.timeout)
    try:
        transcript = engine.server_serve(chan, qm, corr, args.trunc_mode, digest, args.batch)
    finally:
        chan.close()
    _print_transcript(transcript)
    _dump_transcript(args.transcript, transcript)
    return 0


def cmd_infer(args) -> int:
    _, qm, digest = _resolve_model(args, args.frac_bits)
    corr = load_correlations(args.corr, args.frac_bits)
    if corr.party != 0:
        raise CorrelationError(f"infer needs a party 0 bundle, {args.corr} is party {corr.party}")
    images, ref = _load_images(args, qm.cfg)
    rand = (
        RandomSource.deterministic(args.seed) if args.seed is not None else RandomSource.system()
    )
    host, port = _parse_addr(args.addr)
    chan = connect_endpoint(host, port, args.inject_rtt_ms, args.timeout)
    try:
        result = engine.client_infer(chan, qm, corr, images, args.trunc_mode, digest, rand)
    finally:
        chan.close()
    preds = result.logits.argmax(1)
    print("argmax:", " ".join(str(int(p)) for p in preds))
    _print_transcript(result.transcript)
    _dump_transcript(args.transcript, result.transcript)
    if args.out:
        _write_logits(args.out, result.logits)
        print(f"wrote logits to {args.out}")
    return _check_logits(result.logits, ref if args.check else None, args)


def cmd_plain(args) -> int:
    if not args.weights:
        raise ValueError("plain needs --weights")
    w = load_weights(args.weights)
    images, ref = _load_images(args, w.cfg)
    folded = fold_model(w)
    if args.repr == "float":
        logits = forward_plain_float(folded, images)
    else:
        qm = quantize_model(folded, args.frac_bits)
        logits = ring.decode_fixed(forward_plain_fixed(qm, images))
    preds = logits.argmax(1)
    print("argmax:", " ".join(str(int(p)) for p in preds))
    if args.out:
        _write_logits(args.out, logits)
        print(f"wrote logits to {args.out}")
    return _check_logits(logits, ref if args.check else None, args)


def cmd_selftest(args) -> int:
    label, qm, digest = _resolve_model(args, args.frac_bits)
    cfg = qm.cfg
    s = cfg.image_size
    images = RandomSource.deterministic(args.seed).normal((args.batch, 3, s, s))
    c0, c1 = lazy_pair(cfg, args.batch, args.frac_bits, args.trunc_mode, args.seed + 1)
    result, server_t = engine.run_local_session(
        qm,
        c0,
        c1,
        images,
        args.trunc_mode,
        digest,
        RandomSource.deterministic(args.seed + 2),
        args.inject_rtt_ms,
    )
    oracle_ring = forward_plain_fixed(qm, images)
    oracle = ring.decode_fixed(oracle_ring)
    checks = []
    if args.trunc_mode == "exact":
        checks.append(("bitwise match", result.ring_logits == oracle_ring))
    else:
        diff = float(np.max(np.abs(result.logits - oracle)))
        agree = float(np.mean(result.logits.argmax(1) == oracle.argmax(1)))
        checks.append((f"max_abs_diff {diff:.6g} <= 0.05", diff <= 0.05))
        checks.append((f"argmax_agreement {agree:.4f} == 1", agree == 1.0))
    checks.append(
        ("wire symmetry", result.transcript.bytes_sent == server_t.bytes_received
         and result.transcript.bytes_received == server_t.bytes_sent)
    )
    ok = all(passed for _, passed in checks)
    for desc, passed in checks:
        print(f"  {'ok' if passed else 'FAIL'}: {desc}")
    _print_transcript(result.transcript)
    print(
        f"selftest {'PASS' if ok else 'FAIL'}: {label} batch {args.batch} "
        f"{args.trunc_mode} mode, backend {BACKEND}"
    )
    return 0 if ok else 1


def cmd_bench_square(args) -> int:
    sizes = _parse_int_list(args.sizes)
    rows = bench.bench_square(sizes, args.frac_bits, args.repeats)
    print(f"{'elements':>10} {'seconds':>10} {'payload B/dir':>14} {'us/elem':>10} rounds")
    for r in rows:
        print(
            f"{r['elements']:>10} {r['seconds']:>10.6f} "
            f"{r['payload_bytes_per_direction']:>14} "
            f"{r['microseconds_per_element']:>10.3f} {r['rounds']:>6}"
        )
    return 0


def cmd_breakdown(args) -> int:
    label, qm, digest = _resolve_model(args, args.frac_bits)
    batches = _parse_int_list(args.batches)
    rows = bench.breakdown(
        qm, digest, label, batches, args.trunc_mode, args.seed, not args.no_check
    )
    header = (
        f"{'batch':>6} {'linear s':>10} {'nonlin s':>10} {'total s':>10} "
        f"{'sent B':>12} {'recv B':>12} {'rounds':>7} {'agree':>6}"
    )
    print(f"model {label}, mode {args.trunc_mode}, backend {BACKEND}")
    print(header)
    for r in rows:
        print(
            f"{r.batch:>6} {r.linear_seconds:>10.3f} {r.nonlinear_seconds:>10.3f} "
            f"{r.total_seconds:>10.3f} {r.payload_bytes_sent:>12} "
            f"{r.payload_bytes_received:>12} {r.rounds:>7} {r.argmax_agreement:>6.3f}"
        )
    if args.out:
        import csv

        with open(args.out, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0].as_dict()))
            writer.writeheader()
            for r in rows:
                writer.writerow(r.as_dict())
        print(f"wrote {args.out}")
    return 0


def cmd_bench_kernels(args) -> int:
    rows = bench.bench_kernels()
    for r in rows:
        parts = [f"{r['case']}:"]
        for key in ("compiled_seconds", "fallback_seconds"):
            if key in r:
                parts.append(f"{key.split('_')[0]} {r[key] * 1e3:.2f}ms")
        if "speedup" in r:
            parts.append(f"speedup {r['speedup']:.1f}x")
        print(" ".join(parts))
    return 0


def cmd_program(args) -> int:
    cfg = _resolve_config(args)
    program = build_program(cfg)
    print(f"config {cfg.astuple()}: {len(program.steps)} steps, "
          f"{len(program.square_counts)} square sites, "
          f"{len(program.trunc_counts)} truncation sites")
    if args.verbose:
        for step in program.steps:
            site = f" site={step.site}" if step.site is not None else ""
            print(f"  {step.name:<36} {step.op:<14} {step.bucket}{site}")
    return 0


# ---------------------------------------------------------------- parser


def _add_session_args(p, batch_default=1):
    p.add_argument("--frac-bits", type=int, default=16, help="fixed-point fraction bits")
    p.add_argument(
        "--trunc-mode", choices=TRUNC_MODES, default="local", help="truncation protocol"
    )
    p.add_argument("--batch", type=int, default=batch_default, help="images per session")
    p.add_argument("--seed", type=int, default=None, help="deterministic randomness seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xpi",
        description="two-party private inference for square-activation token mixers",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-model", help="generate calibrated random weights")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--config", metavar="I,P,D,M,DEPTH,CLASSES")
    p.add_argument("--seed", type=int, default=11)
    p.add_argument("--out", required=True, help="weights file to write")
    p.add_argument("--vectors", type=int, default=0, help="also write N reference vectors")
    p.add_argument("--vectors-out", help="vectors file to write")
    p.set_defaults(func=cmd_gen_model)

    p = sub.add_parser("dealer", help="deal per-party correlation files for one session")
    _add_model_source(p)
    _add_session_args(p)
    p.add_argument("--out", required=True, help="output prefix for .party{0,1}.xpc files")
    p.set_defaults(func=cmd_dealer)

    p = sub.add_parser("serve", help="run party 1 over TCP (one session)")
    _add_model_source(p)
    _add_session_args(p)
    p.add_argument("--corr", required=True, help="party 1 correlation file")
    p.add_argument("--addr", default="127.0.0.1:0", help="host:port to bind")
    p.add_argument("--timeout", type=float, default=60.0, help="accept timeout seconds")
    p.add_argument("--inject-rtt-ms", type=float, default=0.0)
    p.add_argument("--transcript", help="write transcript JSON here")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("infer", help="run party 0 over TCP and reveal logits")
    _add_model_source(p)
    _add_session_args(p)
    p.add_argument("--corr", required=True, help="party 0 correlation file")
    p.add_argument("--addr", required=True, help="host:port of the server")
    p.add_argument("--timeout", type=float, default=10.0, help="connect timeout seconds")
    p.add_argument("--inject-rtt-ms", type=float, default=0.0)
    p.add_argument("--input", help="vectors file with input images")
    p.add_argument("--random", type=int, help="use COUNT seeded random images instead")
    p.add_argument("--out", help="write logits CSV here")
    p.add_argument("--transcript", help="write transcript JSON here")
    p.add_argument("--check", action="store_true", help="compare against the file's logits")
    p.add_argument("--tol-abs", type=float, help="fail if max abs diff exceeds this")
    p.add_argument("--tol-argmax", type=float, help="fail if argmax agreement is below this")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("plain", help="plaintext reference forward pass")
    p.add_argument("--weights", required=True)
    p.add_argument("--repr", choices=("float", "fixed"), default="float")
    p.add_argument("--frac-bits", type=int, default=16)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--input", help="vectors file with input images")
    p.add_argument("--random", type=int, help="use COUNT seeded random images instead")
    p.add_argument("--out", help="write logits CSV here")
    p.add_argument("--check", action="store_true", help="compare against the file's logits")
    p.add_argument("--tol-abs", type=float)
    p.add_argument("--tol-argmax", type=float)
    p.set_defaults(func=cmd_plain)

    p = sub.add_parser("selftest", help="full in-process session against the plaintext oracle")
    _add_model_source(p)
    _add_session_args(p, batch_default=2)
    p.add_argument("--inject-rtt-ms", type=float, default=0.0)
    p.set_defaults(func=cmd_selftest)
    p.set_defaults(seed=0)

    p = sub.add_parser("bench-square", help="online square protocol microbenchmark")
    p.add_argument("--sizes", default="1,64,4096,262144")
    p.add_argument("--frac-bits", type=int, default=16)
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_bench_square)

    p = sub.add_parser("breakdown", help="latency and communication per batch size")
    _add_model_source(p)
    p.add_argument("--frac-bits", type=int, default=16)
    p.add_argument("--trunc-mode", choices=TRUNC_MODES, default="local")
    p.add_argument("--batches", default="1,32,512")
    p.add_argument("--seed", type=int, default=3)
    p.add_argument("--no-check", action="store_true", help="skip the plaintext oracle")
    p.add_argument("--out", help="write rows as CSV here")
    p.set_defaults(func=cmd_breakdown)

    p = sub.add_parser("bench-kernels", help="compare compiled and fallback kernels")
    p.set_defaults(func=cmd_bench_kernels)

    p = sub.add_parser("program", help="show the step program for a configuration")
    _add_model_source(p)
    p.add_argument("--verbose", action="store_true", help="list every step")
    p.set_defaults(func=cmd_program)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging()
    try:
        return args.func(args) or 0
    except XpiError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename or exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
