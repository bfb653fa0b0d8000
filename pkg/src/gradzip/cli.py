"""Command-line front end: compress, decompress, simulate, synth, inspect, bench.

Payload stream files written by ``compress`` start with a small header
(magic ``GZPS``, version, training mode, layer table, round count) followed
by one framed payload per round. The header carries the layer table so that
``decompress`` and ``inspect`` are self contained; the per-round frames are
exactly what a federated client would put on the wire.

Exit codes: 0 success, 1 usage error, 2 malformed file or frame,
3 integrity, data, or protocol violation. All output files are written
atomically (temp file plus rename). Every command except ``bench`` is
deterministic: identical invocations produce byte-identical artifacts.
"""

import argparse
import csv
import io
import os
import struct
import sys
import tempfile
import time

import numpy as np

from .codec import (
    BACKEND_DEFAULT,
    BACKEND_STORE,
    MODE_ABSOLUTE,
    MODE_RELATIVE,
    ErrorBoundConfig,
    entropy_decode,
    entropy_encode,
)
from .errors import (
    DataError,
    FormatError,
    GradzipError,
    IntegrityError,
    ProtocolError,
    UsageError,
)
from .flsim import (
    ClientRoundStats,
    RoundReport,
    SimConfig,
    break_even_bandwidth,
    layer_stats,
    reports_to_csv,
    run_simulation,
)
from .pipeline import (
    DEFAULT_LOSSY_THRESHOLD,
    TAG_LOSSY,
    PipelineParams,
    SyncState,
    compress_round,
    decompress_round,
    describe_blob,
    frame_payload,
    iter_payloads,
    spec_digest,
)
from .predictor import VARIANT_FLIP, VARIANT_KERNEL, PredictParams
from .trace import (
    MODE_FULL_BATCH,
    MODE_MINI_BATCH,
    ByteReader,
    GradientTrace,
    LayerSpec,
    SynthConfig,
    decode_layer_table,
    encode_layer_table,
    load_trace,
    save_trace,
    synth_trace,
)

STREAM_MAGIC = b"GZPS"
STREAM_VERSION = 1

_MODE_BYTE = {MODE_MINI_BATCH: 0, MODE_FULL_BATCH: 1}
_BYTE_MODE = {code: mode for mode, code in _MODE_BYTE.items()}


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad flags; 2 is reserved for format
    errors here, so flag problems are rethrown as usage errors instead."""

    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# small helpers

def _honor_umask(path: str) -> None:
    # mkstemp files come out 0600; give them the mode a plain open() would.
    umask = os.umask(0)
    os.umask(umask)
    os.chmod(path, 0o666 & ~umask)


def _atomic_write_bytes(path, data: bytes) -> None:
    target = os.fspath(path)
    directory = os.path.dirname(target) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".gradzip-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        _honor_umask(tmp)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_save_trace(trace: GradientTrace, path) -> None:
    target = os.fspath(path)
    directory = os.path.dirname(target) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".gradzip-")
    os.close(fd)
    try:
        save_trace(trace, tmp)
        _honor_umask(tmp)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit_text(text: str, path) -> None:
    """Write an artifact to a file, or to stdout when no path was given."""
    if path:
        _atomic_write_bytes(path, text.encode("utf-8"))
    else:
        sys.stdout.write(text)


def _read_file(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _parse_layers(text: str) -> list[LayerSpec]:
    """Turn "conv1:32x16x3x3,fc:256x128" into layer specs."""
    specs = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        name, _, dims = part.partition(":")
        if not dims:
            raise UsageError(f"layer {part!r} must look like name:DIMxDIMx...")
        try:
            shape = tuple(int(d) for d in dims.split("x"))
        except ValueError:
            raise UsageError(f"layer {part!r} has a non-integer dimension") from None
        specs.append(LayerSpec(name.strip(), shape))
    if not specs:
        raise UsageError("no layers given")
    return specs


def _parse_bandwidths(text: str) -> tuple[float, ...]:
    """Comma-separated Mbit/s values, returned in bits per second."""
    try:
        values = tuple(float(v) * 1e6 for v in text.split(",") if v.strip())
    except ValueError:
        raise UsageError(f"bad bandwidth list {text!r}") from None
    if not values:
        raise UsageError("bandwidth list is empty")
    return values


def _params_from_args(args, trace_mode: str) -> PipelineParams:
    bound = ErrorBoundConfig(
        MODE_ABSOLUTE if args.eb_mode == "abs" else MODE_RELATIVE, args.eb
    )
    if args.prediction == "on":
        predict = PredictParams(
            beta=args.beta,
            tau=args.tau,
            full_batch=args.full_batch or trace_mode == MODE_FULL_BATCH,
        )
    else:
        # Predictor tuning flags are never consulted with prediction off, so
        # they are accepted unchecked (e.g. --tau 1.01 as a "never" marker).
        predict = PredictParams()
    return PipelineParams(
        predict=predict,
        bound=bound,
        lossy_threshold=args.t_lossy,
        backend=args.backend,
        prediction_enabled=args.prediction == "on",
    )


def _stream_header(mode: str, layers, nrounds: int) -> bytes:
    head = bytearray(STREAM_MAGIC)
    head += struct.pack("<HBI", STREAM_VERSION, _MODE_BYTE[mode], len(layers))
    head += encode_layer_table(list(layers))
    head += struct.pack("<I", nrounds)
    return bytes(head)


def _read_stream_header(reader: ByteReader):
    if reader.take(4) != STREAM_MAGIC:
        raise FormatError("not a gradzip payload stream (bad magic)")
    version, mode_byte, nlayers = reader.unpack("<HBI")
    if version != STREAM_VERSION:
        raise FormatError(f"unsupported stream version {version}")
    if mode_byte not in _BYTE_MODE:
        raise FormatError(f"unknown training mode byte {mode_byte}")
    if nlayers == 0:
        raise FormatError("stream declares zero layers")
    layers = decode_layer_table(reader, nlayers)
    (nrounds,) = reader.unpack("<I")
    if nrounds == 0:
        raise FormatError("stream declares zero rounds")
    return _BYTE_MODE[mode_byte], layers, nrounds


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    cfg = SynthConfig(
        seed=args.seed,
        layers=tuple(_parse_layers(args.layers)),
        rounds=args.rounds,
        magnitude_decay=args.decay,
        noise_level=args.noise,
        target_sign_consistency=args.consistency,
        oscillation_period=args.oscillation,
        mode=MODE_FULL_BATCH if args.full_batch else MODE_MINI_BATCH,
    )
    trace = synth_trace(cfg)
    _atomic_save_trace(trace, args.output)
    print(
        f"wrote {trace.num_rounds}-round trace, {trace.total_bytes()} gradient bytes",
        file=sys.stderr,
    )
    return 0


def cmd_compress(args) -> int:
    trace = load_trace(args.input)
    params = _params_from_args(args, trace.mode)
    client = SyncState.initial(trace.layers)
    server = SyncState.initial(trace.layers)
    out = bytearray(_stream_header(trace.mode, trace.layers, trace.num_rounds))
    reports = []
    for tensors in trace.rounds:
        payload, client = compress_round(tensors, client, params)
        wire = frame_payload(payload)
        recons, server = decompress_round(payload, server, params)
        if client.to_bytes() != server.to_bytes():
            raise ProtocolError(
                f"client/server state mismatch after round {payload.round}"
            )
        stats = []
        for spec, g, recon, blob in zip(trace.layers, tensors, recons, payload.blobs):
            ls = layer_stats(g, recon, describe_blob(blob, spec))
            if ls.lossy and ls.max_err > ls.delta:
                raise IntegrityError(
                    f"error bound violated in round {payload.round}, "
                    f"layer {spec.name!r}: {ls.max_err} > {ls.delta}"
                )
            stats.append(ls)
        s = sum(x.s_bytes for x in stats)
        row = ClientRoundStats(
            client=0,
            s_bytes=s,
            sprime_bytes=len(wire),
            cr=s / len(wire),
            max_err=max(x.max_err for x in stats),
            bitmap_bytes=sum(x.bitmap_bytes for x in stats),
            t_comp_s=0.0,
            t_decomp_s=0.0,
            layers=stats,
        )
        reports.append(RoundReport(payload.round, [row], row.cr, []))
        out += wire
    _atomic_write_bytes(args.output, bytes(out))
    buf = io.StringIO()
    reports_to_csv(reports, buf)
    _atomic_write_bytes(
        args.csv or os.fspath(args.output) + ".csv", buf.getvalue().encode()
    )
    s_total = sum(r.clients[0].s_bytes for r in reports)
    sp_total = sum(r.clients[0].sprime_bytes for r in reports)
    print(
        f"compressed {trace.num_rounds} rounds: {s_total} -> {sp_total} bytes "
        f"(ratio {s_total / sp_total:.3f})",
        file=sys.stderr,
    )
    return 0


def cmd_decompress(args) -> int:
    data = _read_file(args.input)
    reader = ByteReader(data)
    mode, layers, nrounds = _read_stream_header(reader)
    payloads = list(iter_payloads(data[reader.pos:]))
    if len(payloads) != nrounds:
        raise IntegrityError(
            f"stream declares {nrounds} rounds but contains {len(payloads)}"
        )
    params = PipelineParams(
        predict=PredictParams(beta=args.beta),
        bound=ErrorBoundConfig(MODE_ABSOLUTE, 1.0),  # unused on the decode path
    )
    server = SyncState.initial(layers)
    rounds = []
    bounds_per_round = []
    for payload in payloads:
        recons, server = decompress_round(payload, server, params)
        rounds.append(recons)
        if args.reference:
            per_layer = []
            for spec, blob in zip(layers, payload.blobs):
                info = describe_blob(blob, spec)
                per_layer.append(info.delta if info.tag == TAG_LOSSY else None)
            bounds_per_round.append(per_layer)
    _atomic_save_trace(GradientTrace(layers, rounds, mode), args.output)
    if args.reference:
        ref = load_trace(args.reference)
        if ref.layers != layers:
            raise UsageError("reference trace has a different layer table")
        if ref.num_rounds != len(rounds):
            raise UsageError(
                f"reference has {ref.num_rounds} rounds, stream has {len(rounds)}"
            )
        worst = 0.0
        worst_frac = 0.0
        for t, (recs, deltas) in enumerate(zip(rounds, bounds_per_round)):
            for spec, rec, orig, delta in zip(layers, recs, ref.rounds[t], deltas):
                err = float(
                    np.max(np.abs(rec.values.astype(np.float64)
                                  - orig.values.astype(np.float64)))
                )
                if delta is None:
                    if err != 0.0:
                        raise IntegrityError(
                            f"round {t + 1}, layer {spec.name!r}: lossless layer "
                            f"differs from reference"
                        )
                elif err > delta:
                    raise IntegrityError(
                        f"round {t + 1}, layer {spec.name!r}: error bound "
                        f"violated, {err} > {delta}"
                    )
                else:
                    worst = max(worst, err)
                    worst_frac = max(worst_frac, err / delta)
        print(
            f"bound OK: {len(rounds)} rounds verified, worst error {worst:.6g} "
            f"({100.0 * worst_frac:.1f}% of its bound)"
        )
    else:
        print(f"wrote {len(rounds)} reconstructed rounds", file=sys.stderr)
    return 0


def cmd_simulate(args) -> int:
    traces = tuple(load_trace(p) for p in args.traces)
    if len({t.mode for t in traces}) > 1:
        raise UsageError("client traces disagree on training mode")
    params = _params_from_args(args, traces[0].mode)
    fixed = None if args.measured else (args.t_comp, args.t_decomp)
    cfg = SimConfig(
        traces=traces,
        params=params,
        bandwidths_bps=_parse_bandwidths(args.bandwidths),
        rounds=args.rounds,
        fixed_times=fixed,
    )
    reports = run_simulation(cfg)
    buf = io.StringIO()
    reports_to_csv(reports, buf)
    writer = csv.writer(buf, lineterminator="\n")
    for rep in reports:
        # Mark the break-even bandwidth (in the bandwidth_bps column) for any
        # round where the codec time is nonzero and compression actually won.
        mean_s = float(np.mean([c.s_bytes for c in rep.clients]))
        mean_sp = float(np.mean([c.sprime_bytes for c in rep.clients]))
        codec_s = float(np.mean([c.t_comp_s + c.t_decomp_s for c in rep.clients]))
        cr = mean_s / mean_sp
        if codec_s > 0.0 and cr > 1.0:
            bstar = break_even_bandwidth(mean_s, cr, codec_s)
            writer.writerow([
                rep.round, "all", "break_even", "", "", f"{cr:.6g}", "", "",
                "", "", "", f"{bstar:.6g}", "", "", "",
            ])
    _emit_text(buf.getvalue(), args.csv)
    return 0


def _bitmap_bits(info) -> int:
    """Bits on the wire for the sign side channel, headers included."""
    if info.bitmap_variant == VARIANT_KERNEL:
        return 40 + info.kernel_count + info.predicted_kernels
    if info.bitmap_variant == VARIANT_FLIP:
        return 16
    return 8


def cmd_inspect(args) -> int:
    data = _read_file(args.input)
    reader = ByteReader(data)
    mode, layers, nrounds = _read_stream_header(reader)
    digest = spec_digest(layers)
    lines = [f"stream: {len(layers)} layers, mode {mode}, {nrounds} rounds"]
    for spec in layers:
        shape = "x".join(str(d) for d in spec.shape)
        lines.append(f"layer {spec.name} kind {spec.kind} shape {shape}")
    total_wire = 0
    count = 0
    for payload in iter_payloads(data[reader.pos:]):
        if payload.spec_digest != digest:
            raise IntegrityError(
                f"payload for round {payload.round} does not match the stream's "
                f"layer table"
            )
        if len(payload.blobs) != len(layers):
            raise IntegrityError(
                f"payload for round {payload.round} has {len(payload.blobs)} "
                f"blobs for {len(layers)} layers"
            )
        count += 1
        framed = len(frame_payload(payload))
        total_wire += framed
        lines.append(
            f"payload client {payload.client_id} round {payload.round} "
            f"bytes {framed}"
        )
        for spec, blob in zip(layers, payload.blobs):
            info = describe_blob(blob, spec)
            if info.tag != TAG_LOSSY:
                lines.append(
                    f"  {spec.name}: tag lossless_only wire {info.wire_bytes} "
                    f"inner {info.inner_bytes}"
                )
                continue
            lines.append(
                f"  {spec.name}: tag lossy wire {info.wire_bytes} "
                f"inner {info.inner_bytes} delta {info.delta:.9g} "
                f"mu {info.mu:.9g} sigma {info.sigma:.9g} "
                f"bitmap {info.bitmap_variant} bitmap_bits {_bitmap_bits(info)} "
                f"kernels {info.kernel_count} predicted {info.predicted_kernels} "
                f"huffman_bits {info.huffman_bits} literals {info.literal_count}"
            )
    if count != nrounds:
        raise IntegrityError(f"stream declares {nrounds} rounds, found {count}")
    original = 4 * sum(s.numel for s in layers) * count
    lines.append(
        f"total wire {total_wire} bytes, original {original} bytes, "
        f"ratio {original / total_wire:.4f}"
    )
    sys.stdout.write("\n".join(lines) + "\n")
    return 0


def cmd_bench(args) -> int:
    rng = np.random.default_rng(args.seed)
    rows = [("op", "items", "bytes", "seconds", "rate", "unit")]

    # Entropy stage alone, on two-sided geometric bins (the shape quantized
    # residuals take in practice).
    n = args.symbols
    magnitudes = rng.geometric(0.3, size=n) - 1
    bins = (magnitudes * rng.choice((-1, 1), size=n)).astype(np.int32)
    t0 = time.perf_counter()
    block = entropy_encode(bins)
    t1 = time.perf_counter()
    decoded = entropy_decode(block)
    t2 = time.perf_counter()
    if not np.array_equal(decoded, bins):
        raise IntegrityError("entropy stage roundtrip mismatch during bench")
    rows.append((
        "huffman_encode", n, len(block.stream),
        f"{t1 - t0:.6f}", f"{n / (t1 - t0) / 1e6:.3f}", "Msym/s",
    ))
    rows.append((
        "huffman_decode", n, len(block.stream),
        f"{t2 - t1:.6f}", f"{n / (t2 - t1) / 1e6:.3f}", "Msym/s",
    ))

    # Whole pipeline on a synthetic trace, after one untimed warm-up round.
    trace = synth_trace(SynthConfig(
        seed=args.seed, layers=tuple(_parse_layers(args.layers)),
        rounds=args.rounds,
    ))
    params = _params_from_args(args, trace.mode)
    warm_c = SyncState.initial(trace.layers)
    warm_s = SyncState.initial(trace.layers)
    payload, _ = compress_round(trace.rounds[0], warm_c, params)
    decompress_round(payload, warm_s, params)

    client = SyncState.initial(trace.layers)
    server = SyncState.initial(trace.layers)
    payloads = []
    t0 = time.perf_counter()
    for tensors in trace.rounds:
        payload, client = compress_round(tensors, client, params)
        payloads.append(payload)
    t1 = time.perf_counter()
    for payload in payloads:
        _, server = decompress_round(payload, server, params)
    t2 = time.perf_counter()
    raw = trace.total_bytes()
    rows.append((
        "pipeline_compress", trace.num_rounds, raw,
        f"{t1 - t0:.6f}", f"{8.0 * raw / (t1 - t0) / 1e6:.1f}", "Mbit/s",
    ))
    rows.append((
        "pipeline_decompress", trace.num_rounds, raw,
        f"{t2 - t1:.6f}", f"{8.0 * raw / (t2 - t1) / 1e6:.1f}", "Mbit/s",
    ))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in rows:
        writer.writerow(row)
    _emit_text(buf.getvalue(), args.csv)
    return 0


# ---------------------------------------------------------------------------
# argument wiring

def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--eb-mode", choices=("abs", "rel"), default="rel",
                   help="error bound kind: absolute delta or range-relative "
                        "epsilon (default rel)")
    p.add_argument("--eb", type=float, default=1e-2, metavar="REAL",
                   help="error bound value (default 1e-2)")
    p.add_argument("--beta", type=float, default=0.5, metavar="REAL",
                   help="magnitude predictor blending weight in (0,1]")
    p.add_argument("--tau", type=float, default=0.5, metavar="REAL",
                   help="kernel sign-consistency threshold in [0,1]; ignored "
                        "when --prediction off")
    p.add_argument("--full-batch", action="store_true",
                   help="force full-batch sign prediction (default: follow "
                        "the trace's recorded mode)")
    p.add_argument("--t-lossy", type=int, default=DEFAULT_LOSSY_THRESHOLD,
                   metavar="N",
                   help="layers with at most N elements bypass the lossy path "
                        f"(default {DEFAULT_LOSSY_THRESHOLD})")
    p.add_argument("--backend", choices=(BACKEND_DEFAULT, BACKEND_STORE),
                   default=BACKEND_DEFAULT,
                   help="lossless byte backend for the final stage")
    p.add_argument("--prediction", choices=("on", "off"), default="on",
                   help="gradient prediction stage (default on)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="gradzip",
        description="Error-bounded lossy compression for federated gradient "
                    "updates.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", help="generate a synthetic gradient trace")
    p.add_argument("output", help="trace file to write")
    p.add_argument("--layers", required=True, metavar="SPEC",
                   help='layer list like "conv1:32x16x3x3,fc:256x128"')
    p.add_argument("--rounds", type=int, default=10, metavar="N")
    p.add_argument("--seed", type=int, default=0, metavar="U64")
    p.add_argument("--decay", type=float, default=0.99, metavar="REAL",
                   help="per-round magnitude decay in (0,1] (default 0.99)")
    p.add_argument("--noise", type=float, default=0.3, metavar="REAL",
                   help="relative magnitude noise (default 0.3)")
    p.add_argument("--consistency", type=float, default=0.8, metavar="REAL",
                   help="target kernel sign consistency in [0,1] (default 0.8)")
    p.add_argument("--oscillation", type=int, default=1, metavar="N",
                   help="full-batch sign flip period in rounds (default 1)")
    p.add_argument("--full-batch", action="store_true",
                   help="generate a full-batch trace")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("compress",
                       help="compress a trace into a payload stream")
    p.add_argument("input", help="trace file")
    p.add_argument("output", help="payload stream to write")
    _add_pipeline_flags(p)
    p.add_argument("--csv", default=None, metavar="PATH",
                   help="summary CSV path (default: <output>.csv)")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress",
                       help="reconstruct a trace from a payload stream")
    p.add_argument("input", help="payload stream file")
    p.add_argument("output", help="reconstructed trace to write")
    p.add_argument("--beta", type=float, default=0.5, metavar="REAL",
                   help="magnitude predictor weight; must match compression")
    p.add_argument("--reference", default=None, metavar="TRACE",
                   help="original trace; verify every error bound against it")
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("simulate",
                       help="run a multi-client round simulation, emit CSV")
    p.add_argument("traces", nargs="+", metavar="TRACE",
                   help="one trace file per client")
    _add_pipeline_flags(p)
    p.add_argument("--bandwidths", default="1,10,100,1000", metavar="LIST",
                   help="comma-separated Mbit/s values (default 1,10,100,1000)")
    p.add_argument("--rounds", type=int, default=None, metavar="N",
                   help="cap on simulated rounds")
    p.add_argument("--measured", action="store_true",
                   help="time the codec for real instead of using fixed "
                        "values (output is then not byte-deterministic)")
    p.add_argument("--t-comp", type=float, default=0.0, metavar="SEC",
                   help="fixed per-round compression time (default 0)")
    p.add_argument("--t-decomp", type=float, default=0.0, metavar="SEC",
                   help="fixed per-round decompression time (default 0)")
    p.add_argument("--csv", default=None, metavar="PATH",
                   help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("inspect", help="dump payload stream framing")
    p.add_argument("input", help="payload stream file")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("bench",
                       help="measure codec throughput (not deterministic)")
    p.add_argument("--symbols", type=int, default=2_000_000, metavar="N",
                   help="entropy stage symbol count (default 2e6)")
    p.add_argument("--layers", default="conv1:128x64x3x3,conv2:64x64x3x3",
                   metavar="SPEC", help="synthetic model for the pipeline leg")
    p.add_argument("--rounds", type=int, default=4, metavar="N")
    p.add_argument("--seed", type=int, default=0, metavar="U64")
    _add_pipeline_flags(p)
    p.add_argument("--csv", default=None, metavar="PATH",
                   help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"gradzip: usage error: {exc}", file=sys.stderr)
        return 1
    except FormatError as exc:
        print(f"gradzip: format error: {exc}", file=sys.stderr)
        return 2
    except (IntegrityError, DataError, ProtocolError) as exc:
        print(f"gradzip: {exc}", file=sys.stderr)
        return 3
    except GradzipError as exc:  # future subclasses default to payload errors
        print(f"gradzip: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"gradzip: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
