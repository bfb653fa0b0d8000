"""Round-level compression pipeline and client/server synchronization.

One round runs per layer: small layers are stored losslessly; large layers go
through magnitude prediction, sign prediction, residual quantization, entropy
coding, and the lossless backend. The client keeps the reconstruction the
server will compute and feeds the predictors from it, so both sides evolve
bitwise-identical state using only the framed payload as a channel.

Literal convention: inside this pipeline a quantized-stream literal stores the
layer's ORIGINAL float32 value (not the residual). Any element whose float32
reconstruction would land outside the error bound is demoted to a literal, so
reconstruction error for such elements is exactly zero and the bound holds
unconditionally.

Wire formats (little-endian):

    layer blob (before the lossless backend wrap):
        tag u8: 0 = lossless_only, 1 = lossy
        lossless_only: raw float32 values
        lossy: flags u8 (bit 0 = prediction used), mu f32, sigma f32,
               delta f64, sign bitmap, Huffman block, literal section

    payload frame:
        magic "GEBC", version u16, client u32, round u32,
        layer-table digest 8 bytes, layer count u32,
        then per layer: blob length u32 + wrapped blob
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from hashlib import blake2b

import numpy as np

from .codec import (
    BACKEND_DEFAULT,
    BACKEND_STORE,
    DEFAULT_BIN_CAP,
    ErrorBoundConfig,
    QuantizedStream,
    decode_block,
    decode_stream,
    encode_stream,
    lossless_compress,
    lossless_decompress,
    resolve_bound,
)
from .errors import FormatError, IntegrityError, ProtocolError, UsageError
from .predictor import (
    VARIANT_NONE,
    MagPredictorState,
    PredictParams,
    SignBitmap,
    SignTensor,
    decode_bitmap,
    encode_bitmap,
    predict_magnitude,
    predict_signs,
    reconstruct_signs,
)
from .trace import ByteReader, GradientTensor, LayerSpec, abs_stats, encode_layer_table

PAYLOAD_MAGIC = b"GEBC"
PAYLOAD_VERSION = 1
DEFAULT_LOSSY_THRESHOLD = 1024

TAG_LOSSLESS = 0
TAG_LOSSY = 1
_FLAG_PREDICTION = 0x01


@dataclass(frozen=True)
class PipelineParams:
    predict: PredictParams
    bound: ErrorBoundConfig
    lossy_threshold: int = DEFAULT_LOSSY_THRESHOLD
    backend: str = BACKEND_DEFAULT
    prediction_enabled: bool = True

    def __post_init__(self):
        if self.lossy_threshold < 0:
            raise UsageError("lossy_threshold must be >= 0")
        if self.backend not in (BACKEND_DEFAULT, BACKEND_STORE):
            raise UsageError(f"unknown backend {self.backend!r}")


def spec_digest(layers: list[LayerSpec]) -> bytes:
    """8-byte digest of the layer table; payloads carry it to fail fast on desync."""
    return blake2b(encode_layer_table(layers), digest_size=8).digest()


@dataclass
class SyncState:
    """Predictor history shared (in structure) by client and server.

    Holds, per layer, the magnitude-predictor memory and the previous round's
    reconstructed gradient. The previous sign tensor is derived from the
    reconstruction on demand, never stored. After processing round t on both
    sides the two states must serialize to identical bytes.
    """

    layers: list[LayerSpec]
    mag: list[MagPredictorState]
    prev_recon: list[np.ndarray]
    round: int = 0

    @classmethod
    def initial(cls, layers: list[LayerSpec]) -> "SyncState":
        return cls(
            layers=list(layers),
            mag=[MagPredictorState.fresh(spec.numel) for spec in layers],
            prev_recon=[np.zeros(spec.numel, dtype=np.float32) for spec in layers],
            round=0,
        )

    def to_bytes(self) -> bytes:
        out = bytearray(struct.pack("<I", self.round))
        for mag, recon in zip(self.mag, self.prev_recon):
            out += mag.to_bytes()
            out += recon.astype("<f4", copy=False).tobytes()
        return bytes(out)


@dataclass
class CompressedPayload:
    client_id: int
    round: int
    spec_digest: bytes
    blobs: list[bytes]
    version: int = PAYLOAD_VERSION


def _prev_sign(recon: np.ndarray) -> SignTensor:
    return SignTensor(np.sign(recon).astype(np.int8))


def _quantize_verified(
    original: np.ndarray, ghat: np.ndarray, delta: float
) -> tuple[QuantizedStream, np.ndarray]:
    """Quantize original - ghat, demoting bound violators to exact literals.

    Returns the stream and the float32 reconstruction the server will compute.
    The check runs against that exact float32 value, so float32 rounding can
    never push an element past the bound: offenders carry their original value.
    """
    g64 = original.astype(np.float64)
    width = 2.0 * delta
    binsf = np.rint((g64 - ghat) / width)
    ok = np.isfinite(binsf) & (np.abs(binsf) <= DEFAULT_BIN_CAP)
    binsf = np.where(ok, binsf, 0.0)
    recon64 = ghat + binsf * width
    recon32 = recon64.astype(np.float32)
    ok &= np.isfinite(recon32)
    ok &= np.abs(recon64 - g64) <= delta
    ok &= np.abs(recon32.astype(np.float64) - g64) <= delta
    mask = ~ok
    bins = np.where(ok, binsf, 0.0).astype(np.int32)
    literals = original[mask]
    recon32[mask] = literals
    stream = QuantizedStream(bins, mask, literals, bin_cap=DEFAULT_BIN_CAP)
    return stream, recon32


def _reconstruct(
    stream: QuantizedStream, ghat: np.ndarray, delta: float
) -> np.ndarray:
    """Server-side mirror of _quantize_verified's reconstruction arithmetic."""
    recon64 = ghat + stream.bins.astype(np.float64) * (2.0 * delta)
    recon32 = recon64.astype(np.float32)
    recon32[stream.literal_mask] = stream.literals
    return recon32


def _predict(
    spec: LayerSpec,
    g_curr: GradientTensor | None,
    bitmap_in: SignBitmap | None,
    mu32: np.float32,
    sigma32: np.float32,
    mag_state: MagPredictorState,
    prev_recon: np.ndarray,
    first_round: bool,
    params: PredictParams,
) -> tuple[np.ndarray, SignBitmap, MagPredictorState]:
    """Shared prediction step. The client passes g_curr and derives the
    bitmap; the server passes the received bitmap instead. Both produce the
    same ghat and updated magnitude state."""
    prev_abs = np.abs(prev_recon).astype(np.float64)
    pred_abs, new_mag = predict_magnitude(
        prev_abs, float(mu32), float(sigma32), mag_state, params
    )
    if first_round:
        signs = SignTensor.zeros(spec.numel)
        bitmap = SignBitmap()
    elif g_curr is not None:
        signs, bitmap = predict_signs(
            g_curr, _prev_sign(prev_recon), GradientTensor(spec, prev_recon), params
        )
    else:
        signs = reconstruct_signs(bitmap_in, _prev_sign(prev_recon), spec)
        bitmap = bitmap_in
    ghat = signs.values.astype(np.float64) * pred_abs
    return ghat, bitmap, new_mag


def compress_round(
    tensors: list[GradientTensor],
    state: SyncState,
    params: PipelineParams,
    client_id: int = 0,
) -> tuple[CompressedPayload, SyncState]:
    """Compress one round of gradients; returns the payload and advanced state."""
    if len(tensors) != len(state.layers):
        raise UsageError(f"{len(tensors)} tensors for {len(state.layers)} layers")
    round_idx = state.round + 1
    blobs = []
    new_mag = []
    new_recon = []
    for i, (spec, g) in enumerate(zip(state.layers, tensors)):
        if g.spec != spec:
            raise UsageError(f"layer {i} spec mismatch: {g.spec.name!r} vs {spec.name!r}")
        if spec.numel <= params.lossy_threshold:
            inner = struct.pack("<B", TAG_LOSSLESS) + g.values.astype("<f4", copy=False).tobytes()
            new_mag.append(state.mag[i])
            new_recon.append(g.values.copy())
        else:
            mu, sigma = abs_stats(g)
            mu32, sigma32 = np.float32(mu), np.float32(sigma)
            if params.prediction_enabled:
                ghat, bitmap, mag_after = _predict(
                    spec, g, None, mu32, sigma32, state.mag[i],
                    state.prev_recon[i], round_idx == 1, params.predict,
                )
                flags = _FLAG_PREDICTION
            else:
                ghat = np.zeros(spec.numel, dtype=np.float64)
                bitmap = SignBitmap()
                mag_after = state.mag[i]
                flags = 0
            delta = resolve_bound(params.bound, g)
            stream, recon32 = _quantize_verified(g.values, ghat, delta)
            inner = struct.pack("<BBffd", TAG_LOSSY, flags, mu32, sigma32, delta)
            inner += encode_bitmap(bitmap)
            inner += encode_stream(stream)
            new_mag.append(mag_after)
            new_recon.append(recon32)
        blobs.append(lossless_compress(inner, params.backend))
    payload = CompressedPayload(
        client_id=client_id,
        round=round_idx,
        spec_digest=spec_digest(state.layers),
        blobs=blobs,
    )
    next_state = SyncState(state.layers, new_mag, new_recon, round_idx)
    return payload, next_state


def decompress_round(
    payload: CompressedPayload, state: SyncState, params: PipelineParams
) -> tuple[list[GradientTensor], SyncState]:
    """Decode one payload; returns reconstructions and advanced state."""
    if payload.version != PAYLOAD_VERSION:
        raise FormatError(f"unsupported payload version {payload.version}")
    if payload.spec_digest != spec_digest(state.layers):
        raise ProtocolError("payload layer table does not match server state")
    if payload.round != state.round + 1:
        raise ProtocolError(
            f"payload is round {payload.round}, server expects {state.round + 1}"
        )
    if len(payload.blobs) != len(state.layers):
        raise IntegrityError(
            f"payload has {len(payload.blobs)} blobs for {len(state.layers)} layers"
        )
    recons = []
    new_mag = []
    new_recon = []
    for i, (spec, blob) in enumerate(zip(state.layers, payload.blobs)):
        inner = lossless_decompress(blob)
        reader = ByteReader(inner, truncation_error=IntegrityError)
        (tag,) = reader.unpack("<B")
        if tag == TAG_LOSSLESS:
            raw = reader.take(4 * spec.numel)
            if reader.remaining:
                raise IntegrityError(f"layer {spec.name!r}: trailing bytes in blob")
            values = np.frombuffer(raw, dtype="<f4").astype(np.float32)
            recon32 = values
            new_mag.append(state.mag[i])
        elif tag == TAG_LOSSY:
            flags, mu32, sigma32, delta = reader.unpack("<Bffd")
            if flags & ~_FLAG_PREDICTION:
                raise FormatError(f"layer {spec.name!r}: unknown blob flags {flags:#x}")
            if not delta > 0.0:
                raise IntegrityError(f"layer {spec.name!r}: non-positive delta on wire")
            bitmap = decode_bitmap(reader)
            stream = decode_stream(reader, spec.numel)
            if reader.remaining:
                raise IntegrityError(f"layer {spec.name!r}: trailing bytes in blob")
            if flags & _FLAG_PREDICTION:
                ghat, _, mag_after = _predict(
                    spec, None, bitmap, np.float32(mu32), np.float32(sigma32),
                    state.mag[i], state.prev_recon[i], payload.round == 1,
                    params.predict,
                )
            else:
                if bitmap.variant != VARIANT_NONE:
                    raise IntegrityError(
                        f"layer {spec.name!r}: sign bitmap present without prediction"
                    )
                ghat = np.zeros(spec.numel, dtype=np.float64)
                mag_after = state.mag[i]
            recon32 = _reconstruct(stream, ghat, delta)
            new_mag.append(mag_after)
        else:
            raise FormatError(f"layer {spec.name!r}: unknown blob tag {tag}")
        new_recon.append(recon32)
        recons.append(GradientTensor(spec, recon32))
    next_state = SyncState(state.layers, new_mag, new_recon, payload.round)
    return recons, next_state


@dataclass
class BlobInfo:
    """Header-level description of one layer blob, without full decoding."""

    tag: int
    numel: int
    wire_bytes: int
    inner_bytes: int
    flags: int = 0
    mu: float = 0.0
    sigma: float = 0.0
    delta: float = 0.0
    bitmap_variant: str = VARIANT_NONE
    bitmap_bytes: int = 0
    kernel_count: int = 0
    predicted_kernels: int = 0
    huffman_bytes: int = 0
    huffman_bits: int = 0
    literal_count: int = 0


def describe_blob(blob: bytes, spec: LayerSpec) -> BlobInfo:
    """Parse a layer blob's framing and side channels; skips symbol decoding."""
    inner = lossless_decompress(blob)
    reader = ByteReader(inner, truncation_error=IntegrityError)
    (tag,) = reader.unpack("<B")
    if tag == TAG_LOSSLESS:
        if reader.remaining != 4 * spec.numel:
            raise IntegrityError(f"layer {spec.name!r}: lossless blob size mismatch")
        return BlobInfo(tag, spec.numel, len(blob), len(inner))
    if tag != TAG_LOSSY:
        raise FormatError(f"layer {spec.name!r}: unknown blob tag {tag}")
    flags, mu, sigma, delta = reader.unpack("<Bffd")
    bitmap_start = reader.pos
    bitmap = decode_bitmap(reader)
    bitmap_bytes = reader.pos - bitmap_start
    block_start = reader.pos
    block = decode_block(reader)
    huffman_bytes = reader.pos - block_start
    (lit_count,) = reader.unpack("<I")
    reader.take((spec.numel + 7) // 8)
    reader.take(4 * lit_count)
    if reader.remaining:
        raise IntegrityError(f"layer {spec.name!r}: trailing bytes in blob")
    return BlobInfo(
        tag=tag,
        numel=spec.numel,
        wire_bytes=len(blob),
        inner_bytes=len(inner),
        flags=flags,
        mu=float(mu),
        sigma=float(sigma),
        delta=float(delta),
        bitmap_variant=bitmap.variant,
        bitmap_bytes=bitmap_bytes,
        kernel_count=bitmap.kernel_count,
        predicted_kernels=bitmap.predicted_count,
        huffman_bytes=huffman_bytes,
        huffman_bits=block.bit_count,
        literal_count=lit_count,
    )


def frame_payload(payload: CompressedPayload) -> bytes:
    if len(payload.spec_digest) != 8:
        raise UsageError("spec digest must be 8 bytes")
    out = bytearray()
    out += PAYLOAD_MAGIC
    out += struct.pack("<HII", payload.version, payload.client_id, payload.round)
    out += payload.spec_digest
    out += struct.pack("<I", len(payload.blobs))
    for blob in payload.blobs:
        out += struct.pack("<I", len(blob))
        out += blob
    return bytes(out)


def parse_payload(data: bytes) -> CompressedPayload:
    payload, consumed = _parse_one(ByteReader(data))
    if consumed != len(data):
        raise FormatError("trailing bytes after payload frame")
    return payload


def _parse_one(reader: ByteReader) -> tuple[CompressedPayload, int]:
    start = reader.pos
    if reader.take(4) != PAYLOAD_MAGIC:
        raise FormatError("not a payload frame (bad magic)")
    version, client_id, round_idx = reader.unpack("<HII")
    if version != PAYLOAD_VERSION:
        raise FormatError(f"unsupported payload version {version}")
    digest = reader.take(8)
    (nlayers,) = reader.unpack("<I")
    if nlayers == 0:
        raise FormatError("payload declares zero layers")
    blobs = []
    for _ in range(nlayers):
        (blen,) = reader.unpack("<I")
        blobs.append(reader.take(blen))
    payload = CompressedPayload(client_id, round_idx, digest, blobs, version)
    return payload, reader.pos - start


def iter_payloads(data: bytes):
    """Yield consecutive payload frames from a concatenated stream."""
    reader = ByteReader(data)
    while reader.remaining:
        payload, _ = _parse_one(reader)
        yield payload
