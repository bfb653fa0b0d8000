"""Gradient traces: domain types, binary trace files, synthetic generation.

A trace is a sequence of training rounds, each holding one float32 gradient
tensor per layer. Traces are either recorded by an external exporter or
synthesized by :func:`synth_trace`, which reproduces the two regularities the
compressor exploits: slowly decaying, temporally persistent magnitudes, and
kernel-level dominant signs in 4-D convolution layers.

Trace file format (little-endian):

    magic   4 bytes  b"GTRC"
    version u16      currently 1
    mode    u8       0 = mini_batch, 1 = full_batch
    nlayers u32
    per layer:
        name_len u16, name UTF-8 bytes
        naxes    u8
        axes     u32 * naxes
    nrounds u32
    data: nrounds * nlayers arrays of raw little-endian float32 values
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, IntegrityError, UsageError

TRACE_MAGIC = b"GTRC"
TRACE_VERSION = 1

KIND_CONV4D = "conv4d"
KIND_OTHER = "other"

MODE_MINI_BATCH = "mini_batch"
MODE_FULL_BATCH = "full_batch"

_MODE_CODES = {MODE_MINI_BATCH: 0, MODE_FULL_BATCH: 1}
_MODE_NAMES = {v: k for k, v in _MODE_CODES.items()}

# Internal constants of the synthetic generator (see synth_trace).
_LEVEL_BLEND = 0.08
_LEVEL_SPREAD = 0.8


@dataclass(frozen=True)
class LayerSpec:
    """Shape and kind of one model layer.

    ``kind`` is ``"conv4d"`` exactly when the shape has 4 axes, interpreted as
    [out_channels, in_channels, kernel_h, kernel_w]; every other rank is
    ``"other"``. Passing ``kind=None`` derives it from the shape.
    """

    name: str
    shape: tuple[int, ...]
    kind: str = None  # type: ignore[assignment]

    def __post_init__(self):
        shape = tuple(int(d) for d in self.shape)
        object.__setattr__(self, "shape", shape)
        if not self.name:
            raise UsageError("layer name must be non-empty")
        if not 1 <= len(shape) <= 4:
            raise UsageError(f"layer {self.name!r}: shape must have 1-4 axes, got {len(shape)}")
        if any(d <= 0 for d in shape):
            raise UsageError(f"layer {self.name!r}: dimensions must be positive, got {shape}")
        derived = KIND_CONV4D if len(shape) == 4 else KIND_OTHER
        if self.kind is None:
            object.__setattr__(self, "kind", derived)
        elif self.kind != derived:
            raise UsageError(
                f"layer {self.name!r}: kind {self.kind!r} inconsistent with {len(shape)}-axis shape"
            )

    @property
    def numel(self) -> int:
        return int(math.prod(self.shape))

    @property
    def kernel_size(self) -> int:
        """Elements per convolution kernel (kernel_h * kernel_w)."""
        if self.kind != KIND_CONV4D:
            raise UsageError(f"layer {self.name!r} is not conv4d")
        return self.shape[2] * self.shape[3]

    @property
    def kernel_count(self) -> int:
        """Number of kernels (out_channels * in_channels)."""
        if self.kind != KIND_CONV4D:
            raise UsageError(f"layer {self.name!r} is not conv4d")
        return self.shape[0] * self.shape[1]


@dataclass
class GradientTensor:
    """One layer's gradient for one round, as a flat row-major float32 array."""

    spec: LayerSpec
    values: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float32).reshape(-1)
        if values.size != self.spec.numel:
            raise IntegrityError(
                f"layer {self.spec.name!r}: {values.size} values for shape {self.spec.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise DataError(f"layer {self.spec.name!r}: non-finite gradient values")
        self.values = values


@dataclass
class GradientTrace:
    """Ordered per-round, per-layer gradient tensors, plus the training mode."""

    layers: list[LayerSpec]
    rounds: list[list[GradientTensor]]
    mode: str = MODE_MINI_BATCH

    def __post_init__(self):
        if self.mode not in _MODE_CODES:
            raise UsageError(f"unknown trace mode {self.mode!r}")
        if not self.layers:
            raise FormatError("trace must declare at least one layer")
        if not self.rounds:
            raise FormatError("trace must contain at least one round")
        for r, tensors in enumerate(self.rounds):
            if len(tensors) != len(self.layers):
                raise IntegrityError(f"round {r + 1}: {len(tensors)} tensors for {len(self.layers)} layers")
            for spec, tensor in zip(self.layers, tensors):
                if tensor.spec != spec:
                    raise IntegrityError(f"round {r + 1}: tensor spec mismatch for layer {spec.name!r}")

    @property
    def num_rounds(self) -> int:
        return len(self.rounds)

    def total_bytes(self) -> int:
        """Raw float32 size of the whole trace."""
        return 4 * sum(spec.numel for spec in self.layers) * len(self.rounds)


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic trace generator.

    target_sign_consistency only shapes conv4d layers; oscillation_period only
    matters in full_batch mode, where the gradient direction is negated every
    that many rounds.
    """

    seed: int
    layers: tuple[LayerSpec, ...]
    rounds: int
    magnitude_decay: float = 0.99
    noise_level: float = 0.3
    target_sign_consistency: float = 0.8
    oscillation_period: int = 1
    mode: str = MODE_MINI_BATCH

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise UsageError("SynthConfig needs at least one layer")
        if self.rounds < 1:
            raise UsageError("rounds must be >= 1")
        if not 0.0 < self.magnitude_decay <= 1.0:
            raise UsageError("magnitude_decay must be in (0, 1]")
        if self.noise_level < 0.0:
            raise UsageError("noise_level must be >= 0")
        if not 0.0 <= self.target_sign_consistency <= 1.0:
            raise UsageError("target_sign_consistency must be in [0, 1]")
        if self.oscillation_period < 1:
            raise UsageError("oscillation_period must be >= 1")
        if self.mode not in _MODE_CODES:
            raise UsageError(f"unknown trace mode {self.mode!r}")


def abs_stats(t: GradientTensor) -> tuple[float, float]:
    """Mean and population standard deviation of the elementwise magnitudes."""
    a = np.abs(t.values.astype(np.float64))
    return float(a.mean()), float(a.std())


def encode_layer_table(layers: list[LayerSpec]) -> bytes:
    """Binary layer table shared by trace files and payload spec digests."""
    out = bytearray()
    for spec in layers:
        name = spec.name.encode("utf-8")
        if len(name) > 0xFFFF:
            raise FormatError(f"layer name too long: {spec.name!r}")
        out += struct.pack("<H", len(name)) + name
        out += struct.pack("<B", len(spec.shape))
        out += struct.pack(f"<{len(spec.shape)}I", *spec.shape)
    return bytes(out)


class ByteReader:
    """Cursor over a byte buffer that raises the right error on truncation."""

    def __init__(self, data: bytes, truncation_error=FormatError):
        self.data = data
        self.pos = 0
        self._err = truncation_error

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise self._err(f"truncated input: wanted {n} bytes at offset {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos


def decode_layer_table(reader: ByteReader, nlayers: int) -> list[LayerSpec]:
    layers = []
    for _ in range(nlayers):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (naxes,) = reader.unpack("<B")
        if not 1 <= naxes <= 4:
            raise FormatError(f"layer {name!r}: axis count {naxes} outside 1-4")
        axes = reader.unpack(f"<{naxes}I")
        try:
            layers.append(LayerSpec(name, axes))
        except UsageError as exc:
            raise FormatError(str(exc)) from exc
    return layers


def save_trace(trace: GradientTrace, path) -> None:
    """Write a trace in the GTRC format. Byte-deterministic for equal traces."""
    header = bytearray()
    header += TRACE_MAGIC
    header += struct.pack("<HB", TRACE_VERSION, _MODE_CODES[trace.mode])
    header += struct.pack("<I", len(trace.layers))
    header += encode_layer_table(trace.layers)
    header += struct.pack("<I", len(trace.rounds))
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        for tensors in trace.rounds:
            for tensor in tensors:
                fh.write(tensor.values.astype("<f4", copy=False).tobytes())


def load_trace(path) -> GradientTrace:
    """Read a GTRC trace file, validating structure and value finiteness."""
    data = Path(path).read_bytes()
    reader = ByteReader(data)
    if reader.take(4) != TRACE_MAGIC:
        raise FormatError(f"{path}: not a trace file (bad magic)")
    version, mode_code = reader.unpack("<HB")
    if version != TRACE_VERSION:
        raise FormatError(f"{path}: unsupported trace version {version}")
    if mode_code not in _MODE_NAMES:
        raise FormatError(f"{path}: unknown mode code {mode_code}")
    (nlayers,) = reader.unpack("<I")
    if nlayers == 0:
        raise FormatError(f"{path}: zero layers")
    layers = decode_layer_table(reader, nlayers)
    (nrounds,) = reader.unpack("<I")
    if nrounds == 0:
        raise FormatError(f"{path}: zero rounds")

    expected = 4 * sum(spec.numel for spec in layers) * nrounds
    if reader.remaining != expected:
        raise IntegrityError(
            f"{path}: payload holds {reader.remaining} bytes, header declares {expected}"
        )
    rounds = []
    for _ in range(nrounds):
        tensors = []
        for spec in layers:
            raw = reader.take(4 * spec.numel)
            values = np.frombuffer(raw, dtype="<f4").astype(np.float32)
            if not np.all(np.isfinite(values)):
                raise DataError(f"{path}: non-finite values in layer {spec.name!r}")
            tensors.append(GradientTensor(spec, values))
        rounds.append(tensors)
    return GradientTrace(layers, rounds, _MODE_NAMES[mode_code])


def _kernel_flip_probability(target: float, kernel_size: int) -> float:
    # Solve E[(T - F - ceil(T/2)) / (T - ceil(T/2))] = target for the
    # per-element flip count F ~ Binomial(T, p).
    half = math.ceil(kernel_size / 2)
    denom = kernel_size - half
    if denom <= 0:
        return 0.0
    return (1.0 - target) * denom / kernel_size


def _layer_signs(rng: np.random.Generator, spec: LayerSpec, cfg: SynthConfig,
                 dominant: np.ndarray | None) -> np.ndarray:
    if spec.kind == KIND_CONV4D and dominant is not None:
        ksize = spec.kernel_size
        p = _kernel_flip_probability(cfg.target_sign_consistency, ksize)
        flips = rng.random((spec.kernel_count, ksize)) < p
        signs = np.repeat(dominant[:, None], ksize, axis=1)
        signs[flips] *= -1
        return signs.reshape(-1)
    return rng.choice(np.array([-1.0, 1.0]), size=spec.numel)


def synth_trace(cfg: SynthConfig) -> GradientTrace:
    """Generate a deterministic trace from a SynthConfig.

    Per-element magnitude = decay envelope * slowly drifting per-element level
    * |1 + noise_level * white noise|. Signs: conv4d kernels get a dominant
    sign with a flip probability calibrated to target_sign_consistency; other
    layers get i.i.d. signs. In full_batch mode the whole sign pattern is held
    fixed and globally negated every oscillation_period rounds.
    """
    rng = np.random.default_rng(cfg.seed)
    layers = list(cfg.layers)

    levels = [np.exp(rng.normal(0.0, _LEVEL_SPREAD, spec.numel)) for spec in layers]
    dominants = [
        rng.choice(np.array([-1.0, 1.0]), size=spec.kernel_count)
        if spec.kind == KIND_CONV4D
        else None
        for spec in layers
    ]
    fixed_signs = None
    if cfg.mode == MODE_FULL_BATCH:
        fixed_signs = [_layer_signs(rng, spec, cfg, dominants[i]) for i, spec in enumerate(layers)]

    rounds = []
    for t in range(1, cfg.rounds + 1):
        envelope = cfg.magnitude_decay ** (t - 1)
        tensors = []
        for i, spec in enumerate(layers):
            levels[i] = (1.0 - _LEVEL_BLEND) * levels[i] + _LEVEL_BLEND * np.exp(
                rng.normal(0.0, _LEVEL_SPREAD, spec.numel)
            )
            noise = np.abs(1.0 + cfg.noise_level * rng.standard_normal(spec.numel))
            magnitude = envelope * levels[i] * noise
            if cfg.mode == MODE_FULL_BATCH:
                direction = -1.0 if ((t - 1) // cfg.oscillation_period) % 2 else 1.0
                signs = fixed_signs[i] * direction
            else:
                signs = _layer_signs(rng, spec, cfg, dominants[i])
            tensors.append(GradientTensor(spec, (magnitude * signs).astype(np.float32)))
        rounds.append(tensors)
    return GradientTrace(layers, rounds, cfg.mode)
