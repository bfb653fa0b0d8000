"""Magnitude and sign predictors for gradient tensors.

The magnitude predictor runs an EMA in normalized (z-score) space: the
previous round's reconstructed magnitudes are standardized, blended with a
per-element memory, and mapped back through the current round's transmitted
mean and deviation. The sign predictor has two modes. In full-batch training
consecutive gradients correlate strongly in direction, so one flip bit per
layer carries the whole sign tensor. In mini-batch training only convolution
kernels keep a usable structure: kernels whose entries mostly agree get their
dominant sign broadcast, encoded in a two-level bitmap (one bit per kernel
saying "predicted", one bit per predicted kernel for the sign).

Everything here is pure: state goes in and comes out explicitly, so the
client and server stay bitwise-identical by construction.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError, IntegrityError, UsageError
from .trace import KIND_CONV4D, ByteReader, GradientTensor, LayerSpec

VARIANT_NONE = "none"
VARIANT_FLIP = "flip_bit"
VARIANT_KERNEL = "kernel_maps"

_TAG_NONE = 0
_TAG_FLIP = 1
_TAG_KERNEL = 2

BASELINE_KINDS = ("lorenzo", "ma3", "ma5", "ar1", "ema_nonorm")


class UndefinedCorrelationError(DataError):
    """Correlation is undefined because one input has zero norm."""


@dataclass(frozen=True)
class PredictParams:
    beta: float = 0.5
    tau: float = 0.5
    full_batch: bool = False
    sigma_floor: float = 1e-12

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise UsageError(f"beta must be in (0, 1], got {self.beta}")
        if not 0.0 <= self.tau <= 1.0:
            raise UsageError(f"tau must be in [0, 1], got {self.tau}")
        if self.sigma_floor <= 0.0:
            raise UsageError("sigma_floor must be positive")


@dataclass
class MagPredictorState:
    """Per-layer memory of the normalized-space EMA. Starts at zero."""

    memory: np.ndarray
    initialized: bool = False

    def __post_init__(self):
        memory = np.ascontiguousarray(self.memory, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(memory)):
            raise DataError("predictor memory contains non-finite values")
        self.memory = memory

    @classmethod
    def fresh(cls, numel: int) -> "MagPredictorState":
        return cls(np.zeros(numel, dtype=np.float64), initialized=False)

    def to_bytes(self) -> bytes:
        return self.memory.astype("<f8", copy=False).tobytes()


@dataclass
class SignTensor:
    """Predicted signs, one entry per element; 0 means no prediction."""

    values: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.int8).reshape(-1)
        bad = (values < -1) | (values > 1)
        if bad.any():
            raise UsageError("sign values must lie in {-1, 0, +1}")
        self.values = values

    @classmethod
    def zeros(cls, numel: int) -> "SignTensor":
        return cls(np.zeros(numel, dtype=np.int8))


@dataclass
class SignBitmap:
    """Wire-level sign prediction summary.

    variant "flip_bit" carries one bool; "kernel_maps" carries a level-1 bit
    per kernel (predicted or not) and a level-2 bit per predicted kernel
    (1 = dominant sign positive); "none" carries nothing.
    """

    variant: str = VARIANT_NONE
    flip: bool = False
    kernel_count: int = 0
    level1: np.ndarray = field(default=None)  # type: ignore[assignment]
    level2: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.variant not in (VARIANT_NONE, VARIANT_FLIP, VARIANT_KERNEL):
            raise UsageError(f"unknown bitmap variant {self.variant!r}")
        if self.variant == VARIANT_KERNEL:
            level1 = np.ascontiguousarray(self.level1, dtype=bool).reshape(-1)
            level2 = np.ascontiguousarray(self.level2, dtype=bool).reshape(-1)
            if level1.size != self.kernel_count:
                raise IntegrityError(
                    f"level-1 bitmap has {level1.size} bits for {self.kernel_count} kernels"
                )
            if level2.size != int(level1.sum()):
                raise IntegrityError(
                    f"level-2 bitmap has {level2.size} bits for {int(level1.sum())} predicted kernels"
                )
            self.level1 = level1
            self.level2 = level2

    @property
    def predicted_count(self) -> int:
        if self.variant != VARIANT_KERNEL:
            return 0
        return int(self.level1.sum())


def _pack_bits(bits: np.ndarray) -> bytes:
    return np.packbits(bits.astype(np.uint8), bitorder="little").tobytes()


def _unpack_bits(raw: bytes, count: int) -> np.ndarray:
    return np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=count, bitorder="little").astype(bool)


def encode_bitmap(bitmap: SignBitmap) -> bytes:
    """Serialize a bitmap: tag byte, then the variant payload, bits LSB-first."""
    if bitmap.variant == VARIANT_NONE:
        return struct.pack("<B", _TAG_NONE)
    if bitmap.variant == VARIANT_FLIP:
        return struct.pack("<BB", _TAG_FLIP, int(bitmap.flip))
    out = struct.pack("<BI", _TAG_KERNEL, bitmap.kernel_count)
    return out + _pack_bits(bitmap.level1) + _pack_bits(bitmap.level2)


def decode_bitmap(reader: ByteReader) -> SignBitmap:
    (tag,) = reader.unpack("<B")
    if tag == _TAG_NONE:
        return SignBitmap()
    if tag == _TAG_FLIP:
        (flip,) = reader.unpack("<B")
        if flip not in (0, 1):
            raise FormatError(f"flip bit byte must be 0 or 1, got {flip}")
        return SignBitmap(variant=VARIANT_FLIP, flip=bool(flip))
    if tag == _TAG_KERNEL:
        (kernel_count,) = reader.unpack("<I")
        level1 = _unpack_bits(reader.take((kernel_count + 7) // 8), kernel_count)
        predicted = int(level1.sum())
        level2 = _unpack_bits(reader.take((predicted + 7) // 8), predicted)
        return SignBitmap(
            variant=VARIANT_KERNEL, kernel_count=kernel_count, level1=level1, level2=level2
        )
    raise FormatError(f"unknown bitmap tag {tag}")


def predict_magnitude(
    prev_recon_abs: np.ndarray,
    mu_curr: float,
    sigma_curr: float,
    state: MagPredictorState,
    params: PredictParams,
) -> tuple[np.ndarray, MagPredictorState]:
    """EMA prediction of elementwise magnitudes in normalized space.

    Standardizes the previous reconstructed magnitudes with their own mean and
    population deviation (floored at sigma_floor), blends with the memory as
    z_pred = (1 - beta) * memory + beta * z_prev, then de-normalizes with the
    current round's transmitted statistics. The returned prediction is clamped
    to be nonnegative; the new memory keeps the unclamped z_pred.
    """
    x = np.asarray(prev_recon_abs, dtype=np.float64).reshape(-1)
    if x.size != state.memory.size:
        raise UsageError(f"predictor state holds {state.memory.size} elements, input has {x.size}")
    if x.size and float(x.min()) < 0.0:
        raise UsageError("prev_recon_abs must be nonnegative")
    mean = float(x.mean())
    std = float(x.std())
    z_prev = (x - mean) / max(std, params.sigma_floor)
    z_pred = (1.0 - params.beta) * state.memory + params.beta * z_prev
    pred_abs = z_pred * max(float(sigma_curr), 0.0) + float(mu_curr)
    np.maximum(pred_abs, 0.0, out=pred_abs)
    return pred_abs, MagPredictorState(memory=z_pred, initialized=True)


def baseline_predict(kind: str, history: list[np.ndarray], beta: float = 0.5) -> np.ndarray:
    """Reference magnitude predictors used for ablation comparisons.

    lorenzo: previous value. ma3/ma5: mean of the trailing window. ar1: one
    scalar lag-1 coefficient fit over the history, applied to the last array.
    ema_nonorm: the EMA of predict_magnitude without the normalization steps,
    folded over the whole history from a zero memory.
    """
    if kind not in BASELINE_KINDS:
        raise UsageError(f"unknown baseline {kind!r}")
    need = {"lorenzo": 1, "ar1": 1, "ema_nonorm": 1, "ma3": 3, "ma5": 5}[kind]
    if len(history) < need:
        raise UsageError(f"baseline {kind!r} needs {need} rounds of history, got {len(history)}")
    hist = [np.asarray(h, dtype=np.float64).reshape(-1) for h in history]
    if kind == "lorenzo":
        return hist[-1].copy()
    if kind in ("ma3", "ma5"):
        window = need
        return np.mean(hist[-window:], axis=0)
    if kind == "ar1":
        if len(hist) < 2:
            return hist[-1].copy()
        num = 0.0
        den = 0.0
        for prev, curr in zip(hist[:-1], hist[1:]):
            num += float(np.dot(prev, curr))
            den += float(np.dot(prev, prev))
        phi = num / den if den > 0.0 else 0.0
        return phi * hist[-1]
    memory = np.zeros_like(hist[0])
    for x in hist:
        memory = (1.0 - beta) * memory + beta * x
    return memory


def gradient_correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of the angle between two flat gradients."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.size != b.size:
        raise UsageError(f"correlation inputs differ in length: {a.size} vs {b.size}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise UndefinedCorrelationError("correlation undefined for zero-norm input")
    return float(np.dot(a, b) / (na * nb))


def sign_consistency(kernel: np.ndarray) -> float:
    """How uniformly a kernel's entries share one sign, in [0, 1].

    Counts positive, negative and zero entries; zeros count toward agreement.
    A single-element kernel is defined as fully consistent.
    """
    k = np.asarray(kernel).reshape(-1)
    t = k.size
    if t < 1:
        raise UsageError("sign_consistency needs at least one element")
    half = math.ceil(t / 2)
    if t == half:
        return 1.0
    p = int((k > 0).sum())
    n = int((k < 0).sum())
    z = t - p - n
    raw = (max(p, n) + z - half) / (t - half)
    return min(1.0, max(0.0, raw))


def _kernel_sign_prediction(values: np.ndarray, spec: LayerSpec, tau: float):
    ksize = spec.kernel_size
    kernels = values.reshape(-1, ksize)
    pos = (kernels > 0).sum(axis=1)
    neg = (kernels < 0).sum(axis=1)
    zero = ksize - pos - neg
    half = math.ceil(ksize / 2)
    if ksize == half:
        consist = np.ones(kernels.shape[0])
    else:
        consist = (np.maximum(pos, neg) + zero - half) / (ksize - half)
        np.clip(consist, 0.0, 1.0, out=consist)
    # A dominant-sign tie carries no direction, so the kernel stays unpredicted.
    predictable = (consist >= tau) & (pos != neg)
    dominant = np.where(pos >= neg, 1, -1).astype(np.int8)
    per_kernel = np.where(predictable, dominant, np.int8(0)).astype(np.int8)
    signs = np.repeat(per_kernel, ksize)
    return signs, predictable, dominant[predictable] > 0


def predict_signs(
    g_curr: GradientTensor,
    prev_sign: SignTensor | None,
    prev_recon: GradientTensor | None,
    params: PredictParams,
) -> tuple[SignTensor, SignBitmap]:
    """Client-side sign prediction for one layer.

    Full-batch mode correlates the current gradient against the previous
    reconstruction and either keeps or flips the previous signs wholesale,
    recording the choice in a single flip bit. Degenerate correlations (zero
    norm) count as "no flip". Mini-batch mode predicts per convolution kernel
    when the kernel's sign consistency reaches tau; other layers get no
    prediction at all.
    """
    numel = g_curr.spec.numel
    if params.full_batch:
        if prev_sign is None or prev_recon is None:
            raise UsageError("full-batch sign prediction needs the previous round")
        if prev_sign.values.size != numel:
            raise UsageError("prev_sign length mismatch")
        try:
            c = gradient_correlation(prev_recon.values, g_curr.values)
        except UndefinedCorrelationError:
            c = 1.0
        flip = c < 0.0
        signs = (-prev_sign.values if flip else prev_sign.values).copy()
        return SignTensor(signs), SignBitmap(variant=VARIANT_FLIP, flip=flip)
    if g_curr.spec.kind != KIND_CONV4D:
        return SignTensor.zeros(numel), SignBitmap()
    signs, level1, level2 = _kernel_sign_prediction(g_curr.values, g_curr.spec, params.tau)
    bitmap = SignBitmap(
        variant=VARIANT_KERNEL,
        kernel_count=g_curr.spec.kernel_count,
        level1=level1,
        level2=level2,
    )
    return SignTensor(signs), bitmap


def reconstruct_signs(bitmap: SignBitmap, prev_sign: SignTensor | None, spec: LayerSpec) -> SignTensor:
    """Server-side inverse of predict_signs, driven only by the bitmap."""
    if bitmap.variant == VARIANT_NONE:
        return SignTensor.zeros(spec.numel)
    if bitmap.variant == VARIANT_FLIP:
        if prev_sign is None or prev_sign.values.size != spec.numel:
            raise IntegrityError("flip-bit bitmap without a matching previous sign tensor")
        values = -prev_sign.values if bitmap.flip else prev_sign.values
        return SignTensor(values.copy())
    if spec.kind != KIND_CONV4D:
        raise IntegrityError(f"kernel bitmap for non-conv4d layer {spec.name!r}")
    if bitmap.kernel_count != spec.kernel_count:
        raise IntegrityError(
            f"bitmap covers {bitmap.kernel_count} kernels, layer has {spec.kernel_count}"
        )
    dominant = np.zeros(spec.kernel_count, dtype=np.int8)
    dominant[bitmap.level1] = np.where(bitmap.level2, 1, -1).astype(np.int8)
    return SignTensor(np.repeat(dominant, spec.kernel_size))


def bitmap_overhead_ratio(
    prediction_ratio: float, bits_per_value: int, kernel_size: int, lossless_ratio: float
) -> float:
    """Bitmap size relative to the raw tensor: (1 + P) / (b * K * R)."""
    if not 0.0 <= prediction_ratio <= 1.0:
        raise UsageError("prediction_ratio must be in [0, 1]")
    if bits_per_value < 1 or kernel_size < 1:
        raise UsageError("bits_per_value and kernel_size must be >= 1")
    if lossless_ratio < 1.0:
        raise UsageError("lossless_ratio must be >= 1")
    return (1.0 + prediction_ratio) / (bits_per_value * kernel_size * lossless_ratio)
