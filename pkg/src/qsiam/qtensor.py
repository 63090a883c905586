"""Integer tensors and the bit-exact kernels the Siamese branch is built from.

Everything here is a pure function of its arguments. Activations and weights
live in :class:`QTensor` (signed integers plus a per-tensor real scale);
convolution produces plain wide-integer accumulator arrays, which are brought
back to a low-bit :class:`QTensor` by integer threshold comparison.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ParameterError, ShapeError, UnsupportedLayerError

MIN_BITS = 2
MAX_BITS = 8

# Sentinels for thresholds that are always / never met; far outside any
# reachable accumulator value but still exact in int64.
THRESHOLD_NEVER = np.int64(2**62)
THRESHOLD_ALWAYS = np.int64(-(2**62))

# Largest integer magnitude a float64 represents exactly.
_FLOAT64_EXACT = 2**53


def signed_range(bits: int) -> tuple[int, int]:
    """Inclusive (lo, hi) of a two's-complement integer with ``bits`` bits."""
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


def _check_bits(bits) -> int:
    if isinstance(bits, bool) or not isinstance(bits, (int, np.integer)):
        raise ParameterError(f"bit-width must be an integer, got {bits!r}")
    if not MIN_BITS <= bits <= MAX_BITS:
        raise ParameterError(f"bit-width must be in {MIN_BITS}..{MAX_BITS}, got {bits}")
    return int(bits)


def _check_scale(scale) -> float:
    scale = float(scale)
    if not np.isfinite(scale) or scale <= 0:
        raise ParameterError(f"scale must be a positive finite real, got {scale!r}")
    return scale


@dataclass(frozen=True, eq=False)
class QTensor:
    """Signed integer tensor with a quantisation scale (real = int * scale).

    ``data`` is stored as a read-only ``int8`` array; dims are
    ``(C, H, W)`` for feature maps and ``(F, C, kh, kw)`` for weights.
    """

    data: np.ndarray
    bits: int
    scale: float = 1.0

    def __post_init__(self):
        bits = _check_bits(self.bits)
        scale = _check_scale(self.scale)
        raw = np.asarray(self.data)
        if raw.dtype.kind not in "iu":
            raise ParameterError(f"QTensor data must be integer, got dtype {raw.dtype}")
        lo, hi = signed_range(bits)
        if raw.size and (raw.min() < lo or raw.max() > hi):
            raise ParameterError(
                f"values outside the signed {bits}-bit range [{lo}, {hi}]: "
                f"min={raw.min()}, max={raw.max()}"
            )
        data = np.array(raw, dtype=np.int8, order="C")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "scale", scale)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def real(self) -> np.ndarray:
        return dequantize(self)

    def equals(self, other: "QTensor") -> bool:
        """Bit-identical comparison (data, bits and scale)."""
        return (
            isinstance(other, QTensor)
            and self.bits == other.bits
            and self.scale == other.scale
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )

    def __repr__(self):
        return f"QTensor(dims={self.dims}, bits={self.bits}, scale={self.scale:g})"


@dataclass(frozen=True, eq=False)
class ThresholdSet:
    """Per-channel sorted accumulator thresholds for a quantised activation.

    Output value is ``offset + #(thresholds <= acc)``. With the default
    offset the result is a signed ``out_bits`` integer; ``offset=0`` gives
    the unsigned encoding.
    """

    thresholds: np.ndarray
    out_bits: int
    offset: int | None = None
    scale: float = 1.0
    _out_qbits: int = field(init=False, repr=False)

    def __post_init__(self):
        thr = np.array(self.thresholds, dtype=np.int64)
        if thr.ndim == 1:
            thr = thr[None, :]
        if thr.ndim != 2:
            raise ShapeError(f"thresholds must be (channels, count), got shape {thr.shape}")
        out_bits = int(self.out_bits)
        if not 1 <= out_bits <= MAX_BITS:
            raise ParameterError(f"output bit-width must be in 1..{MAX_BITS}, got {out_bits}")
        if thr.shape[1] != (1 << out_bits) - 1:
            raise ParameterError(
                f"{out_bits}-bit output needs {(1 << out_bits) - 1} thresholds per channel, "
                f"got {thr.shape[1]}"
            )
        decreasing = np.any(thr[:, 1:] < thr[:, :-1], axis=1)
        if np.any(decreasing):
            bad = int(np.nonzero(decreasing)[0][0])
            raise ParameterError(f"thresholds of channel {bad} are not non-decreasing")
        offset = signed_range(out_bits)[0] if self.offset is None else int(self.offset)
        top = offset + thr.shape[1]
        qbits = MIN_BITS
        while qbits <= MAX_BITS:
            lo, hi = signed_range(qbits)
            if lo <= offset and top <= hi:
                break
            qbits += 1
        else:
            raise ParameterError(f"output range [{offset}, {top}] does not fit 8 signed bits")
        thr.setflags(write=False)
        object.__setattr__(self, "thresholds", thr)
        object.__setattr__(self, "out_bits", out_bits)
        object.__setattr__(self, "offset", offset)
        object.__setattr__(self, "scale", _check_scale(self.scale))
        object.__setattr__(self, "_out_qbits", qbits)

    @property
    def channels(self) -> int:
        return self.thresholds.shape[0]


def quantize(x, bits: int, scale: float) -> QTensor:
    """Round-half-to-even onto the signed ``bits`` grid, saturating at the edges."""
    bits = _check_bits(bits)
    scale = _check_scale(scale)
    lo, hi = signed_range(bits)
    q = np.clip(np.rint(np.asarray(x, dtype=np.float64) / scale), lo, hi)
    return QTensor(q.astype(np.int8), bits, scale)


def dequantize(q: QTensor) -> np.ndarray:
    return q.data.astype(np.float64) * q.scale


def _int_array(x) -> np.ndarray:
    arr = x.data if isinstance(x, QTensor) else np.asarray(x)
    if arr.dtype.kind not in "iu":
        raise ParameterError(f"integer tensor expected, got dtype {arr.dtype}")
    return arr


def _max_abs(a: np.ndarray) -> int:
    if a.size == 0:
        return 0
    return max(abs(int(a.min())), abs(int(a.max())))


def conv2d_same(x, weights) -> np.ndarray:
    """3x3, stride-1, zero-padded convolution; returns exact integer accumulators.

    ``x`` is ``[C, H, W]`` and ``weights`` ``[F, C, 3, 3]`` (QTensor or integer
    arrays). The result has shape ``[F, H, W]``, dtype ``int32`` whenever the
    worst-case sum provably fits (always true for <=8-bit operands and fewer
    than 14563 input channels), ``int64`` otherwise.

    The dot products are evaluated with a float64 GEMM: every operand, product
    and partial sum is an integer of magnitude below 2**53, so the result is
    exact regardless of summation order.
    """
    xd = _int_array(x)
    wd = _int_array(weights)
    if wd.ndim != 4:
        raise ShapeError(f"weights must be [F, C, kh, kw], got shape {wd.shape}")
    n_out, n_in, kh, kw = wd.shape
    if (kh, kw) != (3, 3):
        raise UnsupportedLayerError(f"only 3x3 kernels are supported, got {kh}x{kw}")
    if xd.ndim != 3:
        raise ShapeError(f"input must be [C, H, W], got shape {xd.shape}")
    if xd.shape[0] != n_in:
        raise ShapeError(f"input has {xd.shape[0]} channels, weights expect {n_in}")
    _, h, w = xd.shape

    bound = 9 * n_in * _max_abs(xd) * _max_abs(wd)
    padded = np.pad(xd, ((0, 0), (1, 1), (1, 1)))
    # [C, H, W, 3, 3] -> [H*W, C*9], matching the [F, C, 3, 3] weight layout
    cols = sliding_window_view(padded, (3, 3), axis=(1, 2))
    cols = cols.transpose(1, 2, 0, 3, 4).reshape(h * w, n_in * 9)
    wmat = wd.reshape(n_out, n_in * 9)
    if bound < _FLOAT64_EXACT:
        acc = cols.astype(np.float64) @ wmat.T.astype(np.float64)
    else:
        acc = cols.astype(np.int64) @ wmat.T.astype(np.int64)
    out_dtype = np.int32 if bound < 2**31 else np.int64
    return np.ascontiguousarray(acc.T.reshape(n_out, h, w).astype(out_dtype))


def maxpool2x2(x):
    """Non-overlapping 2x2 max pooling with floor semantics on odd sizes.

    Accepts a QTensor (returned with the same bits/scale) or a ``[C, H, W]``
    array.
    """
    arr = x.data if isinstance(x, QTensor) else np.asarray(x)
    if arr.ndim != 3:
        raise ShapeError(f"maxpool2x2 expects [C, H, W], got shape {arr.shape}")
    c, h, w = arr.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2x2 needs H, W >= 2, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    pooled = arr[:, : 2 * h2, : 2 * w2].reshape(c, h2, 2, w2, 2).max(axis=(2, 4))
    if isinstance(x, QTensor):
        return QTensor(pooled, x.bits, x.scale)
    return pooled


def threshold_activate(acc, thr: ThresholdSet) -> QTensor:
    """Map accumulators to quantised activations by counting met thresholds."""
    a = _int_array(acc)
    if a.ndim != 3:
        raise ShapeError(f"accumulator must be [C, H, W], got shape {a.shape}")
    if a.shape[0] != thr.channels:
        raise ShapeError(
            f"accumulator has {a.shape[0]} channels, threshold set has {thr.channels}"
        )
    a64 = a.astype(np.int64, copy=False)
    counts = np.empty(a.shape, dtype=np.int64)
    for c in range(a.shape[0]):
        counts[c] = np.searchsorted(thr.thresholds[c], a64[c].ravel(), side="right").reshape(
            a.shape[1:]
        )
    return QTensor(counts + thr.offset, thr._out_qbits, thr.scale)


def batchnorm_thresholds(gamma, beta, mean, std, acc_scale: float, out_bits: int,
                         out_scale: float) -> tuple[ThresholdSet, np.ndarray]:
    """Lower batch-norm followed by a signed uniform quantiser to thresholds.

    The float pipeline being replaced is::

        y = gamma * (acc * acc_scale - mean) / std + beta
        q = clip(rint(y / out_scale), lo, hi)

    Returns the threshold set and a per-channel sign vector (+1/-1). Channels
    with ``gamma < 0`` are decreasing in ``acc``; they are expressed on the
    negated accumulator, so the caller must multiply accumulators by ``signs``
    before :func:`threshold_activate`. Agreement with the float pipeline is
    exact except for accumulators landing exactly on a rounding boundary.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if not (gamma.shape == beta.shape == mean.shape == std.shape) or gamma.ndim != 1:
        raise ShapeError("batch-norm vectors must be 1-D and of equal length")
    if np.any(std <= 0):
        raise ParameterError("batch-norm std must be positive")
    acc_scale = _check_scale(acc_scale)
    out_scale = _check_scale(out_scale)

    lo, hi = signed_range(out_bits)
    levels = np.arange(lo + 1, hi + 1, dtype=np.float64)
    signs = np.where(gamma < 0, -1, 1).astype(np.int64)
    g = np.abs(gamma)
    mu = mean * signs
    live = g > 0

    real = np.empty((gamma.size, levels.size), dtype=np.float64)
    real[live] = mu[live, None] + std[live, None] * (
        out_scale * (levels[None, :] - 0.5) - beta[live, None]
    ) / g[live, None]
    thr = np.ceil(real / acc_scale)
    thr = np.clip(thr, float(THRESHOLD_ALWAYS), float(THRESHOLD_NEVER))
    thr = thr.astype(np.int64)

    if not np.all(live):
        # gamma == 0: constant output clip(rint(beta / out_scale))
        const = np.clip(np.rint(beta[~live] / out_scale), lo, hi)
        thr[~live] = np.where(levels[None, :] <= const[:, None], THRESHOLD_ALWAYS, THRESHOLD_NEVER)

    return ThresholdSet(thr, out_bits, scale=out_scale), signs
