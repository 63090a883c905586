"""SiamFC-style tracking loop around the quantised branch.

Per frame: crop the search region at one or three scales, run the branch,
cross-correlate with the exemplar features taken from the first frame,
upsample the score maps, penalise scale changes and large displacements
(cosine window), then move and rescale the box.
"""
from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import cv2
import numpy as np

from .boxes import BBox
from .errors import IngestionError, ParameterError, ShapeError
from .profiling import StageTiming
from .qtensor import QTensor, quantize
from .siamnet import IMAGE_SCALE, NetworkSpec, SiameseBranch, WeightContainer, canonical_network, pack_image

SCORE_SIZE = 17
TOTAL_STRIDE = 8


@dataclass(frozen=True)
class TrackerConfig:
    num_scales: int = 3
    scale_step: float = 1.0375
    scale_penalty: float = 0.9745
    scale_damping: float = 0.59
    window_influence: float = 0.176
    upsample_factor: int = 16
    context_amount: float = 0.5
    exemplar_size: int = 110
    roi_size: int = 238
    total_stride: int = TOTAL_STRIDE
    score_size: int = SCORE_SIZE

    def __post_init__(self):
        if self.num_scales not in (1, 3):
            raise ParameterError(f"num_scales must be 1 or 3, got {self.num_scales}")
        # scale_step == 1 is accepted: it degenerates the pyramid to one scale
        if self.scale_step < 1:
            raise ParameterError("scale_step must be >= 1")
        if not 0 < self.scale_penalty <= 1:
            raise ParameterError("scale_penalty must be in (0, 1]")
        if not 0 <= self.scale_damping <= 1:
            raise ParameterError("scale_damping must be in [0, 1]")
        if not 0 <= self.window_influence < 1:
            raise ParameterError("window_influence must be in [0, 1)")
        if self.upsample_factor < 1 or self.context_amount < 0:
            raise ParameterError("upsample_factor must be >= 1 and context_amount >= 0")

    @property
    def upsampled_size(self) -> int:
        return self.upsample_factor * self.score_size

    @property
    def scale_factors(self) -> np.ndarray:
        exps = np.arange(self.num_scales) - (self.num_scales - 1) / 2
        return self.scale_step ** exps

    def replace(self, **changes) -> "TrackerConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True, eq=False)
class TrackerState:
    exemplar_features: QTensor
    bbox: BBox
    penalty_window: np.ndarray


def exemplar_side(box: BBox, context: float) -> float:
    """Side of the square exemplar crop, in frame pixels."""
    pad = context * (box.w + box.h)
    return math.sqrt((box.w + pad) * (box.h + pad))


def crop_resize(frame: np.ndarray, box: BBox, context: float, out_size: int,
                exemplar_size: int = 110, scale: float = 1.0, fill=None) -> np.ndarray:
    """Square crop around the box center, bilinearly resampled to ``out_size``.

    The crop side is the context-padded exemplar side times
    ``out_size / exemplar_size`` (so exemplar and search crops share one
    pixel scale) times ``scale``. Pixels outside the frame take ``fill``,
    by default the per-channel frame mean.
    """
    if not (box.w > 0 and box.h > 0):
        raise ParameterError("degenerate box")
    frame = np.asarray(frame)
    if frame.size == 0:
        raise ParameterError("empty frame")
    side = exemplar_side(box, context) * out_size / exemplar_size * scale
    if fill is None:
        fill = frame.reshape(-1, frame.shape[-1]).mean(axis=0)
    a = side / out_size
    # destination pixel center u -> frame pixel-center coordinate
    bx = box.cx - 0.5 + (0.5 - out_size / 2.0) * a
    by = box.cy - 0.5 + (0.5 - out_size / 2.0) * a
    m = np.array([[a, 0.0, bx], [0.0, a, by]])
    return cv2.warpAffine(
        frame, m, (out_size, out_size),
        flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=tuple(float(v) for v in np.ravel(fill)),
    )


def cross_correlate(roi_feat, ex_feat) -> np.ndarray:
    """Valid cross-correlation summed over channels, exact in int64."""
    r = (roi_feat.data if isinstance(roi_feat, QTensor) else np.asarray(roi_feat)).astype(np.int64)
    e = (ex_feat.data if isinstance(ex_feat, QTensor) else np.asarray(ex_feat)).astype(np.int64)
    if r.ndim != 3 or e.ndim != 3:
        raise ShapeError(f"features must be [C, H, W], got {r.shape} and {e.shape}")
    if r.shape[0] != e.shape[0]:
        raise ShapeError(f"channel mismatch: {r.shape[0]} vs {e.shape[0]}")
    kh, kw = e.shape[1:]
    oh, ow = r.shape[1] - kh + 1, r.shape[2] - kw + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"exemplar {e.shape[1:]} larger than search features {r.shape[1:]}")
    out = np.zeros((oh, ow), dtype=np.int64)
    for dy in range(kh):
        for dx in range(kw):
            out += np.tensordot(e[:, dy, dx], r[:, dy:dy + oh, dx:dx + ow], axes=1)
    return out


def upsample_score(score, factor: int = 16, size: int = SCORE_SIZE) -> np.ndarray:
    """Bicubic upsampling of a ``size`` x ``size`` score map by ``factor``."""
    m = np.asarray(score, dtype=np.float64)
    if m.shape != (size, size):
        raise ShapeError(f"score map must be {size}x{size}, got {m.shape}")
    n = size * factor
    return cv2.resize(m, (n, n), interpolation=cv2.INTER_CUBIC)


def hann_window(n: int) -> np.ndarray:
    """Outer-product Hann window normalised to sum 1."""
    h = np.hanning(n)
    win = np.outer(h, h)
    return win / win.sum()


def _parabolic_offset(left: float, mid: float, right: float) -> float:
    denom = left - 2.0 * mid + right
    if denom >= 0:
        return 0.0
    return float(np.clip(0.5 * (left - right) / denom, -0.5, 0.5))


def _refined_peak(m: np.ndarray) -> tuple[float, float, int, int]:
    iy, ix = np.unravel_index(int(np.argmax(m)), m.shape)
    py, px = float(iy), float(ix)
    if 0 < iy < m.shape[0] - 1:
        py += _parabolic_offset(m[iy - 1, ix], m[iy, ix], m[iy + 1, ix])
    if 0 < ix < m.shape[1] - 1:
        px += _parabolic_offset(m[iy, ix - 1], m[iy, ix], m[iy, ix + 1])
    return py, px, int(iy), int(ix)


def penalize_and_locate(maps: Sequence[np.ndarray], state: TrackerState | np.ndarray,
                        cfg: TrackerConfig) -> tuple[int, tuple[float, float], float]:
    """Pick the best scale and the target displacement within the search region.

    Returns ``(scale_index, (dx, dy), response)``; the displacement is in
    search-region pixels relative to its center, and ``response`` is the
    scale-penalised score at the peak.
    """
    maps = [np.asarray(m, dtype=np.float64) for m in maps]
    if not maps:
        raise ParameterError("penalize_and_locate needs at least one score map")
    window = state.penalty_window if isinstance(state, TrackerState) else np.asarray(state)
    center = (len(maps) - 1) // 2
    penalized = [m if i == center else m * cfg.scale_penalty for i, m in enumerate(maps)]
    peaks = [float(p.max()) for p in penalized]
    best = center
    for i, v in enumerate(peaks):
        if v > peaks[best]:
            best = i

    m = penalized[best]
    m = m - m.min()
    total = m.sum()
    m = m / total if total > 0 else np.zeros_like(m)
    if window.shape != m.shape:
        raise ShapeError(f"window {window.shape} does not match score map {m.shape}")
    blended = (1.0 - cfg.window_influence) * m + cfg.window_influence * window

    py, px, iy, ix = _refined_peak(blended)
    mid = (blended.shape[0] - 1) / 2.0
    to_roi = cfg.total_stride / cfg.upsample_factor
    disp = ((px - mid) * to_roi, (py - mid) * to_roi)
    return best, disp, float(penalized[best][iy, ix])


def update_state(state: TrackerState, scale_index: int, displacement, cfg: TrackerConfig) -> TrackerState:
    factor = float(cfg.scale_factors[scale_index])
    box = state.bbox
    side = exemplar_side(box, cfg.context_amount) * cfg.roi_size / cfg.exemplar_size * factor
    ratio = side / cfg.roi_size
    dx, dy = displacement
    grow = (1.0 - cfg.scale_damping) + cfg.scale_damping * factor
    new_box = BBox(box.cx + dx * ratio, box.cy + dy * ratio, box.w * grow, box.h * grow)
    return dataclasses.replace(state, bbox=new_box)


class NetworkExtractor:
    """Feature extraction through the quantised integer branch."""

    def __init__(self, branch: SiameseBranch):
        self.branch = branch

    @classmethod
    def from_weights(cls, weights: WeightContainer, spec: NetworkSpec | None = None):
        return cls(SiameseBranch(spec or canonical_network(), weights))

    def pack(self, patch: np.ndarray) -> QTensor:
        return pack_image(patch)

    def run(self, q: QTensor) -> QTensor:
        return self.branch.forward(q)

    def unpack(self, q: QTensor) -> np.ndarray:
        return q.data.astype(np.int64)


class StubExtractor:
    """Hand-made features for exercising tracker logic without trained weights.

    Grayscale patch (centered on 128), 8x8 average pooled, quantised to
    8 bits and replicated over ``channels`` channels.
    """

    def __init__(self, channels: int = 128, pool: int = TOTAL_STRIDE):
        self.channels = channels
        self.pool = pool

    def pack(self, patch: np.ndarray) -> QTensor:
        gray = np.asarray(patch, dtype=np.float64).mean(axis=2)
        q = quantize((gray - 128.0) * IMAGE_SCALE, 8, IMAGE_SCALE)
        return QTensor(q.data[None], 8, IMAGE_SCALE)

    def run(self, q: QTensor) -> QTensor:
        g = q.data[0].astype(np.float64)
        k = self.pool
        h, w = g.shape[0] // k, g.shape[1] // k
        pooled = g[: h * k, : w * k].reshape(h, k, w, k).mean(axis=(1, 3))
        feat = quantize(pooled * q.scale, 8, q.scale)
        return QTensor(np.broadcast_to(feat.data, (self.channels, h, w)), 8, q.scale)

    def unpack(self, q: QTensor) -> np.ndarray:
        return q.data.astype(np.int64)


def read_frame(item, index: int) -> np.ndarray:
    """Load a frame (path or array) as HxWx3 uint8; IngestionError names the index."""
    if isinstance(item, (str, Path)):
        img = cv2.imread(str(item), cv2.IMREAD_COLOR)
        if img is None:
            raise IngestionError(f"frame {index}: cannot read image {item}")
        return img
    arr = np.asarray(item)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.size == 0:
        raise IngestionError(f"frame {index}: expected an HxWx3 image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        arr = np.clip(arr, 0, 255).astype(np.uint8)
    return arr


class _Clock:
    def __init__(self, timing: StageTiming):
        self.timing = timing
        self.t = time.perf_counter()

    def lap(self, stage: str) -> None:
        now = time.perf_counter()
        self.timing.add(stage, now - self.t)
        self.t = now


@dataclass
class SiamFCTracker:
    """Single-target tracker; one instance per sequence."""

    extractor: object
    cfg: TrackerConfig = field(default_factory=TrackerConfig)
    state: TrackerState | None = None
    last_timing: StageTiming | None = None

    def init(self, frame: np.ndarray, box: BBox) -> None:
        frame = read_frame(frame, 0)
        h, w = frame.shape[:2]
        if not (0 <= box.cx <= w and 0 <= box.cy <= h):
            raise ParameterError(f"initial box center ({box.cx}, {box.cy}) outside the {w}x{h} frame")
        cfg = self.cfg
        patch = crop_resize(frame, box, cfg.context_amount, cfg.exemplar_size, cfg.exemplar_size)
        feats = self.extractor.run(self.extractor.pack(patch))
        self.state = TrackerState(feats, box, hann_window(cfg.upsampled_size))

    def update(self, frame: np.ndarray) -> BBox:
        if self.state is None:
            raise ParameterError("tracker used before init()")
        cfg = self.cfg
        timing = StageTiming()
        clock = _Clock(timing)
        fill = frame.reshape(-1, 3).mean(axis=0)
        patches = [
            crop_resize(frame, self.state.bbox, cfg.context_amount, cfg.roi_size,
                        cfg.exemplar_size, scale=float(f), fill=fill)
            for f in cfg.scale_factors
        ]
        clock.lap("crop_resize")
        packed = [self.extractor.pack(p) for p in patches]
        clock.lap("input_transfer")
        outputs = [self.extractor.run(q) for q in packed]
        clock.lap("network")
        feats = [self.extractor.unpack(o) for o in outputs]
        exemplar = self.extractor.unpack(self.state.exemplar_features)
        clock.lap("output_transfer")
        scores = [cross_correlate(f, exemplar) for f in feats]
        clock.lap("cross_correlation")
        maps = [upsample_score(s, cfg.upsample_factor, cfg.score_size) for s in scores]
        clock.lap("upsampling")
        idx, disp, _ = penalize_and_locate(maps, self.state, cfg)
        self.state = update_state(self.state, idx, disp, cfg)
        clock.lap("locate")
        self.last_timing = timing
        return self.state.bbox

    def track(self, frames: Iterable, init_box: BBox, records: list | None = None) -> list[BBox]:
        """Track through ``frames``; optionally collect (StageTiming, measured seconds) per frame."""
        boxes: list[BBox] = []
        for i, item in enumerate(frames):
            if i == 0:
                self.init(item, init_box)
                boxes.append(init_box)
                continue
            t0 = time.perf_counter()
            frame = read_frame(item, i)
            box = self.update(frame)
            elapsed = time.perf_counter() - t0
            boxes.append(box)
            if records is not None:
                records.append((self.last_timing, elapsed))
        if not boxes:
            raise ParameterError("track_sequence needs at least one frame")
        return boxes


def make_extractor(weights, spec: NetworkSpec | None = None):
    if isinstance(weights, WeightContainer):
        return NetworkExtractor.from_weights(weights, spec)
    if isinstance(weights, SiameseBranch):
        return NetworkExtractor(weights)
    return weights


def track_sequence(frames: Iterable, init_box: BBox, weights, cfg: TrackerConfig | None = None,
                   records: list | None = None, spec: NetworkSpec | None = None) -> list[BBox]:
    """Run the full loop over a sequence.

    ``weights`` is a WeightContainer, a SiameseBranch, or any extractor object
    with ``pack``/``run``/``unpack`` (e.g. :class:`StubExtractor`).
    """
    tracker = SiamFCTracker(make_extractor(weights, spec), cfg or TrackerConfig())
    return tracker.track(frames, init_box, records)
