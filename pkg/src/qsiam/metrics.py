"""Overlap metrics and the one-pass benchmark harness."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .boxes import BBox
from .errors import ParameterError
from .sequences import Sequence, list_sequences, load_sequence
from .tracker import StubExtractor, TrackerConfig, make_extractor, track_sequence


def iou(a: BBox, b: BBox) -> float:
    if a == b:
        # the edge arithmetic below loses the last ulp for some sizes
        return 1.0
    ix = min(a.cx + a.w / 2, b.cx + b.w / 2) - max(a.cx - a.w / 2, b.cx - b.w / 2)
    iy = min(a.cy + a.h / 2, b.cy + b.h / 2) - max(a.cy - a.h / 2, b.cy - b.h / 2)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return float(min(1.0, max(0.0, inter / union)))


@dataclass(frozen=True)
class SequenceResult:
    name: str
    ious: tuple[float, ...]

    def __post_init__(self):
        if not self.ious:
            raise ParameterError(f"sequence {self.name}: no evaluated frames")

    @property
    def frames(self) -> int:
        return len(self.ious)

    @property
    def ao(self) -> float:
        return float(np.mean(self.ious))

    @classmethod
    def from_boxes(cls, name, predicted, groundtruth, skip_first: bool = False):
        pairs = list(zip(predicted, groundtruth, strict=True))
        if skip_first:
            pairs = pairs[1:]
        return cls(name, tuple(iou(p, g) for p, g in pairs))


def mao(results) -> float:
    """Frame-count weighted mean of per-sequence average overlaps."""
    results = list(results)
    if not results:
        raise ParameterError("mao of an empty result list")
    total = sum(r.frames for r in results)
    return float(sum(r.frames * r.ao for r in results) / total)


@dataclass(frozen=True)
class BenchmarkReport:
    results: tuple[SequenceResult, ...]
    seconds: tuple[float, ...]

    @property
    def mao(self) -> float:
        return mao(self.results)

    @property
    def fps(self) -> float:
        t = sum(self.seconds)
        return sum(r.frames for r in self.results) / t if t > 0 else float("inf")

    def to_text(self, timing: bool = True) -> str:
        lines = [f"{'sequence':<24}{'frames':>8}{'AO':>8}" + (f"{'fps':>10}" if timing else "")]
        for r, s in zip(self.results, self.seconds):
            row = f"{r.name:<24}{r.frames:>8d}{r.ao:>8.3f}"
            if timing:
                row += f"{(r.frames / s if s > 0 else float('inf')):>10.2f}"
            lines.append(row)
        summary = f"mAO {self.mao:.3f} over {len(self.results)} sequences"
        if timing:
            summary += f", {self.fps:.2f} fps"
        lines.append(summary)
        return "\n".join(lines)

    def to_csv(self, timing: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sequence", "frames", "ao"] + (["fps"] if timing else []))
        for r, s in zip(self.results, self.seconds):
            row = [r.name, r.frames, f"{r.ao:.6f}"]
            if timing:
                row.append(f"{(r.frames / s if s > 0 else float('inf')):.3f}")
            w.writerow(row)
        w.writerow(["mAO", sum(r.frames for r in self.results), f"{self.mao:.6f}"]
                   + ([f"{self.fps:.3f}"] if timing else []))
        return buf.getvalue()


TrackFn = Callable[[Sequence], list]


def oracle_tracker(seq: Sequence) -> list[BBox]:
    """Echo the ground truth; the harness's perfect-tracker reference."""
    return list(seq.groundtruth)


def make_track_fn(weights, cfg: TrackerConfig | None = None) -> TrackFn:
    cfg = cfg or TrackerConfig()
    extractor = make_extractor(weights)

    def run(seq: Sequence) -> list[BBox]:
        return track_sequence(seq.frames, seq.groundtruth[0], extractor, cfg)

    return run


def run_benchmark(dataset_dir, weights=None, cfg: TrackerConfig | None = None,
                  tracker: str | TrackFn = "siamfc", skip_first: bool = False) -> BenchmarkReport:
    """One-pass evaluation: initialise on frame 0 of every sequence, never reset.

    ``tracker`` is ``"siamfc"`` (network features from ``weights``),
    ``"stub"`` (:class:`StubExtractor` features), ``"oracle"``, or a callable
    mapping a :class:`Sequence` to one box per frame.
    """
    if callable(tracker):
        fn = tracker
    elif tracker == "oracle":
        fn = oracle_tracker
    elif tracker == "stub":
        fn = make_track_fn(StubExtractor(), cfg)
    elif tracker == "siamfc":
        if weights is None:
            raise ParameterError("the siamfc tracker needs weights")
        fn = make_track_fn(weights, cfg)
    else:
        raise ParameterError(f"unknown tracker {tracker!r}")

    results, seconds = [], []
    for seq_dir in list_sequences(Path(dataset_dir)):
        seq = load_sequence(seq_dir)
        t0 = time.perf_counter()
        boxes = fn(seq)
        seconds.append(time.perf_counter() - t0)
        results.append(SequenceResult.from_boxes(seq.name, boxes, seq.groundtruth, skip_first))
    return BenchmarkReport(tuple(results), tuple(seconds))
