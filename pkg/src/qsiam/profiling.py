"""Per-stage latency bookkeeping for the tracking loop.

Stages follow the hardware-software split of the tracker: input
preprocessing (crop & resize), network transfer & execution (pack, run,
unpack) and network output processing (correlation, upsampling, locating).
On this host the two transfer stages time the pack/quantise and
unpack steps around the integer network.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, fields

from .errors import ParameterError

STAGES = (
    "crop_resize",
    "input_transfer",
    "network",
    "output_transfer",
    "cross_correlation",
    "upsampling",
    "locate",
)

GROUPS = {
    "input_preprocessing": ("crop_resize",),
    "network_transfer_execution": ("input_transfer", "network", "output_transfer"),
    "output_processing": ("cross_correlation", "upsampling", "locate"),
}

# Reference per-stage mean latencies (seconds) measured with the V5 accelerator, and the
# measured end-to-end frame time that includes other bookkeeping.
REFERENCE_STAGE_SECONDS = {
    "crop_resize": 0.0102,
    "input_transfer": 0.001,
    "network": 0.0205,
    "output_transfer": 0.008,
    "cross_correlation": 0.0081,
    "upsampling": 0.0011,
    "locate": 0.0057,
}
REFERENCE_MEASURED_TOTAL = 0.0587
REFERENCE_GROUP_PERCENT = {
    "input_preprocessing": 18.0,
    "network_transfer_execution": 52.0,
    "output_processing": 25.0,
}


@dataclass
class StageTiming:
    """Stage durations in seconds, summed over ``frames`` frames."""

    crop_resize: float = 0.0
    input_transfer: float = 0.0
    network: float = 0.0
    output_transfer: float = 0.0
    cross_correlation: float = 0.0
    upsampling: float = 0.0
    locate: float = 0.0
    frames: int = 1

    def __post_init__(self):
        for name in STAGES:
            if getattr(self, name) < 0:
                raise ParameterError(f"stage {name} has negative duration")
        if self.frames < 1:
            raise ParameterError("frames must be >= 1")

    def add(self, stage: str, seconds: float) -> None:
        setattr(self, stage, getattr(self, stage) + seconds)

    @property
    def total(self) -> float:
        return sum(getattr(self, s) for s in STAGES)

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class TimingReport:
    stage_means: dict[str, float]
    stage_sum: float
    measured_total: float
    group_seconds: dict[str, float]
    group_percent: dict[str, float]
    frames: int

    @property
    def fps(self) -> float:
        return 1.0 / self.measured_total

    @property
    def network_fps(self) -> float:
        """Rate of network transfer & execution alone."""
        return 1.0 / self.group_seconds["network_transfer_execution"]

    def to_text(self) -> str:
        lines = [f"{'stage':<28}{'time [s]':>12}"]
        for s in STAGES:
            lines.append(f"{s:<28}{self.stage_means[s]:>12.6f}")
        lines.append(f"{'sum':<28}{self.stage_sum:>12.6f}")
        lines.append(f"{'total (measured)':<28}{self.measured_total:>12.6f}")
        for g in GROUPS:
            lines.append(f"{g:<28}{self.group_seconds[g]:>12.6f} ({self.group_percent[g]:.1f}%)")
        lines.append(f"frames: {self.frames}  fps: {self.fps:.2f}  network fps: {self.network_fps:.2f}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "seconds", "percent_of_measured"])
        for s in STAGES:
            w.writerow([s, f"{self.stage_means[s]:.9f}", f"{100 * self.stage_means[s] / self.measured_total:.3f}"])
        w.writerow(["sum", f"{self.stage_sum:.9f}", f"{100 * self.stage_sum / self.measured_total:.3f}"])
        w.writerow(["measured_total", f"{self.measured_total:.9f}", "100.000"])
        for g in GROUPS:
            w.writerow([g, f"{self.group_seconds[g]:.9f}", f"{self.group_percent[g]:.3f}"])
        return buf.getvalue()


def aggregate_timings(samples, measured_totals=None) -> TimingReport:
    """Average stage timings per frame; percentages are relative to the measured total.

    ``measured_totals`` holds one end-to-end duration per sample (covering the
    same frames); when omitted the stage sum is used.
    """
    samples = list(samples)
    if not samples:
        raise ParameterError("aggregate_timings needs at least one sample")
    if measured_totals is None:
        measured_totals = [s.total for s in samples]
    measured_totals = list(measured_totals)
    if len(measured_totals) != len(samples):
        raise ParameterError("one measured total per sample is required")

    frames = sum(s.frames for s in samples)
    means = {st: sum(getattr(s, st) for s in samples) / frames for st in STAGES}
    stage_sum = sum(means.values())
    measured = sum(measured_totals) / frames
    if measured <= 0:
        raise ParameterError("measured total must be positive")
    if stage_sum > measured * (1 + 1e-9):
        raise ParameterError(f"stage sum {stage_sum:g} exceeds measured total {measured:g}")
    group_seconds = {g: sum(means[s] for s in members) for g, members in GROUPS.items()}
    group_percent = {g: 100.0 * v / measured for g, v in group_seconds.items()}
    return TimingReport(means, stage_sum, measured, group_seconds, group_percent, frames)


def reference_timing() -> TimingReport:
    """Report built from the reference V5 stage latencies."""
    return aggregate_timings([StageTiming(**REFERENCE_STAGE_SECONDS)], [REFERENCE_MEASURED_TOTAL])
