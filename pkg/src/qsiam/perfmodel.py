"""Analytical cost model of a layer-per-stage dataflow accelerator.

Each convolution is a matrix-vector unit folded by (PE, SIMD): PE output
channels and SIMD terms of the 3x3xC input window are processed per cycle,
so a layer needs ``H*W * (9C/SIMD) * (F/PE)`` cycles per image.
Single-input latency is the sum over layers, fully pipelined throughput is
bounded by the slowest layer. ``resource_units`` is an arithmetic-cost proxy:
sum of PE*SIMD multipliers weighted by weight bit-width relative to 4 bits.
"""
from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

from .errors import FitError, FoldingError, ParameterError
from .siamnet import LayerSpec, NetworkSpec

DEFAULT_CLOCK_HZ = 1e8
UNIT_BITS = 4


def divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


@dataclass(frozen=True)
class FoldingConfig:
    folds: tuple[tuple[int, int], ...]
    clock_hz: float = DEFAULT_CLOCK_HZ
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "folds", tuple((int(p), int(s)) for p, s in self.folds))
        if self.clock_hz <= 0:
            raise ParameterError("clock_hz must be positive")

    def validate(self, spec: NetworkSpec) -> None:
        if len(self.folds) != len(spec.layers):
            raise FoldingError(f"{len(self.folds)} folds given for {len(spec.layers)} layers")
        for layer, fold in zip(spec.layers, self.folds):
            check_fold(layer, fold)

    def label(self) -> str:
        return ";".join(f"{p}x{s}" for p, s in self.folds)


def check_fold(layer: LayerSpec, fold: tuple[int, int]) -> None:
    pe, simd = fold
    if pe < 1 or simd < 1:
        raise FoldingError(f"{layer.name}: PE and SIMD must be >= 1, got ({pe}, {simd})")
    if layer.out_channels % pe:
        raise FoldingError(f"{layer.name}: PE={pe} does not divide {layer.out_channels} output channels")
    if layer.fan_in % simd:
        raise FoldingError(f"{layer.name}: SIMD={simd} does not divide the {layer.fan_in}-wide input window")


def layer_cycles(layer: LayerSpec, fold: tuple[int, int], out_h: int, out_w: int) -> int:
    check_fold(layer, fold)
    pe, simd = fold
    return out_h * out_w * (layer.fan_in // simd) * (layer.out_channels // pe)


def layer_units(layer: LayerSpec, fold: tuple[int, int]) -> int:
    pe, simd = fold
    return pe * simd * layer.weight_bits // UNIT_BITS


@dataclass(frozen=True)
class PerfEstimate:
    layer_cycles: tuple[int, ...]
    latency_cycles: int
    bottleneck_cycles: int
    bottleneck_layer: str
    latency_fps: float
    throughput_fps: float
    resource_units: int
    energy_watts: float | None = None


def estimate(spec: NetworkSpec, fold: FoldingConfig, energy: "EnergyFit | None" = None) -> PerfEstimate:
    """Per-frame cost on the search-region branch (the exemplar runs once per sequence)."""
    fold.validate(spec)
    sizes = spec.conv_output_sizes(spec.roi_input)
    cycles = tuple(layer_cycles(l, f, h, w) for l, f, (h, w) in zip(spec.layers, fold.folds, sizes))
    units = sum(layer_units(l, f) for l, f in zip(spec.layers, fold.folds))
    latency = sum(cycles)
    worst = int(np.argmax(cycles))
    return PerfEstimate(
        layer_cycles=cycles,
        latency_cycles=latency,
        bottleneck_cycles=cycles[worst],
        bottleneck_layer=spec.layers[worst].name,
        latency_fps=fold.clock_hz / latency,
        throughput_fps=fold.clock_hz / cycles[worst],
        resource_units=units,
        energy_watts=None if energy is None else energy.predict(units),
    )


@dataclass(frozen=True)
class CalibrationRow:
    name: str
    fps: float
    lut_pct: float
    ff_pct: float
    bram_pct: float
    lutram_pct: float
    watts: float


@dataclass(frozen=True)
class CalibrationTable:
    rows: tuple[CalibrationRow, ...]
    version: int = 1

    @property
    def names(self) -> list[str]:
        return [r.name for r in self.rows]

    def column(self, field: str) -> np.ndarray:
        return np.array([getattr(r, field) for r in self.rows], dtype=np.float64)


def _read_data_csv(filename: str) -> list[dict]:
    text = resources.files("qsiam").joinpath("data", filename).read_text()
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    return list(csv.DictReader(lines))


def load_calibration() -> CalibrationTable:
    rows = []
    for rec in _read_data_csv("measured_v1.csv"):
        rows.append(CalibrationRow(rec["name"], *(float(rec[k]) for k in
                                                  ("fps", "lut_pct", "ff_pct", "bram_pct", "lutram_pct", "watts"))))
    return CalibrationTable(tuple(rows))


def reference_configs(clock_hz: float = DEFAULT_CLOCK_HZ) -> list[FoldingConfig]:
    """The six measured folding configurations V1..V6."""
    configs = []
    for rec in _read_data_csv("folding_v1.csv"):
        name = rec.pop("name")
        folds = [tuple(int(v) for v in rec[k].split("x")) for k in sorted(rec)]
        configs.append(FoldingConfig(tuple(folds), clock_hz, name))
    return configs


@dataclass(frozen=True)
class EnergyFit:
    p_base: float
    alpha: float
    residuals: tuple[float, ...]

    def predict(self, units) -> float | np.ndarray:
        out = self.p_base + self.alpha * np.asarray(units, dtype=np.float64)
        return float(out) if out.ndim == 0 else out


def fit_energy(calib: CalibrationTable, estimates: Sequence[PerfEstimate]) -> EnergyFit:
    """Least-squares ``watts = p_base + alpha * resource_units``."""
    y = calib.column("watts")
    x = np.array([e.resource_units for e in estimates], dtype=np.float64)
    if x.shape != y.shape:
        raise FitError(f"{len(x)} estimates for {len(y)} calibration rows")
    if len(x) < 2 or np.all(x == x[0]):
        raise FitError("degenerate fit: resource units are all equal")
    xm, ym = x.mean(), y.mean()
    alpha = float(np.sum((x - xm) * (y - ym)) / np.sum((x - xm) ** 2))
    p_base = float(ym - alpha * xm)
    residuals = tuple(float(r) for r in (p_base + alpha * x) - y)
    return EnergyFit(p_base, alpha, residuals)


def calibrated_reference(spec: NetworkSpec, clock_hz: float = DEFAULT_CLOCK_HZ):
    """Estimates for V1..V6 with watts from the energy fit; returns (rows, fit)."""
    configs = reference_configs(clock_hz)
    ests = [estimate(spec, c) for c in configs]
    fit = fit_energy(load_calibration(), ests)
    rows = [(c, estimate(spec, c, fit)) for c in configs]
    return rows, fit


def layer_candidate_sets(spec: NetworkSpec, pe_candidates: Iterable[int] | None = None,
                         simd_candidates: Iterable[int] | None = None,
                         layer_candidates: Sequence[Iterable[tuple[int, int]]] | None = None
                         ) -> list[list[tuple[int, int]]]:
    """Valid (PE, SIMD) pairs per layer, sorted.

    Either explicit per-layer pair lists, or global PE/SIMD sets (default:
    all divisors) applied to every layer; pairs that do not fold evenly are
    dropped.
    """
    pe_candidates = None if pe_candidates is None else list(pe_candidates)
    simd_candidates = None if simd_candidates is None else list(simd_candidates)
    out = []
    for i, layer in enumerate(spec.layers):
        if layer_candidates is not None:
            pairs = set(tuple(p) for p in layer_candidates[i])
        else:
            pes = divisors(layer.out_channels) if pe_candidates is None else pe_candidates
            simds = divisors(layer.fan_in) if simd_candidates is None else simd_candidates
            pairs = set(itertools.product(pes, simds))
        valid = []
        for pair in pairs:
            try:
                check_fold(layer, pair)
            except FoldingError:
                continue
            valid.append((int(pair[0]), int(pair[1])))
        out.append(sorted(valid))
    return out


def enumerate_configs(spec: NetworkSpec, candidates: list[list[tuple[int, int]]],
                      clock_hz: float = DEFAULT_CLOCK_HZ):
    """Every combination of per-layer candidates (exponential; for small sets)."""
    for folds in itertools.product(*candidates):
        yield FoldingConfig(tuple(folds), clock_hz)


def explore(spec: NetworkSpec, resource_budget: int | None = None,
            pe_candidates: Iterable[int] | None = None,
            simd_candidates: Iterable[int] | None = None,
            layer_candidates: Sequence[Iterable[tuple[int, int]]] | None = None,
            clock_hz: float = DEFAULT_CLOCK_HZ) -> list[tuple[FoldingConfig, PerfEstimate]]:
    """Pareto front of (max latency fps, min resource units) within a budget.

    Both objectives are sums of per-layer terms, so the front is built layer
    by layer, discarding dominated partial configurations; the result equals
    the front of the full cartesian product. Ordered by increasing resource
    units; exact ties are broken by candidate order, so the result is
    deterministic.
    """
    budget = np.inf if resource_budget is None else resource_budget
    cands = layer_candidate_sets(spec, pe_candidates, simd_candidates, layer_candidates)
    if any(not c for c in cands):
        return []
    sizes = spec.conv_output_sizes(spec.roi_input)

    cyc = np.zeros(1, dtype=np.int64)
    units = np.zeros(1, dtype=np.int64)
    parents: list[np.ndarray] = []
    choices: list[np.ndarray] = []
    for layer, pairs, (h, w) in zip(spec.layers, cands, sizes):
        oc = np.array([layer_cycles(layer, p, h, w) for p in pairs], dtype=np.int64)
        ou = np.array([layer_units(layer, p) for p in pairs], dtype=np.int64)
        c_all = (cyc[:, None] + oc[None, :]).ravel()
        u_all = (units[:, None] + ou[None, :]).ravel()
        flat = np.arange(c_all.size)
        ok = u_all <= budget
        c_all, u_all, flat = c_all[ok], u_all[ok], flat[ok]
        if c_all.size == 0:
            return []
        order = np.lexsort((flat, c_all, u_all))
        c_s = c_all[order]
        best_before = np.concatenate(([np.iinfo(np.int64).max], np.minimum.accumulate(c_s)[:-1]))
        keep = order[c_s < best_before]
        cyc, units = c_all[keep], u_all[keep]
        parents.append(flat[keep] // len(pairs))
        choices.append(flat[keep] % len(pairs))

    front = []
    for k in range(cyc.size):
        folds = []
        idx = k
        for li in range(len(spec.layers) - 1, -1, -1):
            folds.append(cands[li][choices[li][idx]])
            idx = parents[li][idx]
        cfg = FoldingConfig(tuple(reversed(folds)), clock_hz)
        front.append((cfg, estimate(spec, cfg)))
    return front


def dominates(a: PerfEstimate, b: PerfEstimate) -> bool:
    """``a`` is at least as fast and as cheap as ``b`` and strictly better on one."""
    return (a.latency_fps >= b.latency_fps and a.resource_units <= b.resource_units
            and (a.latency_fps > b.latency_fps or a.resource_units < b.resource_units))


CSV_HEADER = ["name", "folding", "layer_cycles", "latency_cycles", "bottleneck_cycles",
              "fps", "throughput_fps", "units", "watts"]


def estimates_csv(rows: Iterable[tuple[str, FoldingConfig, PerfEstimate]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for name, cfg, est in rows:
        w.writerow([
            name,
            cfg.label(),
            ";".join(str(c) for c in est.layer_cycles),
            est.latency_cycles,
            est.bottleneck_cycles,
            f"{est.latency_fps:.4f}",
            f"{est.throughput_fps:.4f}",
            est.resource_units,
            "" if est.energy_watts is None else f"{est.energy_watts:.4f}",
        ])
    return buf.getvalue()
