"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line."""
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from acceptance_report import record
from oracles import bn_quant_float, conv2d_same_naive, near_rounding_boundary, pareto_bruteforce, xcorr_naive
from qsiam.cli import main
from qsiam.metrics import SequenceResult, iou, mao, run_benchmark
from qsiam.perfmodel import (
    divisors,
    dominates,
    enumerate_configs,
    estimate,
    explore,
    fit_energy,
    layer_candidate_sets,
    layer_cycles,
    layer_units,
    load_calibration,
    reference_configs,
)
from qsiam.profiling import REFERENCE_GROUP_PERCENT, reference_timing
from qsiam.qtensor import (
    ThresholdSet,
    batchnorm_thresholds,
    conv2d_same,
    dequantize,
    quantize,
    signed_range,
    threshold_activate,
)
from qsiam.siamnet import canonical_network, pack_image, param_count
from qsiam.synthetic import translating_square, write_sequence
from qsiam.tracker import (
    StubExtractor,
    TrackerConfig,
    cross_correlate,
    hann_window,
    penalize_and_locate,
    track_sequence,
    upsample_score,
)

MEASURED_FPS = [38.46, 40.24, 41.31, 42.16, 49.03, 49.63]
LUT_PCT = [40.45, 42.25, 46.66, 48.72, 66.87, 91.27]
WATTS = [4.5, 4.56, 4.81, 4.92, 5.5, 6.79]


def _gate(number, title, checks, elapsed, limit):
    """checks: list of (name, ok, detail)."""
    checks = checks + [("runtime", elapsed < limit, f"{elapsed:.3g}s < {limit:g}s")]
    failed = [f"{name} ({detail})" for name, ok, detail in checks if not ok]
    ok = not failed
    detail = "; ".join(d for _, _, d in checks) if ok else "failed: " + "; ".join(failed)
    record(number, title, ok, detail)
    assert ok, detail


def test_criterion_01_parameter_count():
    spec = canonical_network()
    t0 = time.perf_counter()
    n = param_count(spec)
    elapsed = time.perf_counter() - t0
    ratio = 3747200 / n
    _gate(1, "parameter count", [
        ("count", n == 554688, f"count {n}"),
        ("ratio", 6.7 < ratio < 6.8, f"ratio {ratio:.3f}"),
    ], elapsed, 1e-3)


def test_criterion_02_shape_chain(branch):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    roi = branch.forward(pack_image(rng.integers(0, 256, (238, 238, 3), dtype=np.uint8)))
    ex = branch.forward(pack_image(rng.integers(0, 256, (110, 110, 3), dtype=np.uint8)))
    score = cross_correlate(roi, ex)
    up = upsample_score(score)
    elapsed = time.perf_counter() - t0
    _gate(2, "shape chain", [
        ("roi", roi.dims == (128, 29, 29), f"roi {roi.dims}"),
        ("exemplar", ex.dims == (128, 13, 13), f"exemplar {ex.dims}"),
        ("score", score.shape == (17, 17), f"score {score.shape}"),
        ("upsampled", up.shape == (272, 272), f"upsampled {up.shape}"),
    ], elapsed, 30.0)


def test_criterion_03_kernel_oracles():
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    conv_bad = xcorr_bad = 0
    instances = 1000
    for _ in range(instances):
        c, f = rng.integers(1, 5, size=2)
        h, w = rng.integers(1, 9, size=2)
        x = rng.integers(-128, 128, (c, h, w))
        k = rng.integers(-128, 128, (f, c, 3, 3))
        conv_bad += not np.array_equal(conv2d_same(x, k), conv2d_same_naive(x, k))
        kh, kw = rng.integers(1, h + 1), rng.integers(1, w + 1)
        e = rng.integers(-128, 128, (c, kh, kw))
        xcorr_bad += not np.array_equal(cross_correlate(x, e), xcorr_naive(x, e))
    elapsed = time.perf_counter() - t0
    _gate(3, "kernel oracles", [
        ("conv2d_same", conv_bad == 0, f"conv mismatches {conv_bad}/{instances}"),
        ("cross_correlate", xcorr_bad == 0, f"xcorr mismatches {xcorr_bad}/{instances}"),
    ], elapsed, 60.0)


def test_criterion_04_quantization():
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    worst = 0.0
    for bits in range(2, 9):
        scale = float(rng.uniform(1e-3, 1.0))
        x = rng.uniform(-2, 2, 100_000) * scale * 2 ** bits
        lo, hi = signed_range(bits)
        err = np.abs(dequantize(quantize(x, bits, scale)) - np.clip(x, lo * scale, hi * scale))
        worst = max(worst, float(err.max() / scale))

    c = 32
    gamma = rng.uniform(0.2, 2.0, c) * np.where(rng.random(c) < 0.3, -1, 1)
    beta, mean, std = rng.normal(0, 0.5, c), rng.normal(0, 2.0, c), rng.uniform(0.5, 3.0, c)
    acc = rng.integers(-3000, 3000, (c, 40, 40))
    thr, signs = batchnorm_thresholds(gamma, beta, mean, std, 0.01, 4, 0.25)
    got = threshold_activate(acc * signs[:, None, None], thr).data
    want, z = bn_quant_float(acc, 0.01, gamma, beta, mean, std, 4, 0.25)
    ok = ~near_rounding_boundary(z)
    mism = int(np.sum(got[ok] != want[ok]))
    elapsed = time.perf_counter() - t0
    _gate(4, "quantization bound", [
        ("bound", worst <= 0.5 + 1e-12, f"max error {worst:.4f} x scale"),
        ("thresholds", mism == 0, f"threshold mismatches {mism}/{int(ok.sum())}"),
    ], elapsed, 60.0)


def test_criterion_05_dse_ordering(spec):
    t0 = time.perf_counter()
    fps = [estimate(spec, c).latency_fps for c in reference_configs()]
    rho = spearmanr(fps, MEASURED_FPS)[0]
    elapsed = time.perf_counter() - t0
    increasing = all(a < b for a, b in zip(fps, fps[1:]))
    _gate(5, "DSE ordering", [
        ("increasing", increasing, "fps " + ", ".join(f"{v:.2f}" for v in fps)),
        ("spearman", rho == pytest.approx(1.0), f"spearman {rho:.3f}"),
    ], elapsed, 1.0)


def test_criterion_06_resource_ordering(spec):
    t0 = time.perf_counter()
    units = [estimate(spec, c).resource_units for c in reference_configs()]
    elapsed = time.perf_counter() - t0
    same = list(np.argsort(units, kind="stable")) == list(np.argsort(LUT_PCT, kind="stable"))
    strict = all(a < b for a, b in zip(units, units[1:]))
    _gate(6, "resource ordering", [
        ("ordering", same and strict, "units " + ", ".join(map(str, units))),
    ], elapsed, 1.0)


def test_criterion_07_energy_fit(spec):
    t0 = time.perf_counter()
    ests = [estimate(spec, c) for c in reference_configs()]
    calib = load_calibration()
    fit = fit_energy(calib, ests)
    pred = fit.predict([e.resource_units for e in ests])
    rel = np.abs(pred - np.array(WATTS)) / np.array(WATTS)
    elapsed = time.perf_counter() - t0
    _gate(7, "energy fit", [
        ("fixture", list(calib.column("watts")) == WATTS, "watts fixture"),
        ("band", bool(np.all(rel <= 0.05)), f"max deviation {100 * rel.max():.2f}%"),
    ], elapsed, 1.0)


def test_criterion_08_stage_latency_breakdown():
    t0 = time.perf_counter()
    r = reference_timing()
    elapsed = time.perf_counter() - t0
    checks = [
        ("sum", abs(r.stage_sum - 0.0546) < 5e-5, f"sum {r.stage_sum:.4f}s"),
        ("fps", abs(r.fps - 17.0) <= 0.1, f"fps {r.fps:.2f}"),
    ]
    for group, ref_pct in REFERENCE_GROUP_PERCENT.items():
        got = r.group_percent[group]
        checks.append((group, abs(got - ref_pct) <= 1.5, f"{group} {got:.2f}% vs {ref_pct:g}%"))
    _gate(8, "stage latency table", checks, elapsed, 1.0)


def test_criterion_09_tracker_logic(tmp_path):
    t0 = time.perf_counter()
    frames, gt = translating_square(n_frames=50)
    out = track_sequence(frames, gt[0], StubExtractor())
    err = float(np.mean([np.hypot(a.cx - b.cx, a.cy - b.cy) for a, b in zip(out, gt)]))
    final = iou(out[-1], gt[-1])
    write_sequence(tmp_path / "square", frames, gt)
    oracle = run_benchmark(tmp_path, tracker="oracle").mao
    elapsed = time.perf_counter() - t0
    _gate(9, "tracker logic", [
        ("center error", err <= 3.0, f"mean center error {err:.2f}px"),
        ("final iou", final >= 0.5, f"final IoU {final:.3f}"),
        ("oracle", oracle == 1.0, f"oracle mAO {oracle:.3f}"),
    ], elapsed, 60.0)


def test_criterion_10_determinism(tmp_path):
    t0 = time.perf_counter()
    blobs = []
    for name in ("a", "b"):
        assert main(["gen-weights", str(tmp_path / f"{name}.qsiam"), "--seed", "11"]) == 0
        blobs.append((tmp_path / f"{name}.qsiam").read_bytes())
    frames, gt = translating_square(n_frames=6, velocity=(1.5, 1.0))
    seq = write_sequence(tmp_path / "seq", frames, gt)
    results = []
    for run in ("r1", "r2"):
        code = main(["track", str(seq), "--weights", str(tmp_path / "a.qsiam"), "--no-timing",
                     "--output", str(tmp_path / run)])
        assert code == 0
        results.append((tmp_path / run / "seq.txt").read_bytes())
    elapsed = time.perf_counter() - t0
    _gate(10, "determinism", [
        ("weights", blobs[0] == blobs[1], "gen-weights byte-identical"),
        ("track", results[0] == results[1], "track results byte-identical"),
    ], elapsed, 60.0)


# property checks for criterion 11; each returns after running its examples

_N = 272


def _peak(y, x):
    yy, xx = np.mgrid[0:_N, 0:_N]
    return np.exp(-((yy - y) ** 2 + (xx - x) ** 2) / 800.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(20, 250), st.floats(20, 250), st.floats(1e-3, 1e3), st.floats(0, 0.9))
def _argmax_scale_invariance(y, x, k, wi):
    cfg = TrackerConfig(num_scales=1, window_influence=wi)
    win = hann_window(_N)
    m = _peak(y, x)
    assert penalize_and_locate([m], win, cfg)[1] == pytest.approx(penalize_and_locate([k * m], win, cfg)[1])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.lists(st.floats(0, 1), min_size=1, max_size=20), st.integers()), min_size=1,
                max_size=8))
def _mao_reordering(specs):
    results = [SequenceResult(str(i), tuple(v)) for i, (v, _) in enumerate(specs)]
    perm = sorted(range(len(results)), key=lambda i: specs[i][1])
    assert mao(results) == pytest.approx(mao([results[i] for i in perm]), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.data())
def _folding_monotonicity(data):
    layer = data.draw(st.sampled_from(canonical_network().layers))
    pes, simds = divisors(layer.out_channels), divisors(layer.fan_in)
    pe, simd = data.draw(st.sampled_from(pes)), data.draw(st.sampled_from(simds))
    pe2 = data.draw(st.sampled_from([p for p in pes if p >= pe]))
    simd2 = data.draw(st.sampled_from([s for s in simds if s >= simd]))
    for bigger in ((pe2, simd), (pe, simd2)):
        assert layer_cycles(layer, bigger, 29, 29) <= layer_cycles(layer, (pe, simd), 29, 29)
        assert layer_units(layer, bigger) >= layer_units(layer, (pe, simd))


@settings(max_examples=20, deadline=None)
@given(st.data())
def _pareto_non_dominance(data):
    spec = canonical_network()
    cands = []
    for layer in spec.layers:
        pes, simds = divisors(layer.out_channels), divisors(layer.fan_in)
        k = data.draw(st.integers(1, 3))
        cands.append([(data.draw(st.sampled_from(pes)), data.draw(st.sampled_from(simds))) for _ in range(k)])
    front = explore(spec, layer_candidates=cands)
    ests = [e for _, e in front]
    assert not any(dominates(a, b) for a in ests for b in ests if a is not b)
    points = [(e.latency_cycles, e.resource_units, None)
              for e in (estimate(spec, c) for c in enumerate_configs(spec, layer_candidate_sets(
                  spec, layer_candidates=cands)))]
    assert [(e.latency_cycles, e.resource_units) for e in ests] == pareto_bruteforce(points)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def _threshold_monotonicity(seed):
    r = np.random.default_rng(seed)
    thr = ThresholdSet(np.sort(r.integers(-500, 500, (4, 15)), axis=1), out_bits=4)
    a = r.integers(-600, 600, (4, 5, 5))
    b = a + r.integers(0, 300, a.shape)
    assert np.all(threshold_activate(a, thr).data <= threshold_activate(b, thr).data)


def test_criterion_11_property_suites():
    t0 = time.perf_counter()
    checks = []
    for name, prop in [
        ("correlation scale-argmax invariance", _argmax_scale_invariance),
        ("mao reordering invariance", _mao_reordering),
        ("folding monotonicity", _folding_monotonicity),
        ("pareto non-dominance", _pareto_non_dominance),
        ("threshold monotonicity", _threshold_monotonicity),
    ]:
        try:
            prop()
            checks.append((name, True, name))
        except AssertionError as exc:
            checks.append((name, False, f"{name}: {str(exc).splitlines()[0] if str(exc) else 'assertion'}"))
    elapsed = time.perf_counter() - t0
    _gate(11, "property suites", checks, elapsed, 300.0)
