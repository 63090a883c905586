import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from oracles import pareto_bruteforce
from qsiam.errors import FitError, FoldingError
from qsiam.perfmodel import (
    CSV_HEADER,
    CalibrationRow,
    CalibrationTable,
    FoldingConfig,
    calibrated_reference,
    divisors,
    dominates,
    enumerate_configs,
    estimate,
    estimates_csv,
    explore,
    fit_energy,
    layer_candidate_sets,
    layer_cycles,
    layer_units,
    load_calibration,
    reference_configs,
)

# frozen from an independent hand evaluation of the cycle formula
V1_LAYER_CYCLES = (1019592, 1019592, 1002528, 968832, 968832, 1937664)
LATENCY_CYCLES = [6917040, 5948208, 4979376, 4494960, 3267072, 2903760]
UNITS = [1344, 1472, 1728, 1984, 3264, 5312]
# np.linalg.lstsq on (UNITS, measured watts), computed outside the package
P_BASE, ALPHA = 3.76213439, 5.63241107e-04


@pytest.fixture(scope="module")
def refs(spec):
    return [(c, estimate(spec, c)) for c in reference_configs()]


class TestFixtures:
    def test_calibration_values(self):
        calib = load_calibration()
        assert calib.names == ["V1", "V2", "V3", "V4", "V5", "V6"]
        np.testing.assert_array_equal(calib.column("fps"), [38.46, 40.24, 41.31, 42.16, 49.03, 49.63])
        np.testing.assert_array_equal(calib.column("lut_pct"), [40.45, 42.25, 46.66, 48.72, 66.87, 91.27])
        np.testing.assert_array_equal(calib.column("watts"), [4.5, 4.56, 4.81, 4.92, 5.5, 6.79])
        assert calib.rows[0] == CalibrationRow("V1", 38.46, 40.45, 16.78, 46.31, 11.92, 4.5)

    def test_reference_configs(self, spec):
        cfgs = reference_configs()
        assert [c.name for c in cfgs] == ["V1", "V2", "V3", "V4", "V5", "V6"]
        assert cfgs[0].folds == ((32, 3), (32, 16), (16, 16), (8, 16), (8, 16), (8, 8))
        assert cfgs[5].folds == ((32, 3), (32, 16), (32, 16), (32, 32), (32, 32), (32, 32))
        for c in cfgs:
            c.validate(spec)


class TestCycles:
    def test_last_layer_v1(self, spec):
        assert layer_cycles(spec.layers[5], (8, 8), 29, 29) == 841 * 144 * 16 == 1937664

    def test_first_layer_v1(self, spec):
        assert layer_cycles(spec.layers[0], (32, 3), 238, 238) == 56644 * 9 * 2 == 1019592

    @pytest.mark.parametrize("i", range(6))
    def test_fully_parallel(self, spec, i):
        layer = spec.layers[i]
        assert layer_cycles(layer, (layer.out_channels, layer.fan_in), 17, 23) == 17 * 23

    def test_folding_error_names_layer(self, spec):
        with pytest.raises(FoldingError, match="conv1_1"):
            layer_cycles(spec.layers[0], (5, 3), 238, 238)
        with pytest.raises(FoldingError, match="conv5"):
            layer_cycles(spec.layers[5], (8, 7), 29, 29)
        with pytest.raises(FoldingError):
            FoldingConfig(((1, 1),) * 5).validate(spec)

    def test_v1_estimate(self, refs):
        cfg, est = refs[0]
        assert est.layer_cycles == V1_LAYER_CYCLES
        assert est.latency_cycles == 6917040
        assert est.bottleneck_layer == "conv5"
        assert est.bottleneck_cycles == 1937664

    def test_latency_sums(self, refs):
        assert [e.latency_cycles for _, e in refs] == LATENCY_CYCLES


class TestOrdering:
    def test_fps_strictly_increasing(self, refs):
        fps = [e.latency_fps for _, e in refs]
        assert all(a < b for a, b in zip(fps, fps[1:]))
        np.testing.assert_allclose(fps, [1e8 / c for c in LATENCY_CYCLES])

    def test_rank_agreement(self, refs):
        rho, _ = spearmanr([e.latency_fps for _, e in refs], load_calibration().column("fps"))
        assert rho == pytest.approx(1.0)

    def test_units_follow_lut(self, refs):
        units = [e.resource_units for _, e in refs]
        assert units == UNITS
        lut = load_calibration().column("lut_pct")
        assert list(np.argsort(units, kind="stable")) == list(np.argsort(lut, kind="stable"))
        assert refs[5][1].resource_units > refs[4][1].resource_units

    def test_invariants(self, refs):
        for cfg, est in refs:
            assert est.latency_fps <= est.throughput_fps
            assert est.resource_units >= sum(p * s for p, s in cfg.folds)


class TestEnergy:
    def test_table_fit_within_five_percent(self, refs):
        calib = load_calibration()
        fit = fit_energy(calib, [e for _, e in refs])
        watts = calib.column("watts")
        pred = fit.predict([e.resource_units for _, e in refs])
        assert np.max(np.abs(pred - watts) / watts) <= 0.05
        assert fit.p_base == pytest.approx(P_BASE, rel=1e-7)
        assert fit.alpha == pytest.approx(ALPHA, rel=1e-7)
        np.testing.assert_allclose(fit.residuals, pred - watts)

    def test_matches_lstsq(self, refs):
        x = np.array(UNITS, dtype=float)
        sol, *_ = np.linalg.lstsq(np.c_[np.ones_like(x), x], load_calibration().column("watts"), rcond=None)
        fit = fit_energy(load_calibration(), [e for _, e in refs])
        np.testing.assert_allclose([fit.p_base, fit.alpha], sol, rtol=1e-10)

    @staticmethod
    def _table(watts):
        return CalibrationTable(tuple(CalibrationRow(f"V{i}", 1, 1, 1, 1, 1, w) for i, w in enumerate(watts)))

    def test_exact_linear(self, refs):
        watts = [2.0 + 0.001 * u for u in UNITS]
        fit = fit_energy(self._table(watts), [e for _, e in refs])
        np.testing.assert_allclose(fit.residuals, 0, atol=1e-12)
        assert fit.p_base == pytest.approx(2.0) and fit.alpha == pytest.approx(0.001)

    def test_doubling_watts(self, refs):
        ests = [e for _, e in refs]
        base = fit_energy(load_calibration(), ests)
        doubled = fit_energy(self._table(2 * load_calibration().column("watts")), ests)
        assert doubled.p_base == pytest.approx(2 * base.p_base)
        assert doubled.alpha == pytest.approx(2 * base.alpha)

    def test_degenerate(self, refs):
        same = [refs[0][1]] * 6
        with pytest.raises(FitError):
            fit_energy(load_calibration(), same)

    def test_calibrated_reference(self, spec):
        rows, fit = calibrated_reference(spec)
        assert [c.name for c, _ in rows] == ["V1", "V2", "V3", "V4", "V5", "V6"]
        for (_, e), w in zip(rows, load_calibration().column("watts")):
            assert abs(e.energy_watts - w) / w <= 0.05


def _measured_candidates():
    per_layer = [set() for _ in range(6)]
    for cfg in reference_configs():
        for i, f in enumerate(cfg.folds):
            per_layer[i].add(f)
    return [sorted(s) for s in per_layer]


class TestExplore:
    def test_budget_below_minimum(self, spec):
        assert explore(spec, resource_budget=0) == []
        min_units = sum(layer_units(l, (1, 1)) for l in spec.layers)
        assert explore(spec, resource_budget=min_units - 1) == []
        assert len(explore(spec, resource_budget=min_units)) == 1

    def test_unlimited_contains_fully_parallel(self, spec):
        front = explore(spec)
        full = tuple((l.out_channels, l.fan_in) for l in spec.layers)
        assert front[-1][0].folds == full
        units = [e.resource_units for _, e in front]
        fps = [e.latency_fps for _, e in front]
        assert units == sorted(units) and fps == sorted(fps)
        assert len(set(units)) == len(units)

    def test_measured_candidates(self, spec, refs):
        cands = _measured_candidates()
        configs = {c.folds for c in enumerate_configs(spec, cands)}
        for cfg, _ in refs:
            assert cfg.folds in configs
        v5 = refs[4][1]
        assert not any(dominates(e, v5) for _, e in refs)

    def test_front_is_non_dominated(self, spec):
        front = explore(spec, resource_budget=4000, pe_candidates=[1, 4, 16, 64], simd_candidates=[1, 3, 9, 27])
        ests = [e for _, e in front]
        for a, b in itertools.permutations(ests, 2):
            assert not dominates(a, b)
        assert all(e.resource_units <= 4000 for e in ests)

    @settings(max_examples=25, deadline=None)
    @given(st.data())
    def test_matches_bruteforce(self, spec, data):
        cands = []
        for layer in spec.layers:
            pairs = list(itertools.product(divisors(layer.out_channels), divisors(layer.fan_in)))
            k = data.draw(st.integers(1, 3))
            idx = data.draw(st.lists(st.integers(0, len(pairs) - 1), min_size=k, max_size=k, unique=True))
            cands.append([pairs[i] for i in idx])
        budget = data.draw(st.one_of(st.none(), st.integers(0, 20000)))
        points = []
        for cfg in enumerate_configs(spec, layer_candidate_sets(spec, layer_candidates=cands)):
            e = estimate(spec, cfg)
            if budget is None or e.resource_units <= budget:
                points.append((e.latency_cycles, e.resource_units, cfg.folds))
        front = explore(spec, budget, layer_candidates=cands)
        assert [(e.latency_cycles, e.resource_units) for _, e in front] == pareto_bruteforce(points)

    def test_dominated_candidates_leave_front_unchanged(self, spec):
        cands = _measured_candidates()
        base = explore(spec, layer_candidates=cands)
        # per layer, cost depends only on PE*SIMD; same-product pairs are weakly dominated duplicates
        extra = [list(c) for c in cands]
        extra[1] += [(16, 32), (64, 8)]
        extra[5] += [(16, 16), (64, 8)]
        grown = explore(spec, layer_candidates=extra)
        key = lambda front: [(e.latency_cycles, e.resource_units) for _, e in front]
        assert key(grown) == key(base)

    def test_deterministic(self, spec):
        a = explore(spec, resource_budget=3000, pe_candidates=[2, 8, 32], simd_candidates=[3, 16])
        b = explore(spec, resource_budget=3000, pe_candidates=[32, 2, 8], simd_candidates=[16, 3])
        assert [c.folds for c, _ in a] == [c.folds for c, _ in b]


class TestMonotonicity:
    @settings(max_examples=200, deadline=None)
    @given(st.data())
    def test_raising_pe_or_simd(self, spec, data):
        i = data.draw(st.integers(0, 5))
        layer = spec.layers[i]
        pes, simds = divisors(layer.out_channels), divisors(layer.fan_in)
        pe, simd = data.draw(st.sampled_from(pes)), data.draw(st.sampled_from(simds))
        if data.draw(st.booleans()):
            bigger = (data.draw(st.sampled_from([p for p in pes if p >= pe])), simd)
        else:
            bigger = (pe, data.draw(st.sampled_from([s for s in simds if s >= simd])))
        assert layer_cycles(layer, bigger, 29, 29) <= layer_cycles(layer, (pe, simd), 29, 29)
        assert layer_units(layer, bigger) >= layer_units(layer, (pe, simd))

    @settings(max_examples=100, deadline=None)
    @given(st.data())
    def test_fps_bounds(self, spec, data):
        folds = tuple(
            (data.draw(st.sampled_from(divisors(l.out_channels))), data.draw(st.sampled_from(divisors(l.fan_in))))
            for l in spec.layers
        )
        cfg = FoldingConfig(folds, clock_hz=data.draw(st.floats(1e6, 1e9)))
        est = estimate(spec, cfg)
        assert est.latency_fps <= est.throughput_fps
        assert est.resource_units >= sum(p * s for p, s in folds)


def test_csv(refs):
    text = estimates_csv([(c.name, c, e) for c, e in refs])
    lines = text.splitlines()
    assert lines[0].split(",") == CSV_HEADER
    assert len(lines) == 7 and lines[1].startswith("V1,32x3;32x16;16x16;8x16;8x16;8x8,")
    assert estimates_csv([]) == ",".join(CSV_HEADER) + "\n"
