"""Command-line entry point: ``qsiam {track,bench,dse,profile,gen-weights}``.

Exit codes: 0 success, 2 bad arguments or paths, 3 unreadable input data
(frames, ground truth, weight containers), 1 anything else.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import cv2

from . import perfmodel
from .errors import ContainerError, FoldingError, IngestionError, ParameterError, QSiamError
from .metrics import run_benchmark
from .profiling import aggregate_timings, reference_timing
from .sequences import load_sequence, write_results, write_text_atomic
from .siamnet import canonical_network, gen_random_weights, load_weights, param_count, save_weights
from .tracker import SiamFCTracker, StubExtractor, TrackerConfig, make_extractor

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_INGESTION = 3

log = logging.getLogger("qsiam")


class UsageError(QSiamError):
    pass


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a JSON object")
    return data


def tracker_config(args) -> TrackerConfig:
    conf = _load_config(args.config)
    section = conf.get("tracker", {k: v for k, v in conf.items() if k not in ("folding", "clock_hz")})
    known = {f.name for f in dataclasses.fields(TrackerConfig)}
    unknown = set(section) - known
    if unknown:
        raise UsageError(f"unknown tracker config keys: {sorted(unknown)}")
    if args.scales is not None:
        section = {**section, "num_scales": args.scales}
    try:
        return TrackerConfig(**section)
    except (TypeError, ParameterError) as exc:
        raise UsageError(f"bad tracker config: {exc}") from exc


def _clock(args) -> float:
    if args.clock_hz is not None:
        return args.clock_hz
    conf = _load_config(args.config)
    return float(conf.get("clock_hz", conf.get("folding", {}).get("clock_hz", perfmodel.DEFAULT_CLOCK_HZ)))


def _weights(args):
    if args.weights is None:
        return gen_random_weights(canonical_network(), args.seed)
    path = Path(args.weights)
    if not path.is_file():
        raise UsageError(f"weights file {path} does not exist")
    return load_weights(path)


def _output_dir(args) -> Path:
    out = Path(args.output)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _extractor(args):
    if args.tracker == "stub":
        return StubExtractor()
    return make_extractor(_weights(args))


def _dump_frames(out_dir: Path, frames, boxes) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, (path, box) in enumerate(zip(frames, boxes)):
        img = cv2.imread(str(path), cv2.IMREAD_COLOR)
        x, y, w, h = box.to_xywh()
        cv2.rectangle(img, (int(round(x)), int(round(y))), (int(round(x + w)), int(round(y + h))),
                      (0, 255, 0), 2)
        cv2.imwrite(str(out_dir / f"{i:08d}.png"), img)


def _run_track(args):
    cfg = tracker_config(args)
    seq_dir = Path(args.sequence)
    if not seq_dir.is_dir():
        raise UsageError(f"sequence directory {seq_dir} does not exist")
    extractor = _extractor(args)
    out = _output_dir(args)
    seq = load_sequence(seq_dir)
    records: list = []
    tracker = SiamFCTracker(extractor, cfg)
    boxes = tracker.track(seq.frames, seq.groundtruth[0], records)
    return cfg, seq, boxes, records, out


def cmd_track(args) -> int:
    cfg, seq, boxes, records, out = _run_track(args)
    result_path = out / f"{seq.name}.txt"
    write_results(result_path, boxes)
    print(f"{seq.name}: {len(boxes)} frames, {cfg.num_scales} scale(s) -> {result_path}")
    if records and not args.no_timing:
        report = aggregate_timings([r[0] for r in records], [r[1] for r in records])
        write_text_atomic(out / f"{seq.name}_timing.txt", report.to_text() + "\n")
        write_text_atomic(out / f"{seq.name}_timing.csv", report.to_csv())
        print(report.to_text())
    if args.dump_frames:
        _dump_frames(out / f"{seq.name}_frames", seq.frames, boxes)
    return EXIT_OK


def cmd_profile(args) -> int:
    if args.reference:
        report = reference_timing()
        name = "reference"
    else:
        if args.sequence is None:
            raise UsageError("profile needs a sequence directory or --reference")
        _, seq, _, records, _ = _run_track(args)
        if not records:
            raise UsageError("profiling needs at least two frames")
        report = aggregate_timings([r[0] for r in records], [r[1] for r in records])
        name = seq.name
    out = _output_dir(args)
    write_text_atomic(out / f"profile_{name}.txt", report.to_text() + "\n")
    write_text_atomic(out / f"profile_{name}.csv", report.to_csv())
    print(report.to_text())
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = tracker_config(args)
    dataset = Path(args.dataset)
    if not dataset.is_dir():
        raise UsageError(f"dataset directory {dataset} does not exist")
    weights = _weights(args) if args.tracker == "siamfc" else None
    report = run_benchmark(dataset, weights, cfg, tracker=args.tracker, skip_first=args.skip_first)
    out = _output_dir(args)
    timing = not args.no_timing
    write_text_atomic(out / "bench.txt", report.to_text(timing) + "\n")
    write_text_atomic(out / "bench.csv", report.to_csv(timing))
    print(report.to_text(timing))
    return EXIT_OK


def _int_list(text: str | None):
    if text is None:
        return None
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated integer list, got {text!r}") from None


def cmd_dse(args) -> int:
    spec = canonical_network()
    clock = _clock(args)
    out = _output_dir(args)
    if args.configs == "measured":
        rows, fit = perfmodel.calibrated_reference(spec, clock)
        calib = perfmodel.load_calibration()
        if args.budget is not None:
            rows = [(c, e) for c, e in rows if e.resource_units <= args.budget]
        table = [(c.name, c, e) for c, e in rows]
        print(f"energy fit: watts = {fit.p_base:.4f} + {fit.alpha:.6g} * units")
        print(f"{'name':<6}{'model fps':>11}{'meas fps':>10}{'units':>8}{'fit W':>8}{'meas W':>8}{'W/fps':>8}")
        measured = {r.name: r for r in calib.rows}
        for name, _, e in table:
            m = measured[name]
            print(f"{name:<6}{e.latency_fps:>11.2f}{m.fps:>10.2f}{e.resource_units:>8d}"
                  f"{e.energy_watts:>8.3f}{m.watts:>8.2f}{m.watts / m.fps:>8.4f}")
    else:
        fit = None
        if args.fit_energy:
            _, fit = perfmodel.calibrated_reference(spec, clock)
        front = perfmodel.explore(spec, args.budget, _int_list(args.pe), _int_list(args.simd), clock_hz=clock)
        table = []
        for i, (c, e) in enumerate(front):
            if fit is not None:
                e = dataclasses.replace(e, energy_watts=fit.predict(e.resource_units))
            table.append((f"P{i + 1}", c, e))
        print(f"pareto front: {len(table)} configurations"
              + ("" if args.budget is None else f" within {args.budget} units"))
        for name, c, e in table:
            print(f"{name:<6}{c.label():<44}{e.latency_fps:>9.2f} fps{e.resource_units:>8d} units")
    write_text_atomic(out / "dse.csv", perfmodel.estimates_csv(table))
    return EXIT_OK


def cmd_gen_weights(args) -> int:
    spec = canonical_network()
    weights = gen_random_weights(spec, args.seed)
    path = Path(args.path)
    try:
        save_weights(weights, path)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc}") from exc
    print(f"parameters: {param_count(spec)}")
    print(f"wrote {path} (seed {args.seed})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with TrackerConfig fields and/or clock_hz")
    common.add_argument("--output", default="qsiam_out", help="output directory (default: qsiam_out)")
    common.add_argument("--seed", type=int, default=0, help="seed for synthetic weights")
    common.add_argument("--scales", type=int, choices=(1, 3), default=None)
    common.add_argument("--clock-hz", type=float, default=None)
    common.add_argument("--no-timing", action="store_true", help="omit wall-clock fields from outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="qsiam", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("track", parents=[common], help="track one sequence")
    p.add_argument("sequence")
    p.add_argument("--weights", help="QSIAM1 weight container (default: random weights from --seed)")
    p.add_argument("--tracker", choices=("network", "stub"), default="network")
    p.add_argument("--dump-frames", action="store_true", help="write annotated frames")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("bench", parents=[common], help="one-pass evaluation over a dataset")
    p.add_argument("dataset")
    p.add_argument("--weights")
    p.add_argument("--tracker", choices=("siamfc", "stub", "oracle"), default="siamfc")
    p.add_argument("--skip-first", action="store_true", help="exclude the initialisation frame from AO")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("dse", parents=[common], help="folding design-space exploration")
    p.add_argument("--budget", type=int, default=None, help="resource-unit budget")
    p.add_argument("--configs", choices=("explore", "measured"), default="explore")
    p.add_argument("--pe", help="comma-separated PE candidates (default: all divisors)")
    p.add_argument("--simd", help="comma-separated SIMD candidates (default: all divisors)")
    p.add_argument("--fit-energy", action="store_true", help="add fitted watts to the front")
    p.set_defaults(func=cmd_dse)

    p = sub.add_parser("profile", parents=[common], help="per-stage latency breakdown")
    p.add_argument("sequence", nargs="?")
    p.add_argument("--weights")
    p.add_argument("--tracker", choices=("network", "stub"), default="network")
    p.add_argument("--reference", action="store_true", help="use the reference V5 stage latencies")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("gen-weights", parents=[common], help="write deterministic synthetic weights")
    p.add_argument("path")
    p.set_defaults(func=cmd_gen_weights)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, FoldingError) as exc:
        print(f"qsiam: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestionError, ContainerError) as exc:
        print(f"qsiam: error: {exc}", file=sys.stderr)
        return EXIT_INGESTION
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"qsiam: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
