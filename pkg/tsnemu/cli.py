"""
Command-line front end of the TSN emulation toolkit
characterize -> schedule -> simulate -> validate -> report, plus a gate timeline dump

Exit codes: 0 success, 1 internal error, 2 configuration or input error,
3 infeasible schedule, 4 validation failure.
"""
import argparse
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd

from tsnemu.core.engine import (
    FaultInjection,
    TraceSet,
    characterization_report,
    characterization_trace,
    run,
    run_many,
)
from tsnemu.core.errors import (
    ConfigError,
    DurationTooShort,
    EmptySeries,
    HyperperiodOverflow,
    Infeasible,
    NoRoute,
    NonMonotonic,
    ScheduleIncomplete,
    TraceMismatch,
    UnknownPort,
)
from tsnemu.core.latency_model import (
    C3_ALLOCATIONS,
    PROBE_POINTS,
    PROFILE_NAMES,
    PlatformProfile,
    ProbeConfig,
    ProbeMethod,
    platform_profile,
)
from tsnemu.core.model import (
    NS_PER_US,
    dump_model,
    load_schedule,
    load_streams,
    load_topology,
    parse_duration,
    validate_topology,
)
from tsnemu.core.plots import write_box_plots
from tsnemu.core.profiler import FIGURES, figure_series, pass_through, summarize, summary_frame, write_pass_through_csv
from tsnemu.core.scheduler import NetworkParams, check_schedule, synthesize, validate_against_trace
from tsnemu.core.settings import configure_logging, get_settings
from tsnemu.core.tas import gate_timeline

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_VALIDATION = 4

# pydantic validation and pandas parse errors are ValueErrors
INPUT_ERRORS = (ConfigError, NoRoute, HyperperiodOverflow, ScheduleIncomplete, DurationTooShort, TraceMismatch,
                NonMonotonic, EmptySeries, UnknownPort, OSError, ValueError)


def _duration(text: str) -> int:
    try:
        return parse_duration(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _port_file_name(port: str) -> str:
    return port.replace("->", "-")


def _out_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out or get_settings().output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args: argparse.Namespace) -> int:
    return args.seed if args.seed is not None else get_settings().default_seed


def _probe_config(overrides: Optional[Sequence[str]]) -> ProbeConfig:
    """Apply POINT=METHOD or POINT=off overrides to the default probe set"""
    config = ProbeConfig()
    for item in overrides or []:
        point, _, value = item.partition("=")
        point = point.strip().upper()
        if point not in PROBE_POINTS or not value:
            raise ConfigError(f"invalid probe override {item!r}; expected e.g. T2=M3 or T3=off")
        if value.lower() == "off":
            config = config.with_point(point, enabled=False)
        else:
            try:
                method = ProbeMethod(value.upper())
            except ValueError:
                raise ConfigError(f"unknown probe method {value!r}") from None
            config = config.with_point(point, enabled=True, method=method)
    return config


def _profile(args: argparse.Namespace) -> PlatformProfile:
    if getattr(args, "latency_model", None):
        return PlatformProfile.model_validate_json(Path(args.latency_model).read_text())
    return platform_profile(args.profile, args.allocation)


def _parse_fault(text: Optional[str]) -> Optional[FaultInjection]:
    if not text:
        return None
    parts = text.split(":")
    if len(parts) != 4:
        raise ConfigError(f"invalid fault {text!r}; expected STREAM:SEQ:PORT:DELAY")
    stream_id, seq, port, delay = parts
    return FaultInjection(stream_id=int(stream_id), seq=int(seq), port=port, delay=parse_duration(delay))


def cmd_characterize(args: argparse.Namespace) -> int:
    if args.frames < 1:
        raise ConfigError("frames must be >= 1")
    profile = _profile(args)
    probes = _probe_config(args.probe)
    out = _out_dir(args)

    print(f"=== Characterizing {profile.name} with {args.frames} frames ===")
    traces = characterization_trace(profile, args.frames, _seed(args), probes, args.frame_size)
    report = characterization_report(profile, traces, probes, args.frame_size)

    traces.write(out / "characterization.csv")
    summary_frame(report.summaries).to_csv(out / "characterization.summary.csv", index=False)
    document = {"intrinsic_jitter_ns": report.intrinsic_jitter, **report.model_dump(mode="json")}
    (out / "characterization.summary.json").write_text(json.dumps(document, indent=2) + "\n")

    for figure, summary in report.summaries.items():
        print(f"  {figure:8s} median {summary.median / NS_PER_US:9.1f} us  "
              f"range {summary.range / NS_PER_US:9.1f} us  n={summary.count}")
    print(f"  talker error bound: {report.talker_error_bound} ns")
    for note in report.notes:
        print(f"  note: {note}")
    if report.intrinsic_jitter is None:
        print("Intrinsic jitter estimate: n/a (insufficient samples)")
    else:
        print(f"Intrinsic jitter estimate: {report.intrinsic_jitter / NS_PER_US:.0f} us")
    return EXIT_OK


def _network_params(args: argparse.Namespace) -> NetworkParams:
    return NetworkParams(
        link_rate=args.link_rate,
        propagation=args.propagation,
        bridge_latency_bound=args.bridge_latency,
        intrinsic_jitter=args.intrinsic_jitter,
        quantum=args.quantum,
    )


def cmd_schedule(args: argparse.Namespace) -> int:
    topology = load_topology(args.topology)
    topology_report = validate_topology(topology)
    if not topology_report.ok:
        raise ConfigError("invalid topology: " + "; ".join(topology_report.violations))
    streams = load_streams(args.streams)
    params = _network_params(args)
    out = _out_dir(args)

    schedule = synthesize(streams, topology, params, instant_zero=args.instant_zero)
    dump_model(schedule, out / "schedule.json")
    for port, gcl in schedule.ports.items():
        dump_model(gcl, out / f"gcl-{_port_file_name(port)}.json")

    report = check_schedule(schedule, streams, params, topology)
    (out / "feasibility.json").write_text(report.to_json() + "\n")
    print(report.to_text())
    print(f"Schedule written to {out / 'schedule.json'} ({len(schedule.ports)} GCL files)")
    return EXIT_OK if report.ok else EXIT_INFEASIBLE


def cmd_simulate(args: argparse.Namespace) -> int:
    topology = load_topology(args.topology)
    streams = load_streams(args.streams)
    schedule = load_schedule(args.schedule)
    profile = _profile(args)
    probes = _probe_config(args.probe)
    fault = _parse_fault(args.fault)
    duration = args.duration if args.duration is not None else args.hyperperiods * schedule.hyperperiod
    out = _out_dir(args)

    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        results = run_many(topology, streams, schedule, profile.model, probes, duration, seeds,
                           workers=args.parallel_seeds, fault=fault, profile_name=profile.name)
        paths = [traces.write(out / f"trace-seed{seed}.csv") for seed, traces in zip(seeds, results)]
    else:
        results = [run(topology, streams, schedule, profile.model, probes, duration, _seed(args),
                       fault=fault, profile_name=profile.name)]
        paths = [results[0].write(out / "trace.csv")]

    for path, traces in zip(paths, results):
        meta = traces.metadata
        print(f"{path}: seed {meta.seed}, {meta.generated} frames generated, "
              f"{meta.delivered} delivered, {meta.in_flight} in flight")
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    schedule = load_schedule(args.schedule)
    streams = load_streams(args.streams)
    traces = TraceSet.load(args.trace)
    out = _out_dir(args)

    report = validate_against_trace(schedule, streams, traces)
    (out / "validation.json").write_text(report.model_dump_json(indent=2) + "\n")
    print(report.to_text())

    for port in sorted(schedule.ports):
        rows = pass_through(traces, schedule, port)
        write_pass_through_csv(rows, out / f"pass-through-{_port_file_name(port)}.csv")
        print(f"pass-through at {port}:")
        print(f"  {'stream':>6} {'seq':>5} {'open_us':>10} {'complete_us':>12} {'width_us':>10}")
        for row in rows:
            print(f"  {row.stream_id:>6} {row.seq:>5} {row.open_offset / NS_PER_US:>10.1f} "
                  f"{row.complete_offset / NS_PER_US:>12.1f} {row.width / NS_PER_US:>10.1f}"
                  f"{'' if row.within else '  OUTSIDE'}")
    return EXIT_OK if report.ok else EXIT_VALIDATION


def _group_label(traces: TraceSet, stream_id: int, group_by: str) -> str:
    if group_by == "method":
        setting = traces.metadata.probes.get("T2", {})
        return str(setting.get("method")) if setting.get("enabled") else "off"
    return f"stream {stream_id}"


def cmd_report(args: argparse.Namespace) -> int:
    grouped: Dict[str, Dict[str, List[int]]] = {f: defaultdict(list) for f in FIGURES}
    for path in args.trace:
        traces = TraceSet.load(path)
        if not traces.records:
            raise ConfigError(f"{path}: trace has no frames")
        by_label = defaultdict(list)
        for record in traces.records:
            by_label[_group_label(traces, record.stream_id, args.group_by)].append(record)
        for label, records in by_label.items():
            for figure, values in figure_series(records).items():
                grouped[figure][label].extend(values)

    out = _out_dir(args)
    frames = []
    for figure in FIGURES:
        for label, values in grouped[figure].items():
            frame = summary_frame({figure: summarize(values)})
            frame.insert(0, "group", label)
            frames.append(frame)
    if frames:
        pd.concat(frames, ignore_index=True).to_csv(out / "summary.csv", index=False)
    written = write_box_plots(grouped, out)
    print(f"Report written to {out}: summary.csv and {len(written)} SVG plots")
    return EXIT_OK


def cmd_gates(args: argparse.Namespace) -> int:
    schedule = load_schedule(args.schedule)
    if args.port not in schedule.ports:
        raise UnknownPort(f"port {args.port!r} not in schedule; ports: {sorted(schedule.ports)}")
    rows = gate_timeline(schedule.ports[args.port], args.cycles)
    out = _out_dir(args)
    path = out / f"gates-{_port_file_name(args.port)}.csv"
    pd.DataFrame(rows, columns=["time_ns", "mask"]).to_csv(path, index=False)
    print(f"{len(rows)} gate changes written to {path}")
    return EXIT_OK


def _add_profile_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--profile", choices=PROFILE_NAMES, default="C3", help="platform latency preset")
    parser.add_argument("--allocation", type=int, choices=C3_ALLOCATIONS, help="C3 core allocation")
    parser.add_argument("--latency-model", help="PlatformProfile JSON file, overrides --profile")
    parser.add_argument("--probe", action="append", metavar="POINT=METHOD",
                        help="probe override such as T2=M3 or T3=off (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsnemu", description="TSN emulation, profiling and gate scheduling")
    parser.add_argument("--log-level", help="overrides TSNEMU_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("characterize", help="bridge latency and intrinsic jitter on an open chain")
    _add_profile_args(p)
    p.add_argument("--frames", type=int, default=1000)
    p.add_argument("--frame-size", type=int, default=1500)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_characterize)

    p = sub.add_parser("schedule", help="synthesize a gate schedule")
    p.add_argument("--topology", required=True)
    p.add_argument("--streams", required=True)
    p.add_argument("--bridge-latency", type=_duration, default=parse_duration("200us"))
    p.add_argument("--intrinsic-jitter", type=_duration, default=parse_duration("500us"))
    p.add_argument("--link-rate", type=int, help="bit/s for every link (default: from the topology)")
    p.add_argument("--propagation", type=_duration, help="for every link (default: from the topology)")
    p.add_argument("--quantum", type=_duration, default=parse_duration("1us"))
    p.add_argument("--instant-zero", type=_duration, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("simulate", help="replay a schedule from instant zero")
    p.add_argument("--topology", required=True)
    p.add_argument("--streams", required=True)
    p.add_argument("--schedule", required=True)
    _add_profile_args(p)
    horizon = p.add_mutually_exclusive_group()
    horizon.add_argument("--hyperperiods", type=int, default=3)
    horizon.add_argument("--duration", type=_duration)
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", help="comma-separated seeds, one trace each")
    p.add_argument("--parallel-seeds", type=int, default=1, help="worker threads for --seeds")
    p.add_argument("--fault", metavar="STREAM:SEQ:PORT:DELAY", help="hold one frame before a port")
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("validate", help="check a trace against its schedule")
    p.add_argument("--trace", required=True)
    p.add_argument("--schedule", required=True)
    p.add_argument("--streams", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("report", help="latency statistics and box plots")
    p.add_argument("--trace", required=True, nargs="+")
    p.add_argument("--group-by", choices=("stream", "method"), default="stream")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gates", help="gate timeline of one port as CSV")
    p.add_argument("--schedule", required=True)
    p.add_argument("--port", required=True)
    p.add_argument("--cycles", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gates)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging((args.log_level or get_settings().log_level).upper())
    try:
        return args.func(args)
    except Infeasible as e:
        print(f"Infeasible: {e.reason}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except INPUT_ERRORS as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_CONFIG
    except Exception as e:
        logger.exception(f"internal error: {e}")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
