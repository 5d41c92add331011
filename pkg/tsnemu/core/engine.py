"""
Discrete-event TSN emulation engine
Drives frames of periodic streams from talkers through TAS bridges to
listeners on a simpy kernel, stamping T1..T5 along the way
"""
import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import simpy
from pydantic import BaseModel, ConfigDict, Field

from tsnemu.core.errors import ConfigError, DurationTooShort, ScheduleIncomplete
from tsnemu.core.latency_model import Distribution, LatencyModel, PlatformProfile, ProbeConfig
from tsnemu.core.model import (
    MAX_TIME_NS,
    NS_PER_MS,
    NS_PER_S,
    NS_PER_US,
    Frame,
    GateControlList,
    LinkSpec,
    Schedule,
    StreamSpec,
    TimeNs,
    Topology,
    egress_port_id,
    resolve_paths,
    transmission_time,
)
from tsnemu.core.profiler import (
    BRIDGE_FIGURES,
    FIGURES,
    MIN_ESTIMATE_FRAMES,
    POINTS,
    CharacterizationReport,
    TimestampRecord,
    estimate_intrinsic_jitter,
    figure_series,
    jitter,
    latencies,
    summarize,
)
from tsnemu.core.scheduler import open_gates
from tsnemu.core.tas import EgressPort, Transmission

logger = logging.getLogger(__name__)

CHAIN_TALKER = "talker"
CHAIN_LISTENER = "listener"
CHAIN_BRIDGES = ("B1", "B2")
CHAIN_RATE = 1_000_000_000
DEFAULT_SPACING: Tuple[TimeNs, TimeNs] = (NS_PER_MS, 2 * NS_PER_MS)
# frames released at the end of a characterization run get this long to drain
DRAIN_TIME: TimeNs = NS_PER_S


class FaultInjection(BaseModel):
    """Extra dwell of one frame before it is queued on one egress port"""
    model_config = ConfigDict(frozen=True)

    stream_id: int
    seq: int = Field(ge=0)
    port: str
    delay: TimeNs = Field(ge=0)


class TransmissionRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    port: str
    stream_id: int
    seq: int
    window_open: TimeNs
    window_close: Optional[TimeNs] = None  # None: the gate never closes
    start: TimeNs
    finish: TimeNs


class RunMetadata(BaseModel):
    model_config = ConfigDict(frozen=True)

    seed: int
    profile: Optional[str] = None
    probes: Dict[str, Dict[str, Union[bool, str]]] = {}
    schedule_digest: str
    instant_zero: TimeNs
    duration: TimeNs
    generated: int
    delivered: int
    in_flight: int


TRACE_COLUMNS = ["stream_id", "seq", *POINTS, *FIGURES, "scheduled"]
TX_COLUMNS = ["port", "stream_id", "seq", "window_open", "window_close", "start", "finish"]


def _int_frame(rows: List[dict], columns: List[str]) -> pd.DataFrame:
    """Nullable-integer columns; missing values are written as empty cells"""
    return pd.DataFrame({
        c: pd.array([row.get(c) for row in rows], dtype="string" if c == "port" else "Int64")
        for c in columns
    }, columns=columns)


def _sidecars(path: Path) -> Tuple[Path, Path]:
    stem = path.with_suffix("")
    return stem.with_suffix(".tx.csv"), stem.with_suffix(".meta.json")


@dataclass(frozen=True)
class TraceSet:
    """Timestamps, port transmissions and run metadata of one simulation"""
    records: Tuple[TimestampRecord, ...]
    transmissions: Tuple[TransmissionRecord, ...]
    metadata: RunMetadata

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for r in self.records:
            row = {"stream_id": r.stream_id, "seq": r.seq, "scheduled": r.scheduled}
            row.update({p: r.point(p) for p in POINTS})
            row.update(latencies(r))
            rows.append(row)
        return _int_frame(rows, TRACE_COLUMNS)

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False)

    def write(self, path: Union[str, Path]) -> Path:
        """Write the trace CSV plus its .tx.csv and .meta.json sidecars; returns the trace path"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_csv(path)
        tx_path, meta_path = _sidecars(path)
        _int_frame([t.model_dump() for t in self.transmissions], TX_COLUMNS).to_csv(tx_path, index=False)
        meta_path.write_text(self.metadata.model_dump_json(indent=2) + "\n")
        logger.info(f"trace written to {path} ({len(self.records)} frames)")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TraceSet":
        path = Path(path)
        tx_path, meta_path = _sidecars(path)
        if not meta_path.exists():
            raise ConfigError(f"{meta_path} missing next to trace {path}")
        metadata = RunMetadata.model_validate_json(meta_path.read_text())
        methods = {p: str(s["method"]) for p, s in metadata.probes.items() if s.get("enabled")}

        def value(v) -> Optional[int]:
            return None if pd.isna(v) else int(v)

        frame = pd.read_csv(path, dtype={c: "Int64" for c in TRACE_COLUMNS})
        records = tuple(
            TimestampRecord(stream_id=int(row["stream_id"]), seq=int(row["seq"]),
                            scheduled=value(row["scheduled"]), methods=methods,
                            **{p: value(row[p]) for p in POINTS})
            for _, row in frame.iterrows())

        transmissions: Tuple[TransmissionRecord, ...] = ()
        if tx_path.exists():
            tx = pd.read_csv(tx_path, dtype={"port": str, **{c: "Int64" for c in TX_COLUMNS if c != "port"}})
            transmissions = tuple(
                TransmissionRecord(port=row["port"], stream_id=int(row["stream_id"]), seq=int(row["seq"]),
                                   window_open=int(row["window_open"]), window_close=value(row["window_close"]),
                                   start=int(row["start"]), finish=int(row["finish"]))
                for _, row in tx.iterrows())
        return cls(records=records, transmissions=transmissions, metadata=metadata)


def _stable_hash(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big")


class _Randomness:
    """
    Common random numbers

    Every (node, purpose) pair owns its own substream of the run seed, and each
    frame visiting the node gets the same pair of uniforms from it whatever
    else happens in the run, so that runs differing only in configuration stay
    comparable frame by frame.
    """

    def __init__(self, seed: int):
        self.seed = seed

    def uniforms(self, node: str, purpose: str, stream_id: int, seq: int) -> Tuple[float, float]:
        rng = np.random.default_rng([self.seed, _stable_hash(node), _stable_hash(purpose), stream_id, seq])
        u, v = rng.random(2)
        return float(u), float(v)


class _PortProcess:
    """simpy server around an EgressPort"""

    def __init__(self, env: simpy.Environment, port: EgressPort, log: List[TransmissionRecord]):
        self.env = env
        self.port = port
        self.log = log
        self.wakeup = env.event()
        self.pending: Dict[Tuple[int, int], simpy.Event] = {}
        env.process(self._serve())

    def submit(self, frame: Frame) -> simpy.Event:
        self.port.enqueue(frame, self.env.now)
        done = self.env.event()
        self.pending[(frame.stream_id, frame.seq)] = done
        if not self.wakeup.triggered:
            self.wakeup.succeed()
        return done

    def _serve(self):
        settled_at = None
        while True:
            if self.wakeup.triggered:
                self.wakeup = self.env.event()
            now = self.env.now
            candidate = self.port.earliest_eligible(now)
            if candidate is None:
                yield self.wakeup
                continue
            if candidate[1] > now:
                yield self.env.any_of([self.env.timeout(candidate[1] - now), self.wakeup])
                continue
            if settled_at != now:
                # let every arrival at this instant join the queues first
                settled_at = now
                yield self.env.timeout(0)
                continue
            transmission: Transmission = self.port.next_transmission(now)
            yield self.env.timeout(transmission.finish - now)
            frame = transmission.frame
            self.log.append(TransmissionRecord(
                port=self.port.port_id, stream_id=frame.stream_id, seq=frame.seq,
                window_open=transmission.window_open,
                window_close=None if transmission.window_close == MAX_TIME_NS else transmission.window_close,
                start=transmission.start, finish=transmission.finish))
            self.pending.pop((frame.stream_id, frame.seq)).succeed(transmission)


class _Simulation:
    def __init__(self, topology: Topology, streams: Sequence[StreamSpec], schedule: Schedule,
                 lm: LatencyModel, probes: ProbeConfig, seed: int,
                 fault: Optional[FaultInjection] = None):
        self.topology = topology
        self.streams = list(streams)
        self.schedule = schedule
        self.lm = lm
        self.probes = probes
        self.fault = fault
        self.random = _Randomness(seed)
        self.env = simpy.Environment()
        self.transmissions: List[TransmissionRecord] = []
        self.ports: Dict[str, _PortProcess] = {}
        self.stamps: Dict[Tuple[int, int], Dict[str, TimeNs]] = {}
        self.delivered = 0
        self.methods = {p: probes.method(p).value for p in POINTS if probes.enabled(p)}

    def _port(self, node: str, next_node: str) -> _PortProcess:
        port_id = egress_port_id(node, next_node)
        if port_id not in self.ports:
            gcl = self.schedule.ports.get(port_id)
            if gcl is None:
                gcl = GateControlList.always_open(self.schedule.instant_zero, self.schedule.hyperperiod)
            link = self.topology.link_between(node, next_node)
            self.ports[port_id] = _PortProcess(self.env, EgressPort(port_id, link, gcl), self.transmissions)
        return self.ports[port_id]

    def _overhead(self, point: Optional[str]) -> Distribution:
        if point is None or not self.probes.enabled(point):
            return Distribution.constant(0)
        return self.lm.overhead(self.probes.method(point))

    def _stamp(self, key: Tuple[int, int], point: str, t: TimeNs) -> None:
        if self.probes.enabled(point):
            self.stamps[key][point] = t

    def start(self, stream: StreamSpec, releases: Sequence[TimeNs]) -> None:
        self.env.process(self._source(stream, releases))

    def _source(self, stream: StreamSpec, releases: Sequence[TimeNs]):
        links = stream.links(self.topology)
        for seq, release in enumerate(releases):
            yield self.env.timeout(release - self.env.now)
            self.env.process(self._frame(stream, links, seq, release))

    def _frame(self, stream: StreamSpec, links: List[LinkSpec], seq: int, release: TimeNs):
        env, lm = self.env, self.lm
        key = (stream.id, seq)
        self.stamps[key] = {"scheduled": release}
        frame = Frame(stream_id=stream.id, seq=seq, size=stream.frame_size,
                      traffic_class=stream.traffic_class, release_time=release)
        talker = stream.path[0].node

        u, v = self.random.uniforms(talker, "send", *key)
        t1 = release + lm.talker_send.draw(u, v)
        self._stamp(key, "T1", t1)
        u, v = self.random.uniforms(talker, "stack", *key)
        yield env.timeout(t1 - env.now + lm.talker_stack.draw(u, v) + self._overhead("T1").draw(u, v))

        # the talker NIC is a plain FIFO
        yield self._port(talker, stream.path[1].node).submit(replace(frame, traffic_class=0))
        yield env.timeout(links[0].propagation_delay)

        bridges = stream.bridges
        for index, node in enumerate(bridges):
            point = None
            if index == 0:
                point = "T2"
            elif index == len(bridges) - 1:
                point = "T3"
            if point is not None:
                self._stamp(key, point, env.now)
            next_node = stream.path[index + 2].node
            u, v = self.random.uniforms(node, "residence", *key)
            dwell = lm.bridge_residence.draw(u, v) + self._overhead(point).draw(u, v)
            port = self._port(node, next_node)
            if self.fault is not None and (self.fault.stream_id, self.fault.seq, self.fault.port) == (
                    stream.id, seq, port.port.port_id):
                logger.debug(f"fault: stream {stream.id} seq {seq} held {self.fault.delay} ns before {port.port.port_id}")
                dwell += self.fault.delay
            yield env.timeout(dwell)
            yield port.submit(frame)
            yield env.timeout(links[index + 1].propagation_delay)

        t4 = env.now
        self.delivered += 1
        self._stamp(key, "T4", t4)
        u, v = self.random.uniforms(stream.listener, "delivery", *key)
        t5 = t4 + self._overhead("T4").draw(u, v) + lm.listener_delivery.draw(u, v) + self._overhead("T5").draw(u, v)
        self._stamp(key, "T5", t5)

    def records(self) -> Tuple[TimestampRecord, ...]:
        return tuple(
            TimestampRecord(stream_id=stream_id, seq=seq, methods=self.methods,
                            **{k: v for k, v in stamps.items()})
            for (stream_id, seq), stamps in sorted(self.stamps.items()))


def _check_inputs(streams: Sequence[StreamSpec], schedule: Schedule, duration: TimeNs) -> None:
    for stream in streams:
        for port in stream.scheduled_ports:
            if port not in schedule.ports:
                raise ScheduleIncomplete(f"stream {stream.id}: no gate control list for {port}")
    if duration < schedule.hyperperiod:
        raise DurationTooShort(f"duration {duration} ns is shorter than the {schedule.hyperperiod} ns hyperperiod")


def _execute(sim: _Simulation, releases: Dict[int, List[TimeNs]], horizon: TimeNs, seed: int,
             profile_name: Optional[str], duration: TimeNs) -> TraceSet:
    for stream in sim.streams:
        sim.start(stream, releases[stream.id])
    sim.env.run(until=horizon)
    generated = len(sim.stamps)
    transmissions = tuple(sorted(sim.transmissions, key=lambda t: (t.start, t.port)))
    metadata = RunMetadata(
        seed=seed, profile=profile_name, probes=sim.probes.model_dump(mode="json"),
        schedule_digest=sim.schedule.digest(), instant_zero=sim.schedule.instant_zero,
        duration=duration, generated=generated, delivered=sim.delivered,
        in_flight=generated - sim.delivered)
    logger.info(f"run seed={seed}: {generated} frames generated, {sim.delivered} delivered, "
                f"{generated - sim.delivered} in flight at the horizon")
    return TraceSet(records=sim.records(), transmissions=transmissions, metadata=metadata)


def run(topology: Topology, streams: Sequence[StreamSpec], schedule: Schedule, lm: LatencyModel,
        probes: ProbeConfig, duration: TimeNs, seed: int, fault: Optional[FaultInjection] = None,
        profile_name: Optional[str] = None) -> TraceSet:
    """
    Simulate the streams under a gate schedule from instant zero

    Frame k of a stream is released at instant_zero + offset + k x period for
    every release falling before instant_zero + duration; frames still on the
    way at the horizon are reported in flight.

    Raises:
        ScheduleIncomplete: a bridge egress port on a stream path has no GCL
        DurationTooShort: duration is shorter than the hyperperiod
    """
    streams = resolve_paths(streams, topology)
    _check_inputs(streams, schedule, duration)
    releases = {}
    for stream in streams:
        offset = schedule.offsets.get(stream.id, 0)
        releases[stream.id] = [schedule.instant_zero + offset + k * stream.period
                               for k in range(max(0, -(-(duration - offset) // stream.period)))]
    sim = _Simulation(topology, streams, schedule, lm, probes, seed, fault)
    return _execute(sim, releases, schedule.instant_zero + duration, seed, profile_name, duration)


def run_many(topology: Topology, streams: Sequence[StreamSpec], schedule: Schedule, lm: LatencyModel,
             probes: ProbeConfig, duration: TimeNs, seeds: Sequence[int], workers: Optional[int] = None,
             fault: Optional[FaultInjection] = None, profile_name: Optional[str] = None) -> List[TraceSet]:
    """Independent runs over several seeds in a thread pool; results follow the order of seeds"""
    def one(seed: int) -> TraceSet:
        return run(topology, streams, schedule, lm, probes, duration, seed, fault, profile_name)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, seeds))


def characterization_chain(rate: int = CHAIN_RATE, propagation: TimeNs = 0) -> Topology:
    """talker - B1 - B2 - listener"""
    nodes = [CHAIN_TALKER, *CHAIN_BRIDGES, CHAIN_LISTENER]
    return Topology(
        hosts=[CHAIN_TALKER, CHAIN_LISTENER],
        bridges=list(CHAIN_BRIDGES),
        links=[LinkSpec(endpoint_a=a, endpoint_b=b, rate=rate, propagation_delay=propagation)
               for a, b in zip(nodes, nodes[1:])],
    )


def characterization_trace(profile: PlatformProfile, n_frames: int = 1000, seed: int = 42,
                           probes: Optional[ProbeConfig] = None, frame_size: int = 1500,
                           spacing: Tuple[TimeNs, TimeNs] = DEFAULT_SPACING) -> TraceSet:
    """
    Run the two-bridge chain with every gate open

    Frames are released with a random spacing drawn uniformly from `spacing`,
    from a substream of its own so that probe settings do not move releases.
    """
    if n_frames < 1:
        raise ValueError(f"frames must be >= 1, got {n_frames}")
    low, high = spacing
    if not 0 < low <= high:
        raise ValueError(f"invalid release spacing {spacing}")
    probes = probes or ProbeConfig()

    topology = characterization_chain()
    stream = resolve_paths([StreamSpec(id=0, talker=CHAIN_TALKER, listener=CHAIN_LISTENER, period=high,
                                       deadline=high, jitter_bound=high, frame_size=frame_size,
                                       traffic_class=7)], topology)[0]
    schedule = open_gates([stream], topology)
    randomness = _Randomness(seed)
    releases, t = [], schedule.instant_zero
    for seq in range(n_frames):
        releases.append(t)
        u, _ = randomness.uniforms(CHAIN_TALKER, "spacing", stream.id, seq)
        t += low + int(u * (high - low))
    duration = releases[-1] - schedule.instant_zero + DRAIN_TIME

    sim = _Simulation(topology, [stream], schedule, profile.model, probes, seed)
    return _execute(sim, {stream.id: releases}, schedule.instant_zero + duration, seed, profile.name, duration)


def characterization_report(profile: PlatformProfile, traces: TraceSet,
                            probes: Optional[ProbeConfig] = None, frame_size: int = 1500) -> CharacterizationReport:
    """
    Statistics of a characterization trace

    Per-figure summaries and jitter, the talker error bound, the model medians
    expected for br1L and br2L and whether the measured ones agree within
    max(5 %, 5 us), and the intrinsic jitter estimate from 100 frames on.
    """
    probes = probes or ProbeConfig()
    n_frames = len(traces.records)
    series = figure_series(traces.records)
    summaries = {f: summarize(values) for f, values in series.items()}
    jitters = {f: jitter(values) for f, values in series.items()}
    errors = [r.T1 - r.scheduled for r in traces.records if r.T1 is not None]

    lm = profile.model
    tx = transmission_time(frame_size, CHAIN_RATE)
    expected = {}
    for figure, point in zip(BRIDGE_FIGURES, ("T2", "T3")):
        if figure in summaries:
            overhead = lm.overhead(probes.method(point)).median if probes.enabled(point) else 0
            expected[figure] = float(lm.bridge_residence.median + overhead + tx)

    notes = []
    passed = True
    for figure, median in expected.items():
        tolerance = max(0.05 * median, 5 * NS_PER_US)
        measured = summaries[figure].median
        if abs(measured - median) > tolerance:
            passed = False
            notes.append(f"{figure} median {measured:.0f} ns outside {median:.0f} +/- {tolerance:.0f} ns")
    if not expected:
        notes.append("bridge probes disabled: no bridge figures to check")
    if n_frames < 2:
        notes.append("jitter needs at least 2 frames; figures reported as 0")

    report = CharacterizationReport(
        profile=profile.name, allocation=profile.allocation, n_frames=n_frames, seed=traces.metadata.seed,
        probes=probes.model_dump(mode="json"), summaries=summaries, jitter=jitters,
        talker_error_bound=max(errors) if errors else 0, expected_medians=expected, passed=passed, notes=notes)
    if n_frames < MIN_ESTIMATE_FRAMES:
        logger.warning(f"{n_frames} frames: intrinsic jitter not estimated")
        return report.model_copy(update={"notes": notes + ["insufficient samples"]})
    return report.model_copy(update={"intrinsic_jitter": estimate_intrinsic_jitter(report)})


def characterize(profile: PlatformProfile, n_frames: int = 1000, seed: int = 42,
                 probes: Optional[ProbeConfig] = None, frame_size: int = 1500,
                 spacing: Tuple[TimeNs, TimeNs] = DEFAULT_SPACING) -> CharacterizationReport:
    """Characterize a platform: 1000 random frames from talker to listener across two open bridges"""
    traces = characterization_trace(profile, n_frames, seed, probes, frame_size, spacing)
    return characterization_report(profile, traces, probes, frame_size)
