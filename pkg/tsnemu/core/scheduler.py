"""
Gate schedule synthesis and verification
Places exclusive per-instance gate windows over the hyperperiod from stream
specs and measured network parameters, checks a schedule analytically, and
validates it against a simulated trace
"""
import json
import logging
from collections import defaultdict
from typing import TYPE_CHECKING, Dict, List, NamedTuple, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field

from tsnemu.core.errors import ConfigError, Infeasible, TraceMismatch
from tsnemu.core.model import (
    NS_PER_US,
    GateControlList,
    GateEntry,
    GateWindow,
    LinkSpec,
    Schedule,
    StreamSpec,
    TimeNs,
    Topology,
    hyperperiod,
    resolve_paths,
    transmission_time,
)
from tsnemu.core.profiler import latencies, pass_through

if TYPE_CHECKING:
    from tsnemu.core.engine import TraceSet

logger = logging.getLogger(__name__)

DEFAULT_INTRINSIC_JITTER: TimeNs = 500 * NS_PER_US


class NetworkParams(BaseModel):
    """
    Network parameters the synthesizer works from

    link_rate and propagation override every link when set; otherwise each
    link's own values from the topology apply.
    """
    model_config = ConfigDict(frozen=True)

    link_rate: Optional[int] = Field(default=None, gt=0)
    propagation: Optional[TimeNs] = Field(default=None, ge=0)
    bridge_latency_bound: TimeNs = Field(default=0, ge=0)
    intrinsic_jitter: TimeNs = Field(default=DEFAULT_INTRINSIC_JITTER, ge=0)
    quantum: TimeNs = Field(default=NS_PER_US, gt=0)

    def rate(self, link: Optional[LinkSpec]) -> int:
        if self.link_rate is not None:
            return self.link_rate
        if link is None:
            raise ConfigError("link rate unknown: pass a topology or set link_rate")
        return link.rate

    def prop(self, link: Optional[LinkSpec]) -> TimeNs:
        if self.propagation is not None:
            return self.propagation
        return link.propagation_delay if link is not None else 0

    def ceil(self, t: TimeNs) -> TimeNs:
        return -(-t // self.quantum) * self.quantum

    def window_width(self, tx: TimeNs) -> TimeNs:
        return self.ceil(tx + 2 * self.intrinsic_jitter)


class Violation(BaseModel):
    check: str
    detail: str
    port: Optional[str] = None
    stream_id: Optional[int] = None
    instance: Optional[int] = None
    interval: Optional[Tuple[TimeNs, TimeNs]] = None


class FeasibilityReport(BaseModel):
    ok: bool
    violations: List[Violation] = []
    worst_case: Dict[int, TimeNs] = {}
    margins: Dict[int, TimeNs] = {}

    def to_text(self) -> str:
        lines = [f"schedule {'FEASIBLE' if self.ok else 'INFEASIBLE'}"]
        for stream_id in sorted(self.worst_case):
            lines.append(f"  stream {stream_id}: worst-case e2e.nic {self.worst_case[stream_id] / NS_PER_US:.1f} us, "
                         f"margin {self.margins[stream_id] / NS_PER_US:.1f} us")
        for v in self.violations:
            lines.append(f"  ({v.check}) {v.detail}")
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(), indent=2)


class StreamVerdict(BaseModel):
    stream_id: int
    frames: int
    measured: int
    worst_e2e_nic: Optional[TimeNs] = None
    worst_margin: Optional[TimeNs] = None
    jitter_range: TimeNs = 0
    deadline_ok: bool = True
    windows_ok: bool = True
    jitter_ok: bool = True

    @property
    def passed(self) -> bool:
        return self.deadline_ok and self.windows_ok and self.jitter_ok


class ValidationReport(BaseModel):
    ok: bool
    streams: List[StreamVerdict] = []
    deadline_violations: List[Tuple[int, int]] = []
    window_violations: List[Tuple[int, int, str]] = []
    jitter_violations: List[int] = []

    @property
    def offenders(self) -> List[Tuple[int, int]]:
        frames = set(self.deadline_violations) | {(s, q) for s, q, _ in self.window_violations}
        return sorted(frames)

    def to_text(self) -> str:
        lines = [f"validation {'PASSED' if self.ok else 'FAILED'}"]
        for v in self.streams:
            worst = "n/a" if v.worst_e2e_nic is None else f"{v.worst_e2e_nic / NS_PER_US:.1f} us"
            margin = "n/a" if v.worst_margin is None else f"{v.worst_margin / NS_PER_US:.1f} us"
            lines.append(f"  stream {v.stream_id}: {'pass' if v.passed else 'FAIL'} "
                         f"({v.measured}/{v.frames} frames measured, worst e2e.nic {worst}, margin {margin}, "
                         f"jitter {v.jitter_range / NS_PER_US:.1f} us)")
        for stream_id, seq in self.offenders:
            lines.append(f"  offending frame: stream {stream_id} seq {seq}")
        return "\n".join(lines)


class _Fit(NamedTuple):
    """Result of a first-fit search; `wait_clear` is set when a same-class window blocked the wait"""
    start: Optional[TimeNs]
    wait_clear: Optional[TimeNs] = None


class _Slot(NamedTuple):
    """A placed window in cycle phase, with the earliest instant its frame can reach the port"""
    open: TimeNs
    close: TimeNs
    traffic_class: int
    reachable_from: TimeNs


def _instances(stream: StreamSpec, period_lcm: TimeNs) -> int:
    return period_lcm // stream.period


def _overlaps(phase: TimeNs, width: TimeNs, start: TimeNs, end: TimeNs, period_lcm: TimeNs) -> Optional[TimeNs]:
    """End of the occupied interval [start, end) hit by [phase, phase+width) on the cycle, if any"""
    for shift in (-period_lcm, 0, period_lcm):
        if start + shift < phase + width and phase < end + shift:
            return end + shift
    return None


def _first_fit(occupied: List[_Slot], earliest: TimeNs, reachable_from: TimeNs, width: TimeNs,
               traffic_class: int, period_lcm: TimeNs, params: NetworkParams, limit: TimeNs,
               fixed_lead_in: Optional[TimeNs] = None) -> _Fit:
    """
    Earliest quantum-aligned start for a window that collides with no window
    on the port, and whose frame cannot leave through a same-class window
    while it waits for its own

    The frame can be at the port from `reachable_from` on. With
    `fixed_lead_in` the release is still free, so the wait before the window
    keeps that length wherever the window goes. A failed search reports when
    the blocking same-class window closes, if one did.
    """
    start = params.ceil(earliest)
    while start <= limit:
        phase = start % period_lcm
        lead_in = fixed_lead_in if fixed_lead_in is not None else start - reachable_from
        blocked_until = None
        for slot in occupied:
            ends = []
            if slot.traffic_class == traffic_class:
                if lead_in >= period_lcm:
                    return _Fit(None)
                if lead_in > 0:
                    end = _overlaps(phase - lead_in, lead_in, slot.open, slot.close, period_lcm)
                    if end is not None:
                        if fixed_lead_in is None:
                            # a later start only widens the wait
                            return _Fit(None, start - phase + end)
                        ends.append(end + lead_in)
                ends.append(_overlaps(phase, width, slot.reachable_from, slot.close, period_lcm))
            else:
                ends.append(_overlaps(phase, width, slot.open, slot.close, period_lcm))
            for end in ends:
                if end is not None and (blocked_until is None or end > blocked_until):
                    blocked_until = end
        if blocked_until is None:
            return _Fit(start)
        start = params.ceil(start - phase + blocked_until)
    return _Fit(None)


def _place_instance(stream: StreamSpec, instance: int, release: TimeNs, topology: Topology,
                    occupancy: Dict[str, List[_Slot]], period_lcm: TimeNs,
                    params: NetworkParams, trial: bool = False) -> List[Tuple[GateWindow, TimeNs]]:
    """
    Windows of one instance along its path, each with the earliest instant the
    frame can reach the port

    A trial placement only looks for the release: the first window may move
    later until the whole path fits, the release follows it so that the frame
    reaches it just in time, and the deadline is not enforced yet.
    """
    links = stream.links(topology)
    limit = release + stream.period + period_lcm if trial else release + stream.deadline
    first_not_before = release

    while True:
        placed: List[Tuple[GateWindow, TimeNs]] = []
        prev_start = release
        prev_tx = transmission_time(stream.frame_size, params.rate(links[0]))
        prev_prop = params.prop(links[0])
        for hop, (port, link) in enumerate(zip(stream.scheduled_ports, links[1:])):
            tx = transmission_time(stream.frame_size, params.rate(link))
            width = params.window_width(tx)
            if width > period_lcm:
                raise Infeasible(f"stream {stream.id}: window of {width} ns on {port} "
                                 f"exceeds the {period_lcm} ns cycle")
            reachable_from = prev_start + prev_tx + prev_prop
            earliest = reachable_from + params.bridge_latency_bound
            fixed_lead_in = None
            if trial and hop == 0:
                fixed_lead_in = params.bridge_latency_bound
                earliest = max(earliest, first_not_before)
            fit = _first_fit(occupancy[port], earliest, reachable_from, width, stream.traffic_class,
                             period_lcm, params, limit, fixed_lead_in)
            if fit.start is None:
                break
            start = fit.start
            if fixed_lead_in is not None:
                reachable_from = start - fixed_lead_in
            placed.append((GateWindow(stream_id=stream.id, instance=instance, port=port,
                                      traffic_class=stream.traffic_class, open=start, close=start + width),
                           reachable_from))
            prev_start, prev_tx, prev_prop = start, tx, params.prop(link)

        if len(placed) == len(stream.scheduled_ports):
            break
        if not (trial and placed):
            raise Infeasible(f"stream {stream.id} instance {instance}: no free window on "
                             f"{stream.scheduled_ports[len(placed)]} before the deadline "
                             f"({release + stream.deadline} ns)")
        # a later hop is blocked: move the whole path until that hop's wait clears
        shift = params.quantum
        if fit.wait_clear is not None:
            shift = max(shift, params.ceil(fit.wait_clear - reachable_from))
        first_not_before = placed[0][0].open + shift

    if not trial:
        worst = _worst_case(stream, release, [w for w, _ in placed], topology, params)
        if worst > stream.deadline:
            raise Infeasible(f"stream {stream.id} instance {instance}: worst-case latency {worst} ns "
                             f"exceeds deadline {stream.deadline} ns")
    return placed


def _worst_case(stream: StreamSpec, release: TimeNs, windows: Sequence[GateWindow],
                topology: Optional[Topology], params: NetworkParams) -> TimeNs:
    """
    Worst-case e2e.nic of one instance

    With scheduled hops the frame leaves the last bridge no later than its
    window close; without, it crosses the single link after the talker.
    Intrinsic jitter is added on top in both cases.
    """
    links = stream.links(topology) if topology is not None else [None] * (len(stream.path) - 1)
    if windows:
        return windows[-1].close - release + params.prop(links[-1]) + params.intrinsic_jitter
    tx = transmission_time(stream.frame_size, params.rate(links[0]))
    return tx + params.prop(links[0]) + params.bridge_latency_bound + params.intrinsic_jitter


def _build_gcl(windows: Sequence[GateWindow], period_lcm: TimeNs, best_effort: int,
               instant_zero: TimeNs) -> GateControlList:
    pieces = []
    for w in windows:
        start = w.open % period_lcm
        end = start + w.width
        mask = 1 << w.traffic_class
        if end <= period_lcm:
            pieces.append((start, end, mask))
        else:
            pieces.append((start, period_lcm, mask))
            pieces.append((0, end - period_lcm, mask))
    pieces.sort()

    entries: List[List[int]] = []

    def add(mask: int, duration: TimeNs) -> None:
        if duration <= 0:
            return
        if entries and entries[-1][0] == mask:
            entries[-1][1] += duration
        else:
            entries.append([mask, duration])

    pos = 0
    for start, end, mask in pieces:
        add(best_effort, start - pos)
        add(mask, end - start)
        pos = end
    add(best_effort, period_lcm - pos)
    return GateControlList(base_time=instant_zero, cycle_time=period_lcm,
                           entries=[GateEntry(gate_mask=m, duration=d) for m, d in entries])


def synthesize(streams: Sequence[StreamSpec], t: Topology, p: NetworkParams,
               instant_zero: TimeNs = 0) -> Schedule:
    """
    Greedy gate schedule over one hyperperiod

    Streams are taken in rate-monotonic order. Each stream's release offset
    lets its first window open exactly when the frame can first be there; every
    instance then gets, per bridge egress port, a window of tx + 2 x intrinsic
    jitter placed as soon as possible after the earliest arrival and clear of
    all windows already on the port. A window is also kept out of the span in
    which a frame of the same traffic class can already be waiting at that
    port, and no same-class window may open while its own frame waits there:
    the gate only knows classes, so the frame would leave through it.

    Raises:
        Infeasible: a window cannot be placed in time for the deadline
    """
    streams = resolve_paths(streams, t)
    period_lcm = hyperperiod(streams)
    if period_lcm % p.quantum:
        raise Infeasible(f"hyperperiod {period_lcm} ns is not a multiple of the {p.quantum} ns quantum")

    used = 0
    for stream in streams:
        used |= 1 << stream.traffic_class
    best_effort = 0xFF & ~used

    occupancy: Dict[str, List[_Slot]] = defaultdict(list)
    offsets: Dict[int, TimeNs] = {}
    windows: List[GateWindow] = []

    for stream in sorted(streams, key=lambda s: (s.period, s.id)):
        links = stream.links(t)
        if not stream.scheduled_ports:
            offsets[stream.id] = 0
            worst = _worst_case(stream, 0, [], t, p)
            if worst > stream.deadline:
                raise Infeasible(f"stream {stream.id}: worst-case latency {worst} ns exceeds deadline {stream.deadline} ns")
            continue

        lead = (transmission_time(stream.frame_size, p.rate(links[0])) + p.prop(links[0])
                + p.bridge_latency_bound)
        trial = _place_instance(stream, 0, 0, t, occupancy, period_lcm, p, trial=True)
        offset = trial[0][0].open - lead
        if not 0 <= offset < stream.period:
            offset = 0
        offsets[stream.id] = offset

        for k in range(_instances(stream, period_lcm)):
            placed = _place_instance(stream, k, offset + k * stream.period, t, occupancy, period_lcm, p)
            for w, reachable_from in placed:
                phase = w.open % period_lcm
                occupancy[w.port].append(_Slot(open=phase, close=phase + w.width, traffic_class=w.traffic_class,
                                               reachable_from=phase - (w.open - reachable_from)))
                windows.append(w)
        logger.debug(f"stream {stream.id}: offset {offset} ns, {len(stream.scheduled_ports)} scheduled hops")

    by_port: Dict[str, List[GateWindow]] = defaultdict(list)
    for w in windows:
        by_port[w.port].append(w)
    ports = {port: _build_gcl(by_port[port], period_lcm, best_effort, instant_zero) for port in sorted(by_port)}

    schedule = Schedule(instant_zero=instant_zero, hyperperiod=period_lcm,
                        offsets=dict(sorted(offsets.items())), ports=ports, windows=windows)
    logger.info(f"synthesized schedule: {len(streams)} streams, {len(ports)} ports, "
                f"{len(windows)} windows, hyperperiod {period_lcm} ns")
    return schedule


def open_gates(streams: Sequence[StreamSpec], t: Topology, instant_zero: TimeNs = 0) -> Schedule:
    """Schedule with every gate always open and zero offsets, for characterization runs"""
    streams = resolve_paths(streams, t)
    period_lcm = hyperperiod(streams)
    ports = sorted({port for s in streams for port in s.scheduled_ports})
    return Schedule(
        instant_zero=instant_zero,
        hyperperiod=period_lcm,
        offsets={s.id: 0 for s in streams},
        ports={port: GateControlList.always_open(instant_zero, period_lcm) for port in ports},
        windows=[],
    )


def _early_exits(w: GateWindow, reachable_from: TimeNs, others: Sequence[GateWindow],
                 period_lcm: TimeNs) -> List[Violation]:
    lead_in = w.open - reachable_from
    if lead_in <= 0:
        return []
    found = []
    for x in others:
        if x == w or x.traffic_class != w.traffic_class:
            continue
        base = x.open % period_lcm
        if lead_in < period_lcm and _overlaps(w.open % period_lcm - lead_in, lead_in, base, base + x.width,
                                              period_lcm) is None:
            continue
        found.append(Violation(
            check="early", port=w.port, stream_id=w.stream_id, instance=w.instance, interval=(x.open, x.close),
            detail=f"{w.port}: stream {w.stream_id}#{w.instance} can be waiting from {reachable_from} ns while "
                   f"the class {w.traffic_class} window of stream {x.stream_id}#{x.instance} is open"))
    return found


def check_schedule(s: Schedule, streams: Sequence[StreamSpec], p: NetworkParams,
                   topology: Optional[Topology] = None) -> FeasibilityReport:
    """
    Analytic feasibility check

    (a) no two windows overlap on a port, (b) worst-case e2e.nic of every
    instance meets its deadline, (c) every window is at least
    tx + 2 x intrinsic jitter wide. Also reports missing windows, windows a
    frame cannot reach before they close, and same-class windows that open
    while a frame waits for its own (it would leave early through them).
    """
    if topology is not None:
        streams = resolve_paths(streams, topology)
    violations: List[Violation] = []
    worst_case: Dict[int, TimeNs] = {}
    margins: Dict[int, TimeNs] = {}

    by_port: Dict[str, List[GateWindow]] = defaultdict(list)
    for w in s.windows:
        by_port[w.port].append(w)
    for port, windows in sorted(by_port.items()):
        for i, first in enumerate(windows):
            for second in windows[i + 1:]:
                phase = second.open % s.hyperperiod
                base = first.open % s.hyperperiod
                end = _overlaps(phase, second.width, base, base + first.width, s.hyperperiod)
                if end is None:
                    continue
                shift = end - (base + first.width)
                lo = max(phase, base + shift)
                hi = min(phase + second.width, end)
                violations.append(Violation(
                    check="a", port=port, stream_id=second.stream_id, instance=second.instance,
                    interval=(lo, hi),
                    detail=f"{port}: window of stream {first.stream_id}#{first.instance} overlaps "
                           f"stream {second.stream_id}#{second.instance} on [{lo}, {hi})"))

    for stream in sorted(streams, key=lambda x: x.id):
        if not stream.path:
            raise ConfigError(f"stream {stream.id} has no path; pass the topology to resolve it")
        links = stream.links(topology) if topology is not None else [None] * (len(stream.path) - 1)
        offset = s.offsets.get(stream.id, 0)
        n = _instances(stream, s.hyperperiod)
        per_port = {port: s.windows_for(stream.id, port) for port in stream.scheduled_ports}

        for port, link in zip(stream.scheduled_ports, links[1:]):
            tx = transmission_time(stream.frame_size, p.rate(link))
            required = tx + 2 * p.intrinsic_jitter
            if len(per_port[port]) != n:
                violations.append(Violation(check="windows", port=port, stream_id=stream.id,
                                            detail=f"stream {stream.id} has {len(per_port[port])} windows "
                                                   f"on {port}, expected {n}"))
            for w in per_port[port]:
                if w.width < required:
                    violations.append(Violation(
                        check="c", port=port, stream_id=stream.id, instance=w.instance,
                        interval=(w.open, w.close),
                        detail=f"stream {stream.id}#{w.instance} window on {port} is {w.width} ns wide, "
                               f"needs {required} ns"))

        worst_stream = 0
        for k in range(n):
            release = offset + k * stream.period
            windows = [per_port[port][k] for port in stream.scheduled_ports if k < len(per_port[port])]
            if len(windows) != len(stream.scheduled_ports):
                continue
            prev_start, prev_link = release, links[0]
            prev_tx = transmission_time(stream.frame_size, p.rate(prev_link))
            for w, link in zip(windows, links[1:]):
                tx = transmission_time(stream.frame_size, p.rate(link))
                reachable_from = prev_start + prev_tx + p.prop(prev_link)
                arrival = reachable_from + p.bridge_latency_bound
                violations.extend(_early_exits(w, reachable_from, by_port[w.port], s.hyperperiod))
                if arrival + tx > w.close:
                    violations.append(Violation(
                        check="b", port=w.port, stream_id=stream.id, instance=k, interval=(w.open, w.close),
                        detail=f"stream {stream.id}#{k} cannot reach {w.port} before its window closes"))
                prev_start, prev_tx, prev_link = w.open, tx, link
            worst = _worst_case(stream, release, windows, topology, p)
            worst_stream = max(worst_stream, worst)
            if worst > stream.deadline:
                violations.append(Violation(
                    check="b", stream_id=stream.id, instance=k,
                    detail=f"stream {stream.id}#{k} worst-case e2e.nic {worst} ns exceeds deadline "
                           f"{stream.deadline} ns"))
        worst_case[stream.id] = worst_stream
        margins[stream.id] = stream.deadline - worst_stream

    report = FeasibilityReport(ok=not violations, violations=violations, worst_case=worst_case, margins=margins)
    logger.info(f"schedule check: {'ok' if report.ok else f'{len(violations)} violations'}")
    return report


def validate_against_trace(s: Schedule, streams: Sequence[StreamSpec], traces: "TraceSet") -> ValidationReport:
    """
    Check a simulated trace against its schedule

    Per frame: (i) e2e.nic <= D_i, (ii) every transmission on a scheduled port
    lies inside the frame's assigned window; per stream: (iii) e2e.nic range
    <= J_i.

    Raises:
        TraceMismatch: the trace was produced under a different schedule
    """
    if traces.metadata.schedule_digest != s.digest():
        raise TraceMismatch(f"trace schedule digest {traces.metadata.schedule_digest[:12]} "
                            f"!= schedule {s.digest()[:12]}")

    deadline_violations: List[Tuple[int, int]] = []
    window_violations: List[Tuple[int, int, str]] = []
    jitter_violations: List[int] = []

    late_windows: Dict[int, set] = defaultdict(set)
    for port in sorted(s.ports):
        for row in pass_through(traces, s, port):
            if not row.within:
                window_violations.append((row.stream_id, row.seq, port))
                late_windows[row.stream_id].add(row.seq)

    verdicts = []
    for stream in sorted(streams, key=lambda x: x.id):
        records = [r for r in traces.records if r.stream_id == stream.id]
        values = []
        for r in records:
            e2e_nic = latencies(r).get("e2e_nic")
            if e2e_nic is None:
                continue
            values.append(e2e_nic)
            if e2e_nic > stream.deadline:
                deadline_violations.append((stream.id, r.seq))
        spread = max(values) - min(values) if values else 0
        jitter_ok = spread <= stream.jitter_bound
        if not jitter_ok:
            jitter_violations.append(stream.id)
        verdicts.append(StreamVerdict(
            stream_id=stream.id,
            frames=len(records),
            measured=len(values),
            worst_e2e_nic=max(values) if values else None,
            worst_margin=stream.deadline - max(values) if values else None,
            jitter_range=spread,
            deadline_ok=all(v <= stream.deadline for v in values),
            windows_ok=not late_windows[stream.id],
            jitter_ok=jitter_ok,
        ))

    report = ValidationReport(ok=all(v.passed for v in verdicts), streams=verdicts,
                              deadline_violations=deadline_violations,
                              window_violations=window_violations,
                              jitter_violations=jitter_violations)
    logger.info(f"trace validation: {'passed' if report.ok else 'failed'}")
    return report
