#!/usr/bin/env python
"""
Tests for gate schedule synthesis, the analytic feasibility check and trace validation
"""
import random
import sys
from pathlib import Path

import pytest

sys.path.append(str(Path(__file__).parent))

from tsnemu.core.engine import FaultInjection, run
from tsnemu.core.errors import Infeasible, TraceMismatch
from tsnemu.core.latency_model import Distribution, LatencyModel, ProbeConfig, platform_profile
from tsnemu.core.model import (
    NS_PER_MS,
    NS_PER_US,
    GateControlList,
    GateEntry,
    GateWindow,
    LinkSpec,
    Schedule,
    StreamSpec,
    Topology,
    load_streams,
    load_topology,
)
from tsnemu.core.profiler import pass_through
from tsnemu.core.scheduler import NetworkParams, check_schedule, open_gates, synthesize, validate_against_trace
from tsnemu.core.tas import gate_state_at

USECASE = Path(__file__).parent / "scenarios" / "usecase"
GBPS = 1_000_000_000
USECASE_PARAMS = NetworkParams(bridge_latency_bound=200 * NS_PER_US, intrinsic_jitter=500 * NS_PER_US)


@pytest.fixture
def usecase():
    return load_topology(USECASE / "topology.json"), load_streams(USECASE / "streams.json")


def _us(value):
    return value * NS_PER_US


def test_usecase_schedule_layout(usecase):
    """Rate-monotonic first fit packs the three streams back to back on the shared ports"""
    topology, streams = usecase
    s = synthesize(streams, topology, USECASE_PARAMS)
    assert s.hyperperiod == 60 * NS_PER_MS
    assert sorted(s.ports) == ["B1->B2", "B2->h3"]
    assert s.offsets == {0: 0, 1: _us(1012), 2: _us(2236)}

    first = {(w.stream_id, w.port): (w.open, w.close) for w in s.windows if w.instance == 0}
    assert first[(0, "B1->B2")] == (_us(212), _us(1224))
    assert first[(0, "B2->h3")] == (_us(424), _us(1436))
    assert first[(1, "B1->B2")] == (_us(1224), _us(2236))
    assert first[(1, "B2->h3")] == (_us(1436), _us(2448))
    assert first[(2, "B2->h3")] == (_us(2448), _us(3460))
    assert (2, "B1->B2") not in first

    for stream_id, count in ((0, 6), (1, 3), (2, 2)):
        assert len(s.windows_for(stream_id, "B2->h3")) == count
    for offset, stream in zip((s.offsets[x.id] for x in streams), streams):
        assert 0 <= offset < stream.period


def test_usecase_gate_programs(usecase):
    topology, streams = usecase
    s = synthesize(streams, topology, USECASE_PARAMS)
    gcl = s.ports["B1->B2"]
    assert gcl.cycle_time == s.hyperperiod
    assert [(e.gate_mask, e.duration) for e in gcl.entries[:3]] == [(0x1F, _us(212)), (0x80, _us(1012)),
                                                                    (0x40, _us(1012))]
    for w in s.windows:
        mask = gate_state_at(s.ports[w.port], w.open)
        assert mask == 1 << w.traffic_class
        assert gate_state_at(s.ports[w.port], w.close - 1) >> w.traffic_class & 1


def test_usecase_schedule_is_feasible(usecase):
    topology, streams = usecase
    s = synthesize(streams, topology, USECASE_PARAMS)
    report = check_schedule(s, streams, USECASE_PARAMS, topology)
    assert report.ok, report.to_text()
    # last window close - release + jitter
    assert report.worst_case[0] == _us(1436) + _us(500)
    assert report.margins[0] >= 8 * NS_PER_MS
    assert "FEASIBLE" in report.to_text()


def test_overloaded_stream_set_is_infeasible(usecase):
    topology, _ = usecase
    streams = [StreamSpec(id=i, talker=h, listener="h3", period=2 * NS_PER_MS, deadline=2 * NS_PER_MS,
                          jitter_bound=NS_PER_MS, traffic_class=7 - i) for i, h in enumerate(("h1", "h2"))]
    with pytest.raises(Infeasible) as info:
        synthesize(streams, topology, USECASE_PARAMS)
    assert "stream 1" in info.value.reason


def test_window_wider_than_cycle_is_infeasible(usecase):
    topology, _ = usecase
    stream = StreamSpec(id=0, talker="h1", listener="h3", period=NS_PER_MS, deadline=NS_PER_MS,
                        jitter_bound=NS_PER_MS, traffic_class=7)
    with pytest.raises(Infeasible):
        synthesize([stream], topology, USECASE_PARAMS)


def test_hyperperiod_must_be_a_multiple_of_the_quantum(usecase):
    topology, _ = usecase
    stream = StreamSpec(id=0, talker="h1", listener="h3", period=10 * NS_PER_MS + 1, deadline=10 * NS_PER_MS,
                        jitter_bound=NS_PER_MS, traffic_class=7)
    with pytest.raises(Infeasible):
        synthesize([stream], topology, USECASE_PARAMS)


def test_check_schedule_flags_overlap_and_narrow_windows(usecase):
    """Hand-built schedule: two windows collide on B2->h3, one is too narrow"""
    topology, streams = usecase
    s = synthesize(streams, topology, USECASE_PARAMS)
    windows = list(s.windows)
    victim = next(i for i, w in enumerate(windows) if w.stream_id == 2 and w.instance == 0)
    windows[victim] = windows[victim].model_copy(update={"open": _us(1000), "close": _us(1500)})
    broken = s.model_copy(update={"windows": windows})

    report = check_schedule(broken, streams, USECASE_PARAMS, topology)
    assert not report.ok
    overlaps = [v for v in report.violations if v.check == "a"]
    assert overlaps and all(v.port == "B2->h3" for v in overlaps)
    assert (_us(1000), _us(1436)) in [v.interval for v in overlaps]
    assert [v.check for v in report.violations if v.stream_id == 2 and v.check == "c"] == ["c"]


def test_check_schedule_flags_missing_windows(usecase):
    topology, streams = usecase
    s = synthesize(streams, topology, USECASE_PARAMS)
    thinned = s.model_copy(update={"windows": [w for w in s.windows if not (w.stream_id == 1 and w.instance == 2)]})
    report = check_schedule(thinned, streams, USECASE_PARAMS, topology)
    assert any(v.check == "windows" and v.stream_id == 1 for v in report.violations)


def test_check_schedule_deadline(usecase):
    topology, streams = usecase
    s = synthesize(streams, topology, USECASE_PARAMS)
    tight = [x.model_copy(update={"deadline": NS_PER_MS}) if x.id == 0 else x for x in streams]
    report = check_schedule(s, tight, USECASE_PARAMS, topology)
    assert any(v.check == "b" and v.stream_id == 0 for v in report.violations)


def test_open_gates_schedule(usecase):
    topology, streams = usecase
    s = open_gates(streams, topology)
    assert sorted(s.ports) == ["B1->B2", "B2->h3"]
    assert all(g.entries == [GateEntry(gate_mask=0xFF, duration=s.hyperperiod)] for g in s.ports.values())
    assert set(s.offsets.values()) == {0}


def test_usecase_simulation_validates(usecase):
    """
    Three hyperperiods on C2 over ten seeds: every deadline and window holds,
    e2e.nic stays within a tenth of the deadline, and each frame crosses every
    scheduled port inside its own window
    """
    topology, streams = usecase
    s = synthesize(streams, topology, USECASE_PARAMS)
    deadlines = {x.id: x.deadline for x in streams}
    for seed in range(10):
        traces = run(topology, streams, s, platform_profile("C2").model, ProbeConfig(),
                     duration=3 * s.hyperperiod, seed=seed, profile_name="C2")
        assert traces.metadata.generated == traces.metadata.delivered == 33

        report = validate_against_trace(s, streams, traces)
        assert report.ok, f"seed {seed}: {report.to_text()}"
        assert report.offenders == []
        for verdict in report.streams:
            assert verdict.worst_e2e_nic <= deadlines[verdict.stream_id] // 10, f"seed {seed}"
            assert verdict.jitter_range <= 1 * NS_PER_MS

        for port in s.ports:
            rows = pass_through(traces, s, port)
            assert rows
            for row in rows:
                assert 0 <= row.open_offset and row.complete_offset <= row.width, f"seed {seed}: {row}"


def test_fault_injection_is_caught(usecase):
    """A frame held past its window fails validation alone"""
    topology, streams = usecase
    s = synthesize(streams, topology, USECASE_PARAMS)
    fault = FaultInjection(stream_id=0, seq=0, port="B1->B2", delay=2 * NS_PER_MS)
    traces = run(topology, streams, s, platform_profile("C2").model, ProbeConfig(),
                 duration=3 * s.hyperperiod, seed=42, fault=fault)
    report = validate_against_trace(s, streams, traces)
    assert not report.ok
    assert report.offenders == [(0, 0)]
    assert {(stream_id, seq) for stream_id, seq, _ in report.window_violations} == {(0, 0)}
    assert "offending frame: stream 0 seq 0" in report.to_text()


def test_trace_from_another_schedule_is_rejected(usecase):
    topology, streams = usecase
    s = synthesize(streams, topology, USECASE_PARAMS)
    traces = run(topology, streams, s, LatencyModel.zero(), ProbeConfig(), duration=s.hyperperiod, seed=1)
    other = synthesize(streams, topology, USECASE_PARAMS.model_copy(update={"intrinsic_jitter": _us(400)}))
    with pytest.raises(TraceMismatch):
        validate_against_trace(other, streams, traces)


def _random_case(rng):
    n = rng.randint(1, 4)
    talkers = [f"h{i}" for i in range(n)]
    links = [LinkSpec(endpoint_a="B1", endpoint_b="B2", rate=GBPS),
             LinkSpec(endpoint_a="B2", endpoint_b="hL", rate=GBPS)]
    for h in talkers:
        links.append(LinkSpec(endpoint_a=h, endpoint_b=rng.choice(("B1", "B2")), rate=GBPS))
    topology = Topology(hosts=[*talkers, "hL"], bridges=["B1", "B2"], links=links)
    streams = []
    for i, h in enumerate(talkers):
        period = rng.choice((2, 4, 8)) * NS_PER_MS
        streams.append(StreamSpec(id=i, talker=h, listener="hL", period=period, deadline=period,
                                  jitter_bound=period, frame_size=rng.choice((500, 1000, 1500)),
                                  traffic_class=rng.choice((6, 7))))
    return topology, streams


def test_synthesized_schedules_pass_analysis_and_worst_case_run():
    """
    Random stream sets, classes drawn with repeats: whatever the synthesizer
    returns passes the analytic check, and runs with residence pinned at zero
    and at the bridge bound stay inside every window and the analytic worst case
    """
    rng = random.Random(99)
    params = NetworkParams(bridge_latency_bound=_us(50), intrinsic_jitter=_us(100))
    fast_model = LatencyModel.zero()
    slow_model = LatencyModel.zero().model_copy(
        update={"bridge_residence": Distribution.constant(params.bridge_latency_bound)})
    placed = shared = 0
    for case in range(120):
        topology, streams = _random_case(rng)
        try:
            s = synthesize(streams, topology, params)
        except Infeasible:
            continue
        placed += 1
        report = check_schedule(s, streams, params, topology)
        assert report.ok, f"case {case}: {report.to_text()}"

        windows_by_port = {}
        for w in s.windows:
            windows_by_port.setdefault(w.port, []).append(w)
        for port, windows in windows_by_port.items():
            spans = sorted((w.open % s.hyperperiod, w.width) for w in windows)
            for (a, wa), (b, _) in zip(spans, spans[1:]):
                assert a + wa <= b, f"case {case}: overlap on {port}"
            owners = {}
            for w in windows:
                owners.setdefault(w.traffic_class, set()).add(w.stream_id)
            shared += any(len(ids) > 1 for ids in owners.values())

        for model in (fast_model, slow_model):
            traces = run(topology, streams, s, model, ProbeConfig(), duration=2 * s.hyperperiod, seed=case)
            validation = validate_against_trace(s, streams, traces)
            assert validation.ok, f"case {case}: {validation.to_text()}"
            for verdict in validation.streams:
                assert verdict.worst_e2e_nic <= report.worst_case[verdict.stream_id]
    assert placed >= 25
    assert shared >= 5


def _shared_class_case():
    """Two class 7 streams from B1 to hL, one hyperperiod each"""
    links = [LinkSpec(endpoint_a="hA", endpoint_b="B1", rate=GBPS),
             LinkSpec(endpoint_a="hB", endpoint_b="B1", rate=GBPS),
             LinkSpec(endpoint_a="B1", endpoint_b="B2", rate=GBPS),
             LinkSpec(endpoint_a="B2", endpoint_b="hL", rate=GBPS)]
    topology = Topology(hosts=["hA", "hB", "hL"], bridges=["B1", "B2"], links=links)
    streams = [StreamSpec(id=i, talker=h, listener="hL", period=8 * NS_PER_MS, deadline=8 * NS_PER_MS,
                          jitter_bound=NS_PER_MS, traffic_class=7) for i, h in enumerate(("hA", "hB"))]
    params = NetworkParams(bridge_latency_bound=_us(50), intrinsic_jitter=_us(100))
    return topology, streams, params


def test_same_class_windows_keep_a_gap():
    """
    The second stream's windows start only once its frame can no longer be
    waiting while the first stream's window of the same class is open
    """
    topology, streams, params = _shared_class_case()
    s = synthesize(streams, topology, params)
    assert s.offsets == {0: 0, 1: _us(262)}
    windows = {(w.stream_id, w.port): (w.open, w.close) for w in s.windows}
    assert windows[(0, "B1->B2")] == (_us(62), _us(274))
    assert windows[(0, "B2->hL")] == (_us(124), _us(336))
    assert windows[(1, "B1->B2")] == (_us(324), _us(536))
    assert windows[(1, "B2->hL")] == (_us(386), _us(598))
    assert check_schedule(s, streams, params, topology).ok

    zero = LatencyModel.zero()
    slow = zero.model_copy(update={"bridge_residence": Distribution.constant(params.bridge_latency_bound)})
    for model in (zero, slow):
        traces = run(topology, streams, s, model, ProbeConfig(), duration=3 * s.hyperperiod, seed=1)
        report = validate_against_trace(s, streams, traces)
        assert report.ok, report.to_text()
        for port in s.ports:
            assert all(0 <= row.open_offset for row in pass_through(traces, s, port))


def test_check_schedule_flags_back_to_back_same_class_windows():
    """Stream 1 packed right behind stream 0: its frame can leave through stream 0's window"""
    topology, streams, params = _shared_class_case()
    s = synthesize(streams, topology, params)
    packed = [w.model_copy(update={"open": w.open - _us(50), "close": w.close - _us(50)})
              if w.stream_id == 1 else w for w in s.windows]
    broken = s.model_copy(update={"windows": packed, "offsets": {0: 0, 1: _us(212)}})
    report = check_schedule(broken, streams, params, topology)
    assert not report.ok
    early = [v for v in report.violations if v.check == "early"]
    assert early and all(v.stream_id == 1 for v in early)
    assert {v.port for v in early} == {"B1->B2", "B2->hL"}
    assert not [v for v in report.violations if v.check == "a"]


def test_gcl_gaps_carry_best_effort_classes(usecase):
    topology, streams = usecase
    s = synthesize(streams, topology, USECASE_PARAMS)
    used = {1 << x.traffic_class for x in streams}
    for gcl in s.ports.values():
        assert isinstance(gcl, GateControlList)
        masks = {e.gate_mask for e in gcl.entries}
        assert masks - used == {0x1F}


def test_windows_are_ordered_along_the_path(usecase):
    topology, streams = usecase
    s = synthesize(streams, topology, USECASE_PARAMS)
    for k in range(6):
        b1 = s.windows_for(0, "B1->B2")[k]
        b2 = s.windows_for(0, "B2->h3")[k]
        assert isinstance(b1, GateWindow)
        assert b2.open >= b1.open + _us(12) + USECASE_PARAMS.bridge_latency_bound
    assert isinstance(s, Schedule)
