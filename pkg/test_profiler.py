#!/usr/bin/env python
"""
Tests for latency figures, statistics, the intrinsic jitter estimate and gate pass-through
"""
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pandas as pd
import pytest

sys.path.append(str(Path(__file__).parent))

from tsnemu.core.errors import EmptySeries, InsufficientSamples, NonMonotonic, UnknownPort
from tsnemu.core.model import NS_PER_US, GateControlList, GateWindow, Schedule
from tsnemu.core.profiler import (
    CharacterizationReport,
    StatSummary,
    TimestampRecord,
    estimate_intrinsic_jitter,
    figure_series,
    jitter,
    latencies,
    pass_through,
    summarize,
    write_pass_through_csv,
    write_summary_csv,
)


def test_latencies_per_figure():
    r = TimestampRecord(stream_id=0, seq=0, T1=100, T2=150, T3=400, T4=700, T5=760)
    assert latencies(r) == {"sendL": 50, "br1L": 250, "br2L": 300, "arrL": 60, "e2e": 660, "e2e_nic": 600}


def test_missing_points_drop_their_figures():
    r = TimestampRecord(stream_id=0, seq=0, T1=100, T4=700, T5=760)
    assert latencies(r) == {"arrL": 60, "e2e": 660, "e2e_nic": 600}


def test_negative_difference_is_rejected():
    with pytest.raises(NonMonotonic):
        latencies(TimestampRecord(stream_id=0, seq=3, T1=500, T2=400))
    with pytest.raises(NonMonotonic):
        latencies(TimestampRecord(stream_id=0, seq=3, T1=100, T4=50))


def test_latency_figures_add_up():
    """sendL + br1L + br2L == e2e.nic and e2e.nic + arrL == e2e for any complete record"""
    rng = np.random.default_rng(2024)
    for seq in range(500):
        t1 = int(rng.integers(0, 10**9))
        steps = rng.integers(0, 5 * 10**6, size=4)
        t2, t3, t4, t5 = (t1 + np.cumsum(steps)).tolist()
        figures = latencies(TimestampRecord(stream_id=0, seq=seq, T1=t1, T2=t2, T3=t3, T4=t4, T5=t5))
        assert figures["sendL"] + figures["br1L"] + figures["br2L"] == figures["e2e_nic"]
        assert figures["e2e_nic"] + figures["arrL"] == figures["e2e"]


def test_summarize_linear_quartiles_and_fences():
    s = summarize([1, 2, 3, 4, 100])
    assert (s.count, s.min, s.max) == (5, 1, 100)
    assert (s.q1, s.median, s.q3) == (2.0, 3.0, 4.0)
    assert s.outliers == [100]
    assert s.range == 99 and s.iqr == 2.0
    assert s.stddev == pytest.approx(np.std([1, 2, 3, 4, 100], ddof=1))


def test_summarize_interpolates_fractional_ns():
    s = summarize([10, 20, 30, 40])
    assert s.q1 == 17.5 and s.median == 25.0 and s.q3 == 32.5


def test_summarize_single_value_and_empty():
    s = summarize([7])
    assert (s.min, s.median, s.max, s.stddev, s.outliers) == (7, 7.0, 7, 0.0, [])
    with pytest.raises(EmptySeries):
        summarize([])


def test_jitter():
    j = jitter([10, 20, 30, 40])
    assert j.sufficient and j.range == 30 and j.iqr == 15.0
    flagged = jitter([10])
    assert not flagged.sufficient
    assert (flagged.range, flagged.iqr, flagged.stddev) == (0, 0, 0)


def test_figure_series_keeps_record_order():
    records = [TimestampRecord(stream_id=0, seq=i, T1=0, T4=10 * (3 - i)) for i in range(3)]
    assert figure_series(records) == {"e2e_nic": [30, 20, 10]}


def _summary(low, high):
    return StatSummary(count=100, min=low, q1=low, median=low, q3=high, max=high, mean=low, stddev=0,
                       outliers=[])


def test_intrinsic_jitter_estimate_rounds_up():
    report = CharacterizationReport(
        profile="C2", n_frames=1000, seed=1, talker_error_bound=80,
        summaries={"br1L": _summary(20_000, 240_000), "br2L": _summary(20_000, 239_000),
                   "sendL": _summary(10_000, 20_000), "e2e_nic": _summary(300_000, 800_000)})
    # 80 + 220000 + 219000 + 10000 -> 449080 -> 500 us
    assert estimate_intrinsic_jitter(report) == 500 * NS_PER_US


def test_intrinsic_jitter_falls_back_to_e2e_nic():
    report = CharacterizationReport(profile="C2", n_frames=100, seed=1, talker_error_bound=0,
                                    summaries={"e2e_nic": _summary(0, 100 * NS_PER_US)})
    assert estimate_intrinsic_jitter(report) == 100 * NS_PER_US


def test_intrinsic_jitter_needs_100_frames():
    with pytest.raises(InsufficientSamples):
        estimate_intrinsic_jitter(CharacterizationReport(profile="C2", n_frames=99, seed=1))


def _schedule():
    windows = [GateWindow(stream_id=0, instance=k, port="B1->B2", traffic_class=7,
                          open=200_000 + k * 1_000_000, close=1_212_000 + k * 1_000_000) for k in range(2)]
    return Schedule(instant_zero=5_000_000, hyperperiod=2_000_000, offsets={0: 0},
                    ports={"B1->B2": GateControlList.always_open(5_000_000, 2_000_000)}, windows=windows)


def _tx(seq, start, port="B1->B2"):
    return SimpleNamespace(port=port, stream_id=0, seq=seq, start=start, finish=start + 12_000)


def test_pass_through_offsets_use_instance_and_cycle():
    """seq k uses window k mod n shifted by k div n hyperperiods from instant zero"""
    traces = SimpleNamespace(transmissions=[
        _tx(0, 5_250_000), _tx(1, 6_200_000), _tx(3, 8_200_000 + 1_005_000), _tx(0, 1, port="h1->B1")])
    rows = pass_through(traces, _schedule(), "B1->B2")
    assert [(r.seq, r.open_offset, r.complete_offset, r.width) for r in rows] == [
        (0, 50_000, 62_000, 1_012_000),
        (1, 0, 12_000, 1_012_000),
        (3, 1_005_000, 1_017_000, 1_012_000),
    ]
    assert rows[0].within and rows[1].within and not rows[2].within


def test_pass_through_unknown_port():
    with pytest.raises(UnknownPort):
        pass_through(SimpleNamespace(transmissions=[]), _schedule(), "B9->B2")


def test_csv_writers(tmp_path):
    write_summary_csv({"e2e": summarize([1, 2, 3])}, tmp_path / "summary.csv")
    frame = pd.read_csv(tmp_path / "summary.csv")
    assert list(frame.columns) == ["figure", "count", "min", "q1", "median", "q3", "max", "mean", "stddev",
                                   "n_outliers"]
    traces = SimpleNamespace(transmissions=[_tx(0, 5_250_000)])
    write_pass_through_csv(pass_through(traces, _schedule(), "B1->B2"), tmp_path / "pt.csv")
    pt = pd.read_csv(tmp_path / "pt.csv")
    assert list(pt.columns) == ["stream", "seq", "open_offset_ns", "complete_offset_ns", "width_ns"]
    assert pt.iloc[0]["open_offset_ns"] == 50_000
