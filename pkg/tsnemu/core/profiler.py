"""
Latency profiling over frame timestamps
Per-figure latency series, box-plot statistics, jitter, the intrinsic-jitter
estimate used to size gate windows, and gate pass-through offsets
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict

from tsnemu.core.errors import EmptySeries, InsufficientSamples, NonMonotonic, UnknownPort
from tsnemu.core.model import NS_PER_US, Schedule, TimeNs

if TYPE_CHECKING:
    from tsnemu.core.engine import TraceSet

logger = logging.getLogger(__name__)

POINTS = ("T1", "T2", "T3", "T4", "T5")
FIGURES = ("sendL", "br1L", "br2L", "arrL", "e2e", "e2e_nic")
FIGURE_POINTS = {
    "sendL": ("T1", "T2"),
    "br1L": ("T2", "T3"),
    "br2L": ("T3", "T4"),
    "arrL": ("T4", "T5"),
    "e2e": ("T1", "T5"),
    "e2e_nic": ("T1", "T4"),
}
BRIDGE_FIGURES = ("br1L", "br2L")
MIN_ESTIMATE_FRAMES = 100
ESTIMATE_GRANULARITY = 100 * NS_PER_US


@dataclass(frozen=True)
class TimestampRecord:
    """T1..T5 of one frame; absent points are None"""
    stream_id: int
    seq: int
    T1: Optional[TimeNs] = None
    T2: Optional[TimeNs] = None
    T3: Optional[TimeNs] = None
    T4: Optional[TimeNs] = None
    T5: Optional[TimeNs] = None
    methods: Mapping[str, str] = field(default_factory=dict)
    scheduled: Optional[TimeNs] = None

    def point(self, name: str) -> Optional[TimeNs]:
        return getattr(self, name)

    @property
    def complete(self) -> bool:
        return all(self.point(p) is not None for p in POINTS)


class StatSummary(BaseModel):
    """Box-plot summary; interpolated statistics may be fractional ns"""
    model_config = ConfigDict(frozen=True)

    count: int
    min: int
    q1: float
    median: float
    q3: float
    max: int
    mean: float
    stddev: float
    outliers: List[int]

    @property
    def range(self) -> int:
        return self.max - self.min

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1


class JitterStats(BaseModel):
    model_config = ConfigDict(frozen=True)

    range: float = 0
    iqr: float = 0
    stddev: float = 0
    sufficient: bool = False


class CharacterizationReport(BaseModel):
    """Outcome of an all-gates-open characterization run"""
    profile: str
    allocation: Optional[int] = None
    n_frames: int
    seed: int
    probes: Dict[str, Dict[str, Union[bool, str]]] = {}
    summaries: Dict[str, StatSummary] = {}
    jitter: Dict[str, JitterStats] = {}
    talker_error_bound: TimeNs = 0
    expected_medians: Dict[str, float] = {}
    passed: bool = False
    notes: List[str] = []
    intrinsic_jitter: Optional[TimeNs] = None


@dataclass(frozen=True)
class PassThrough:
    stream_id: int
    seq: int
    port: str
    open_offset: TimeNs
    complete_offset: TimeNs
    width: TimeNs

    @property
    def within(self) -> bool:
        return self.open_offset >= 0 and self.complete_offset <= self.width


def latencies(r: TimestampRecord) -> Dict[str, TimeNs]:
    """
    Latency figures of one frame

    sendL = T2-T1, br1L = T3-T2, br2L = T4-T3, arrL = T5-T4, e2e = T5-T1,
    e2e_nic = T4-T1. Figures whose points are missing are left out.

    Raises:
        NonMonotonic: a present timestamp precedes an earlier point
    """
    present = [(p, r.point(p)) for p in POINTS if r.point(p) is not None]
    for (p_prev, t_prev), (p_next, t_next) in zip(present, present[1:]):
        if t_next < t_prev:
            raise NonMonotonic(f"stream {r.stream_id} seq {r.seq}: {p_next}={t_next} < {p_prev}={t_prev}")

    result = {}
    for figure in FIGURES:
        start, end = FIGURE_POINTS[figure]
        t_start, t_end = r.point(start), r.point(end)
        if t_start is not None and t_end is not None:
            result[figure] = t_end - t_start
    return result


def figure_series(records: Sequence[TimestampRecord]) -> Dict[str, List[TimeNs]]:
    """Per-figure series over records, in record order; figures never present are omitted"""
    series: Dict[str, List[TimeNs]] = {f: [] for f in FIGURES}
    for record in records:
        for figure, value in latencies(record).items():
            series[figure].append(value)
    return {f: values for f, values in series.items() if values}


def summarize(series: Sequence[TimeNs]) -> StatSummary:
    """
    Box-plot statistics with linearly interpolated quartiles and 1.5 IQR fences

    Raises:
        EmptySeries: series has no values
    """
    if len(series) == 0:
        raise EmptySeries("cannot summarize an empty series")
    values = np.sort(np.asarray(series, dtype=np.int64))
    as_float = values.astype(np.float64)
    q1, median, q3 = np.percentile(as_float, [25, 50, 75])
    iqr = q3 - q1
    low, high = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    outliers = [int(v) for v in values if v < low or v > high]
    return StatSummary(
        count=int(values.size),
        min=int(values[0]),
        q1=float(q1),
        median=float(median),
        q3=float(q3),
        max=int(values[-1]),
        mean=float(np.mean(as_float)),
        stddev=float(np.std(as_float, ddof=1)) if values.size > 1 else 0.0,
        outliers=outliers,
    )


def jitter(series: Sequence[TimeNs]) -> JitterStats:
    """Range, IQR and sample standard deviation; all zero and flagged below two samples"""
    if len(series) < 2:
        return JitterStats(sufficient=False)
    summary = summarize(series)
    return JitterStats(range=summary.range, iqr=summary.iqr, stddev=summary.stddev, sufficient=True)


def estimate_intrinsic_jitter(report: CharacterizationReport) -> TimeNs:
    """
    Conservative intrinsic-jitter bound for schedule synthesis

    Talker error bound plus the latency range of every characterized bridge
    plus the range of e2e.nic left outside the bridges (sendL when the bridge
    probes were on, the whole e2e.nic otherwise), rounded up to 100 us.

    Raises:
        InsufficientSamples: fewer than 100 characterized frames
    """
    if report.n_frames < MIN_ESTIMATE_FRAMES:
        raise InsufficientSamples(f"{report.n_frames} frames; at least {MIN_ESTIMATE_FRAMES} needed")
    total = report.talker_error_bound
    for figure in BRIDGE_FIGURES:
        if figure in report.summaries:
            total += report.summaries[figure].range
    residual = report.summaries.get("sendL")
    if residual is None:
        residual = report.summaries.get("e2e_nic")
    if residual is not None:
        total += residual.range
    estimate = -(-total // ESTIMATE_GRANULARITY) * ESTIMATE_GRANULARITY
    logger.info(f"intrinsic jitter: components {total} ns -> estimate {estimate} ns")
    return estimate


def pass_through(traces: "TraceSet", s: Schedule, port: str) -> List[PassThrough]:
    """
    Offsets of each transmission on `port` relative to its assigned window

    Frame seq k of a stream with n windows per hyperperiod on the port uses
    window instance k mod n, shifted by (k div n) hyperperiods.

    Raises:
        UnknownPort: port has no gate program in the schedule
    """
    if port not in s.ports:
        raise UnknownPort(f"port {port!r} not in schedule")
    per_stream: Dict[int, list] = {}
    for window in s.windows:
        if window.port == port:
            per_stream.setdefault(window.stream_id, []).append(window)
    for windows in per_stream.values():
        windows.sort(key=lambda w: w.instance)

    rows = []
    for tx in traces.transmissions:
        if tx.port != port or tx.stream_id not in per_stream:
            continue
        windows = per_stream[tx.stream_id]
        cycle, instance = divmod(tx.seq, len(windows))
        window = windows[instance]
        window_open = s.instant_zero + window.open + cycle * s.hyperperiod
        rows.append(PassThrough(stream_id=tx.stream_id, seq=tx.seq, port=port,
                                open_offset=tx.start - window_open,
                                complete_offset=tx.finish - window_open,
                                width=window.width))
    return rows


def summary_frame(summaries: Mapping[str, StatSummary]) -> pd.DataFrame:
    rows = [{
        "figure": figure, "count": s.count, "min": s.min, "q1": s.q1, "median": s.median,
        "q3": s.q3, "max": s.max, "mean": s.mean, "stddev": s.stddev, "n_outliers": len(s.outliers),
    } for figure, s in summaries.items()]
    return pd.DataFrame(rows, columns=["figure", "count", "min", "q1", "median", "q3", "max",
                                       "mean", "stddev", "n_outliers"])


def write_summary_csv(summaries: Mapping[str, StatSummary], path: Union[str, Path]) -> None:
    summary_frame(summaries).to_csv(path, index=False)


def write_pass_through_csv(rows: Sequence[PassThrough], path: Union[str, Path]) -> None:
    frame = pd.DataFrame(
        [{"stream": r.stream_id, "seq": r.seq, "open_offset_ns": r.open_offset,
          "complete_offset_ns": r.complete_offset, "width_ns": r.width} for r in rows],
        columns=["stream", "seq", "open_offset_ns", "complete_offset_ns", "width_ns"])
    frame.to_csv(path, index=False)
