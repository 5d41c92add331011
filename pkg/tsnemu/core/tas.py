"""
IEEE 802.1Qbv Time-Aware Shaper for one egress port
Eight gated FIFO queues, a cyclic gate program and length-aware,
non-preemptive strict-priority transmission selection
"""
import logging
from bisect import bisect_right
from collections import deque
from dataclasses import dataclass
from itertools import accumulate
from typing import Deque, Iterator, List, Optional, Sequence, Tuple

from tsnemu.core.errors import QueueOverflow, TimeBeforeBase
from tsnemu.core.model import (
    MAX_TIME_NS,
    NUM_TRAFFIC_CLASSES,
    Frame,
    GateControlList,
    LinkSpec,
    TimeNs,
    transmission_time,
)

logger = logging.getLogger(__name__)

Interval = Tuple[TimeNs, TimeNs]


@dataclass(frozen=True)
class Transmission:
    """One frame on the wire, with the open gate interval it used"""
    frame: Frame
    start: TimeNs
    finish: TimeNs
    window_open: TimeNs
    window_close: TimeNs  # MAX_TIME_NS when the gate never closes


def gate_state_at(gcl: GateControlList, t: TimeNs) -> int:
    """
    Gate mask in force at time t

    Entries are half-open [start, end): at an entry boundary the next entry
    already applies.

    Raises:
        TimeBeforeBase: t precedes the GCL base time
    """
    if t < gcl.base_time:
        raise TimeBeforeBase(f"t={t} precedes base_time={gcl.base_time}")
    phase = (t - gcl.base_time) % gcl.cycle_time
    starts = list(accumulate((e.duration for e in gcl.entries[:-1]), initial=0))
    return gcl.entries[bisect_right(starts, phase) - 1].gate_mask


def _open_segments(gcl: GateControlList, cls: int) -> Tuple[List[Interval], bool]:
    """
    Open intervals of class `cls` within one cycle, adjacent entries merged

    An interval touching the cycle end is joined with the one starting the next
    cycle, so its end may exceed cycle_time. The flag reports an always-open gate.
    """
    segments: List[Interval] = []
    pos = 0
    for entry in gcl.entries:
        end = pos + entry.duration
        if entry.gate_mask >> cls & 1:
            if segments and segments[-1][1] == pos:
                segments[-1] = (segments[-1][0], end)
            else:
                segments.append((pos, end))
        pos = end

    if segments == [(0, gcl.cycle_time)]:
        return [], True
    if len(segments) >= 2 and segments[0][0] == 0 and segments[-1][1] == gcl.cycle_time:
        first = segments.pop(0)
        last = segments.pop()
        segments.append((last[0], gcl.cycle_time + first[1]))
    return segments, False


def iter_open_windows(gcl: GateControlList, cls: int, t: TimeNs) -> Iterator[Interval]:
    """
    Absolute open intervals of class `cls` that end after t, in time order

    No interval starts before the GCL base time.
    """
    segments, always_open = _open_segments(gcl, cls)
    if always_open:
        yield gcl.base_time, MAX_TIME_NS
        return
    if not segments:
        return
    n = (t - gcl.base_time) // gcl.cycle_time - 1
    while True:
        origin = gcl.base_time + n * gcl.cycle_time
        for start, end in segments:
            if origin + end > max(t, gcl.base_time):
                yield max(origin + start, gcl.base_time), origin + end
        n += 1


def earliest_fit(gcl: GateControlList, cls: int, duration: TimeNs, t: TimeNs) -> Optional[Tuple[TimeNs, Interval]]:
    """
    Earliest start >= t with `duration` of uninterrupted openness for class `cls`

    Scans one full cycle ahead of t. Returns the start and the open interval
    holding it, or None when no interval in the scan is long enough.
    """
    limit = t + gcl.cycle_time
    for start, end in iter_open_windows(gcl, cls, t):
        if start >= limit:
            return None
        begin = max(start, t)
        if end - begin >= duration:
            return begin, (start, end)
    return None


class EgressPort:
    """
    Egress port of a node: eight class queues behind a gate program

    Single transmitter; one frame at a time. The owner (event loop or replay)
    decides when to call next_transmission and keeps the port busy until the
    returned finish time.
    """

    def __init__(self, port_id: str, link: LinkSpec, gcl: GateControlList,
                 capacity: Optional[int] = None):
        self.port_id = port_id
        self.link = link
        self.gcl = gcl
        self.capacity = capacity
        self.queues: List[Deque[Frame]] = [deque() for _ in range(NUM_TRAFFIC_CLASSES)]

    def __len__(self) -> int:
        return sum(len(q) for q in self.queues)

    def transmission_time(self, frame: Frame) -> TimeNs:
        return transmission_time(frame.size, self.link.rate)

    def enqueue(self, frame: Frame, t: TimeNs) -> "EgressPort":
        """
        Append a frame to the queue of its traffic class

        Raises:
            QueueOverflow: the class queue is already at capacity
        """
        if not 0 <= frame.traffic_class < NUM_TRAFFIC_CLASSES:
            raise ValueError(f"traffic class {frame.traffic_class} out of range")
        queue = self.queues[frame.traffic_class]
        if self.capacity is not None and len(queue) >= self.capacity:
            raise QueueOverflow(f"{self.port_id}: class {frame.traffic_class} queue full at t={t}")
        queue.append(frame)
        logger.debug(f"{self.port_id}: t={t} enqueued stream {frame.stream_id} seq {frame.seq}")
        return self

    def _candidate(self, t: TimeNs) -> Optional[Tuple[int, TimeNs, Interval]]:
        best = None
        for cls in range(NUM_TRAFFIC_CLASSES - 1, -1, -1):
            queue = self.queues[cls]
            if not queue:
                continue
            fit = earliest_fit(self.gcl, cls, self.transmission_time(queue[0]), t)
            if fit is None:
                continue
            # strictly earlier only: on equal start the higher class seen first wins
            if best is None or fit[0] < best[1]:
                best = (cls, fit[0], fit[1])
        return best

    def earliest_eligible(self, t: TimeNs) -> Optional[Tuple[int, TimeNs]]:
        """Class and start time of the next transmission given the current queues, without dequeuing"""
        candidate = self._candidate(t)
        return None if candidate is None else (candidate[0], candidate[1])

    def next_transmission(self, t: TimeNs) -> Optional[Transmission]:
        """
        Dequeue and time the next frame to transmit at or after t

        Among queues whose head fits in the remaining open interval, the earliest
        start wins and ties go to the highest class. None when nothing can be
        sent within one cycle of t.
        """
        candidate = self._candidate(t)
        if candidate is None:
            return None
        cls, start, (window_open, window_close) = candidate
        frame = self.queues[cls].popleft()
        finish = start + self.transmission_time(frame)
        return Transmission(frame=frame, start=start, finish=finish,
                            window_open=window_open, window_close=window_close)


def replay(port: EgressPort, arrivals: Sequence[Tuple[TimeNs, Frame]]) -> List[Transmission]:
    """
    Drive a port through timed frame arrivals

    Arrivals at the same instant as a candidate start are queued before the
    selection is made. Frames that never fit a window stay queued.
    """
    pending = sorted(arrivals, key=lambda item: item[0])
    sent: List[Transmission] = []
    if not pending:
        return sent
    t = max(port.gcl.base_time, pending[0][0])
    i = 0
    while True:
        while i < len(pending) and pending[i][0] <= t:
            port.enqueue(pending[i][1], pending[i][0])
            i += 1
        next_arrival = pending[i][0] if i < len(pending) else None
        candidate = port.earliest_eligible(t)
        if candidate is not None and (next_arrival is None or candidate[1] < next_arrival):
            transmission = port.next_transmission(candidate[1])
            sent.append(transmission)
            t = transmission.finish
            continue
        if next_arrival is None:
            break
        t = next_arrival
    return sent


def gate_timeline(gcl: GateControlList, cycles: int = 1) -> List[Tuple[TimeNs, int]]:
    """(time_ns, mask) at every entry boundary over `cycles` cycles"""
    rows = []
    for n in range(cycles):
        origin = gcl.base_time + n * gcl.cycle_time
        offset = 0
        for entry in gcl.entries:
            rows.append((origin + offset, entry.gate_mask))
            offset += entry.duration
    return rows
