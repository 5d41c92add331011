"""
Domain model for TSN emulation
Topology, streams, frames, gate control lists and schedules, plus routing and
period arithmetic. All times are integer nanoseconds.
"""
import hashlib
import logging
import math
import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import networkx as nx
from pydantic import BaseModel, ConfigDict, Field, model_validator

from tsnemu.core.errors import HyperperiodOverflow, NoRoute

logger = logging.getLogger(__name__)

TimeNs = int

MAX_TIME_NS: TimeNs = 2**63 - 1
NS_PER_US = 1_000
NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000

MIN_FRAME_SIZE = 64
MAX_FRAME_SIZE = 1522
NUM_TRAFFIC_CLASSES = 8

_DURATION_UNITS = {"ns": 1, "us": NS_PER_US, "µs": NS_PER_US, "ms": NS_PER_MS, "s": NS_PER_S}
_DURATION_RE = re.compile(r"^\s*([0-9]+(?:\.[0-9]+)?)\s*(ns|us|µs|ms|s)?\s*$")


def egress_port_id(node: str, next_node: str) -> str:
    """Name of the egress port of `node` facing `next_node`"""
    return f"{node}->{next_node}"


class LinkSpec(BaseModel):
    """Full-duplex link between two nodes"""
    model_config = ConfigDict(frozen=True)

    endpoint_a: str
    endpoint_b: str
    rate: int = Field(gt=0, description="bits per second")
    propagation_delay: TimeNs = Field(default=0, ge=0)

    def joins(self, a: str, b: str) -> bool:
        return {self.endpoint_a, self.endpoint_b} == {a, b}


class Topology(BaseModel):
    """
    Emulated network graph

    Construction only checks field types; structural invariants are reported
    by validate_topology so that a broken file can be diagnosed in one pass.
    """
    model_config = ConfigDict(frozen=True)

    hosts: List[str] = Field(default_factory=list)
    bridges: List[str] = Field(default_factory=list)
    links: List[LinkSpec] = Field(default_factory=list)

    @property
    def nodes(self) -> List[str]:
        return list(self.hosts) + list(self.bridges)

    def is_bridge(self, node: str) -> bool:
        return node in self.bridges

    def link_between(self, a: str, b: str) -> Optional[LinkSpec]:
        for link in self.links:
            if link.joins(a, b):
                return link
        return None

    def graph(self) -> nx.Graph:
        """Undirected graph of the topology, links stored on the edges"""
        g = nx.Graph()
        g.add_nodes_from(self.nodes)
        for link in self.links:
            g.add_edge(link.endpoint_a, link.endpoint_b, link=link)
        return g


class Hop(BaseModel):
    """One node of a stream path and the egress port it forwards on"""
    model_config = ConfigDict(frozen=True)

    node: str
    egress_port: Optional[str] = None


class StreamSpec(BaseModel):
    """Periodic time-aware stream from a talker to a listener"""
    model_config = ConfigDict(frozen=True)

    id: int = Field(ge=0)
    talker: str
    listener: str
    period: TimeNs = Field(gt=0)
    deadline: TimeNs = Field(gt=0)
    jitter_bound: TimeNs = Field(ge=0)
    frame_size: int = Field(default=1500, ge=MIN_FRAME_SIZE, le=MAX_FRAME_SIZE)
    traffic_class: int = Field(ge=0, lt=NUM_TRAFFIC_CLASSES)
    path: List[Hop] = Field(default_factory=list)
    allow_deadline_beyond_period: bool = False

    @model_validator(mode="after")
    def _check_invariants(self) -> "StreamSpec":
        if self.deadline > self.period and not self.allow_deadline_beyond_period:
            raise ValueError(f"stream {self.id}: deadline {self.deadline} exceeds period {self.period}")
        if self.path:
            if self.path[0].node != self.talker or self.path[-1].node != self.listener:
                raise ValueError(f"stream {self.id}: path must run from {self.talker} to {self.listener}")
            if self.path[-1].egress_port is not None:
                raise ValueError(f"stream {self.id}: listener hop cannot have an egress port")
            for hop, nxt in zip(self.path, self.path[1:]):
                if hop.egress_port != egress_port_id(hop.node, nxt.node):
                    raise ValueError(f"stream {self.id}: hop {hop.node} does not egress towards {nxt.node}")
        return self

    @property
    def bridges(self) -> List[str]:
        return [hop.node for hop in self.path[1:-1]]

    @property
    def scheduled_ports(self) -> List[str]:
        """Bridge egress ports along the path, in traversal order"""
        return [hop.egress_port for hop in self.path[1:-1]]

    def links(self, topology: Topology) -> List[LinkSpec]:
        """Links traversed by the stream, talker side first"""
        return [topology.link_between(a.node, b.node) for a, b in zip(self.path, self.path[1:])]


class StreamSet(BaseModel):
    """Streams file document"""
    streams: List[StreamSpec]


@dataclass(frozen=True)
class Frame:
    stream_id: int
    seq: int
    size: int
    traffic_class: int
    release_time: TimeNs


class GateEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    gate_mask: int = Field(ge=0, le=0xFF)
    duration: TimeNs = Field(gt=0)


class GateControlList(BaseModel):
    """
    Cyclic IEEE 802.1Qbv gate program of one egress port

    Bit k of a mask set means the class-k gate is open. The entry durations must
    add up to the cycle time; this is checked on every construction.
    """
    model_config = ConfigDict(frozen=True)

    base_time: TimeNs = Field(ge=0)
    cycle_time: TimeNs = Field(gt=0)
    entries: List[GateEntry]

    @model_validator(mode="after")
    def _check_cycle(self) -> "GateControlList":
        if not self.entries:
            raise ValueError("gate control list needs at least one entry")
        total = sum(entry.duration for entry in self.entries)
        if total != self.cycle_time:
            raise ValueError(f"entry durations sum to {total}, cycle_time is {self.cycle_time}")
        return self

    @classmethod
    def always_open(cls, base_time: TimeNs = 0, cycle_time: TimeNs = NS_PER_MS) -> "GateControlList":
        return cls(base_time=base_time, cycle_time=cycle_time,
                   entries=[GateEntry(gate_mask=0xFF, duration=cycle_time)])


class GateWindow(BaseModel):
    """Exclusive gate window allotted to one stream instance on one port"""
    model_config = ConfigDict(frozen=True)

    stream_id: int
    instance: int = Field(ge=0)
    port: str
    traffic_class: int = Field(ge=0, lt=NUM_TRAFFIC_CLASSES)
    open: TimeNs = Field(ge=0)
    close: TimeNs

    @property
    def width(self) -> TimeNs:
        return self.close - self.open


class Schedule(BaseModel):
    """
    Release offsets and per-port gate programs over one hyperperiod

    Windows are kept alongside the GCLs: they record which stream instance
    owns which open interval, which the GCL masks alone cannot tell.
    """
    model_config = ConfigDict(frozen=True)

    instant_zero: TimeNs = Field(default=0, ge=0)
    hyperperiod: TimeNs = Field(gt=0)
    offsets: Dict[int, TimeNs] = Field(default_factory=dict)
    ports: Dict[str, GateControlList] = Field(default_factory=dict)
    windows: List[GateWindow] = Field(default_factory=list)

    def digest(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode()).hexdigest()

    def windows_for(self, stream_id: int, port: str) -> List[GateWindow]:
        return sorted((w for w in self.windows if w.stream_id == stream_id and w.port == port),
                      key=lambda w: w.instance)


@dataclass
class TopologyReport:
    ok: bool
    violations: List[str] = field(default_factory=list)


def validate_topology(t: Topology) -> TopologyReport:
    """
    Check the structural invariants of a topology

    Args:
        t: Topology to inspect

    Returns:
        Report listing every violation found; ok when there are none
    """
    violations: List[str] = []
    nodes = t.nodes
    if not nodes:
        return TopologyReport(ok=False, violations=["no nodes"])

    seen = set()
    for node in nodes:
        if node in seen:
            violations.append(f"duplicate id: {node}")
        seen.add(node)

    pairs = set()
    for link in t.links:
        a, b = link.endpoint_a, link.endpoint_b
        for end in (a, b):
            if end not in seen:
                violations.append(f"dangling link: {a}-{b} references unknown node {end}")
        if a == b:
            violations.append(f"self-loop: {a}")
        pair = frozenset((a, b))
        if pair in pairs:
            violations.append(f"parallel link: {a}-{b}")
        pairs.add(pair)

    g = t.graph()
    if g.number_of_nodes() and not nx.is_connected(g):
        violations.append("disconnected graph")

    return TopologyReport(ok=not violations, violations=violations)


def route(t: Topology, talker: str, listener: str) -> List[Hop]:
    """
    Shortest bridge path between two hosts

    Equal-length candidates are ordered by their node-id sequence and the
    smallest one wins, so the result does not depend on link order.

    Raises:
        NoRoute: unknown or non-host endpoints, talker == listener, or unreachable
    """
    if talker not in t.hosts or listener not in t.hosts:
        raise NoRoute(f"{talker} -> {listener}: both endpoints must be hosts")
    if talker == listener:
        raise NoRoute(f"{talker} -> {listener}: zero-hop path")

    allowed = set(t.bridges) | {talker, listener}
    g = t.graph().subgraph(allowed)
    try:
        nodes = min(nx.all_shortest_paths(g, talker, listener))
    except nx.NetworkXNoPath:
        raise NoRoute(f"{talker} -> {listener}: unreachable") from None

    hops = [Hop(node=a, egress_port=egress_port_id(a, b)) for a, b in zip(nodes, nodes[1:])]
    hops.append(Hop(node=listener))
    logger.debug(f"route {talker} -> {listener}: {nodes}")
    return hops


def resolve_paths(streams: Sequence[StreamSpec], t: Topology) -> List[StreamSpec]:
    """Fill empty stream paths with route() and check the given ones against the topology"""
    resolved = []
    for stream in streams:
        if not stream.path:
            stream = stream.model_copy(update={"path": route(t, stream.talker, stream.listener)})
        for hop, nxt in zip(stream.path, stream.path[1:]):
            if t.link_between(hop.node, nxt.node) is None:
                raise NoRoute(f"stream {stream.id}: no link {hop.node}-{nxt.node}")
        for node in stream.bridges:
            if not t.is_bridge(node):
                raise NoRoute(f"stream {stream.id}: {node} is not a bridge")
        resolved.append(stream)
    return resolved


def hyperperiod(streams: Sequence[StreamSpec]) -> TimeNs:
    """Least common multiple of the stream periods"""
    if not streams:
        raise ValueError("hyperperiod of an empty stream set")
    result = math.lcm(*(s.period for s in streams))
    if result > MAX_TIME_NS:
        raise HyperperiodOverflow(f"hyperperiod {result} ns exceeds 64-bit range")
    return result


def transmission_time(size: int, rate: int) -> TimeNs:
    """Serialization time of `size` bytes at `rate` bit/s, rounded up to the next ns"""
    if size <= 0 or rate <= 0:
        raise ValueError(f"size and rate must be positive (size={size}, rate={rate})")
    return -(-size * 8 * NS_PER_S // rate)


def parse_duration(text: Union[str, int]) -> TimeNs:
    """Parse '10ms', '500us', '12ns', '1.5ms' or a bare ns count into ns"""
    if isinstance(text, int):
        return text
    match = _DURATION_RE.match(text)
    if not match:
        raise ValueError(f"invalid duration {text!r}")
    number, unit = match.groups()
    try:
        value = Decimal(number) * _DURATION_UNITS[unit or "ns"]
    except InvalidOperation:
        raise ValueError(f"invalid duration {text!r}") from None
    if value != value.to_integral_value():
        raise ValueError(f"duration {text!r} is not a whole number of nanoseconds")
    return int(value)


def load_topology(path: Union[str, Path]) -> Topology:
    return Topology.model_validate_json(Path(path).read_text())


def load_streams(path: Union[str, Path]) -> List[StreamSpec]:
    return StreamSet.model_validate_json(Path(path).read_text()).streams


def load_schedule(path: Union[str, Path]) -> Schedule:
    return Schedule.model_validate_json(Path(path).read_text())


def dump_model(obj: BaseModel, path: Union[str, Path]) -> None:
    Path(path).write_text(obj.model_dump_json(indent=2) + "\n")
