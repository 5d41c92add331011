"""
Stochastic latency model of the emulation platform
Per-component delay distributions fitted to box-plot figures (median, IQR),
probe methods and the built-in C1/C2/C3 platform presets
"""
import logging
import math
from enum import Enum
from functools import lru_cache
from typing import Dict, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import ndtri

from tsnemu.core.errors import ConfigError
from tsnemu.core.model import NS_PER_US, TimeNs

logger = logging.getLogger(__name__)

# standard normal quantile at 0.75
Z75 = 0.6744897501960817


class DistributionKind(str, Enum):
    SHIFTED_LOGNORMAL = "shifted-lognormal"
    CONSTANT = "constant"
    UNIFORM = "uniform"


class ProbeMethod(str, Enum):
    """Timestamping methods: clock_gettime (M1.x), veth sk_buff stamp read from user space (M2.x), XDP (M3)"""
    M1_1 = "M1.1"
    M1_2 = "M1.2"
    M2_1 = "M2.1"
    M2_2 = "M2.2"
    M3 = "M3"


class Distribution(BaseModel):
    """
    Delay law parameterized the way box plots report it

    shifted-lognormal: shift + s * exp(shape * Z), with s and shift solved so
    that the analytic median and IQR equal the configured ones.
    uniform: support [median - iqr, median + iqr], whose IQR is iqr.
    constant: always median.
    With probability outlier_prob a sample is multiplied by outlier_scale.
    """
    model_config = ConfigDict(frozen=True)

    kind: DistributionKind = DistributionKind.SHIFTED_LOGNORMAL
    median: TimeNs = Field(ge=0)
    iqr: TimeNs = Field(default=0, ge=0)
    outlier_prob: float = Field(default=0.0, ge=0.0, le=1.0)
    outlier_scale: float = Field(default=1.0, ge=1.0)
    shape: float = Field(default=0.5, gt=0.0)

    @model_validator(mode="after")
    def _check_fit(self) -> "Distribution":
        if self.kind is DistributionKind.UNIFORM and self.iqr > self.median:
            raise ValueError(f"uniform law with iqr {self.iqr} > median {self.median} goes negative")
        if self.kind is DistributionKind.SHIFTED_LOGNORMAL and self.shift < 0:
            raise ValueError(f"lognormal fit of median {self.median}, iqr {self.iqr} needs a negative shift; "
                             f"lower iqr or shape")
        return self

    @classmethod
    def constant(cls, value: TimeNs) -> "Distribution":
        return cls(kind=DistributionKind.CONSTANT, median=value)

    @classmethod
    def uniform(cls, median: TimeNs, iqr: TimeNs) -> "Distribution":
        return cls(kind=DistributionKind.UNIFORM, median=median, iqr=iqr)

    @property
    def scale(self) -> float:
        if self.kind is not DistributionKind.SHIFTED_LOGNORMAL or self.iqr == 0:
            return 0.0
        return self.iqr / (2.0 * math.sinh(self.shape * Z75))

    @property
    def shift(self) -> float:
        return self.median - self.scale

    def quantile(self, u: float) -> TimeNs:
        """Inverse CDF of the base law (no outliers), floored to whole ns"""
        if self.kind is DistributionKind.CONSTANT or self.iqr == 0:
            return self.median
        if self.kind is DistributionKind.UNIFORM:
            return math.floor(self.median - self.iqr + 2 * self.iqr * u)
        return math.floor(self.shift + self.scale * math.exp(self.shape * float(ndtri(u))))

    def draw(self, u: float, v: float) -> TimeNs:
        """Sample from two uniforms: u picks the quantile, v decides the outlier"""
        value = self.quantile(u)
        if v < self.outlier_prob:
            value = math.floor(value * self.outlier_scale)
        return value


def sample(d: Distribution, rng: np.random.Generator) -> TimeNs:
    """Draw one non-negative delay; always consumes exactly two uniforms from rng"""
    u = rng.random()
    v = rng.random()
    return d.draw(u, v)


class LatencyModel(BaseModel):
    """
    Delay components of the frame data path

    talker_send is the scheduling error of the talker (T1 against the nominal
    release); talker_stack the traversal from the sending process to the NIC;
    bridge_residence the per-bridge forwarding time without TAS queuing;
    probe_overhead the extra dwell caused by an enabled probe of each method.
    """
    model_config = ConfigDict(frozen=True)

    talker_send: Distribution
    talker_stack: Distribution
    bridge_residence: Distribution
    probe_overhead: Dict[ProbeMethod, Distribution]
    listener_delivery: Distribution

    def overhead(self, method: ProbeMethod) -> Distribution:
        return self.probe_overhead.get(method, Distribution.constant(0))

    @classmethod
    def zero(cls) -> "LatencyModel":
        """Noise-free model: every delay is zero"""
        none = Distribution.constant(0)
        return cls(talker_send=none, talker_stack=none, bridge_residence=none,
                   probe_overhead={m: none for m in ProbeMethod}, listener_delivery=none)


class PlatformProfile(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    description: str = ""
    allocation: Optional[int] = None
    model: LatencyModel


def _us(value: float) -> TimeNs:
    return int(round(value * NS_PER_US))


def _c1() -> LatencyModel:
    return LatencyModel(
        talker_send=Distribution(median=200, iqr=100),
        talker_stack=Distribution(median=_us(25), iqr=_us(10)),
        bridge_residence=Distribution(median=_us(260), iqr=_us(90), outlier_prob=0.01, outlier_scale=2.5),
        probe_overhead={
            ProbeMethod.M1_1: Distribution.constant(0),
            ProbeMethod.M1_2: Distribution.constant(0),
            ProbeMethod.M2_1: Distribution.constant(_us(2)),
            ProbeMethod.M2_2: Distribution.uniform(_us(8), _us(2)),
            ProbeMethod.M3: Distribution.constant(_us(6)),
        },
        listener_delivery=Distribution(median=_us(40), iqr=_us(15)),
    )


def _c2() -> LatencyModel:
    # bounded laws: the talker error stays under 80 ns, a bridge spans about 220 us,
    # the stack about 10 us, and two M2.2 probes add about 10 us
    return LatencyModel(
        talker_send=Distribution.uniform(40, 40),
        talker_stack=Distribution.uniform(_us(10), _us(5)),
        bridge_residence=Distribution.uniform(_us(120), _us(110)),
        probe_overhead={
            ProbeMethod.M1_1: Distribution.constant(0),
            ProbeMethod.M1_2: Distribution.constant(0),
            ProbeMethod.M2_1: Distribution.constant(_us(1)),
            ProbeMethod.M2_2: Distribution.uniform(_us(5), _us(1)),
            ProbeMethod.M3: Distribution.constant(_us(4)),
        },
        listener_delivery=Distribution.uniform(_us(20), _us(5)),
    )


_C3_OUTLIERS = {1: (0.005, 4.0), 2: (0.0, 1.0), 3: (0.01, 3.0)}


def _c3(allocation: int) -> LatencyModel:
    outlier_prob, outlier_scale = _C3_OUTLIERS[allocation]
    return LatencyModel(
        talker_send=Distribution.uniform(20, 20),
        talker_stack=Distribution.uniform(_us(4), _us(2)),
        bridge_residence=Distribution(median=_us(35), iqr=_us(12),
                                      outlier_prob=outlier_prob, outlier_scale=outlier_scale),
        probe_overhead={
            ProbeMethod.M1_1: Distribution.constant(0),
            ProbeMethod.M1_2: Distribution.constant(0),
            ProbeMethod.M2_1: Distribution.constant(500),
            ProbeMethod.M2_2: Distribution.uniform(_us(3), _us(1)),
            ProbeMethod.M3: Distribution.constant(2_500),
        },
        listener_delivery=Distribution.uniform(_us(8), _us(3)),
    )


PROFILE_NAMES = ("C1", "C2", "C3")
C3_ALLOCATIONS = (1, 2, 3)


def platform_profile(name: str, allocation: Optional[int] = None) -> PlatformProfile:
    """
    Built-in platform preset

    Args:
        name: C1 (preemptible kernel), C2 (PREEMPT_RT) or C3 (PREEMPT_RT + TCC)
        allocation: C3 only, process-to-core allocation 1, 2 or 3 (default 1)

    Returns:
        Profile with its latency model
    """
    check_preset_ordering()
    name = name.upper()
    if name == "C1":
        model, description = _c1(), "Xeon Gold 5120, preemptible kernel, no RT optimization"
    elif name == "C2":
        model, description = _c2(), "Xeon Gold 5120, PREEMPT_RT full preemption"
    elif name == "C3":
        allocation = allocation or 1
        if allocation not in C3_ALLOCATIONS:
            raise ValueError(f"C3 allocation must be one of {C3_ALLOCATIONS}, got {allocation}")
        model, description = _c3(allocation), f"i7-1185GRE, PREEMPT_RT + TCC, allocation {allocation}"
    else:
        raise ValueError(f"unknown platform profile {name!r}; expected one of {PROFILE_NAMES}")
    if name != "C3" and allocation is not None:
        raise ValueError("core allocation variants exist for C3 only")
    return PlatformProfile(name=name, description=description, allocation=allocation, model=model)


@lru_cache(maxsize=None)
def check_preset_ordering() -> None:
    """
    Bridge residence medians of the presets must satisfy C3 < C2 < C1, for
    every C3 allocation

    Raises:
        ConfigError: a preset is out of order
    """
    c3 = max(_c3(a).bridge_residence.median for a in C3_ALLOCATIONS)
    c2, c1 = _c2().bridge_residence.median, _c1().bridge_residence.median
    if not c3 < c2 < c1:
        raise ConfigError(f"preset bridge medians out of order (C3, C2, C1) = {[c3, c2, c1]}")


_ALLOWED_METHODS = {
    "T1": {ProbeMethod.M1_1, ProbeMethod.M1_2},
    "T2": {ProbeMethod.M2_2, ProbeMethod.M3},
    "T3": {ProbeMethod.M2_2, ProbeMethod.M3},
    "T4": {ProbeMethod.M2_1, ProbeMethod.M3},
    "T5": {ProbeMethod.M1_1, ProbeMethod.M1_2},
}
PROBE_POINTS = tuple(_ALLOWED_METHODS)
BRIDGE_POINTS = ("T2", "T3")


class ProbeSetting(BaseModel):
    model_config = ConfigDict(frozen=True)

    enabled: bool = True
    method: ProbeMethod


class ProbeConfig(BaseModel):
    """
    Timestamp probes at T1 (talker send), T2 (first bridge NIC), T3 (last bridge
    NIC), T4 (listener NIC) and T5 (listener process)
    """
    model_config = ConfigDict(frozen=True)

    T1: ProbeSetting = ProbeSetting(method=ProbeMethod.M1_1)
    T2: ProbeSetting = ProbeSetting(method=ProbeMethod.M2_2)
    T3: ProbeSetting = ProbeSetting(method=ProbeMethod.M2_2)
    T4: ProbeSetting = ProbeSetting(method=ProbeMethod.M2_1)
    T5: ProbeSetting = ProbeSetting(method=ProbeMethod.M1_1)

    @model_validator(mode="after")
    def _check_methods(self) -> "ProbeConfig":
        for point, allowed in _ALLOWED_METHODS.items():
            method = getattr(self, point).method
            if method not in allowed:
                names = sorted(m.value for m in allowed)
                raise ValueError(f"{point} cannot use {method.value}; allowed: {names}")
        return self

    def setting(self, point: str) -> ProbeSetting:
        return getattr(self, point)

    def enabled(self, point: str) -> bool:
        return self.setting(point).enabled

    def method(self, point: str) -> ProbeMethod:
        return self.setting(point).method

    def with_point(self, point: str, enabled: bool = True, method: Optional[ProbeMethod] = None) -> "ProbeConfig":
        current = self.setting(point)
        data = self.model_dump()
        data[point] = {"enabled": enabled, "method": method or current.method}
        return ProbeConfig.model_validate(data)

    def without_bridge_probes(self) -> "ProbeConfig":
        config = self
        for point in BRIDGE_POINTS:
            config = config.with_point(point, enabled=False)
        return config

    def with_bridge_method(self, method: ProbeMethod) -> "ProbeConfig":
        config = self
        for point in BRIDGE_POINTS:
            config = config.with_point(point, enabled=config.enabled(point), method=method)
        return config
