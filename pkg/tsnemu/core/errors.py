"""
Error types for the TSN emulation toolkit
Every failure an operation can signal has its own class so callers (and the
CLI exit-code mapping) can tell them apart
"""


class TsnEmuError(Exception):
    """Base class for all toolkit errors"""


class ConfigError(TsnEmuError):
    """A run input is missing, malformed or inconsistent"""


class NoRoute(TsnEmuError):
    """No bridge path joins talker and listener"""


class HyperperiodOverflow(TsnEmuError):
    """The lcm of the stream periods does not fit in 64-bit nanoseconds"""


class TimeBeforeBase(TsnEmuError):
    """A gate was queried before its GCL base time"""


class QueueOverflow(TsnEmuError):
    """An egress queue exceeded its configured capacity"""


class ScheduleIncomplete(TsnEmuError):
    """A bridge egress port on a stream path has no gate control list"""


class DurationTooShort(TsnEmuError):
    """Simulation horizon shorter than one hyperperiod"""


class Infeasible(TsnEmuError):
    """The synthesizer could not place a window within the deadline bound"""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class TraceMismatch(TsnEmuError):
    """A trace was produced under a different schedule"""


class NonMonotonic(TsnEmuError):
    """Timestamps of one frame go backwards"""


class EmptySeries(TsnEmuError):
    """Statistics requested over an empty series"""


class InsufficientSamples(TsnEmuError):
    """Too few frames to derive a conservative estimate"""


class UnknownPort(TsnEmuError):
    """The named egress port does not exist in the schedule or trace"""
