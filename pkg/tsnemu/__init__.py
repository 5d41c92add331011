"""tsnemu: deterministic TSN emulation, scheduling and profiling toolkit"""

__version__ = "0.1.1"
