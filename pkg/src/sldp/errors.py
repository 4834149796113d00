"""Exception hierarchy.

Every error carries a short ``reason`` code so the command line can report
failures in a single machine-parsable line.
"""

from __future__ import annotations


class SLDPError(Exception):
    reason = "error"


class MeshError(SLDPError):
    reason = "mesh"


class LocationError(MeshError):
    reason = "location"


class RegistryError(SLDPError):
    reason = "registry"


class ControlSetError(SLDPError):
    reason = "controls"


class TimeGridError(SLDPError):
    reason = "time_grid"


class InvarianceError(SLDPError):
    reason = "invariance"


class NumericError(SLDPError):
    reason = "numeric"


class SearchSpaceError(SLDPError):
    reason = "search_space"


class InsufficientDataError(SLDPError):
    reason = "insufficient_data"


class ConfigError(SLDPError):
    reason = "config"
