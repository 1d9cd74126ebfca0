"""Exception types shared across the package.

The CLI maps these onto process exit codes: configuration problems
(bad config files, malformed meshes, inconsistent labels) exit with 2,
solver failures with 3, and hitting an iteration cap without meeting
the stopping test with 4.
"""


class PlatebendError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PlatebendError):
    """Invalid or inconsistent problem configuration."""


class MeshError(ConfigError):
    """Invalid mesh data (topology, orientation, labels)."""


class MeshFormatError(MeshError):
    """Malformed mesh file; carries the offending 1-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class SolverError(PlatebendError):
    """A linear solve failed or produced an unusable result."""
