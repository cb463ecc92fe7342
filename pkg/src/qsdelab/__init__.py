"""Classical matrix-level emulator and bound validator for
amplitude-encoded linear-SDE solvers."""

__version__ = "0.1.0"
