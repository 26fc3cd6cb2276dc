"""Simulated out-of-order core with a PMU, and the PMU-based operand leak built on it."""
__version__ = "0.1.0"
