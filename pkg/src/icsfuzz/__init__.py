"""Multi-agent, feedback-driven fuzzing for industrial control protocols."""

__version__ = "0.1.0"
