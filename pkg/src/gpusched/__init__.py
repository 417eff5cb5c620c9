"""Trace-driven GPU cluster scheduling with an RL prioritiser and a spread-vs-pack allocator."""

__version__ = "0.1.0"
