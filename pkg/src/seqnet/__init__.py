"""Declarative encoder-decoder networks with loop-invariant hoisting."""

__version__ = "0.1.0"
