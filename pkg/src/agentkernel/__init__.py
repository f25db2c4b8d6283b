"""Kernel for multi-turn tool-augmented agent rollouts and sequence-level policy optimization."""

__version__ = "0.1.0"
