"""Instruction-tuning data generation and judge-based evaluation for narrated surgical videos."""

__version__ = "0.1.0"
