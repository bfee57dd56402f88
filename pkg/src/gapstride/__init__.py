"""Residual gap-aware transformer for 24-month CDR-SB change, with a
random-intercept mixed-model reference, GRU-D and STraTS comparators, and a
participant-level repeated-seed evaluation harness."""

__version__ = "0.1.0"
