"""Respiratory-audio screening on synthetic cohorts: features, a small CNN, cohort splits and evaluation."""

__version__ = "0.1.0"
