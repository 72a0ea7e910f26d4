"""Simulator, planner and evaluation harness for semi-autonomous
steerable-needle lung interventions."""

__version__ = "0.1.0"
