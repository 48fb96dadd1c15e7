"""Experiment presets (JSON)."""
