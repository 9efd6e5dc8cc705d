"""Experiment environments."""
