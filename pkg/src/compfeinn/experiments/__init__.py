"""Configurable studies built on the library: FEM baselines, forward and inverse runs."""
