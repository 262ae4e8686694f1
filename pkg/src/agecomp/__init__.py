"""Infection-age structured multi-strain competition: simulation and stability checks."""
