"""Robust simulation of client-server protocols over oblivious noisy channels."""

from robustsim.params import PotentialCoefficients, SimulationParams, derive_params

__all__ = ["PotentialCoefficients", "SimulationParams", "derive_params"]
__version__ = "0.1.0"
