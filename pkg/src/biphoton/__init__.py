"""Simulation and correlation analysis of spatially entangled photon pairs on sCMOS frame stacks."""

__version__ = "0.1.0"
