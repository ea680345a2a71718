"""Simulation and analysis toolkit for cavity-enhanced optical spin readout."""

__version__ = "0.1.0"
