"""Data-driven compact models of a p-n junction diode, with a small
nonlinear circuit simulator for validating them in a bridge rectifier.
"""

__version__ = "0.1.0"
