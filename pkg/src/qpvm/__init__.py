"""Quantum classifiers with POVM-pooled convolutions and PVM multi-class readout."""

__version__ = "0.1.0"
