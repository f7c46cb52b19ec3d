"""Desk-scale satellite-to-ground decoy-state BB84 simulator and
real-time key-distillation stack."""

__version__ = "0.1.0"
