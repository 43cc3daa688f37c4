"""Debiased sample selection under label noise on desk-scale synthetic data.

Multi-expert shared-trunk network, pluggable noisy-sample selection criteria,
dual weighted samplers with mixup, and the diagnostics for selection bias.
"""

__version__ = "0.1.0"
