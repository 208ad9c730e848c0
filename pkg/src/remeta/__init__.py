"""Relational event models for event streams and clustered event data.

Single sequences are fitted by Newton-Raphson; streams and clusters are then
combined from the per-batch or per-cluster ``(beta_hat, omega_hat)`` pairs by
fixed-effect or random-effects pooling, so past events never need refitting.
"""

__version__ = "0.1.0"
