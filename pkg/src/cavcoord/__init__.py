"""Robust cooperative intersection crossing.

Covariance-steering trajectory planning under chance constraints, coupled
to a context-aware, bandwidth-limited status-update scheduler, with a
desk-scale closed-loop simulation harness.
"""

__version__ = "0.1.0"
