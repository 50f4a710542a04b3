"""Desk-scale numerical laboratory for decoupling along the parabola.

Modules: ``caps`` (cap geometry), ``field`` (band-limited fields),
``wavepacket`` (tubes and pruning), ``highlow`` (kernels, square functions and
lemma checks), ``decouple`` (ratios and classification), ``torus`` (discrete
restriction), ``circle`` (lattice points on circles) and ``cli``.
"""

from .errors import InvalidArgument, InvariantViolation

__version__ = "0.1.0"

__all__ = ["InvalidArgument", "InvariantViolation", "__version__"]
