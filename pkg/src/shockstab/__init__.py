"""Stability analysis of viscous shock profiles for hyperbolic-parabolic systems.

Modules: ``models`` (systems and hypotheses), ``profile`` (connecting
orbits), ``spectral`` (endstate data and hyperbolic transport), ``evans``
(Evans function winding), ``templates`` (pointwise envelopes and the phase
kernel), ``evolution`` (time integration and phase iteration) and ``cli``.
"""

__version__ = "0.1.0"

from .errors import ShockStabError  # noqa: E402

__all__ = ["ShockStabError", "__version__"]
