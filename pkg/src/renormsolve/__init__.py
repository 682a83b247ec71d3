"""Finite element solver for nonlinear Neumann problems with L^1 data.

Modules: ``discretization`` (meshes, P1 fields, norms), ``model`` (operators
and assumption checks), ``solver`` (Newton and Picard), ``renorm``
(epsilon continuation and estimates), ``cli`` (configs and reports).
"""

__version__ = "0.1.0"
