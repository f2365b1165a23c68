"""Scattering and inverse scattering for a 2D Dirac operator with a linear domain wall.

Modules, bottom-up: :mod:`spectral_basis` (Hermite/Legendre bases and free
modes), :mod:`greens_slab` (Lippmann-Schwinger slab solver), :mod:`tr_merge`
(TR matrices, merging and S extraction), :mod:`linearized` (Born data and its
closed-form inversion), :mod:`adjoint_inversion` (adjoint gradient and
descent) and :mod:`experiments` (presets and run artifacts).
"""

__version__ = "0.1.0"
