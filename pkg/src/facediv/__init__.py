"""Interpretable face features from spatially and feature-wise diverse filters.

Submodules: ``tensor`` (reverse-mode autodiff), ``geometry`` (landmark mesh
and occluders), ``losses``, ``network``, ``training``, ``synthdata``,
``analysis`` and the ``facediv`` command line in ``cli``.
"""

__version__ = "0.1.0"

from . import analysis, geometry, losses, network, synthdata, tensor, training  # noqa: F401
