"""Desk-scale toolkit for day/night visual place recognition.

Modules: :mod:`geo` (distances, sun position), :mod:`store` (manifests,
databases, checkpoints), :mod:`nightgen` (night-style transform and image
metrics), :mod:`synthdata` (synthetic places), :mod:`encoder`,
:mod:`losses`, :mod:`trainer`, :mod:`retrieval`, :mod:`eval` and
:mod:`ablation`. The ``nocbench`` command wraps them (:mod:`cli`).
"""

from .errors import DataError, DivergenceError, FormatError, NocbenchError, ShapeError

__version__ = "0.1.0"

__all__ = ["DataError", "DivergenceError", "FormatError", "NocbenchError", "ShapeError", "__version__"]
