"""Cross-domain hyperspectral pixel classification via a shared abundance space.

The package trains a reconstruction network (shared simplex encoder, affine
per-band decoder, mutual-information discriminator) jointly with a
densely-connected 3D-CNN classifier on labeled source pixels, then predicts
target-domain pixels with no target labels and no retraining.
"""

import os as _os

# BLAS thread caps must land in the environment before numpy loads anywhere
# in this process, so this runs ahead of every submodule import.
if "PCTL_THREADS" in _os.environ:
    _n = _os.environ["PCTL_THREADS"]
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _n)

from .errors import (
    ConfigError,
    ContractError,
    DataMismatchError,
    DimensionError,
    DivergenceError,
    DomainError,
    ParseError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DataMismatchError",
    "DimensionError",
    "DivergenceError",
    "DomainError",
    "ParseError",
]
