"""Global pooling operators for sparse-feature image classification.

The package is organised bottom-up:

- :mod:`sparsepool.tensor`   rank-4 tensor checks, channel statistics, SPT4 io
- :mod:`sparsepool.pooling`  the four global pooling operators and backward
- :mod:`sparsepool.layers`   conv / dense / loss building blocks and SGD
- :mod:`sparsepool.model`    the crop-pooling classification network
- :mod:`sparsepool.data`     synthetic dataset generator and folder ingest
- :mod:`sparsepool.estimator` sklearn-style wrappers
- :mod:`sparsepool.harness`  experiment configs, training runs, reports
- :mod:`sparsepool.cli`      the ``sparsepool`` command line entry point
"""

from .errors import (
    ConfigurationError,
    DataError,
    FormatError,
    NonFiniteError,
    ShapeError,
    SparsePoolError,
    TrainingDivergedError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DataError",
    "FormatError",
    "NonFiniteError",
    "ShapeError",
    "SparsePoolError",
    "TrainingDivergedError",
    "__version__",
]
