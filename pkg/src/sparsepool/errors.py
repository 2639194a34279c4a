"""Exception hierarchy shared across the package.

The CLI maps these to exit codes: ConfigurationError exits 2, every other
SparsePoolError exits 1.
"""


class SparsePoolError(Exception):
    """Base class for all errors raised by this package."""


class NonFiniteError(SparsePoolError):
    """An array that must be finite contains NaN or Inf."""


class ShapeError(SparsePoolError):
    """Array rank or dimensions violate an operation's contract."""


class FormatError(SparsePoolError):
    """A binary file (tensor dump or checkpoint) is malformed."""


class DataError(SparsePoolError):
    """Dataset construction or ingestion failed (packing, leakage, layout)."""


class ConfigurationError(SparsePoolError):
    """Invalid configuration value or inconsistent option combination."""


class TrainingDivergedError(SparsePoolError):
    """A non-finite loss or gradient appeared during training.

    Carries enough context to locate the failure; training must abort
    rather than write a corrupt checkpoint.
    """

    def __init__(self, message, epoch=None, batch=None, where=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.where = where

    def diagnostic(self):
        return {
            "error": str(self),
            "epoch": self.epoch,
            "batch": self.batch,
            "where": self.where,
        }
