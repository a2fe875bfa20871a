"""Exception types shared across the package.

The CLI maps these onto process exit codes: config/usage problems exit 2,
data/format problems exit 3, numeric divergence exits 4.
"""


class ShapeError(ValueError):
    """Dimensional mismatch; the message names the offending axis."""


class NonFiniteError(ValueError):
    """NaN or Inf encountered where finite values are required."""


class DivergenceError(RuntimeError):
    """Optimization produced a non-finite loss.

    Attributes:
        step: index of the gradient step at which the loss went non-finite.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class GraphContractError(RuntimeError):
    """Misuse of the computation graph, e.g. backward from a non-scalar."""


class FormatError(ValueError):
    """A serialized artifact is corrupt or belongs to a different dataset."""


class IngestError(ValueError):
    """Bad input data; the message carries the 1-based row number.

    Attributes:
        row: offending CSV row number (header = row 1), if known.
    """

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class ConfigError(ValueError):
    """Invalid configuration; the message names the field."""
