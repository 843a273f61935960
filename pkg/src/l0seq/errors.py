"""Exception types shared across the package.

The CLI maps these onto distinct process exit codes; see ``l0seq.cli``.
"""


class ShapeError(ValueError):
    """Tensor operands have incompatible shapes for the requested operation."""


class ConfigError(ValueError):
    """Invalid configuration value or malformed config file."""


class DataError(ValueError):
    """Corpus, vocabulary, tag, or checkpoint-compatibility problem."""


class NumericError(RuntimeError):
    """Non-finite value where a finite one is required (training aborts)."""


class DegenerateMemoryError(RuntimeError):
    """Every source gate of a sentence is closed; there is nothing to attend to.

    Callers are expected to fall back to dense attention for the sentence."""
