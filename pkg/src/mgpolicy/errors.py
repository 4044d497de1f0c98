"""Error taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, StorageError -> 3,
TrainingError -> 4. Everything else is a plain bug and exits 1.
"""


class ShapeError(ValueError):
    """Operands have incompatible shapes. Message names both shapes."""


class ParameterError(ValueError):
    """A scalar argument is outside its legal range."""


class ConfigError(ValueError):
    """Bad config file, unknown key, or invalid override."""


class ContractError(RuntimeError):
    """A caller violated an operation precondition (e.g. non-scalar loss)."""


class CapacityError(ValueError):
    """Requested sequence length exceeds what the model was built for."""


class TrainingError(RuntimeError):
    """Divergence: non-finite loss or gradient. Message names the parameter."""


class FormatError(ValueError):
    """Corrupt or foreign file. Message names the byte offset where known."""


class CompatibilityError(ValueError):
    """Two artifacts disagree on a shared contract (codebook size, code dim)."""


class StorageError(OSError):
    """Missing or unreadable input path."""
