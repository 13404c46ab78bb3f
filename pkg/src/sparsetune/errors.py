"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class AccountingError(RuntimeError):
    """Memory-ledger bookkeeping is inconsistent (e.g. free without alloc)."""


class DataError(ValueError):
    """Corpus or artifact contents are invalid."""


class LoadError(RuntimeError):
    """A persisted artifact could not be loaded."""


class DependencyError(RuntimeError):
    """A pipeline stage was invoked before the stage it depends on."""
