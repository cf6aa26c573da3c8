"""Exception hierarchy shared by all mocadet modules."""


class MocadetError(Exception):
    """Base class for all library errors."""


class ShapeError(MocadetError):
    """Tensor dimensions are incompatible with the requested operation."""


class ValidationError(MocadetError):
    """An input value violates a documented precondition."""


class ContractError(MocadetError):
    """An API contract was violated (wrong call order, illegal argument combination)."""


class TokenLookupError(MocadetError, KeyError):
    """A (modality, class) pair is not declared in the token registry."""


class IngestError(MocadetError):
    """A dataset file is malformed or inconsistent."""


class RegistryFormatError(IngestError):
    """A token registry file cannot be parsed into the documented schema."""


class DuplicateKeyError(IngestError):
    """A file declares the same key twice."""


class CheckpointError(MocadetError):
    """A checkpoint file is malformed or does not match the running config."""
