"""Exception types shared across the package."""


class PrimeError(Exception):
    """Base class for all package-specific failures."""


class ShapeMismatch(PrimeError):
    """Operands have incompatible shapes."""


class DimMismatch(PrimeError):
    """A matrix or embedding does not match the dims declared for it."""


class AllKeysMasked(PrimeError):
    """An attention query has no valid (unmasked) key to attend to."""


class NonFiniteLoss(PrimeError):
    """A loss or checked value came out NaN/Inf."""


class InvalidConfig(PrimeError):
    """Configuration failed validation."""


class FormatError(PrimeError):
    """A binary container is malformed (bad magic, truncation, bad field)."""


class MissingFile(PrimeError):
    """A file referenced by a manifest does not exist."""


class ZeroVector(PrimeError):
    """A vector that must be normalized has zero norm."""


class NoObservedModality(PrimeError):
    """A patient (or override) ended up with no observed modality."""


class EmptyBatch(PrimeError):
    """An operation that needs at least one sample got none."""


class NoReliableToken(PrimeError):
    """Masked pooling found no reliable token (should be unreachable)."""


class DegenerateBins(PrimeError):
    """Time discretization is impossible (no uncensored event times)."""


class NoComparablePairs(PrimeError):
    """Concordance is undefined: no comparable pair exists."""


class SingleClass(PrimeError):
    """AUROC is undefined: only one class present."""


class Separation(PrimeError):
    """Cox fit has a monotone likelihood (a group without events)."""


class InsufficientGroup(PrimeError):
    """Risk stratification produced an empty group."""
