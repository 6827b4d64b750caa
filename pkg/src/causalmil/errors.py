"""Exception types shared across the package."""

from __future__ import annotations


class CausalMilError(Exception):
    """Base class for all package errors."""


class DimensionError(CausalMilError):
    """Shape or length mismatch between operands."""


class DomainError(CausalMilError):
    """A value lies outside an operation's domain."""


class ConfigError(CausalMilError):
    """Invalid or inconsistent configuration."""


class TapeError(CausalMilError):
    """Gradient-tape misuse, e.g. backward through a detached node."""


class ContractError(CausalMilError):
    """An internal invariant that should be unreachable was violated."""


class FormatError(CausalMilError):
    """Malformed on-disk data. Carries the byte offset of the defect."""

    def __init__(self, message: str, offset: int | None = None) -> None:
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(CausalMilError):
    """Non-finite value met during training. Carries the offending bag id."""

    def __init__(self, message: str, bag_id: str | None = None) -> None:
        if bag_id is not None:
            message = f"{message} (bag {bag_id!r})"
        super().__init__(message)
        self.bag_id = bag_id
