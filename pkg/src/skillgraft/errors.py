"""Exception hierarchy. Each family maps to a CLI exit code."""

from __future__ import annotations


class SkillGraftError(Exception):
    exit_code = 1


class ConfigError(SkillGraftError, ValueError):
    """Invalid configuration, spec dimensions or out-of-range arguments."""

    exit_code = 2


class ShapeError(ConfigError):
    """Parameter vectors or inputs whose shapes do not line up."""


class DataError(SkillGraftError, ValueError):
    exit_code = 3


class NumericalError(SkillGraftError, ArithmeticError):
    exit_code = 4


class DegenerateDenominatorError(NumericalError):
    pass


class StoreError(SkillGraftError, OSError):
    exit_code = 5


class MagicError(StoreError):
    pass


class VersionError(StoreError):
    pass


class TruncationError(StoreError):
    pass


class NonFiniteError(StoreError):
    pass


class IntegrityError(StoreError):
    pass
