"""Exception hierarchy.

Every domain failure carries a short machine-readable ``code`` that the CLI
prints as ``ERROR <code>: <detail>``.
"""

from __future__ import annotations


class ConsolidateError(Exception):
    code = "domain"


class ShapeError(ConsolidateError):
    code = "shape"


class DataError(ConsolidateError):
    code = "data"


class SingularMatrixError(ConsolidateError):
    code = "singular"


class RankError(ConsolidateError):
    code = "rank"


class ValidationError(ConsolidateError):
    code = "validation"


class IncompatibleError(ValidationError):
    code = "incompatible"


class RecipeError(ConsolidateError):
    code = "recipe"


class DegenerateGeometryError(ConsolidateError):
    code = "degenerate"


class InfeasibleMaskError(RecipeError):
    code = "infeasible-mask"


class TrainingError(ConsolidateError):
    code = "divergence"


class InvalidDistributionError(ConsolidateError):
    code = "distribution"


class FormatError(ConsolidateError):
    """Malformed MRGF file. ``offset`` is the byte position of the problem."""

    code = "format"

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class MagicError(FormatError):
    code = "bad-magic"


class VersionError(FormatError):
    code = "bad-version"


class TruncationError(FormatError):
    code = "truncated"


class LengthMismatchError(FormatError):
    code = "length-mismatch"


class HeaderError(FormatError):
    code = "bad-header"
