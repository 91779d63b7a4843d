"""Exception types shared across the package.

CLI exit-code mapping: UsageError -> 1, ValidationError subclasses -> 2,
everything else derived from ChardiffError -> 3.
"""


class ChardiffError(Exception):
    """Base class for all package errors."""


class ValidationError(ChardiffError):
    """Bad inputs caught before any work starts (configs, paths, schemas)."""


class UsageError(ChardiffError):
    """Command-line misuse."""


class VocabularyError(ValidationError):
    """Vocabulary construction violates the 97-token contract."""


class PromptError(ValidationError):
    """Render word contains a character outside the vocabulary."""


class QuoteParseError(ValidationError):
    """Unbalanced double quotes in a caption."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class LayoutError(ChardiffError):
    """Words cannot be placed on the canvas at the minimum glyph scale."""


class MaskAlignmentError(ChardiffError):
    """Connected-component count does not match the annotated characters."""


class ScorerError(ChardiffError):
    """Aesthetic scorer failed; distinct from a reject decision."""


class RecognizerError(ChardiffError):
    """Text recognizer failed on an image."""


class ScheduleError(ValidationError):
    """Invalid noise-schedule bounds."""


class TruncationError(ChardiffError):
    """Conditioning sequence exceeds the configured maximum length."""


class CheckpointError(ChardiffError):
    """Checkpoint file is missing, malformed, or inconsistent."""


class ConfigError(ValidationError):
    """Run configuration file fails schema validation."""


class NonFiniteLossError(ChardiffError):
    """Training produced a non-finite loss; diagnostics were written."""


class LockError(ValidationError):
    """Run output directory is already owned by another run."""
