# services/errors.py

from .shared_config import EXIT_DATA, EXIT_NUMERIC, EXIT_USAGE


class PipelineError(Exception):
    """Base for every error the pipeline reports to a caller."""

    exit_code = EXIT_DATA


class UsageError(PipelineError):
    exit_code = EXIT_USAGE


class DataError(PipelineError):
    exit_code = EXIT_DATA


class NumericError(PipelineError):
    exit_code = EXIT_NUMERIC


class ConfigError(UsageError):
    pass


class UnknownLayer(UsageError):
    pass


# ---------------- Images ----------------
class UnsupportedFormat(DataError):
    pass


class MalformedImage(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class SingularHomography(DataError):
    pass


# ---------------- Text data ----------------
class InvalidVocabulary(DataError):
    pass


class EmptyVocabulary(DataError):
    pass


class MissingGlyph(DataError):
    def __init__(self, char: str):
        self.char = char
        super().__init__(f"glyph atlas has no entry for U+{ord(char):04X} ({char!r})")


class OutOfAlphabet(DataError):
    def __init__(self, char: str, text: str = ""):
        self.char = char
        where = f" in {text!r}" if text else ""
        super().__init__(f"U+{ord(char):04X} ({char!r}){where} is not in the label map")


class WordTooWide(DataError):
    pass


class InvalidManifest(DataError):
    pass


class UnwritableOutput(DataError):
    pass


class EmptyCorpus(DataError):
    pass


class BadCheckpoint(DataError):
    pass


# ---------------- Tensors / CTC ----------------
class ShapeMismatch(DataError):
    pass


class IndivisiblePool(ShapeMismatch):
    pass


class NonUnitHeight(ShapeMismatch):
    pass


class InputTooNarrow(ShapeMismatch):
    pass


class InfeasibleTarget(DataError):
    def __init__(self, required: int, frames: int):
        self.required = required
        self.frames = frames
        super().__init__(f"target needs at least {required} frames but only {frames} are available")


class InvalidLabel(DataError):
    pass


class InstanceTooLarge(UsageError):
    pass


class NonFiniteValue(NumericError):
    pass
