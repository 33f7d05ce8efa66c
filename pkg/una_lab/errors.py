"""Error hierarchy shared by the library and the command-line front end.

Every error carries the process exit code the CLI maps it to: input problems
exit with 2, numerical breakdowns with 3.
"""
from typing import Optional


class UnaError(Exception):
    exit_code = 3


class ValidationError(UnaError, ValueError):
    exit_code = 2


class NumericalError(UnaError, ArithmeticError):
    exit_code = 3


class UnknownPrompt(ValidationError):
    def __init__(self, prompt_id, n_prompts: int):
        super().__init__(f"unknown prompt id {prompt_id} (policy covers {n_prompts} prompts)")
        self.prompt_id = prompt_id


class MalformedResponse(ValidationError):
    pass


class VocabMismatch(ValidationError):
    pass


class FrozenPolicy(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class NonFrozenReference(ValidationError):
    pass


class NonFiniteReward(ValidationError):
    pass


class EmptyBatch(ValidationError):
    pass


class WrongFeedbackKind(ValidationError):
    pass


class NonTrainableModel(ValidationError):
    pass


class MissingEntry(ValidationError):
    pass


class KindMismatch(ValidationError):
    def __init__(self, msg: str):
        super().__init__(f"kind mismatch: {msg}")


class NonPositiveDenominator(ValidationError):
    pass


class NonPositiveInput(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class InvalidArgument(ValidationError):
    pass


class MissingArtifact(ValidationError):
    pass


class EmptyFile(ValidationError):
    pass


class LineError(ValidationError):
    """Base for errors tied to a line of a line-delimited input file."""

    def __init__(self, msg: str, line: Optional[int] = None):
        if line is not None:
            msg = f"line {line}: {msg}"
        super().__init__(msg)
        self.line = line


class ParseError(LineError):
    pass


class SchemaError(LineError):
    def __init__(self, field: str, msg: str, line: Optional[int] = None):
        super().__init__(f"field {field!r}: {msg}", line)
        self.field = field


class OutOfRange(LineError):
    pass


class NonFiniteGradient(NumericalError):
    pass


class NonFiniteTilt(NumericalError):
    pass


class NonFiniteEvaluation(NumericalError):
    pass
