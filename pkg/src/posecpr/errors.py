"""Exception types shared across the package."""


class CPRError(Exception):
    """Base class for all package errors."""


class ParseError(CPRError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ValidationError(CPRError):
    """Raised with every violated invariant, not just the first."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class ConfigError(ValidationError):
    def __init__(self, message: str):
        super().__init__([message])


class ShapeError(CPRError, ValueError):
    pass


class NumericalError(CPRError, FloatingPointError):
    pass


class DecodeError(CPRError):
    pass


class TransportError(CPRError):
    pass


class AuthError(CPRError):
    pass


class StageFailure(CPRError):
    def __init__(self, pair_id: str, stage: int, reason: str):
        super().__init__(f"{pair_id}: stage {stage} failed: {reason}")
        self.pair_id = pair_id
        self.stage = stage
        self.reason = reason


class PairDropped(CPRError):
    def __init__(self, pair_id: str, stage: int, variant: str, reason: str):
        super().__init__(f"{pair_id} dropped at stage {stage} ({variant}): {reason}")
        self.pair_id = pair_id
        self.stage = stage
        self.variant = variant
        self.reason = reason


class MissingEmbedding(CPRError, KeyError):
    def __str__(self):
        return f"no embedding for {self.args[0]!r}"


class IncompleteRecord(CPRError):
    pass


class MissingReverse(CPRError):
    pass
