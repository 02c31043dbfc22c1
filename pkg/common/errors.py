"""
Exception hierarchy shared by every PrefixGuard sub-app
"""


class PrefixGuardError(Exception):
    """Base class for all toolkit errors"""


class RejectedInputError(PrefixGuardError, ValueError):
    """An operation's precondition was violated by its input"""


class ConfigError(RejectedInputError):
    """A config value or config file is invalid"""


class StepParseError(RejectedInputError):
    """A raw step document could not be parsed by the adapter"""

    def __init__(self, message: str, step_index: int):
        super().__init__(f"step {step_index}: {message}")
        self.step_index = step_index


class SplitLeakageError(RejectedInputError):
    """Evaluation was requested on ids that were used for fitting"""


class VectorizerMismatchError(RejectedInputError):
    """A model was asked to score steps encoded by a different vectorizer"""


class UndefinedMetricError(PrefixGuardError, ValueError):
    """A metric is undefined on the given data (e.g. a single class)"""


class NumericalDegeneracyError(PrefixGuardError, ArithmeticError):
    """A numerical quantity left its valid domain"""


class ArtifactIntegrityError(PrefixGuardError):
    """An artifact's content does not match the hash in its manifest"""
