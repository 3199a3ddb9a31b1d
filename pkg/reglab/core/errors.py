"""Exception hierarchy shared by the library, the experiments and the CLI."""

from typing import Optional


class ReglabError(Exception):
    """Base class for every error raised by reglab."""


class DimensionError(ReglabError, ValueError):
    pass


class NonFiniteError(ReglabError, ValueError):
    pass


class EnumerationLimitError(ReglabError, ValueError):
    pass


class NoConsistentModeError(ReglabError, ValueError):
    pass


class RankDeficientError(ReglabError, ValueError):
    pass


class ConfigMismatchError(ReglabError, ValueError):
    """Guidance configuration incompatible with the model or measurement."""


class InsufficientTrialsError(ReglabError, ValueError):
    pass


class IntegrationError(ReglabError, RuntimeError):
    def __init__(self, message: str, time: float):
        super().__init__(message)
        self.time = time

    def __reduce__(self):
        return IntegrationError, (str(self), self.time)


class NonFiniteStateError(IntegrationError):
    def __init__(self, time: float):
        super().__init__(f"state became non-finite at t={time:.17g}", time)

    def __reduce__(self):
        return NonFiniteStateError, (self.time,)


class StepUnderflowError(IntegrationError):
    def __init__(self, time: float, step: float, gain: float):
        super().__init__(
            f"step size {step:.3g} fell below min_step at t={time:.17g} "
            f"(local gain ~ {gain:.3g}; field is too stiff for the tolerance)",
            time,
        )
        self.step = step
        self.gain = gain

    def __reduce__(self):
        return StepUnderflowError, (self.time, self.step, self.gain)


class TrialError(ReglabError, RuntimeError):
    """A single experiment trial failed; carries what is needed to replay it."""

    def __init__(self, experiment: str, trial: int, seed: int, cause: BaseException):
        super().__init__(f"{experiment}: trial {trial} (seed {seed}) failed: {cause}")
        self.experiment = experiment
        self.trial = trial
        self.seed = seed
        self.cause = cause

    def __reduce__(self):
        return TrialError, (self.experiment, self.trial, self.seed, self.cause)

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "trial": self.trial,
            "seed": self.seed,
            "error": f"{type(self.cause).__name__}: {self.cause}",
        }


class ConfigError(ReglabError, ValueError):
    def __init__(self, key: str, message: str, line: Optional[int] = None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{key}: {message}{where}")
        self.key = key
        self.message = message
        self.line = line

    def __reduce__(self):
        return ConfigError, (self.key, self.message, self.line)
