"""Exception classes shared across the package.

The CLI maps these onto distinct exit codes; library code raises them
directly. Plain ValueError/IndexError are used for ordinary argument
validation.
"""


class ConfigError(ValueError):
    """Invalid experiment configuration. Carries every problem found, not just the first."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class ConditionError(ValueError):
    """A condition referenced a concept the model does not know."""


class ModelError(ValueError):
    """Inconsistent model structure or input shape."""


class TrainingError(RuntimeError):
    """Training diverged. ``epoch`` records where."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class NumericError(ArithmeticError):
    """A latent went non-finite. ``step`` (and ``iteration``) record where."""

    def __init__(self, message, step=None, iteration=None):
        super().__init__(message)
        self.step = step
        self.iteration = iteration


class CapabilityError(RuntimeError):
    """An operation required a model contract (e.g. input gradients) the model lacks."""
