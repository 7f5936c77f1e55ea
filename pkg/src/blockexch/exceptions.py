"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input data violates a structural requirement.

    ``problems`` holds every issue found, not only the first one.
    """

    def __init__(self, message, problems=None):
        super().__init__(message)
        self.problems = list(problems) if problems else [message]


class NumericalError(ArithmeticError):
    """A computation produced an unusable numerical result."""
