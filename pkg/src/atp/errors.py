"""Exception hierarchy shared by every module."""


class AtpError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(AtpError, ValueError):
    """Malformed, non-finite or shape-inconsistent input."""


class DegenerateInputError(AtpError, ValueError):
    """Input is well-formed but carries no signal (e.g. an all-zero matrix)."""


class NumericError(AtpError, ArithmeticError):
    """An iterative routine failed to converge."""

    def __init__(self, message, iterations=None):
        super().__init__(message)
        self.iterations = iterations


class DegenerateComponentError(NumericError):
    """Alternating factorization could not fit a component after re-draws."""

    def __init__(self, component, retries):
        super().__init__(
            f"component {component} collapsed to zero norm after {retries} re-draws",
            iterations=retries,
        )
        self.component = component
        self.retries = retries


class RankDeficiencyError(AtpError, ValueError):
    def __init__(self, column):
        super().__init__(f"column {column} of U is linearly dependent on the previous columns")
        self.column = column


class DegenerateNormalizationError(AtpError, ArithmeticError):
    def __init__(self, query_index, value):
        super().__init__(
            f"row normalizer for query {query_index} is {value!r}, below the epsilon guard"
        )
        self.query_index = query_index
        self.value = value


class PreconditionError(AtpError, ValueError):
    """A documented precondition was violated by the caller."""


class MemoryBudgetError(AtpError, MemoryError):
    def __init__(self, predicted_bytes, budget_bytes):
        super().__init__(
            f"predicted peak of {predicted_bytes} bytes exceeds the budget of {budget_bytes} bytes"
        )
        self.predicted_bytes = predicted_bytes
        self.budget_bytes = budget_bytes
