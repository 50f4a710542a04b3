"""Exception types shared by every module."""


class InvalidArgument(ValueError):
    """An argument violates an operation's precondition."""


class InvariantViolation(RuntimeError):
    """A checked numerical invariant failed.

    ``details`` carries a JSON-serializable diagnostic that the command line
    front end prints before exiting with status 1.
    """

    def __init__(self, message: str, details: dict | None = None):
        super().__init__(message)
        self.details = dict(details or {})
