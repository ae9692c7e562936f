"""Exception types raised across the package."""


class InvalidArgument(ValueError):
    """An argument violates an operation's precondition."""


class DegenerateHorizon(InvalidArgument):
    """A stopping time is zero on some path, so no time change exists."""


class OutOfRange(InvalidArgument):
    """An evaluation time falls outside the grid the process lives on."""


class NumericalError(ArithmeticError):
    """Overflow, NaN or a similar hard failure inside a numerical routine.

    ``context`` carries whatever the raising routine knows (step index,
    max exponent, ...) so callers can report it without parsing the message.
    """

    def __init__(self, message, **context):
        super().__init__(message)
        self.context = context

    def __str__(self):
        base = super().__str__()
        if not self.context:
            return base
        extra = ", ".join(f"{k}={v}" for k, v in self.context.items())
        return f"{base} ({extra})"
