"""Exception hierarchy shared by all flowgate modules."""


class FlowgateError(Exception):
    """Base class for every error raised by flowgate."""


class TableFull(FlowgateError):
    """The software flow table has no room for a new key."""


class IdExhausted(FlowgateError):
    pass


class ZeroId(FlowgateError):
    """A flow id of zero reached a path that requires a classified flow."""


class DoubleFree(FlowgateError):
    """A host flow entry was released twice."""


class DuplicateName(FlowgateError):
    pass


class FeedAfterVerdict(FlowgateError):
    pass


class ZeroFlowId(FlowgateError):
    """A program request carried the reserved flow id 0."""


class ConfigInvalid(FlowgateError):
    """A scenario or component configuration failed validation.

    ``field`` names the offending setting when it is known.
    """

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class ParseError(FlowgateError):
    def __init__(self, message: str, line: int):
        self.line = line
        super().__init__(f"line {line}: {message}")


class SinkWriteError(FlowgateError):
    pass


class InvariantViolation(FlowgateError):
    """An internal consistency check failed during a run."""
