class TimeProtError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(TimeProtError, ValueError):
    pass


class ValidationError(ConfigError):
    pass


class ParseError(ConfigError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        self.line = line
        self.source = source
        where = ""
        if source is not None:
            where += f"{source}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class ColourExhausted(TimeProtError):
    pass


class PadOverrun(TimeProtError):
    """Switch work finished after the padded deadline."""

    def __init__(self, domain: int, deadline: int, finished: int):
        self.domain = domain
        self.deadline = deadline
        self.finished = finished
        super().__init__(
            f"domain {domain}: switch work finished at {finished}, "
            f"after padded deadline {deadline} (overrun {finished - deadline})"
        )


class UnknownIrq(TimeProtError):
    pass


class AccessFault(TimeProtError):
    """User access to an unmapped virtual address."""
