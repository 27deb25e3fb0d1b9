"""Exception hierarchy shared across the package."""


class SNNError(Exception):
    """Base class for every error raised by snnsweep."""


class ConfigError(SNNError, ValueError):
    """Invalid configuration: shapes, hyperparameters, directory layout."""


class ParseError(SNNError, ValueError):
    """A malformed record in an event file.

    ``offset`` is a 1-based line number for CSV input and a byte offset for
    packed-binary input.
    """

    def __init__(self, message, path=None, offset=None):
        self.path = path
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        prefix = f"{':'.join(where)}: " if where else ""
        super().__init__(prefix + message)


class EventFormatError(ParseError):
    """Well-formed records that violate stream invariants (ordering, duration)."""


class InputError(SNNError, ValueError):
    """Bad runtime input to a numeric routine (labels, empty sample sets)."""


class TrainingAborted(SNNError, RuntimeError):
    """Training produced a non-finite loss or non-finite network state."""

    def __init__(self, epoch, batch, loss, what=None):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        what = what or f"non-finite loss {loss!r}"
        super().__init__(f"{what} at epoch {epoch}, batch {batch}")
