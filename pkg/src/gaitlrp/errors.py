"""Exception hierarchy shared by every gaitlrp module."""


class GaitLrpError(Exception):
    """Base class for all package errors."""


class InputError(GaitLrpError):
    """Bad user-supplied data; the CLI maps these to exit code 2."""


class OutOfRangeAge(InputError, ValueError):
    def __init__(self, age):
        super().__init__(f"age {age} outside the labeled range [20, 79]")
        self.age = age

    def __reduce__(self):
        return type(self), (self.age,)


class ParseError(InputError):
    def __init__(self, message, line=None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)
        self.message = message
        self.line = line

    def __reduce__(self):
        return type(self), (self.message, self.line)


class EmptyDataset(InputError):
    pass


class DegenerateCurve(InputError, ValueError):
    pass


class EmptySelection(InputError, ValueError):
    pass


class InsufficientSubjects(InputError, ValueError):
    pass


class ShapeError(GaitLrpError, ValueError):
    pass


class DivergenceError(GaitLrpError, ArithmeticError):
    def __init__(self, epoch, loss):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss

    def __reduce__(self):
        return type(self), (self.epoch, self.loss)


class MissingClass(GaitLrpError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class EmptyMatrix(GaitLrpError, ValueError):
    pass


class FoldError(GaitLrpError):
    """Wraps an exception raised inside one cross-validation fold."""

    def __init__(self, fold, cause):
        super().__init__(f"fold {fold}: {cause}")
        self.fold = fold
        self.cause = cause

    def __reduce__(self):
        return type(self), (self.fold, self.cause)
