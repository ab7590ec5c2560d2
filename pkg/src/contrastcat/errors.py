"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so each class carries the code it
should surface as.
"""


class ContrastCatError(Exception):
    exit_code = 3


class ShapeError(ContrastCatError, ValueError):
    pass


class InputError(ContrastCatError, ValueError):
    pass


class StateError(ContrastCatError, RuntimeError):
    pass


class FormatError(ContrastCatError):
    pass


class InvariantError(ContrastCatError):
    exit_code = 4


class LibraryError(ContrastCatError):
    pass


class CompatibilityError(ContrastCatError):
    pass


class ExportError(ContrastCatError):
    pass
