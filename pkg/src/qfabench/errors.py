"""Exception types shared across the workbench."""


class SpecError(ValueError):
    """A machine description violates its structural contract."""


class EngineError(RuntimeError):
    """A simulation engine cannot produce a meaningful result."""


class SpaceOverflowError(EngineError):
    """A Turing-machine branch moved its work head outside the bounded tape."""

    def __init__(self, message, branch=None):
        super().__init__(message)
        self.branch = branch


class TableParseError(ValueError):
    """An encoded gate table is malformed; `offset` points at the bad byte."""

    def __init__(self, message, offset):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class CompileError(RuntimeError):
    """A machine-to-machine compilation cannot be carried out."""
