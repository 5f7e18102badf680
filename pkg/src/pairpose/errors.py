"""Exception hierarchy shared by all pairpose modules."""


class PairPoseError(Exception):
    """Base class for every error raised by this package."""


class InputError(PairPoseError, ValueError):
    """Invalid user-supplied data (maps to CLI exit code 2)."""


class ComputationError(PairPoseError, ArithmeticError):
    """A well-formed input that the algorithms cannot solve (exit code 3)."""


class ParseError(InputError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(f"{where}{message}")


class EmptyInput(InputError):
    pass


class EmptyMesh(InputError):
    pass


class EmptyCloud(InputError):
    pass


class EmptyModel(InputError):
    pass


class TooFewPoints(InputError):
    pass


class ZOutOfRange(InputError):
    pass


class LengthMismatch(InputError):
    pass


class ConfigError(InputError):
    pass


class DegeneratePair(ComputationError):
    """The second point of a pair lies on the anchor's normal axis."""


class AllPairsDegenerate(ComputationError):
    pass


class DegenerateConfiguration(ComputationError):
    """Collinear or coincident points: the least-squares fit is not unique."""


class NoValidHypothesis(ComputationError):
    pass
