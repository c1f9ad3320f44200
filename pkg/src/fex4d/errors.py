"""Exception hierarchy.

Every error carries an ``exit_code`` used by the command-line front end.
"""


class Fex4dError(Exception):
    exit_code = 1


class InvalidRangeError(Fex4dError, ValueError):
    pass


class ShapeMismatchError(Fex4dError, ValueError):
    pass


class LengthExceededError(Fex4dError, ValueError):
    pass


class DegenerateLengthError(Fex4dError, ValueError):
    pass


class UntypedRecordError(Fex4dError, ValueError):
    pass


class MissingClassError(Fex4dError, ValueError):
    pass


class LabelSpaceMismatchError(Fex4dError, ValueError):
    pass


class EmptyMaskError(Fex4dError, ValueError):
    pass


class DimensionMismatchError(Fex4dError, ValueError):
    pass


class TopologyMismatchError(Fex4dError, ValueError):
    pass


class NonManifoldEdgeError(Fex4dError, ValueError):
    def __init__(self, edge, reason="edge shared by more than two faces"):
        self.edge = tuple(int(v) for v in edge)
        super().__init__(f"non-manifold edge {self.edge}: {reason}")


class UntrainedModelError(Fex4dError, RuntimeError):
    pass


class ProviderError(Fex4dError, RuntimeError):
    """The text-embedding provider could not produce a vector."""


class ConfigError(Fex4dError, ValueError):
    exit_code = 3


class MissingCheckpointError(Fex4dError, FileNotFoundError):
    exit_code = 4


class FormatError(Fex4dError, ValueError):
    exit_code = 5


class DivergenceError(Fex4dError, FloatingPointError):
    exit_code = 6


class NonFiniteStateError(Fex4dError, FloatingPointError):
    exit_code = 6


class NonFiniteFeaturesError(Fex4dError, FloatingPointError):
    exit_code = 6
