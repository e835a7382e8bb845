"""Exception types shared across the package.

Each error class carries the process exit code the CLI maps it to.
"""


class TeolaError(Exception):
    exit_code = 1


class CyclicGraph(TeolaError):
    """Raised when an operation requires an acyclic graph and finds a cycle."""


class ConfigMissing(TeolaError):
    def __init__(self, component: str, param: str):
        super().__init__(f"component {component!r} is missing required parameter {param!r}")
        self.component = component
        self.param = param


class InvalidMode(TeolaError):
    """Unknown synthesis mode for an LLM synthesize component."""


class UnknownRoleKind(TeolaError):
    """Component role not recognized by the decomposer."""


class EmptyProfile(TeolaError):
    """Engine latency table has no breakpoints."""


class CapacityExceeded(TeolaError):
    """Batch load exceeds engine slot capacity."""


class DuplicateQueryId(TeolaError):
    pass


class UnknownNode(TeolaError):
    pass


class NonQuiescent(TeolaError):
    """Event loop exceeded its safety bound without quiescing."""


class OptimizerLimit(TeolaError):
    """Rewrite fixpoint iteration exceeded its round bound."""


class ConfigParse(TeolaError):
    exit_code = 2


class UnknownApp(TeolaError):
    exit_code = 3


class ProfileMissing(TeolaError):
    exit_code = 4


class IoFailure(TeolaError):
    exit_code = 5
