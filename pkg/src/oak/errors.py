"""Exception hierarchy shared across the orchestrator."""


class OakError(Exception):
    """Base class for every error raised by this package."""


# core model
class UnderflowError(OakError, ArithmeticError):
    pass


class EmptyAggregateError(OakError):
    pass


class TopologyError(OakError, ValueError):
    pass


class SLAFormatError(OakError, ValueError):
    pass


# coords
class DimensionMismatchError(OakError, ValueError):
    pass


class InsufficientAnchorsError(OakError):
    pass


class DegenerateGeometryError(OakError):
    pass


# resource manager
class DuplicateIdError(OakError):
    pass


class CapacityInvalidError(OakError, ValueError):
    pass


class UnknownWorkerError(OakError, KeyError):
    pass


# scheduler
class NoFeasibleClusterError(OakError):
    pass


class NoFeasibleWorkerError(OakError):
    pass


class DependencyUnplacedError(OakError):
    pass


class DeadlineExceededError(OakError):
    pass


class ExhaustedError(OakError):
    pass


# lifecycle
class IllegalTransitionError(OakError):
    pass


class WorkerRejectedError(OakError):
    pass


class SubnetExhaustedError(OakError):
    pass


# overlay
class UnresolvableError(OakError):
    pass


class NetworkError(OakError):
    pass


class PeerUnreachableError(NetworkError):
    pass


class UnknownNameError(OakError, KeyError):
    pass


class UnknownPolicyError(OakError, ValueError):
    pass


# control plane
class TopicClosedError(OakError):
    pass


class PeerDownError(OakError):
    pass


class MalformedMessageError(OakError, ValueError):
    pass


# simulation
class ScenarioInvalidError(OakError, ValueError):
    pass


class UnknownParameterError(OakError, KeyError):
    pass
