"""Exception hierarchy shared by every conav module."""


class ConavError(Exception):
    """Base class for all conav errors."""


# simworld
class EpisodeFinished(ConavError):
    pass


class Unsatisfiable(ConavError):
    pass


class ScenarioInvalid(ConavError, ValueError):
    pass


# mapper
class SelfLoop(ConavError, ValueError):
    pass


class Unreachable(ConavError):
    pass


# agents
class PlanEmpty(ConavError):
    pass


class Deadlock(ConavError):
    """Raised by a controller when no direction is traversable."""


# orchestrator
class IllegalTransition(ConavError):
    pass


class ConfigInvalid(ConavError, ValueError):
    pass


# llm backend
class BackendUnavailable(ConavError):
    pass


class AuthError(ConavError):
    pass


class MalformedReply(ConavError):
    pass


class SchemaViolation(MalformedReply):
    pass


# memory
class OutOfOrder(ConavError):
    pass


class EmptyBank(ConavError):
    pass


class CorruptBank(ConavError):
    pass


# reflection
class NoAlternative(ConavError):
    pass


# evalkit
class EmptyInput(ConavError, ValueError):
    pass


class TraceCorrupt(ConavError):
    pass
