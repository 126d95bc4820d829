"""Exception hierarchy for the middleware."""


class SwitchboardError(Exception):
    """Base class for all middleware errors."""


# -- bus ---------------------------------------------------------------

class BadPattern(SwitchboardError):
    """Topic pattern is syntactically invalid."""


class DuplicateSubscription(SwitchboardError):
    """(subscriber_id, pattern) already registered on this bus."""


class DuplicateTap(SwitchboardError):
    """Tap id already installed."""


class BusClosed(SwitchboardError):
    """The bus has begun shutdown and accepts no more traffic."""


class RequestTimeout(SwitchboardError, TimeoutError):
    """No correlated response arrived before the deadline."""


class EndpointBusy(SwitchboardError):
    """A PAIR endpoint already belongs to another pair channel."""


# -- registry ----------------------------------------------------------

class DuplicateServiceId(SwitchboardError):
    """service_id already present in the registry."""


class NoSuchContract(SwitchboardError):
    """No live implementation registered for the contract."""


class NoMatchingImplementation(SwitchboardError):
    """The contract exists but the selection hints exclude all candidates."""


class UnresolvableDependency(SwitchboardError):
    """A declared dependency contract has no registered implementation."""


class DependencyCycle(SwitchboardError):
    """Starting the service would require a cyclic dependency chain."""


class IllegalTransition(SwitchboardError):
    """Lifecycle command not allowed from the current state."""


# -- services ----------------------------------------------------------

class NoSuchMethod(SwitchboardError):
    """The service does not expose the dispatched method."""


class ServiceNotRunning(SwitchboardError):
    """Dispatch attempted on a service that is not STARTED or BOUND."""


# -- rules -------------------------------------------------------------

class ParseError(SwitchboardError):
    """Malformed rule text; carries line/column."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"line {line}, col {column}: {message}"
        super().__init__(message)


class DuplicateRuleName(SwitchboardError):
    """Two rules share a name within one rule base."""


class CycleCapExceeded(SwitchboardError):
    """The inference loop hit its cycle cap (a rule loop)."""


class UnresolvedParam(SwitchboardError):
    """An Event.* action param names no field of the triggering event."""


# -- cache -------------------------------------------------------------

class ZeroCapacity(SwitchboardError):
    """LRU cache constructed with capacity < 1."""


# -- gateway -----------------------------------------------------------

class FrameError(SwitchboardError):
    """Base class for wire-framing failures."""


class BadTag(FrameError):
    """Unknown format tag byte."""


class FrameTooLarge(FrameError):
    """Frame length exceeds the 16 MiB cap."""


class MalformedPayload(FrameError):
    """Payload bytes do not decode under the declared format."""


class NeedMoreBytes(FrameError):
    """Partial frame: no input consumed, feed more bytes."""


class Unrepresentable(SwitchboardError):
    """Message cannot be encoded under the chosen format tag."""


class ConnectFailed(SwitchboardError):
    """Gateway adapter could not reach its endpoint."""


# -- sse ---------------------------------------------------------------

class SourceUnavailable(SwitchboardError):
    """Sensor chunk source cannot be opened."""


# -- harness -----------------------------------------------------------

class EmptySamples(SwitchboardError):
    """Statistic requested over zero samples."""


class NonPositiveSample(SwitchboardError):
    """Harmonic mean requires strictly positive samples."""


class ZeroBaseline(SwitchboardError):
    """Performance rate requires a positive baseline."""


class ServiceSetupFailed(SwitchboardError):
    """Benchmark could not set up its workload services."""
