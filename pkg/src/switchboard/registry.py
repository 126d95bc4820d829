"""Resource manager: service registry, contract locator, injector, lifecycle.

Services register under a contract name; callers locate an implementation
by contract plus capability hints and never hold direct references to each
other. Lifecycle runs strictly REGISTERED -> STARTED -> (BOUND -> STARTED)
-> DESTROYED; dependency contracts are resolved, cycle-checked and injected
when a service first starts.
"""

import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional

from .errors import (
    DependencyCycle,
    DuplicateServiceId,
    IllegalTransition,
    NoMatchingImplementation,
    NoSuchContract,
    UnresolvableDependency,
)


class Placement(Enum):
    LOCAL = "local"
    REMOTE = "remote"


class ServiceState(Enum):
    REGISTERED = "registered"
    STARTED = "started"
    BOUND = "bound"
    DESTROYED = "destroyed"


class LifecycleCommand(Enum):
    START = "start"
    BIND = "bind"
    UNBIND = "unbind"
    DESTROY = "destroy"


# command -> {from_state: to_state}
_TRANSITIONS = {
    LifecycleCommand.START: {ServiceState.REGISTERED: ServiceState.STARTED},
    LifecycleCommand.BIND: {ServiceState.STARTED: ServiceState.BOUND},
    LifecycleCommand.UNBIND: {ServiceState.BOUND: ServiceState.STARTED},
    LifecycleCommand.DESTROY: {ServiceState.STARTED: ServiceState.DESTROYED},
}


@dataclass
class ServiceDescriptor:
    """Registry entry binding a contract to one implementation."""

    service_id: str
    contract: str
    placement: Placement = Placement.LOCAL
    endpoint: Optional[str] = None
    capabilities: Dict[str, Any] = field(default_factory=dict)
    dependencies: List[str] = field(default_factory=list)
    state: ServiceState = ServiceState.REGISTERED

    def __post_init__(self):
        if not self.service_id:
            raise ValueError("service_id must be non-empty")
        if not self.contract:
            raise ValueError("contract must be non-empty")
        if self.placement is Placement.REMOTE and not self.endpoint:
            raise ValueError(f"{self.service_id}: REMOTE placement requires an endpoint")
        if self.placement is Placement.LOCAL and self.endpoint:
            raise ValueError(f"{self.service_id}: LOCAL placement forbids an endpoint")


@dataclass(frozen=True)
class SelectionHints:
    """Locator constraints; empty hints mean 'any implementation'."""

    required_capabilities: Dict[str, Any] = field(default_factory=dict)
    preferred_placement: Optional[Placement] = None

    def admits(self, descriptor: ServiceDescriptor) -> bool:
        for key, value in self.required_capabilities.items():
            if descriptor.capabilities.get(key) != value:
                return False
        return True


class ServiceHandle:
    """Handle to a registered service: descriptor + lazily built instance."""

    def __init__(self, descriptor: ServiceDescriptor, factory: Callable[[], Any]):
        self.descriptor = descriptor
        self._factory = factory
        self._instance = None
        self._lock = threading.RLock()  # serializes lifecycle commands per service

    @property
    def service_id(self):
        return self.descriptor.service_id

    @property
    def contract(self):
        return self.descriptor.contract

    @property
    def state(self):
        return self.descriptor.state

    @property
    def instance(self):
        with self._lock:
            if self._instance is None:
                self._instance = self._factory()
            return self._instance

    def is_running(self):
        return self.descriptor.state in (ServiceState.STARTED, ServiceState.BOUND)

    def __repr__(self):
        return f"<ServiceHandle {self.service_id} [{self.contract}] {self.state.name}>"


class ServiceRegistry:
    """Thread-safe registry + locator. Locate never returns a DESTROYED service."""

    def __init__(self, broker=None):
        self._lock = threading.RLock()
        self._by_id: Dict[str, ServiceHandle] = {}
        self._by_contract: Dict[str, List[ServiceHandle]] = {}
        self._broker = broker
        if broker is not None:
            broker.attach_registry(self)

    # -- registration ----------------------------------------------------

    def register_service(self, descriptor: ServiceDescriptor, factory) -> ServiceHandle:
        handle = ServiceHandle(descriptor, factory)
        with self._lock:
            if descriptor.service_id in self._by_id:
                raise DuplicateServiceId(descriptor.service_id)
            self._by_id[descriptor.service_id] = handle
            self._by_contract.setdefault(descriptor.contract, []).append(handle)
        return handle

    def get(self, service_id: str) -> ServiceHandle:
        with self._lock:
            handle = self._by_id.get(service_id)
        if handle is None:
            raise NoSuchContract(f"no service with id {service_id!r}")
        return handle

    def has_implementation(self, contract: str, service_id: str) -> bool:
        """True when service_id is a live implementation of contract."""
        with self._lock:
            for handle in self._by_contract.get(contract, []):
                if handle.service_id == service_id and handle.state is not ServiceState.DESTROYED:
                    return True
        return False

    def contracts(self):
        with self._lock:
            return sorted(self._by_contract)

    def handles(self):
        with self._lock:
            return list(self._by_id.values())

    # -- locator -----------------------------------------------------------

    def locate(self, contract: str, hints: Optional[SelectionHints] = None) -> ServiceHandle:
        """First live implementation admitted by hints, in registration order.

        Candidates matching preferred_placement win over the rest; ties break
        by registration order, so identical state yields identical handles.
        """
        with self._lock:
            live = [
                h
                for h in self._by_contract.get(contract, [])
                if h.state is not ServiceState.DESTROYED
            ]
        if not live:
            raise NoSuchContract(contract)
        if hints is None:
            return live[0]
        admitted = [h for h in live if hints.admits(h.descriptor)]
        if not admitted:
            raise NoMatchingImplementation(f"{contract}: no candidate satisfies {hints}")
        if hints.preferred_placement is not None:
            preferred = [
                h for h in admitted if h.descriptor.placement is hints.preferred_placement
            ]
            if preferred:
                return preferred[0]
        return admitted[0]

    # -- lifecycle -----------------------------------------------------------

    def set_lifecycle(self, handle: ServiceHandle, command: LifecycleCommand) -> ServiceState:
        if not isinstance(command, LifecycleCommand):
            raise ValueError(f"unknown lifecycle command {command!r}")
        with handle._lock:
            current = handle.descriptor.state
            target = _TRANSITIONS[command].get(current)
            if target is None:
                raise IllegalTransition(
                    f"{handle.service_id}: {command.value} not allowed from {current.name}"
                )
            if command is LifecycleCommand.START:
                self._start(handle, chain=())
            elif command is LifecycleCommand.DESTROY:
                self._destroy(handle)
            else:
                handle.descriptor.state = target
            return handle.descriptor.state

    def start(self, handle):
        return self.set_lifecycle(handle, LifecycleCommand.START)

    def destroy(self, handle):
        return self.set_lifecycle(handle, LifecycleCommand.DESTROY)

    def _start(self, handle, chain):
        """Start handle, depth-first starting its dependency contracts first."""
        if handle.contract in chain:
            cycle = " -> ".join(chain + (handle.contract,))
            raise DependencyCycle(cycle)
        if handle.state is not ServiceState.REGISTERED:
            return  # already running (or a dependent started it)
        self._check_cycles(handle.contract, chain)
        deps = {}
        for contract in handle.descriptor.dependencies:
            try:
                dep = self.locate(contract)
            except NoSuchContract:
                raise UnresolvableDependency(
                    f"{handle.service_id} depends on unregistered contract {contract!r}"
                ) from None
            if dep.state is ServiceState.REGISTERED:
                with dep._lock:
                    self._start(dep, chain + (handle.contract,))
            deps[contract] = dep
        instance = handle.instance
        if deps and hasattr(instance, "inject"):
            instance.inject(deps)
        handle.descriptor.state = ServiceState.STARTED
        on_start = getattr(instance, "on_start", None)
        if on_start is not None:
            on_start(self._broker)

    def _check_cycles(self, root_contract, chain):
        """Reject dependency cycles before touching any state."""
        seen = set(chain)

        def visit(contract, path):
            if contract in path:
                raise DependencyCycle(" -> ".join(path + (contract,)))
            try:
                handle = self.locate(contract)
            except NoSuchContract:
                return  # missing deps surface as UnresolvableDependency later
            for dep in handle.descriptor.dependencies:
                visit(dep, path + (contract,))

        if root_contract in seen:
            raise DependencyCycle(" -> ".join(chain + (root_contract,)))
        visit(root_contract, chain)

    def _destroy(self, handle):
        instance = handle._instance
        if instance is not None:
            on_destroy = getattr(instance, "on_destroy", None)
            if on_destroy is not None:
                try:
                    on_destroy()
                except Exception:
                    pass
        if self._broker is not None:
            for sub in self._broker.subscriptions_of(handle.service_id):
                self._broker.unsubscribe(sub)
        handle.descriptor.state = ServiceState.DESTROYED


# -- manifest files ------------------------------------------------------------

def _typed(raw: str):
    if raw == "true":
        return True
    if raw == "false":
        return False
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw


def parse_manifest(text: str) -> ServiceDescriptor:
    """Parse one service manifest (line-oriented key=value; see README)."""
    fields = {"capabilities": {}, "dependencies": []}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"manifest line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key == "id":
            fields["service_id"] = value
        elif key == "contract":
            fields["contract"] = value
        elif key == "placement":
            fields["placement"] = Placement[value.upper()]
        elif key == "endpoint":
            fields["endpoint"] = value
        elif key.startswith("cap."):
            fields["capabilities"][key[4:]] = _typed(value)
        elif key == "dep":
            fields["dependencies"].append(value)
        else:
            raise ValueError(f"manifest line {lineno}: unknown key {key!r}")
    if "service_id" not in fields or "contract" not in fields:
        raise ValueError("manifest needs at least id= and contract=")
    return ServiceDescriptor(**fields)


def load_manifest(path) -> ServiceDescriptor:
    with open(path, encoding="utf-8") as fh:
        return parse_manifest(fh.read())
