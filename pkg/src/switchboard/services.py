"""Generic service contract, deterministic stubs, and request routing.

A service's only collaborator is the broker: requests arrive as events on
`Service.<contract>.<method>` and replies leave as events. The ServiceHost
owns one subscription per contract and dispatches each request to the
implementation the registry's locator picks, so rules and callers bind to
contracts, never to implementations.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

from .cache import CacheRef, LruCache
from .errors import NoMatchingImplementation, NoSuchContract, NoSuchMethod, ServiceNotRunning
from .events import DeliveryMode, Event
from .registry import SelectionHints, ServiceDescriptor, ServiceRegistry

log = logging.getLogger(__name__)


class GenericService:
    """Base class for everything the middleware hosts.

    Hooks: on_start(broker) / on_event(event) / on_destroy(), called only in
    that order. Request methods are `do_<name>` and return either None or a
    (reply_topic, payload) pair the host posts back on the bus.
    """

    def __init__(self, descriptor: ServiceDescriptor):
        self.descriptor = descriptor
        self.broker = None
        self._methods = None

    def on_start(self, broker):
        self.broker = broker

    def on_event(self, event: Event):
        pass

    def on_destroy(self):
        self.broker = None

    def exposed_methods(self):
        if self._methods is None:
            self._methods = {name[3:] for name in dir(self) if name.startswith("do_")}
        return self._methods

    def handle_request(self, method: str, args, correlation_id=None) -> Optional[Tuple[str, Any]]:
        impl = getattr(self, f"do_{method}", None)
        if impl is None:
            raise NoSuchMethod(f"{self.descriptor.service_id} has no method {method!r}")
        return impl(args)


class EchoService(GenericService):
    """Replies with its input; the workhorse of the latency experiments."""

    def __init__(self, descriptor):
        super().__init__(descriptor)
        self._reply_topic = f"Service.{descriptor.contract}.response"

    def do_echo(self, args):
        return self._reply_topic, (args[0] if len(args) == 1 else list(args))


@dataclass
class StubBehavior:
    """Deterministic lookup table standing in for a real AI service.

    mapping: (input_topic, input_key) -> (output_topic, output_payload).
    Outputs are pure functions of inputs; fixed_latency (seconds) lets the
    benchmark model service cost explicitly.
    """

    service_id: str
    mapping: Dict[Tuple[str, str], Tuple[str, str]] = field(default_factory=dict)
    fixed_latency: float = 0.0

    def __post_init__(self):
        self._methods = {topic.rsplit(".", 1)[1] for topic, _ in self.mapping}

    def methods(self):
        return self._methods

    def input_topics(self):
        return {topic for topic, _ in self.mapping}


class StubService(GenericService):
    """Table-driven service; resolves cache handles to find its lookup key."""

    def __init__(self, descriptor, behavior: StubBehavior, cache: Optional[LruCache] = None):
        super().__init__(descriptor)
        self.behavior = behavior
        self.cache = cache

    def exposed_methods(self):
        return self.behavior.methods()

    def _key_of(self, args):
        if not args:
            return ""
        value = args[0]
        if isinstance(value, CacheRef):
            if self.cache is None:
                return value.key
            value = self.cache.resolve(value)
        if isinstance(value, bytes):
            return value.decode("utf-8", errors="replace")
        return "" if value is None else str(value)

    def handle_request(self, method, args, correlation_id=None):
        if method not in self.behavior.methods():
            raise NoSuchMethod(f"{self.descriptor.service_id} has no method {method!r}")
        if self.behavior.fixed_latency:
            time.sleep(self.behavior.fixed_latency)
        topic = f"Service.{self.descriptor.contract}.{method}"
        return self.behavior.mapping.get((topic, self._key_of(args)))


class ServiceHost:
    """Per-contract event router: `Service.<contract>.<method>` -> located implementation.

    Events on a contract namespace whose last segment is not a method of the
    located implementation are that contract's own outputs and are ignored.
    Requests for stopped or unlocatable implementations are dropped with a
    debug log; pulling one service out therefore halts its stage of a chain
    without erroring anywhere else.
    """

    def __init__(self, broker, registry: ServiceRegistry, cache: Optional[LruCache] = None):
        self.broker = broker
        self.registry = registry
        self.cache = cache
        self._routed = set()
        self._trace_hooks = []

    def add_trace_hook(self, hook):
        """hook(kind, *details) observes dispatches; used by the scenario runner."""
        self._trace_hooks.append(hook)

    def _trace(self, kind, *details):
        for hook in self._trace_hooks:
            hook(kind, *details)

    def register(self, descriptor, factory) -> "ServiceHandle":
        handle = self.registry.register_service(descriptor, factory)
        self._route_contract(descriptor.contract)
        return handle

    def register_and_start(self, descriptor, factory):
        handle = self.register(descriptor, factory)
        self.registry.start(handle)
        return handle

    def _route_contract(self, contract):
        if contract in self._routed:
            return
        self._routed.add(contract)
        self.broker.subscribe(
            f"host:{contract}",
            f"Service.{contract}.*",
            DeliveryMode.BACKGROUND,
            lambda event, contract=contract: self._on_contract_event(contract, event),
        )

    @staticmethod
    def _args_of(event):
        payload = event.payload
        if payload is None:
            return []
        if isinstance(payload, (list, tuple)):
            return list(payload)
        return [payload]

    def _selection(self, contract, args):
        """Strip a leading arg naming a registered implementation into capability hints."""
        if args and isinstance(args[0], str) and self.registry.has_implementation(contract, args[0]):
            impl = self.registry.get(args[0])
            hints = SelectionHints(required_capabilities=dict(impl.descriptor.capabilities))
            return hints, args[1:]
        return None, args

    def _on_contract_event(self, contract, event):
        method = event.topic.rsplit(".", 1)[1]
        args = self._args_of(event)
        hints, args = self._selection(contract, args)
        try:
            handle = self.registry.locate(contract, hints)
        except (NoSuchContract, NoMatchingImplementation):
            log.debug("no implementation for %s; dropping %s", contract, event.topic)
            return
        if event.source == handle.service_id:
            return  # a service's own output is never a request to itself
        service = handle.instance
        if method not in service.exposed_methods():
            return  # an output event of this contract, not a request
        if not handle.is_running():
            log.debug("%s not running; dropping %s", handle.service_id, event.topic)
            return
        self._invoke(handle, method, args, event)

    def _invoke(self, handle, method, args, event):
        service = handle.instance
        self._trace("dispatch", handle.service_id, method, list(args))
        try:
            service.on_event(event)
            result = service.handle_request(method, args, event.correlation_id)
        except Exception:
            log.exception("%s.%s failed", handle.service_id, method)
            return None
        if result is None:
            return None
        reply_topic, payload = result
        reply = Event(
            topic=reply_topic,
            payload=payload,
            correlation_id=event.correlation_id,
            source=handle.service_id,
        )
        self.broker.post(reply)
        return reply

    def dispatch(self, handle, method: str, params, correlation_id=None) -> Optional[Event]:
        """Invoke a method directly; returns the posted reply event, if any.

        Unlike bus routing this raises: ServiceNotRunning unless the handle is
        STARTED or BOUND, NoSuchMethod for unknown methods.
        """
        if not handle.is_running():
            raise ServiceNotRunning(f"{handle.service_id} is {handle.state.name}")
        if method not in handle.instance.exposed_methods():
            raise NoSuchMethod(f"{handle.service_id} has no method {method!r}")
        event = Event(
            topic=f"Service.{handle.contract}.{method}",
            payload=list(params),
            correlation_id=correlation_id,
            source="dispatch",
        )
        return self._invoke(handle, method, list(params), event)


def parse_stub_table(text: str, service_id: str) -> StubBehavior:
    """Parse a tab-separated stub fixture: input_topic, input_key, output_topic, output_payload."""
    mapping = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(
                f"{service_id} fixture line {lineno}: expected 4 tab-separated fields, got {len(parts)}"
            )
        input_topic, input_key, output_topic, output_payload = parts
        mapping[(input_topic, input_key)] = (output_topic, output_payload)
    return StubBehavior(service_id=service_id, mapping=mapping)


def stub_pipeline_table(fixtures_dir=None) -> Dict[str, StubBehavior]:
    """The canonical stub tables (mic->ASR->NLU->DM->NLG chain, FR->ER, news, movies).

    Loads the fixture files shipped with the package unless a directory is
    given; keys are service ids.
    """
    import pathlib

    if fixtures_dir is None:
        fixtures_dir = pathlib.Path(__file__).parent / "data" / "pipeline"
    fixtures_dir = pathlib.Path(fixtures_dir)
    tables = {}
    for path in sorted(fixtures_dir.glob("*.tsv")):
        manifest = path.with_suffix(".manifest")
        service_id = path.stem
        if manifest.exists():
            from .registry import load_manifest

            service_id = load_manifest(manifest).service_id
        tables[service_id] = parse_stub_table(path.read_text(encoding="utf-8"), service_id)
    return tables
