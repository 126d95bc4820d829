"""The message broker: central event bus for all component traffic.

Routing is pattern-based publish/subscribe with three delivery modes, plus
the extended exchange patterns layered on top of it: request/response with
correlation ids, exclusive PAIR links, and ROUTER_DEALER envelopes.
Interceptor taps observe every accepted event (the rule engine rides on
one). Everything is safe to call from any thread.
"""

import itertools
import logging
import queue
import threading
import uuid
from collections import deque
from enum import Enum
from typing import Any, Callable, Optional

from . import _kernels
from .errors import (
    BadPattern,
    BusClosed,
    DuplicateSubscription,
    DuplicateTap,
    EndpointBusy,
    NoSuchContract,
    RequestTimeout,
)
from .events import DeliveryMode, DeliveryReport, Event, Subscription

log = logging.getLogger(__name__)

_EMPTY = object()
_SHUTDOWN = object()


class _Inbox:
    """Per-subscriber bounded FIFO, drained serially; posters block when full."""

    __slots__ = ("items", "capacity", "not_full", "scheduled")

    def __init__(self, capacity):
        self.items = deque()
        self.capacity = capacity
        self.not_full = threading.Condition(threading.Lock())
        self.scheduled = False

    def put(self, item):
        """Enqueue (blocking on overflow); True when the caller must schedule a drain."""
        with self.not_full:
            while len(self.items) >= self.capacity:
                self.not_full.wait()
            self.items.append(item)
            if not self.scheduled:
                self.scheduled = True
                return True
            return False

    def take(self):
        with self.not_full:
            if not self.items:
                self.scheduled = False
                return _EMPTY
            item = self.items.popleft()
            self.not_full.notify()
            return item


class _WorkerPool:
    """Fixed thread pool with a SimpleQueue: submit is one enqueue, no futures."""

    def __init__(self, workers, name):
        self._q = queue.SimpleQueue()
        self._threads = [
            threading.Thread(target=self._work, name=f"{name}-{i}", daemon=True)
            for i in range(workers)
        ]
        for t in self._threads:
            t.start()

    def submit(self, fn, arg):
        self._q.put((fn, arg))

    def _work(self):
        while True:
            item = self._q.get()
            if item is _SHUTDOWN:
                return
            fn, arg = item
            try:
                fn(arg)
            except Exception:  # pragma: no cover - workers must survive anything
                log.exception("pool task failed")

    def shutdown(self):
        for _ in self._threads:
            self._q.put(_SHUTDOWN)
        for t in self._threads:
            t.join(timeout=5)


class _PendingRequest:
    __slots__ = ("done", "response", "request_seq")

    def __init__(self, request_seq):
        self.done = threading.Event()
        self.response = None
        self.request_seq = request_seq


class TapHandle:
    """Removable handle for an interceptor tap."""

    def __init__(self, broker, tap_id):
        self._broker = broker
        self.tap_id = tap_id

    def remove(self):
        self._broker._remove_tap(self.tap_id)


class ChannelKind(Enum):
    PAIR = "pair"
    ROUTER_DEALER = "router_dealer"


class Channel:
    """Base for the extended exchange patterns; messages still travel as bus events."""

    def __init__(self, broker, channel_id, kind):
        self._broker = broker
        self.channel_id = channel_id
        self.kind = kind
        self._queues = {}  # endpoint id -> queue.Queue
        self._subs = []
        self.closed = False

    def _listen(self, endpoint):
        q = queue.Queue()
        self._queues[endpoint] = q
        sub = self._broker.subscribe(
            f"chan:{self.channel_id}:{endpoint}",
            f"Channel.{self.channel_id}.{endpoint}",
            DeliveryMode.POSTING,
            lambda event, q=q: q.put(event.payload),
        )
        self._subs.append(sub)

    def _send(self, endpoint, payload, sender):
        self._broker.post(
            Event(topic=f"Channel.{self.channel_id}.{endpoint}", payload=payload, source=sender)
        )

    def _recv(self, endpoint, timeout):
        try:
            return self._queues[endpoint].get(timeout=timeout)
        except queue.Empty:
            raise RequestTimeout(
                f"nothing received on channel {self.channel_id} endpoint {endpoint}"
            ) from None

    def close(self):
        if self.closed:
            return
        self.closed = True
        for sub in self._subs:
            self._broker.unsubscribe(sub)
        self._broker._release_channel(self)


class PairChannel(Channel):
    """Exclusive bidirectional FIFO link between exactly two endpoints."""

    def __init__(self, broker, channel_id, endpoint_a, endpoint_b):
        super().__init__(broker, channel_id, ChannelKind.PAIR)
        self.endpoints = (endpoint_a, endpoint_b)
        self._listen(endpoint_a)
        self._listen(endpoint_b)

    def send(self, sender_id, payload):
        if sender_id not in self.endpoints:
            raise ValueError(f"{sender_id!r} is not an endpoint of this pair")
        a, b = self.endpoints
        self._send(b if sender_id == a else a, payload, sender_id)

    def receive(self, endpoint_id, timeout=None):
        if endpoint_id not in self.endpoints:
            raise ValueError(f"{endpoint_id!r} is not an endpoint of this pair")
        return self._recv(endpoint_id, timeout)


class RouterDealerChannel(Channel):
    """Router receives (dealer_id, message) envelopes; replies go only to that dealer."""

    def __init__(self, broker, channel_id, router_id, dealer_id):
        super().__init__(broker, channel_id, ChannelKind.ROUTER_DEALER)
        self.router_id = router_id
        self.dealers = set()
        self._listen("router")
        self.attach_dealer(dealer_id)

    def attach_dealer(self, dealer_id):
        if dealer_id in self.dealers:
            return
        self.dealers.add(dealer_id)
        self._listen(f"dealer.{dealer_id}")

    def dealer_send(self, dealer_id, payload):
        if dealer_id not in self.dealers:
            raise ValueError(f"{dealer_id!r} is not attached to this channel")
        self._send("router", (dealer_id, payload), dealer_id)

    def router_receive(self, timeout=None):
        return self._recv("router", timeout)

    def router_send(self, dealer_id, payload):
        if dealer_id not in self.dealers:
            raise ValueError(f"{dealer_id!r} is not attached to this channel")
        self._send(f"dealer.{dealer_id}", payload, self.router_id)

    def dealer_receive(self, dealer_id, timeout=None):
        if dealer_id not in self.dealers:
            raise ValueError(f"{dealer_id!r} is not attached to this channel")
        return self._recv(f"dealer.{dealer_id}", timeout)


class MessageBroker:
    """Routes every event to matching subscribers, exactly once per subscriber.

    Guarantees: per-(poster, topic) FIFO per subscriber; taps observe each
    accepted event before subscriber delivery completes; payloads travel by
    reference only. Per-subscriber queues are bounded (default 1024) and
    block the poster when full rather than dropping.
    """

    def __init__(self, *, queue_capacity=1024, pool_workers=8, name="bus"):
        self._index = _kernels.SubscriptionIndex()
        self._subs = {}
        self._lock = threading.RLock()
        self._taps = {}
        self._closed = False
        self._queue_capacity = queue_capacity
        self._pool = _WorkerPool(pool_workers, f"{name}-bg")
        self._dispatch_q = queue.Queue(maxsize=queue_capacity)
        self._dispatcher = threading.Thread(
            target=self._dispatch_loop, name=f"{name}-dispatch", daemon=True
        )
        self._pending = {}
        self._pending_lock = threading.Lock()
        self._inflight = 0
        self._idle = threading.Condition(threading.Lock())
        self._locator = None
        self._pair_owners = {}
        self._channel_seq = itertools.count(1)
        self._corr_prefix = uuid.uuid4().hex[:8]
        self._corr_seq = itertools.count(1)
        self.metrics = {
            "posts": 0,
            "delivered": 0,
            "no_match": 0,
            "late_responses": 0,
            "callback_errors": 0,
        }
        self._dispatcher.start()

    # -- subscriptions ------------------------------------------------

    def subscribe(
        self,
        subscriber_id: str,
        pattern: str,
        delivery_mode: DeliveryMode = DeliveryMode.POSTING,
        callback: Callable[[Event], None] = None,
    ) -> Subscription:
        if callback is None:
            raise TypeError("subscribe requires a callback")
        try:
            _kernels.validate_pattern(pattern)
        except ValueError as exc:
            raise BadPattern(str(exc)) from None
        key = (subscriber_id, pattern)
        with self._lock:
            if self._closed:
                raise BusClosed("bus is shut down")
            if key in self._subs:
                raise DuplicateSubscription(f"{key} already registered")
            sub = Subscription(subscriber_id, pattern, delivery_mode, callback)
            if delivery_mode is DeliveryMode.BACKGROUND:
                sub._inbox = _Inbox(self._queue_capacity)
            self._subs[key] = sub
            self._index.add(pattern, sub)
        return sub

    def unsubscribe(self, sub: Subscription) -> bool:
        with self._lock:
            if self._subs.pop((sub.subscriber_id, sub.pattern), None) is None:
                return False
            sub._active = False
            self._index.remove(sub.pattern, sub)
        return True

    def subscriptions_of(self, subscriber_id: str):
        with self._lock:
            return [s for (sid, _), s in self._subs.items() if sid == subscriber_id]

    # -- taps ----------------------------------------------------------

    def intercept(self, tap_id: str, callback: Callable[[Event], None]) -> TapHandle:
        with self._lock:
            if tap_id in self._taps:
                raise DuplicateTap(f"tap {tap_id!r} already installed")
            self._taps[tap_id] = callback
        return TapHandle(self, tap_id)

    def _remove_tap(self, tap_id):
        with self._lock:
            self._taps.pop(tap_id, None)

    # -- posting -------------------------------------------------------

    def post(self, event: Event) -> DeliveryReport:
        if self._closed:
            raise BusClosed("bus is shut down")
        if not isinstance(event, Event):
            raise TypeError(f"post expects an Event, got {type(event).__name__}")
        with self._lock:
            taps = list(self._taps.values())
            tokens = self._index.match(event.topic)
            matched = []
            seen = set()
            for sub in tokens:
                if sub.subscriber_id not in seen and sub._active:
                    seen.add(sub.subscriber_id)
                    matched.append(sub)
            self.metrics["posts"] += 1
        for tap in taps:
            try:
                tap(event)
            except Exception:
                log.exception("tap failed on %s", event.topic)
        self._maybe_complete_request(event)
        delivered = 0
        for sub in matched:
            self._deliver(sub, event)
            delivered += 1
        if not matched:
            self.metrics["no_match"] += 1
        else:
            self.metrics["delivered"] += delivered
        return DeliveryReport(
            event=event,
            matched_subscribers=len(matched),
            delivered=delivered,
            dropped=not matched,
        )

    def _deliver(self, sub, event):
        mode = sub.delivery_mode
        if mode is DeliveryMode.POSTING:
            self._run_callback(sub, event)
        elif mode is DeliveryMode.DISPATCHER:
            self._inc_inflight()
            self._dispatch_q.put((sub, event))
        else:
            self._inc_inflight()
            if sub._inbox.put(event):
                self._pool.submit(self._drain_inbox, sub)

    def _run_callback(self, sub, event):
        try:
            sub.callback(event)
        except Exception:
            self.metrics["callback_errors"] += 1
            log.exception("subscriber %s failed on %s", sub.subscriber_id, event.topic)

    def _dispatch_loop(self):
        while True:
            item = self._dispatch_q.get()
            if item is _SHUTDOWN:
                return
            sub, event = item
            self._run_callback(sub, event)
            self._dec_inflight()

    def _drain_inbox(self, sub):
        while True:
            item = sub._inbox.take()
            if item is _EMPTY:
                return
            self._run_callback(sub, item)
            self._dec_inflight()

    def _inc_inflight(self):
        with self._idle:
            self._inflight += 1

    def _dec_inflight(self):
        with self._idle:
            self._inflight -= 1
            if self._inflight == 0:
                self._idle.notify_all()

    def drain(self, timeout: Optional[float] = None) -> bool:
        """Block until all queued deliveries have run; False on timeout."""
        with self._idle:
            return self._idle.wait_for(lambda: self._inflight == 0, timeout)

    # -- request / response ---------------------------------------------

    def attach_locator(self, locator):
        """locator(contract) must return a handle or raise NoSuchContract."""
        self._locator = locator

    def attach_registry(self, registry):
        self.attach_locator(registry.locate)

    def request(self, target_contract: str, method: str, params, timeout: float) -> Event:
        """Round-trip to the service bound to target_contract; returns the response event."""
        if timeout is None or timeout <= 0:
            raise ValueError("timeout must be > 0")
        if self._locator is None:
            raise NoSuchContract(f"no locator attached; cannot resolve {target_contract!r}")
        self._locator(target_contract)
        correlation_id = f"{self._corr_prefix}-{next(self._corr_seq)}"
        event = Event(
            topic=f"Service.{target_contract}.{method}",
            payload=list(params),
            correlation_id=correlation_id,
            source="bus.request",
        )
        entry = _PendingRequest(event.seq)
        with self._pending_lock:
            self._pending[correlation_id] = entry
        try:
            self.post(event)
            if not entry.done.wait(timeout):
                raise RequestTimeout(
                    f"no response from {target_contract}.{method} within {timeout}s"
                )
            return entry.response
        finally:
            with self._pending_lock:
                self._pending.pop(correlation_id, None)

    def _maybe_complete_request(self, event):
        if event.correlation_id is None:
            return
        with self._pending_lock:
            entry = self._pending.get(event.correlation_id)
            if entry is None:
                self.metrics["late_responses"] += 1
                log.debug("late/unmatched correlated event on %s", event.topic)
                return
            if entry.request_seq == event.seq:
                return  # the request itself passing through
            entry.response = event
        entry.done.set()

    # -- channels --------------------------------------------------------

    def open_channel(self, kind: ChannelKind, endpoint_a: str, endpoint_b: str) -> Channel:
        for endpoint in (endpoint_a, endpoint_b):
            try:
                _kernels.validate_topic(endpoint)
            except ValueError as exc:
                raise ValueError(f"bad endpoint id: {exc}") from None
        channel_id = next(self._channel_seq)
        if kind is ChannelKind.PAIR:
            with self._lock:
                for endpoint in (endpoint_a, endpoint_b):
                    if endpoint in self._pair_owners:
                        raise EndpointBusy(f"{endpoint!r} already belongs to a pair")
                self._pair_owners[endpoint_a] = channel_id
                self._pair_owners[endpoint_b] = channel_id
            return PairChannel(self, channel_id, endpoint_a, endpoint_b)
        if kind is ChannelKind.ROUTER_DEALER:
            return RouterDealerChannel(self, channel_id, endpoint_a, endpoint_b)
        raise ValueError(f"unknown channel kind {kind!r}")

    def _release_channel(self, channel):
        if channel.kind is ChannelKind.PAIR:
            with self._lock:
                for endpoint in channel.endpoints:
                    if self._pair_owners.get(endpoint) == channel.channel_id:
                        del self._pair_owners[endpoint]

    # -- shutdown ----------------------------------------------------------

    @property
    def closed(self):
        return self._closed

    def close(self, timeout: float = 5.0):
        with self._lock:
            if self._closed:
                return
            self._closed = True
        self.drain(timeout)
        self._dispatch_q.put(_SHUTDOWN)
        self._dispatcher.join(timeout)
        self._pool.shutdown()
