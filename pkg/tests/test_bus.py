import threading
import time

import pytest

from switchboard.bus import ChannelKind, MessageBroker
from switchboard.errors import (
    BadPattern,
    BusClosed,
    DuplicateSubscription,
    DuplicateTap,
    EndpointBusy,
    NoSuchContract,
    RequestTimeout,
)
from switchboard.events import DeliveryMode, Event


def test_subscribe_and_deliver_counts(broker):
    got = []
    broker.subscribe("s1", "Sensor.MIC.*", DeliveryMode.POSTING, got.append)
    broker.subscribe("s2", "Sensor.MIC.recording", DeliveryMode.POSTING, got.append)
    report = broker.post(Event(topic="Sensor.MIC.recording", payload=b"x"))
    assert report.matched_subscribers == 2
    assert report.delivered == 2
    assert not report.dropped
    assert len(got) == 2


def test_post_with_no_subscribers_is_dropped(broker):
    report = broker.post(Event(topic="Nobody.listens"))
    assert report.matched_subscribers == 0
    assert report.dropped


def test_duplicate_subscription_rejected(broker):
    broker.subscribe("x", "A.B", DeliveryMode.POSTING, lambda e: None)
    with pytest.raises(DuplicateSubscription):
        broker.subscribe("x", "A.B", DeliveryMode.POSTING, lambda e: None)


def test_bad_pattern_rejected(broker):
    with pytest.raises(BadPattern):
        broker.subscribe("x", "A.*.B", DeliveryMode.POSTING, lambda e: None)


def test_same_subscriber_multiple_matching_patterns_delivers_once(broker):
    got = []
    broker.subscribe("x", "A.B", DeliveryMode.POSTING, got.append)
    broker.subscribe("x", "A.*", DeliveryMode.POSTING, got.append)
    report = broker.post(Event(topic="A.B"))
    assert report.matched_subscribers == 1
    assert len(got) == 1


def test_unsubscribe_stops_delivery(broker):
    got = []
    sub = broker.subscribe("x", "A.B", DeliveryMode.POSTING, got.append)
    broker.post(Event(topic="A.B"))
    assert broker.unsubscribe(sub)
    broker.post(Event(topic="A.B"))
    assert len(got) == 1
    assert not broker.unsubscribe(sub)


def test_payload_travels_by_identity(broker):
    payload = bytearray(b"big blob")
    seen = []
    broker.subscribe("x", "T.a", DeliveryMode.POSTING, lambda e: seen.append(e.payload))
    broker.post(Event(topic="T.a", payload=payload))
    assert seen[0] is payload


def test_fifo_per_poster_topic_background(broker):
    got = []
    done = threading.Event()

    def receive(event):
        got.append(event.payload)
        if event.payload == 99:
            done.set()

    broker.subscribe("x", "Seq.data", DeliveryMode.BACKGROUND, receive)
    for i in range(100):
        broker.post(Event(topic="Seq.data", payload=i))
    assert done.wait(5)
    assert got == list(range(100))


def test_delivery_mode_threads(broker):
    names = {}
    done = threading.Event()

    def make(mode):
        def cb(event):
            names[mode] = threading.current_thread().name
            if len(names) == 3:
                done.set()
        return cb

    broker.subscribe("p", "M.x", DeliveryMode.POSTING, make("posting"))
    broker.subscribe("d", "M.x", DeliveryMode.DISPATCHER, make("dispatcher"))
    broker.subscribe("b", "M.x", DeliveryMode.BACKGROUND, make("background"))
    poster_name = threading.current_thread().name
    broker.post(Event(topic="M.x"))
    assert done.wait(5)
    assert names["posting"] == poster_name
    assert "dispatch" in names["dispatcher"]
    assert "-bg-" in names["background"]


def test_backpressure_blocks_poster():
    broker = MessageBroker(queue_capacity=2)
    gate = threading.Event()
    received = []

    def slow(event):
        gate.wait(10)
        received.append(event.payload)

    broker.subscribe("slow", "B.x", DeliveryMode.BACKGROUND, slow)
    done = threading.Event()

    def poster():
        for i in range(5):
            broker.post(Event(topic="B.x", payload=i))
        done.set()

    t = threading.Thread(target=poster)
    t.start()
    time.sleep(0.2)
    assert not done.is_set()  # queue full (cap 2) + one in flight: poster is blocked
    gate.set()
    t.join(5)
    assert done.is_set()
    broker.drain(5)
    assert received == list(range(5))
    broker.close()


def test_post_after_close_raises(broker):
    broker.close()
    with pytest.raises(BusClosed):
        broker.post(Event(topic="A.b"))


# -- request / response ------------------------------------------------------------

def test_request_echo_roundtrip(stack):
    stack.add_echo("Echo")
    response = stack.broker.request("Echo", "echo", ["hi"], timeout=5.0)
    assert response.payload == "hi"
    assert response.correlation_id is not None


def test_request_unknown_contract(stack):
    with pytest.raises(NoSuchContract):
        stack.broker.request("Nobody", "x", [], timeout=1.0)


def test_request_timeout_when_no_response(stack, broker):
    # a subscriber that swallows requests without replying
    stack.broker.subscribe("sink", "Service.Mute.*", DeliveryMode.BACKGROUND, lambda e: None)
    from switchboard.registry import ServiceDescriptor
    from switchboard.services import GenericService

    descriptor = ServiceDescriptor(service_id="mute", contract="Mute")
    stack.host.register_and_start(descriptor, lambda: GenericService(descriptor))
    before = stack.broker.metrics["late_responses"]
    with pytest.raises(RequestTimeout):
        stack.broker.request("Mute", "nothing", [], timeout=0.2)


def test_concurrent_requests_keep_correlation(stack):
    stack.add_echo("Echo")
    results = {}
    errors = []

    def caller(n):
        try:
            nonce = f"nonce-{n}"
            response = stack.broker.request("Echo", "echo", [nonce], timeout=15.0)
            results[n] = response.payload
        except Exception as exc:  # pragma: no cover
            errors.append(exc)

    threads = [threading.Thread(target=caller, args=(i,)) for i in range(50)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert results == {i: f"nonce-{i}" for i in range(50)}


def test_late_response_is_counted_not_raised(stack):
    before = stack.broker.metrics["late_responses"]
    stack.broker.post(Event(topic="Service.X.response", correlation_id="stale-id"))
    assert stack.broker.metrics["late_responses"] == before + 1


# -- channels ----------------------------------------------------------------------

def test_pair_channel_fifo_and_exclusivity(broker):
    chan = broker.open_channel(ChannelKind.PAIR, "a", "b")
    chan.send("a", "m1")
    chan.send("a", "m2")
    assert chan.receive("b", timeout=2) == "m1"
    assert chan.receive("b", timeout=2) == "m2"
    with pytest.raises(ValueError):
        chan.send("c", "intruder")
    with pytest.raises(EndpointBusy):
        broker.open_channel(ChannelKind.PAIR, "a", "c")
    chan.close()
    # endpoints are free again after close
    chan2 = broker.open_channel(ChannelKind.PAIR, "a", "c")
    chan2.close()


def test_router_dealer_routes_replies_to_origin(broker):
    chan = broker.open_channel(ChannelKind.ROUTER_DEALER, "router", "d1")
    chan.attach_dealer("d2")
    chan.dealer_send("d1", "ping-1")
    chan.dealer_send("d2", "ping-2")
    for _ in range(2):
        dealer_id, payload = chan.router_receive(timeout=2)
        chan.router_send(dealer_id, f"reply-to-{dealer_id}:{payload}")
    assert chan.dealer_receive("d1", timeout=2) == "reply-to-d1:ping-1"
    assert chan.dealer_receive("d2", timeout=2) == "reply-to-d2:ping-2"
    with pytest.raises(ValueError):
        chan.dealer_send("d3", "nope")
    chan.close()


# -- taps ---------------------------------------------------------------------------

def test_tap_observes_every_event(broker):
    count = [0]
    handle = broker.intercept("t1", lambda e: count.__setitem__(0, count[0] + 1))
    for i in range(10):
        broker.post(Event(topic="T.x", payload=i))
    assert count[0] == 10
    handle.remove()
    broker.post(Event(topic="T.x"))
    assert count[0] == 10


def test_two_taps_both_observe(broker):
    counts = [0, 0]
    broker.intercept("t1", lambda e: counts.__setitem__(0, counts[0] + 1))
    broker.intercept("t2", lambda e: counts.__setitem__(1, counts[1] + 1))
    for _ in range(7):
        broker.post(Event(topic="T.y"))
    assert counts == [7, 7]


def test_duplicate_tap_rejected(broker):
    broker.intercept("t1", lambda e: None)
    with pytest.raises(DuplicateTap):
        broker.intercept("t1", lambda e: None)


def test_tap_sees_request_traffic(stack):
    seen = []
    stack.broker.intercept("spy", lambda e: seen.append(e.topic))
    stack.add_echo("Echo")
    stack.broker.request("Echo", "echo", ["x"], timeout=5.0)
    assert "Service.Echo.echo" in seen
    assert "Service.Echo.response" in seen


def test_tap_completeness_matches_accepted_posts(stack):
    observed = [0]
    stack.broker.intercept("counter", lambda e: observed.__setitem__(0, observed[0] + 1))
    base = stack.broker.metrics["posts"]
    stack.add_echo("Echo")
    for i in range(20):
        stack.broker.post(Event(topic="Noise.n", payload=i))
    stack.broker.request("Echo", "echo", ["x"], timeout=5.0)
    stack.broker.drain(5)
    assert observed[0] == stack.broker.metrics["posts"] - base


# -- event invariants -----------------------------------------------------------------

def test_event_topic_validation():
    with pytest.raises(ValueError):
        Event(topic="")
    with pytest.raises(ValueError):
        Event(topic="has space")
    with pytest.raises(ValueError):
        Event(topic="a..b")


def test_event_defaults_and_timestamps():
    e1 = Event(topic="A.b")
    e2 = Event(topic="A.b", source=e1.source)
    assert e1.what == "A.b"
    assert e2.timestamp >= e1.timestamp
    assert e2.seq > e1.seq
