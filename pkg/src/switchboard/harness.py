"""Benchmark harness: latency experiments, serializing baseline, scenario runner.

The MIDDLEWARE transport round-trips messages through the broker with
cache-handle payloads. The BASELINE transport emulates the conventional
serializing path it replaces: every payload is byte-serialized and
deserialized at each hop, and each repetition opens a fresh connection per
service (register a reply handler thread, connect/ack round trip, then
teardown) before its messages flow. Each experiment runs one discarded
warm-up plus `repetitions` timed runs and reports their harmonic mean
(median alongside, as a robustness extra).
"""

import csv
import itertools
import pickle
import queue
import statistics
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple

from .bus import MessageBroker
from .cache import LruCache
from .devices import ActionLog, ScriptPlayer, TtsEffector, load_script
from .errors import EmptySamples, NonPositiveSample, ServiceSetupFailed, ZeroBaseline
from .events import DeliveryMode, Event
from .registry import ServiceRegistry, load_manifest
from .rules import RuleEngine, load_rules
from .services import EchoService, ServiceHost, StubService, parse_stub_table


# -- statistics ---------------------------------------------------------------

def harmonic_mean(samples) -> float:
    """n / sum(1/x): the aggregate used for all latency runs."""
    samples = list(samples)
    if not samples:
        raise EmptySamples("harmonic mean of zero samples")
    total = 0.0
    for x in samples:
        if x <= 0:
            raise NonPositiveSample(f"harmonic mean requires positive samples, got {x}")
        total += 1.0 / x
    return len(samples) / total


def perf_rate(baseline_ms: float, middleware_ms: float) -> float:
    """100 * (baseline - middleware) / baseline; negative when middleware is slower."""
    if baseline_ms <= 0:
        raise ZeroBaseline(f"baseline must be > 0, got {baseline_ms}")
    return 100.0 * (baseline_ms - middleware_ms) / baseline_ms


def percentile(samples, pct: float) -> float:
    """Nearest-rank percentile (deterministic, no interpolation)."""
    ordered = sorted(samples)
    if not ordered:
        raise EmptySamples("percentile of zero samples")
    rank = max(1, -(-len(ordered) * pct // 100))  # ceil
    return ordered[int(rank) - 1]


# -- experiment specs -----------------------------------------------------------

class Transport(Enum):
    MIDDLEWARE = "middleware"
    BASELINE = "baseline"


@dataclass(frozen=True)
class ExperimentSpec:
    n_services: int
    n_messages: int
    transport: Transport
    repetitions: int = 10
    payload_bytes: int = 1024

    def __post_init__(self):
        for name in ("n_services", "n_messages", "repetitions", "payload_bytes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class LatencyReport:
    spec: ExperimentSpec
    runs: List[float]  # total elapsed ms per repetition
    harmonic_mean_ms: float
    median_ms: float  # robustness extra, not part of the headline aggregate
    serialize_ops: int = 0
    deserialize_ops: int = 0

    def __post_init__(self):
        assert len(self.runs) == self.spec.repetitions
        assert abs(self.harmonic_mean_ms - harmonic_mean(self.runs)) < 1e-9

    @classmethod
    def from_runs(cls, spec, runs, serialize_ops=0, deserialize_ops=0):
        return cls(
            spec=spec,
            runs=list(runs),
            harmonic_mean_ms=harmonic_mean(runs),
            median_ms=statistics.median(runs),
            serialize_ops=serialize_ops,
            deserialize_ops=deserialize_ops,
        )


# -- middleware workload -----------------------------------------------------------

class _MiddlewareWorkload:
    """n_services echo contracts; each requester thread round-trips through the bus."""

    def __init__(self, spec: ExperimentSpec):
        self.spec = spec
        self.broker = MessageBroker(pool_workers=max(8, spec.n_services), name="bench")
        self.cache = LruCache(64)
        self.registry = ServiceRegistry(self.broker)
        self.host = ServiceHost(self.broker, self.registry, self.cache)
        try:
            from .registry import Placement, ServiceDescriptor

            for i in range(spec.n_services):
                descriptor = ServiceDescriptor(service_id=f"echo-{i}", contract=f"Echo{i}")
                self.host.register_and_start(descriptor, lambda d=descriptor: EchoService(d))
        except Exception as exc:
            self.broker.close()
            raise ServiceSetupFailed(str(exc)) from exc
        self.ref = self.cache.store("bench:payload", b"\xa5" * spec.payload_bytes)

    def run(self) -> float:
        n = self.spec.n_services
        barrier = threading.Barrier(n + 1)
        errors = []

        def requester(i):
            contract = f"Echo{i}"
            barrier.wait()
            try:
                for _ in range(self.spec.n_messages):
                    self.broker.request(contract, "echo", [self.ref], timeout=120.0)
            except Exception as exc:  # pragma: no cover - surfaced via errors list
                errors.append(exc)

        threads = [threading.Thread(target=requester, args=(i,)) for i in range(n)]
        for t in threads:
            t.start()
        barrier.wait()
        t0 = time.perf_counter()
        for t in threads:
            t.join()
        elapsed_ms = (time.perf_counter() - t0) * 1000.0
        if errors:
            raise errors[0]
        return elapsed_ms

    def counters(self):
        return 0, 0

    def close(self):
        self.broker.close()


# -- serializing baseline workload ---------------------------------------------------

class _BaselineService:
    """Persistent per-service worker thread with a message inbox.

    Speaks the conventional binding protocol: CONNECT is acknowledged with
    CONNECTED, REGISTER (the client handing over its reply channel) with
    READY, and every MSG bundle is deserialized and the reply serialized
    again before it leaves.
    """

    def __init__(self, name):
        self.name = name
        self.inbox = queue.Queue()
        self.connections = {}
        self.serialize_ops = 0
        self.deserialize_ops = 0
        self.thread = threading.Thread(target=self._loop, daemon=True, name=f"base-{name}")
        self.thread.start()

    def _loop(self):
        while True:
            msg = self.inbox.get()
            kind = msg[0]
            if kind == "STOP":
                return
            if kind == "CONNECT":
                _, conn_id, reply_q = msg
                self.connections[conn_id] = reply_q
                reply_q.put(("CONNECTED",))
            elif kind == "REGISTER":
                self.connections[msg[1]].put(("READY",))
            elif kind == "DISCONNECT":
                self.connections.pop(msg[1], None)
            elif kind == "MSG":
                _, conn_id, blob = msg
                bundle = pickle.loads(blob)
                self.deserialize_ops += 1
                reply = pickle.dumps({"what": bundle["what"] + 1, "data": bundle["data"]})
                self.serialize_ops += 1
                self.connections[conn_id].put(("REPLY", reply))

    def stop(self):
        self.inbox.put(("STOP",))
        self.thread.join(timeout=5)


_conn_seq = itertools.count(1)


class _BaselineConnection:
    """One client connection: fresh reply-handler thread, bind + register round
    trips, bundle-serialized messages, teardown."""

    def __init__(self, service: _BaselineService):
        self.service = service
        self.conn_id = next(_conn_seq)
        self.wire_q = queue.Queue()     # serialized replies from the service
        self.handler_q = queue.Queue()  # deserialized results from the handler
        self.serialize_ops = 0
        self.deserialize_ops = 0
        self.handler = threading.Thread(target=self._handler_loop, daemon=True,
                                        name=f"base-handler-{self.conn_id}")
        self.handler.start()
        service.inbox.put(("CONNECT", self.conn_id, self.wire_q))
        if self.handler_q.get()[0] != "CONNECTED":  # pragma: no cover - protocol sanity
            raise ServiceSetupFailed("baseline bind failed")
        service.inbox.put(("REGISTER", self.conn_id))
        if self.handler_q.get()[0] != "READY":  # pragma: no cover
            raise ServiceSetupFailed("baseline handler registration failed")

    def _handler_loop(self):
        while True:
            msg = self.wire_q.get()
            kind = msg[0]
            if kind == "CLOSE":
                return
            if kind == "REPLY":
                bundle = pickle.loads(msg[1])
                self.deserialize_ops += 1
                self.handler_q.put(("REPLY", bundle["data"]))
            else:  # CONNECTED / READY pass through unserialized (control, not data)
                self.handler_q.put(msg)

    def round_trip(self, payload):
        blob = pickle.dumps({"what": 1, "replyTo": self.conn_id, "data": payload})
        self.serialize_ops += 1
        self.service.inbox.put(("MSG", self.conn_id, blob))
        return self.handler_q.get()[1]

    def teardown(self):
        self.service.inbox.put(("DISCONNECT", self.conn_id))
        self.wire_q.put(("CLOSE",))
        self.handler.join()
        return self.serialize_ops, self.deserialize_ops


class _BaselineWorkload:
    """Same workload as the middleware run, over the serializing handshake path."""

    def __init__(self, spec: ExperimentSpec):
        self.spec = spec
        self.services = [_BaselineService(f"svc-{i}") for i in range(spec.n_services)]
        self.payload = b"\xa5" * spec.payload_bytes
        self.serialize_ops = 0
        self.deserialize_ops = 0

    def run(self) -> float:
        n = self.spec.n_services
        barrier = threading.Barrier(n + 1)
        errors = []
        tallies = []
        tally_lock = threading.Lock()

        def requester(service):
            barrier.wait()
            try:
                conn = _BaselineConnection(service)
                for _ in range(self.spec.n_messages):
                    conn.round_trip(self.payload)
                ser, des = conn.teardown()
                with tally_lock:
                    tallies.append((ser, des))
            except Exception as exc:  # pragma: no cover
                errors.append(exc)

        threads = [threading.Thread(target=requester, args=(svc,)) for svc in self.services]
        for t in threads:
            t.start()
        barrier.wait()
        t0 = time.perf_counter()
        for t in threads:
            t.join()
        elapsed_ms = (time.perf_counter() - t0) * 1000.0
        if errors:
            raise errors[0]
        for ser, des in tallies:
            self.serialize_ops += ser
            self.deserialize_ops += des
        return elapsed_ms

    def counters(self):
        ser = self.serialize_ops + sum(s.serialize_ops for s in self.services)
        des = self.deserialize_ops + sum(s.deserialize_ops for s in self.services)
        return ser, des

    def close(self):
        for service in self.services:
            service.stop()


def run_experiment(spec: ExperimentSpec, warmup: int = 1) -> LatencyReport:
    """Time the spec's workload: `warmup` discarded runs, then spec.repetitions measured."""
    workload_cls = _MiddlewareWorkload if spec.transport is Transport.MIDDLEWARE else _BaselineWorkload
    workload = workload_cls(spec)
    try:
        for _ in range(warmup):
            workload.run()
        ser0, des0 = workload.counters()
        runs = [workload.run() for _ in range(spec.repetitions)]
        ser1, des1 = workload.counters()
    finally:
        workload.close()
    return LatencyReport.from_runs(
        spec, runs, serialize_ops=ser1 - ser0, deserialize_ops=des1 - des0
    )


def run_pair(n_services: int, n_messages: int, repetitions: int = 10,
             payload_bytes: int = 1024) -> Tuple[LatencyReport, LatencyReport, float]:
    """Middleware + baseline reports for one cell, plus the performance rate."""
    mid = run_experiment(ExperimentSpec(n_services, n_messages, Transport.MIDDLEWARE,
                                        repetitions, payload_bytes))
    base = run_experiment(ExperimentSpec(n_services, n_messages, Transport.BASELINE,
                                         repetitions, payload_bytes))
    return mid, base, perf_rate(base.harmonic_mean_ms, mid.harmonic_mean_ms)


def latency_probe(samples: int = 2000, payload_bytes: int = 1024) -> dict:
    """p99 of a single post->deliver hop vs the baseline's single-message latency.

    The middleware side posts to one background subscriber (no rule tap) and
    waits for delivery; the baseline side performs its full single-message
    sequence (fresh handler, connect, serialized round trip, teardown).
    """
    broker = MessageBroker(name="probe")
    delivered = threading.Event()

    def receiver(event):
        delivered.set()

    broker.subscribe("probe", "Probe.hop", DeliveryMode.BACKGROUND, receiver)
    cache = LruCache(8)
    ref = cache.store("probe:payload", b"\xa5" * payload_bytes)
    mid_samples = []
    try:
        for _ in range(samples):
            delivered.clear()
            t0 = time.perf_counter()
            broker.post(Event(topic="Probe.hop", payload=ref, source="probe"))
            delivered.wait()
            mid_samples.append((time.perf_counter() - t0) * 1000.0)
    finally:
        broker.close()

    service = _BaselineService("probe")
    payload = b"\xa5" * payload_bytes
    base_samples = []
    try:
        for _ in range(samples):
            t0 = time.perf_counter()
            conn = _BaselineConnection(service)
            conn.round_trip(payload)
            conn.teardown()
            base_samples.append((time.perf_counter() - t0) * 1000.0)
    finally:
        service.stop()
    return {
        "middleware_p99_ms": percentile(mid_samples, 99),
        "middleware_p50_ms": percentile(mid_samples, 50),
        "baseline_p99_ms": percentile(base_samples, 99),
        "baseline_p50_ms": percentile(base_samples, 50),
        "samples": samples,
    }


# -- CSV reports ---------------------------------------------------------------------

def write_reports_csv(path, rows):
    """rows: (report, perf_rate_or_None); columns are stable for a fixed rep count."""
    rows = list(rows)
    max_runs = max((report.spec.repetitions for report, _ in rows), default=0)
    header = ["n_services", "n_messages", "transport", "repetitions", "payload_bytes"]
    header += [f"run_{i + 1}" for i in range(max_runs)]
    header += ["harmonic_mean_ms", "median_ms", "perf_rate_pct"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for report, rate in rows:
            spec = report.spec
            row = [spec.n_services, spec.n_messages, spec.transport.value,
                   spec.repetitions, spec.payload_bytes]
            row += [f"{run:.3f}" for run in report.runs]
            row += [""] * (max_runs - len(report.runs))
            row += [f"{report.harmonic_mean_ms:.3f}", f"{report.median_ms:.3f}",
                    "" if rate is None else f"{rate:.2f}"]
            writer.writerow(row)


# -- scenario runner ---------------------------------------------------------------------

@dataclass(frozen=True)
class TraceEntry:
    kind: str  # fired | dispatch | effect | assert | error
    details: tuple


@dataclass
class TraceLog:
    """Ordered record of everything a scenario did."""

    entries: List[TraceEntry] = field(default_factory=list)

    def __post_init__(self):
        self._lock = threading.Lock()

    def record(self, kind, *details):
        with self._lock:
            self.entries.append(TraceEntry(kind, tuple(details)))

    def fired_rules(self):
        return [e.details[0] for e in self.entries if e.kind == "fired"]

    def dispatches(self):
        return [e.details for e in self.entries if e.kind == "dispatch"]

    def effects(self):
        return [e.details for e in self.entries if e.kind == "effect"]

    def to_text(self):
        lines = []
        for entry in self.entries:
            details = " ".join(repr(d) for d in entry.details)
            lines.append(f"{entry.kind}\t{details}")
        return "\n".join(lines) + ("\n" if self.entries else "")

    def write(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")


class ScenarioRuntime:
    """Everything a scenario needs, wired together and torn down as a unit."""

    def __init__(self, rule_file, fixture_dir):
        self.broker = MessageBroker(name="scenario")
        self.cache = LruCache(1024)
        self.registry = ServiceRegistry(self.broker)
        self.host = ServiceHost(self.broker, self.registry, self.cache)
        self.action_log = ActionLog()
        self.trace = TraceLog()
        self.host.add_trace_hook(self.trace.record)
        self._load_services(Path(fixture_dir))
        self.engine = RuleEngine(self.broker, load_rules(rule_file))
        self.engine.add_trace_hook(self.trace.record)
        for handle in self.registry.handles():
            if handle.is_running():
                self.engine.wm.assert_fact(f"Service.{handle.contract}.isOpen", True)
        self.engine.attach_to_bus()
        self.player = ScriptPlayer(self.broker, self.cache)

    def _load_services(self, fixture_dir):
        if not fixture_dir.is_dir():
            raise FileNotFoundError(f"fixture directory {fixture_dir} does not exist")
        for manifest_path in sorted(fixture_dir.glob("*.manifest")):
            descriptor = load_manifest(manifest_path)
            table_path = manifest_path.with_suffix(".tsv")
            behavior = None
            if table_path.exists():
                behavior = parse_stub_table(
                    table_path.read_text(encoding="utf-8"), descriptor.service_id
                )
            self.host.register_and_start(descriptor, self._factory(descriptor, behavior))

    def _factory(self, descriptor, behavior):
        if descriptor.contract == "TTS":
            def make_tts():
                service = TtsEffector(descriptor, self.action_log)
                self.action_log_observer(service)
                return service
            return make_tts
        if behavior is None:
            return lambda: EchoService(descriptor)
        return lambda: StubService(descriptor, behavior, self.cache)

    def action_log_observer(self, tts):
        original = tts.speak

        def traced_speak(utterance):
            entry = original(utterance)
            self.trace.record("effect", "TTS", utterance)
            return entry

        tts.speak = traced_speak

    def quiesce(self, timeout: float = 30.0):
        """Wait until the bus, pool and engine all go idle with no new posts."""
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TimeoutError("scenario did not quiesce")
            before = self.broker.metrics["posts"]
            self.broker.drain(remaining)
            self.engine.wait_idle(remaining)
            self.broker.drain(remaining)
            if self.broker.metrics["posts"] == before:
                return

    def close(self):
        self.engine.detach()
        self.broker.close()


def run_scenario(rule_file, fixture_dir, script_file, *, realtime: bool = False) -> TraceLog:
    """Load stubs + rules, replay the sensor script, return the ordered trace."""
    runtime = ScenarioRuntime(rule_file, fixture_dir)
    try:
        script = load_script(script_file)
        runtime.player.play(script, realtime=realtime,
                            step_hook=lambda line: runtime.quiesce())
        runtime.quiesce()
    finally:
        runtime.close()
    return runtime.trace
