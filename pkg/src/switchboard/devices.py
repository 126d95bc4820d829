"""Simulated sensors and effectors.

Sensors are driven by scripted fixtures rather than hardware and emit all
readings as bus events (taps see them; there are no side channels). The
high-order behaviors live here: free-fall detection with hysteresis,
location history with last-known fallback, microphone chunking through the
handle cache, WiFi state, and the TTS effector writing the action log.

Replay scripts are line-oriented: `t_offset_ms  SENSOR  value...` with `#`
comment lines. Sensor kinds: MIC (each value is one chunk of one
utterance), ACCEL ax ay az, LOCATION lat lon accuracy OK|NONE, WIFI
true|false, and EVENT topic payload (raw event injection).
"""

import math
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional

from .cache import LruCache
from .errors import SourceUnavailable
from .events import Event
from .services import GenericService


@dataclass(frozen=True)
class AccelSample:
    ax: float
    ay: float
    az: float
    t: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.ax, self.ay, self.az)):
            raise ValueError("acceleration components must be finite")

    def magnitude(self):
        return math.hypot(self.ax, self.ay, self.az)


class FreeFallDetector:
    """Emits Sensor.ACCEL.freefall when the acceleration norm drops below epsilon.

    Hysteresis: once in free fall, no further event until a non-freefall
    sample arrives, so an N-sample burst yields exactly one event.
    """

    TOPIC = "Sensor.ACCEL.freefall"

    def __init__(self, broker=None, epsilon: float = 0.5, source: str = "accel"):
        if epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        self.broker = broker
        self.epsilon = epsilon
        self.source = source
        self._falling = False

    def sample(self, sample: AccelSample) -> Optional[Event]:
        if sample.magnitude() < self.epsilon:
            if self._falling:
                return None
            self._falling = True
            event = Event(
                topic=self.TOPIC,
                payload={"magnitude": sample.magnitude(), "t": sample.t},
                source=self.source,
            )
            if self.broker is not None:
                self.broker.post(event)
            return event
        self._falling = False
        return None


class Signal(Enum):
    OK = "ok"
    NONE = "none"


@dataclass(frozen=True)
class LocationFix:
    lat: float
    lon: float
    accuracy: float
    t: float = 0.0
    signal: Signal = Signal.OK

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude out of range: {self.lat}")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude out of range: {self.lon}")
        if self.accuracy < 0:
            raise ValueError("accuracy must be >= 0")


class LocationTracker:
    """Bounded location history; a NONE-signal fix falls back to the last OK fix."""

    def __init__(self, broker=None, capacity: int = 256, source: str = "location"):
        self.broker = broker
        self.history = deque(maxlen=capacity)
        self.source = source

    def update(self, fix: LocationFix) -> Event:
        if fix.signal is Signal.OK:
            self.history.append(fix)
            event = Event(
                topic="Sensor.LOCATION.update",
                payload={"fix": fix, "stale": False},
                source=self.source,
            )
        elif self.history:
            event = Event(
                topic="Sensor.LOCATION.update",
                payload={"fix": self.history[-1], "stale": True},
                source=self.source,
            )
        else:
            event = Event(topic="Sensor.LOCATION.unavailable", source=self.source)
        if self.broker is not None:
            self.broker.post(event)
        return event


class MicSource:
    """Posts audio chunks as Sensor.MIC.recording events with cache-handle payloads."""

    def __init__(self, broker, cache: LruCache, source_id: str = "mic"):
        self.broker = broker
        self.cache = cache
        self.source_id = source_id
        self._chunk_n = 0

    def _chunks_from(self, chunk_source, chunk_size):
        if chunk_source is None:
            raise SourceUnavailable("no chunk source")
        if isinstance(chunk_source, str):
            try:
                with open(chunk_source, "rb") as fh:
                    data = fh.read()
            except OSError as exc:
                raise SourceUnavailable(str(exc)) from None
            chunk_source = data
        if isinstance(chunk_source, (bytes, bytearray)):
            size = chunk_size or len(chunk_source) or 1
            data = bytes(chunk_source)
            return [data[i : i + size] for i in range(0, len(data), size)]
        return [c.encode("utf-8") if isinstance(c, str) else bytes(c) for c in chunk_source]

    def chunk(self, data: bytes) -> Event:
        """Post one recording chunk; the payload is a cache handle, never a copy."""
        self._chunk_n += 1
        ref = self.cache.store(f"{self.source_id}:chunk:{self._chunk_n}", data)
        event = Event(topic="Sensor.MIC.recording", payload=ref, source=self.source_id)
        self.broker.post(event)
        return event

    def stop(self) -> Event:
        event = Event(topic="Sensor.MIC.stopped", source=self.source_id)
        self.broker.post(event)
        return event

    def record(self, chunk_source, chunk_size: Optional[int] = None) -> List[Event]:
        """Post every chunk of the source, then the terminal stopped event."""
        events = [self.chunk(data) for data in self._chunks_from(chunk_source, chunk_size)]
        events.append(self.stop())
        return events


class WifiSensor:
    """Publishes connectivity state changes as Sensor.WIFI.state events."""

    def __init__(self, broker, source: str = "wifi"):
        self.broker = broker
        self.source = source

    def set_state(self, turned_on: bool) -> Event:
        event = Event(topic="Sensor.WIFI.state", payload=bool(turned_on), source=self.source)
        self.broker.post(event)
        return event


@dataclass(frozen=True)
class ActionLogEntry:
    effector: str
    payload: object
    t: float


class ActionLog:
    """Thread-safe append-only record of effector actions (the desk-scale actuator)."""

    def __init__(self):
        self._entries = []
        self._lock = threading.Lock()

    def append(self, effector: str, payload) -> ActionLogEntry:
        entry = ActionLogEntry(effector, payload, time.monotonic())
        with self._lock:
            self._entries.append(entry)
        return entry

    def entries(self) -> List[ActionLogEntry]:
        with self._lock:
            return list(self._entries)

    def __len__(self):
        with self._lock:
            return len(self._entries)


class TtsEffector(GenericService):
    """Speech output stand-in: realize(utterance) appends to the action log."""

    def __init__(self, descriptor, action_log: ActionLog):
        super().__init__(descriptor)
        self.action_log = action_log

    def speak(self, utterance) -> ActionLogEntry:
        if utterance is None:
            raise ValueError("utterance must not be None")
        return self.action_log.append("TTS", utterance)

    def do_realize(self, args):
        self.speak(args[0] if args else "")
        return None


@dataclass(frozen=True)
class ScriptLine:
    t_offset_ms: float
    sensor: str
    args: tuple


def parse_script(text: str) -> List[ScriptLine]:
    lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split()
        if len(parts) < 2:
            raise ValueError(f"script line {lineno}: expected 't_offset_ms sensor value...'")
        try:
            offset = float(parts[0])
        except ValueError:
            raise ValueError(f"script line {lineno}: bad time offset {parts[0]!r}") from None
        lines.append(ScriptLine(offset, parts[1], tuple(parts[2:])))
    return lines


def load_script(path) -> List[ScriptLine]:
    with open(path, encoding="utf-8") as fh:
        return parse_script(fh.read())


class ScriptPlayer:
    """Replays a sensor script against the bus.

    By default lines run back-to-back (deterministic tests); realtime=True
    honors the time offsets. step_hook(line) runs after each line, which is
    where the scenario runner waits for quiescence.
    """

    def __init__(self, broker, cache: LruCache):
        self.broker = broker
        self.mic = MicSource(broker, cache)
        self.accel = FreeFallDetector(broker)
        self.location = LocationTracker(broker)
        self.wifi = WifiSensor(broker)

    def play_line(self, line: ScriptLine):
        kind = line.sensor.upper()
        if kind == "MIC":
            self.mic.record(list(line.args) or [b""])
        elif kind == "ACCEL":
            ax, ay, az = (float(v) for v in line.args[:3])
            self.accel.sample(AccelSample(ax, ay, az))
        elif kind == "LOCATION":
            lat, lon, accuracy = (float(v) for v in line.args[:3])
            signal = Signal.OK if len(line.args) < 4 or line.args[3].upper() == "OK" else Signal.NONE
            self.location.update(LocationFix(lat, lon, accuracy, signal=signal))
        elif kind == "WIFI":
            self.wifi.set_state(line.args[0].lower() == "true")
        elif kind == "EVENT":
            topic = line.args[0]
            payload = line.args[1] if len(line.args) > 1 else None
            self.broker.post(Event(topic=topic, payload=payload, source="script"))
        else:
            raise ValueError(f"unknown script sensor kind {line.sensor!r}")

    def play(self, lines, *, realtime: bool = False, step_hook=None):
        start = time.monotonic()
        for line in lines:
            if realtime:
                due = start + line.t_offset_ms / 1000.0
                delay = due - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
            self.play_line(line)
            if step_hook is not None:
                step_hook(line)
