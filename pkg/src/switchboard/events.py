"""Bus traffic types: Event, Subscription, DeliveryReport, delivery modes."""

import itertools
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Optional

from . import _kernels


class DeliveryMode(Enum):
    POSTING = "posting"        # callback runs inline on the poster's thread
    DISPATCHER = "dispatcher"  # callback runs on the bus's single dispatch thread
    BACKGROUND = "background"  # callback runs on the shared worker pool


_event_seq = itertools.count(1)


@dataclass(frozen=True)
class Event:
    """Universal unit of bus traffic.

    The payload is carried by reference (typically a cache handle); posting
    never copies it. `what` is the discriminator rule conditions read and
    defaults to the topic.
    """

    topic: str
    what: Optional[str] = None
    payload: Any = None
    correlation_id: Optional[str] = None
    source: str = ""
    timestamp: int = 0
    seq: int = field(default=0, compare=False)

    def __post_init__(self):
        _kernels.validate_topic(self.topic)
        if self.what is None:
            object.__setattr__(self, "what", self.topic)
        if self.timestamp == 0:
            object.__setattr__(self, "timestamp", time.monotonic_ns())
        object.__setattr__(self, "seq", next(_event_seq))


@dataclass
class Subscription:
    """Registered (subscriber_id, pattern) pair; delivery_mode is fixed at creation."""

    subscriber_id: str
    pattern: str
    delivery_mode: DeliveryMode
    callback: Callable[[Event], None]

    def __post_init__(self):
        self._active = True

    @property
    def active(self):
        return self._active


@dataclass
class DeliveryReport:
    """Outcome of one post: how many subscribers matched and were handed the event."""

    event: Event
    matched_subscribers: int
    delivered: int
    dropped: bool

    def __post_init__(self):
        assert self.delivered <= self.matched_subscribers
        assert self.dropped == (self.matched_subscribers == 0)
