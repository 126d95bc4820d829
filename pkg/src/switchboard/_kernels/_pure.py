"""Pure-Python kernels: topic matching, subscription index, LRU core, frame codec.

`_speedups.pyx` mirrors this module exactly; behavior must stay identical
(the differential tests in tests/test_kernels.py compare both backends).
"""

from collections import OrderedDict

from ..errors import BadTag, FrameTooLarge, MalformedPayload, NeedMoreBytes

MAX_FRAME = 16 * 1024 * 1024  # length field cap: tag byte + payload
TAG_JSON = 1
TAG_BINARY = 2

MISS = object()

_WHITESPACE = " \t\n\r\v\f"


def validate_topic(topic):
    """Raise ValueError unless topic is a well-formed dotted name."""
    if not isinstance(topic, str) or not topic:
        raise ValueError("topic must be a non-empty string")
    for ch in _WHITESPACE:
        if ch in topic:
            raise ValueError(f"topic contains whitespace: {topic!r}")
    if "*" in topic:
        raise ValueError(f"topic may not contain '*': {topic!r}")
    for seg in topic.split("."):
        if not seg:
            raise ValueError(f"topic has an empty segment: {topic!r}")


def validate_pattern(pattern):
    """Raise ValueError unless pattern is dotted segments with at most one trailing '*'."""
    if not isinstance(pattern, str) or not pattern:
        raise ValueError("pattern must be a non-empty string")
    for ch in _WHITESPACE:
        if ch in pattern:
            raise ValueError(f"pattern contains whitespace: {pattern!r}")
    segments = pattern.split(".")
    for i, seg in enumerate(segments):
        if not seg:
            raise ValueError(f"pattern has an empty segment: {pattern!r}")
        if "*" in seg and (seg != "*" or i != len(segments) - 1):
            raise ValueError(f"'*' only allowed as the whole trailing segment: {pattern!r}")


def match_topic(pattern, topic):
    """True when pattern covers topic. 'A.B.*' covers proper descendants of A.B only."""
    if pattern.endswith("*"):
        if len(pattern) == 1:
            return True
        return topic.startswith(pattern[:-1])  # keeps the dot: 'A.B.' prefix
    return pattern == topic


class SubscriptionIndex:
    """Pattern -> token index with O(segments) lookup per topic.

    Tokens are opaque (the bus stores Subscription objects). Buckets keep
    insertion order so matching is deterministic.
    """

    def __init__(self):
        self._exact = {}
        self._wild = {}  # prefix before '.*' ('' for bare '*') -> [token]

    def __len__(self):
        n = 0
        for bucket in self._exact.values():
            n += len(bucket)
        for bucket in self._wild.values():
            n += len(bucket)
        return n

    def add(self, pattern, token):
        validate_pattern(pattern)
        if pattern.endswith("*"):
            prefix = "" if len(pattern) == 1 else pattern[:-2]
            self._wild.setdefault(prefix, []).append(token)
        else:
            self._exact.setdefault(pattern, []).append(token)

    def remove(self, pattern, token):
        if pattern.endswith("*"):
            prefix = "" if len(pattern) == 1 else pattern[:-2]
            table = self._wild
            key = prefix
        else:
            table = self._exact
            key = pattern
        bucket = table.get(key)
        if bucket is None or token not in bucket:
            raise KeyError(pattern)
        bucket.remove(token)
        if not bucket:
            del table[key]

    def match(self, topic):
        """Tokens whose pattern matches topic: exact bucket first, then wildcards longest-prefix first."""
        out = []
        bucket = self._exact.get(topic)
        if bucket:
            out.extend(bucket)
        if self._wild:
            i = topic.rfind(".")
            while i != -1:
                bucket = self._wild.get(topic[:i])
                if bucket:
                    out.extend(bucket)
                i = topic.rfind(".", 0, i)
            bucket = self._wild.get("")
            if bucket:
                out.extend(bucket)
        return out


class LruCore:
    """Unsynchronized LRU map: recency refreshed on both get and put."""

    def __init__(self, capacity):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._data = OrderedDict()

    def __len__(self):
        return len(self._data)

    def __contains__(self, key):
        return key in self._data

    def get(self, key):
        try:
            self._data.move_to_end(key)
        except KeyError:
            return MISS
        return self._data[key]

    def put(self, key, value):
        """Insert/update key as most recent; returns the evicted key or None."""
        if key in self._data:
            self._data[key] = value
            self._data.move_to_end(key)
            return None
        self._data[key] = value
        if len(self._data) > self.capacity:
            evicted, _ = self._data.popitem(last=False)
            return evicted
        return None

    def keys_lru_order(self):
        return list(self._data.keys())


def encode_frame(payload, tag):
    """4-byte big-endian length (tag byte + payload), 1 tag byte, payload."""
    length = 1 + len(payload)
    if length > MAX_FRAME:
        raise FrameTooLarge(f"frame of {length} bytes exceeds {MAX_FRAME}")
    return length.to_bytes(4, "big") + bytes((tag,)) + bytes(payload)


def decode_first(buf):
    """Decode the first complete frame in buf.

    Returns (tag, payload, bytes_consumed). Raises NeedMoreBytes (nothing
    consumed) on a partial frame, BadTag / FrameTooLarge / MalformedPayload
    on wire corruption.
    """
    if len(buf) < 4:
        raise NeedMoreBytes(f"have {len(buf)} header bytes, need 4")
    length = int.from_bytes(buf[:4], "big")
    if length < 1:
        raise MalformedPayload("zero-length frame (no tag byte)")
    if length > MAX_FRAME:
        raise FrameTooLarge(f"declared length {length} exceeds {MAX_FRAME}")
    if len(buf) < 4 + length:
        raise NeedMoreBytes(f"have {len(buf) - 4} of {length} frame bytes")
    tag = buf[4]
    if tag != TAG_JSON and tag != TAG_BINARY:
        raise BadTag(f"unknown format tag {tag:#04x}")
    return tag, bytes(buf[5 : 4 + length]), 4 + length


class FrameBuffer:
    """Incremental stream reassembler: arbitrary chunking in, whole frames out."""

    def __init__(self):
        self._buf = bytearray()

    def pending(self):
        return len(self._buf)

    def feed(self, data):
        """Append data; return every (tag, payload) frame completed by it."""
        self._buf.extend(data)
        frames = []
        while True:
            try:
                tag, payload, consumed = decode_first(self._buf)
            except NeedMoreBytes:
                return frames
            del self._buf[:consumed]
            frames.append((tag, payload))
