# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled kernels; semantics must mirror _pure.py exactly."""

from switchboard.errors import BadTag, FrameTooLarge, MalformedPayload, NeedMoreBytes

MAX_FRAME = 16 * 1024 * 1024
TAG_JSON = 1
TAG_BINARY = 2

MISS = object()

cdef str _WHITESPACE = " \t\n\r\v\f"
cdef Py_ssize_t _MAX_FRAME_C = 16 * 1024 * 1024


cpdef validate_topic(topic):
    """Raise ValueError unless topic is a well-formed dotted name."""
    cdef Py_ssize_t i, n
    cdef Py_UCS4 ch
    if not isinstance(topic, str) or not topic:
        raise ValueError("topic must be a non-empty string")
    n = len(<str>topic)
    cdef Py_UCS4 prev = u"."
    for i in range(n):
        ch = (<str>topic)[i]
        if ch == u" " or ch == u"\t" or ch == u"\n" or ch == u"\r" or ch == u"\v" or ch == u"\f":
            raise ValueError(f"topic contains whitespace: {topic!r}")
        if ch == u"*":
            raise ValueError(f"topic may not contain '*': {topic!r}")
        if ch == u"." and prev == u".":
            raise ValueError(f"topic has an empty segment: {topic!r}")
        prev = ch
    if prev == u".":
        raise ValueError(f"topic has an empty segment: {topic!r}")


cpdef validate_pattern(pattern):
    """Raise ValueError unless pattern is dotted segments with at most one trailing '*'."""
    cdef Py_ssize_t i, n
    cdef Py_UCS4 ch
    if not isinstance(pattern, str) or not pattern:
        raise ValueError("pattern must be a non-empty string")
    n = len(<str>pattern)
    cdef Py_UCS4 prev = u"."
    for i in range(n):
        ch = (<str>pattern)[i]
        if ch == u" " or ch == u"\t" or ch == u"\n" or ch == u"\r" or ch == u"\v" or ch == u"\f":
            raise ValueError(f"pattern contains whitespace: {pattern!r}")
        if ch == u"." and prev == u".":
            raise ValueError(f"pattern has an empty segment: {pattern!r}")
        if ch == u"*" and not (prev == u"." and i == n - 1):
            raise ValueError(f"'*' only allowed as the whole trailing segment: {pattern!r}")
        if prev == u"*":
            # '*' was not the final character
            raise ValueError(f"'*' only allowed as the whole trailing segment: {pattern!r}")
        prev = ch
    if prev == u".":
        raise ValueError(f"pattern has an empty segment: {pattern!r}")


cpdef bint match_topic(str pattern, str topic):
    """True when pattern covers topic. 'A.B.*' covers proper descendants of A.B only."""
    cdef Py_ssize_t n = len(pattern)
    if n and pattern[n - 1] == u"*":
        if n == 1:
            return True
        return topic.startswith(pattern[:n - 1])
    return pattern == topic


cdef class SubscriptionIndex:
    """Pattern -> token index with O(segments) lookup per topic."""

    cdef dict _exact
    cdef dict _wild

    def __cinit__(self):
        self._exact = {}
        self._wild = {}

    def __len__(self):
        cdef Py_ssize_t n = 0
        for bucket in self._exact.values():
            n += len(<list>bucket)
        for bucket in self._wild.values():
            n += len(<list>bucket)
        return n

    cpdef add(self, str pattern, token):
        validate_pattern(pattern)
        cdef str prefix
        cdef list bucket
        if pattern[len(pattern) - 1] == u"*":
            prefix = "" if len(pattern) == 1 else pattern[:len(pattern) - 2]
            bucket = <list>self._wild.setdefault(prefix, [])
        else:
            bucket = <list>self._exact.setdefault(pattern, [])
        bucket.append(token)

    cpdef remove(self, str pattern, token):
        cdef dict table
        cdef str key
        if pattern[len(pattern) - 1] == u"*":
            table = self._wild
            key = "" if len(pattern) == 1 else pattern[:len(pattern) - 2]
        else:
            table = self._exact
            key = pattern
        bucket = table.get(key)
        if bucket is None or token not in <list>bucket:
            raise KeyError(pattern)
        (<list>bucket).remove(token)
        if not <list>bucket:
            del table[key]

    cpdef list match(self, str topic):
        """Tokens whose pattern matches topic: exact bucket first, then wildcards longest-prefix first."""
        cdef list out = []
        cdef Py_ssize_t i
        bucket = self._exact.get(topic)
        if bucket is not None:
            out.extend(<list>bucket)
        if self._wild:
            i = topic.rfind(".")
            while i != -1:
                bucket = self._wild.get(topic[:i])
                if bucket is not None:
                    out.extend(<list>bucket)
                i = topic.rfind(".", 0, i)
            bucket = self._wild.get("")
            if bucket is not None:
                out.extend(<list>bucket)
        return out


cdef class _Node:
    cdef object key
    cdef object value
    cdef _Node prev
    cdef _Node next


cdef class LruCore:
    """Unsynchronized LRU map: recency refreshed on both get and put."""

    cdef readonly Py_ssize_t capacity
    cdef dict _map
    cdef _Node _head  # most recent side sentinel
    cdef _Node _tail  # least recent side sentinel

    def __cinit__(self, Py_ssize_t capacity):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._map = {}
        self._head = _Node()
        self._tail = _Node()
        self._head.next = self._tail
        self._tail.prev = self._head

    def __len__(self):
        return len(self._map)

    def __contains__(self, key):
        return key in self._map

    cdef void _unlink(self, _Node node):
        node.prev.next = node.next
        node.next.prev = node.prev

    cdef void _push_front(self, _Node node):
        node.next = self._head.next
        node.prev = self._head
        self._head.next.prev = node
        self._head.next = node

    cpdef get(self, key):
        node = self._map.get(key)
        if node is None:
            return MISS
        self._unlink(<_Node>node)
        self._push_front(<_Node>node)
        return (<_Node>node).value

    cpdef put(self, key, value):
        """Insert/update key as most recent; returns the evicted key or None."""
        cdef _Node node
        cdef _Node victim
        existing = self._map.get(key)
        if existing is not None:
            node = <_Node>existing
            node.value = value
            self._unlink(node)
            self._push_front(node)
            return None
        node = _Node()
        node.key = key
        node.value = value
        self._map[key] = node
        self._push_front(node)
        if len(self._map) > self.capacity:
            victim = self._tail.prev
            self._unlink(victim)
            del self._map[victim.key]
            return victim.key
        return None

    def keys_lru_order(self):
        cdef list out = []
        cdef _Node node = self._tail.prev
        while node is not self._head:
            out.append(node.key)
            node = node.prev
        return out


cpdef bytes encode_frame(payload, int tag):
    """4-byte big-endian length (tag byte + payload), 1 tag byte, payload."""
    cdef bytes body = bytes(payload)
    cdef Py_ssize_t length = 1 + len(body)
    if length > _MAX_FRAME_C:
        raise FrameTooLarge(f"frame of {length} bytes exceeds {MAX_FRAME}")
    return length.to_bytes(4, "big") + bytes((tag,)) + body


cpdef tuple decode_first(buf):
    """Decode the first complete frame in buf.

    Returns (tag, payload, bytes_consumed). Raises NeedMoreBytes (nothing
    consumed) on a partial frame, BadTag / FrameTooLarge / MalformedPayload
    on wire corruption.
    """
    cdef Py_ssize_t have = len(buf)
    cdef const unsigned char[:] view
    cdef unsigned long length
    cdef int tag
    if have < 4:
        raise NeedMoreBytes(f"have {have} header bytes, need 4")
    view = buf
    length = ((<unsigned long>view[0]) << 24) | ((<unsigned long>view[1]) << 16) | \
             ((<unsigned long>view[2]) << 8) | (<unsigned long>view[3])
    if length < 1:
        raise MalformedPayload("zero-length frame (no tag byte)")
    if length > <unsigned long>_MAX_FRAME_C:
        raise FrameTooLarge(f"declared length {length} exceeds {MAX_FRAME}")
    if have < 4 + <Py_ssize_t>length:
        raise NeedMoreBytes(f"have {have - 4} of {length} frame bytes")
    tag = view[4]
    if tag != 1 and tag != 2:
        raise BadTag(f"unknown format tag {tag:#04x}")
    return tag, bytes(buf[5 : 4 + length]), 4 + length


cdef class FrameBuffer:
    """Incremental stream reassembler: arbitrary chunking in, whole frames out."""

    cdef bytearray _buf

    def __cinit__(self):
        self._buf = bytearray()

    def pending(self):
        return len(self._buf)

    def feed(self, data):
        """Append data; return every (tag, payload) frame completed by it."""
        self._buf.extend(data)
        cdef list frames = []
        while True:
            try:
                tag, payload, consumed = decode_first(self._buf)
            except NeedMoreBytes:
                return frames
            del self._buf[:consumed]
            frames.append((tag, payload))
