"""Messaging gateway and channel adapters: the only module that knows wire formats.

Wire protocol: 4-byte big-endian length counting the 1-byte format tag plus
the payload (so length >= 1, capped at 16 MiB), then the tag (1 = json,
2 = opaque binary), then the payload. JSON messages are UTF-8 objects with
keys {topic, what, correlation_id, payload}.

A bridge registers a REMOTE service descriptor; bus requests to that
contract are framed and sent over a TCP socket, and correlated replies are
re-posted on the bus. Transport is asynchronous (send queue + reader
thread); a dropped connection is retried with exponential backoff
(100 ms doubling to a 5 s cap).
"""

import json
import logging
import queue
import socket
import threading
import time
from dataclasses import dataclass
from enum import Enum

from . import _kernels
from .errors import ConnectFailed, MalformedPayload, Unrepresentable
from .events import Event
from .registry import Placement, ServiceDescriptor
from .services import GenericService

log = logging.getLogger(__name__)

TAG_JSON = _kernels.TAG_JSON
TAG_BINARY = _kernels.TAG_BINARY
MAX_FRAME = _kernels.MAX_FRAME

_MESSAGE_KEYS = ("topic", "what", "correlation_id", "payload")

BACKOFF_INITIAL = 0.1
BACKOFF_CAP = 5.0


def _canonical_message(message):
    if not isinstance(message, dict) or "topic" not in message:
        raise Unrepresentable("json messages need at least a 'topic' key")
    return {
        "topic": message["topic"],
        "what": message.get("what", message["topic"]),
        "correlation_id": message.get("correlation_id"),
        "payload": message.get("payload"),
    }


def encode_frame(message, format_tag: int = TAG_JSON) -> bytes:
    """Frame a message bit-exactly; json for dicts, binary for raw bytes."""
    if format_tag == TAG_JSON:
        canonical = _canonical_message(message)
        try:
            payload = json.dumps(canonical, separators=(",", ":")).encode("utf-8")
        except (TypeError, ValueError) as exc:
            raise Unrepresentable(f"not json-representable: {exc}") from None
    elif format_tag == TAG_BINARY:
        if not isinstance(message, (bytes, bytearray, memoryview)):
            raise Unrepresentable("binary frames carry raw bytes")
        payload = bytes(message)
    else:
        raise Unrepresentable(f"unknown format tag {format_tag!r}")
    return _kernels.encode_frame(payload, format_tag)


def decode_frame(data):
    """Decode the first complete frame in data.

    Returns ((message, format_tag), bytes_consumed). Raises NeedMoreBytes
    without consuming anything on a partial frame.
    """
    tag, payload, consumed = _kernels.decode_first(data)
    return (_decode_payload(tag, payload), tag), consumed


def _decode_payload(tag, payload):
    if tag == TAG_BINARY:
        return payload
    try:
        message = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedPayload(str(exc)) from None
    if not isinstance(message, dict) or "topic" not in message:
        raise MalformedPayload("json frame is not a message object")
    return {key: message.get(key) for key in _MESSAGE_KEYS}


class MessageDecoder:
    """Stream reassembler: feed arbitrary chunks, get complete decoded messages."""

    def __init__(self):
        self._frames = _kernels.FrameBuffer()

    def feed(self, data):
        return [
            (_decode_payload(tag, payload), tag) for tag, payload in self._frames.feed(data)
        ]


class AdapterPattern(Enum):
    REQUEST_RESPONSE = "request_response"
    ROUTER_DEALER = "router_dealer"
    PAIR = "pair"


@dataclass(frozen=True)
class AdapterConfig:
    endpoint: str  # host:port
    pattern: AdapterPattern
    contract: str

    def address(self):
        host, _, port = self.endpoint.rpartition(":")
        return host or "127.0.0.1", int(port)


def parse_adapter_manifest(text: str) -> AdapterConfig:
    fields = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"adapter manifest line {lineno}: expected key=value")
        fields[key.strip()] = value.strip()
    try:
        return AdapterConfig(
            endpoint=fields["endpoint"],
            pattern=AdapterPattern[fields["pattern"].upper()],
            contract=fields["contract"],
        )
    except KeyError as exc:
        raise ValueError(f"adapter manifest missing {exc}") from None


class _AnyMethods:
    """Remote contracts don't declare methods locally; everything dispatches."""

    def __contains__(self, item):
        return True


class _RemoteProxy(GenericService):
    """Bus-side stand-in for the remote service: frames requests onto the wire."""

    _ANY = _AnyMethods()

    def __init__(self, descriptor, adapter):
        super().__init__(descriptor)
        self._adapter = adapter

    def exposed_methods(self):
        return self._ANY

    def handle_request(self, method, args, correlation_id=None):
        self._adapter.send_message(
            {
                "topic": f"Service.{self.descriptor.contract}.{method}",
                "correlation_id": correlation_id,
                "payload": args,
            }
        )
        return None  # the reply arrives asynchronously off the socket


class RemoteServiceAdapter:
    """Channel adapter: one socket, one reader and one writer thread."""

    def __init__(self, config: AdapterConfig, host):
        self.config = config
        self.broker = host.broker
        self._host = host
        self._send_q = queue.Queue(maxsize=1024)
        self._sock = None
        self._connected = threading.Event()
        self._closed = threading.Event()
        self._sock_lock = threading.Lock()
        self._connect(first=True)
        descriptor = ServiceDescriptor(
            service_id=f"{config.contract}@{config.endpoint}",
            contract=config.contract,
            placement=Placement.REMOTE,
            endpoint=config.endpoint,
        )
        self.handle = host.register_and_start(descriptor, lambda: _RemoteProxy(descriptor, self))
        self._reader = threading.Thread(target=self._read_loop, daemon=True, name=f"gw-read-{config.contract}")
        self._writer = threading.Thread(target=self._write_loop, daemon=True, name=f"gw-write-{config.contract}")
        self._reader.start()
        self._writer.start()

    # -- transport ------------------------------------------------------------

    def _connect(self, first=False):
        address = self.config.address()
        backoff = BACKOFF_INITIAL
        while not self._closed.is_set():
            try:
                sock = socket.create_connection(address, timeout=5.0)
                sock.settimeout(0.2)  # reader polls so close() can interrupt
                with self._sock_lock:
                    self._sock = sock
                self._connected.set()
                return
            except OSError as exc:
                if first:
                    raise ConnectFailed(f"{self.config.endpoint}: {exc}") from None
                log.debug("reconnect to %s failed (%s); backing off %.1fs",
                          self.config.endpoint, exc, backoff)
                if self._closed.wait(backoff):
                    return
                backoff = min(backoff * 2, BACKOFF_CAP)

    def _drop_connection(self):
        self._connected.clear()
        with self._sock_lock:
            sock, self._sock = self._sock, None
        if sock is not None:
            try:
                sock.close()
            except OSError:
                pass

    def send_message(self, message):
        """Queue a json message for the writer (blocks when 1024 frames are pending)."""
        self._send_q.put(encode_frame(message, TAG_JSON))

    def _write_loop(self):
        while not self._closed.is_set():
            try:
                frame = self._send_q.get(timeout=0.2)
            except queue.Empty:
                continue
            while not self._closed.is_set():
                if not self._connected.wait(timeout=0.2):
                    continue
                with self._sock_lock:
                    sock = self._sock
                if sock is None:
                    continue
                try:
                    sock.sendall(frame)
                    break
                except OSError:
                    self._drop_connection()

    def _read_loop(self):
        decoder = MessageDecoder()
        while not self._closed.is_set():
            if not self._connected.wait(timeout=0.2):
                continue
            with self._sock_lock:
                sock = self._sock
            if sock is None:
                continue
            try:
                data = sock.recv(65536)
            except socket.timeout:
                continue
            except OSError:
                data = b""
            if not data:
                if self._closed.is_set():
                    return
                self._drop_connection()
                decoder = MessageDecoder()  # partial frames died with the socket
                self._connect()
                continue
            try:
                messages = decoder.feed(data)
            except Exception:
                log.exception("bad frame from %s; resetting connection", self.config.endpoint)
                self._drop_connection()
                decoder = MessageDecoder()
                self._connect()
                continue
            for message, tag in messages:
                self._post(message, tag)

    def _post(self, message, tag):
        if tag == TAG_BINARY:
            event = Event(
                topic=f"Gateway.{self.config.contract}.binary",
                payload=message,
                source=self.handle.service_id,
            )
        else:
            event = Event(
                topic=message["topic"],
                what=message["what"],
                payload=message["payload"],
                correlation_id=message["correlation_id"],
                source=self.handle.service_id,
            )
        try:
            self.broker.post(event)
        except Exception:
            log.exception("failed to re-post remote message %s", message)

    def close(self):
        self._closed.set()
        self._drop_connection()
        self._reader.join(timeout=2)
        self._writer.join(timeout=2)


def bridge(config: AdapterConfig, host) -> RemoteServiceAdapter:
    """Register a remote contract behind a channel adapter; returns the adapter.

    The registered REMOTE ServiceHandle is `adapter.handle`; bus requests to
    config.contract flow through the wire from then on.
    """
    return RemoteServiceAdapter(config, host)


class EchoPeer:
    """Loopback test peer: echoes binary frames verbatim; answers json requests
    with the same correlation_id, `<contract>.response` topic, and the request
    payload (unwrapped when it is a single-element list)."""

    def __init__(self, host="127.0.0.1", port=0, response_delay=0.0):
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(0.2)
        self.host, self.port = self._listener.getsockname()[:2]
        self.response_delay = response_delay
        self._closed = threading.Event()
        self._threads = []
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True, name="echo-accept")
        self.frames_seen = 0

    @property
    def endpoint(self):
        return f"{self.host}:{self.port}"

    def start(self):
        self._accept_thread.start()
        return self

    def _accept_loop(self):
        while not self._closed.is_set():
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.settimeout(0.2)
            thread = threading.Thread(target=self._serve, args=(conn,), daemon=True, name="echo-conn")
            thread.start()
            self._threads.append(thread)

    def _serve(self, conn):
        decoder = MessageDecoder()
        with conn:
            while not self._closed.is_set():
                try:
                    data = conn.recv(65536)
                except socket.timeout:
                    continue
                except OSError:
                    return
                if not data:
                    return
                try:
                    messages = decoder.feed(data)
                except Exception:
                    log.exception("echo peer: bad frame")
                    return
                for message, tag in messages:
                    self.frames_seen += 1
                    if self.response_delay:
                        time.sleep(self.response_delay)
                    try:
                        conn.sendall(self._reply_frame(message, tag))
                    except OSError:
                        return

    @staticmethod
    def _reply_frame(message, tag):
        if tag == TAG_BINARY:
            return encode_frame(message, TAG_BINARY)
        topic = message["topic"]
        base = topic.rsplit(".", 1)[0] if "." in topic else topic
        payload = message["payload"]
        if isinstance(payload, list) and len(payload) == 1:
            payload = payload[0]
        return encode_frame(
            {
                "topic": f"{base}.response",
                "correlation_id": message["correlation_id"],
                "payload": payload,
            },
            TAG_JSON,
        )

    def stop(self):
        self._closed.set()
        try:
            self._listener.close()
        except OSError:
            pass
        for thread in self._threads:
            thread.join(timeout=1)
