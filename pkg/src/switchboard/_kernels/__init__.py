"""Kernel backend selection: compiled _speedups when available, _pure otherwise.

Set SWITCHBOARD_PURE=1 to force the pure-Python kernels (used by the
differential tests and the kernel benchmark).
"""

import os

from . import _pure

if os.environ.get("SWITCHBOARD_PURE"):
    _impl = _pure
    BACKEND = "pure"
else:
    try:
        from . import _speedups as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = _pure
        BACKEND = "pure"

MAX_FRAME = _impl.MAX_FRAME
TAG_JSON = _impl.TAG_JSON
TAG_BINARY = _impl.TAG_BINARY
MISS = _impl.MISS

validate_topic = _impl.validate_topic
validate_pattern = _impl.validate_pattern
match_topic = _impl.match_topic
SubscriptionIndex = _impl.SubscriptionIndex
LruCore = _impl.LruCore
encode_frame = _impl.encode_frame
decode_first = _impl.decode_first
FrameBuffer = _impl.FrameBuffer


def available_backends():
    """name -> module for every importable backend (pure is always present)."""
    backends = {"pure": _pure}
    try:
        from . import _speedups

        backends["compiled"] = _speedups
    except ImportError:
        pass
    return backends
