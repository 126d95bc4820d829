"""Differential tests: the compiled kernels must behave exactly like the pure ones."""

import random

import pytest

from switchboard._kernels import available_backends

BACKENDS = available_backends()
pure = BACKENDS["pure"]

needs_compiled = pytest.mark.skipif(
    "compiled" not in BACKENDS, reason="compiled kernels not built"
)


def _random_name(rng, max_segments=4):
    n = rng.randint(1, max_segments)
    return ".".join(rng.choice(["a", "b", "ab", "x1"]) for _ in range(n))


@needs_compiled
def test_validation_agrees():
    compiled = BACKENDS["compiled"]
    cases = ["A.B", "A.B.*", "*", "", "A..B", "A.*.B", "A.*B", "A B", "A.", ".A", "A*", "x"]
    for case in cases:
        for fn in ("validate_topic", "validate_pattern"):
            outcomes = []
            for mod in (pure, compiled):
                try:
                    getattr(mod, fn)(case)
                    outcomes.append("ok")
                except ValueError:
                    outcomes.append("err")
            assert outcomes[0] == outcomes[1], (fn, case)


@needs_compiled
def test_match_topic_agrees():
    compiled = BACKENDS["compiled"]
    rng = random.Random(42)
    for _ in range(5000):
        topic = _random_name(rng)
        base = _random_name(rng)
        pattern = rng.choice([base, base + ".*", "*"])
        assert pure.match_topic(pattern, topic) == compiled.match_topic(pattern, topic), (
            pattern,
            topic,
        )


@needs_compiled
def test_subscription_index_agrees():
    compiled = BACKENDS["compiled"]
    rng = random.Random(7)
    pi, ci = pure.SubscriptionIndex(), compiled.SubscriptionIndex()
    live = []
    for step in range(3000):
        op = rng.random()
        if op < 0.45 or not live:
            base = _random_name(rng)
            pattern = rng.choice([base, base + ".*", "*"])
            token = step
            pi.add(pattern, token)
            ci.add(pattern, token)
            live.append((pattern, token))
        elif op < 0.6:
            pattern, token = live.pop(rng.randrange(len(live)))
            pi.remove(pattern, token)
            ci.remove(pattern, token)
        else:
            topic = _random_name(rng)
            assert pi.match(topic) == ci.match(topic)
        assert len(pi) == len(ci)


@needs_compiled
def test_lru_core_agrees():
    compiled = BACKENDS["compiled"]
    rng = random.Random(99)
    for cap in (1, 2, 7, 16):
        pl, cl = pure.LruCore(cap), compiled.LruCore(cap)
        for _ in range(4000):
            key = rng.randrange(cap * 3)
            if rng.random() < 0.5:
                assert pl.put(key, key * 2) == cl.put(key, key * 2)
            else:
                pv, cv = pl.get(key), cl.get(key)
                assert (pv is pure.MISS) == (cv is compiled.MISS)
                if pv is not pure.MISS:
                    assert pv == cv
            assert pl.keys_lru_order() == cl.keys_lru_order()


@needs_compiled
def test_frame_codec_agrees():
    compiled = BACKENDS["compiled"]
    rng = random.Random(5)
    pairs = [
        (
            bytes(rng.randrange(256) for _ in range(rng.randrange(0, 300))),
            rng.choice([1, 2]),
        )
        for _ in range(200)
    ]
    stream = b"".join(pure.encode_frame(blob, tag) for blob, tag in pairs)
    assert stream == b"".join(compiled.encode_frame(blob, tag) for blob, tag in pairs)
    pb, cb = pure.FrameBuffer(), compiled.FrameBuffer()
    pout, cout = [], []
    i = 0
    while i < len(stream):
        step = rng.randrange(1, 64)
        chunk = stream[i : i + step]
        i += step
        pout.extend(pb.feed(chunk))
        cout.extend(cb.feed(chunk))
    assert pout == cout
    assert len(pout) == len(pairs)


@needs_compiled
def test_frame_errors_agree():
    compiled = BACKENDS["compiled"]
    bad_tag = (10).to_bytes(4, "big") + bytes([9]) + b"x" * 9
    too_large = (17 * 1024 * 1024).to_bytes(4, "big") + bytes([1])
    zero = (0).to_bytes(4, "big")
    for buf in (bad_tag, too_large, zero + b"\x01", b"\x00\x00"):
        outcomes = []
        for mod in (pure, compiled):
            try:
                mod.decode_first(buf)
                outcomes.append("ok")
            except Exception as exc:
                outcomes.append(type(exc).__name__)
        assert outcomes[0] == outcomes[1], buf
