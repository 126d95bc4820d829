"""Command-line interface.

Subcommands: bench (latency experiments), scenario (rule-driven replay),
gateway-echo (framed echo peer for gateway testing), probe (single-hop
latency distribution), bench-kernels (compiled vs pure kernel comparison).
Exit codes: 0 success, 2 bad arguments/spec, 3 runtime failure.
"""

import argparse
import sys
import time


def build_parser():
    parser = argparse.ArgumentParser(prog="switchboard")
    sub = parser.add_subparsers(dest="command", required=True)

    bench = sub.add_parser("bench", help="run a latency experiment")
    bench.add_argument("--services", type=int, required=True)
    bench.add_argument("--messages", type=int, required=True)
    bench.add_argument("--transport", choices=["middleware", "baseline", "both"],
                       default="both")
    bench.add_argument("--reps", type=int, default=10)
    bench.add_argument("--payload-bytes", type=int, default=1024)
    bench.add_argument("--out", default=None, help="write a CSV report here")

    scenario = sub.add_parser("scenario", help="replay a sensor script against a rule base")
    scenario.add_argument("--rules", required=True)
    scenario.add_argument("--fixtures", required=True)
    scenario.add_argument("--script", required=True)
    scenario.add_argument("--trace", default=None, help="write the trace here")
    scenario.add_argument("--realtime", action="store_true",
                          help="honor script time offsets instead of running back-to-back")

    echo = sub.add_parser("gateway-echo", help="run a framed echo peer")
    echo.add_argument("--listen", required=True, metavar="HOST:PORT")

    sub.add_parser("probe", help="measure single post->deliver latency vs baseline")

    kernels = sub.add_parser("bench-kernels", help="compare compiled and pure kernels")
    kernels.add_argument("--iterations", type=int, default=200_000)
    return parser


def _cmd_bench(args):
    from .harness import ExperimentSpec, Transport, perf_rate, run_experiment, write_reports_csv

    rows = []
    if args.transport in ("middleware", "both"):
        spec = ExperimentSpec(args.services, args.messages, Transport.MIDDLEWARE,
                              args.reps, args.payload_bytes)
        rows.append([run_experiment(spec), None])
    if args.transport in ("baseline", "both"):
        spec = ExperimentSpec(args.services, args.messages, Transport.BASELINE,
                              args.reps, args.payload_bytes)
        rows.append([run_experiment(spec), None])
    if args.transport == "both":
        rate = perf_rate(rows[1][0].harmonic_mean_ms, rows[0][0].harmonic_mean_ms)
        rows[0][1] = rate
        print(f"perf rate: {rate:.2f}%")
    for report, _ in rows:
        print(f"{report.spec.transport.value:>10}: harmonic mean "
              f"{report.harmonic_mean_ms:.3f} ms, median {report.median_ms:.3f} ms "
              f"({report.spec.n_services} services x {report.spec.n_messages} messages)")
    if args.out:
        write_reports_csv(args.out, [tuple(r) for r in rows])
        print(f"wrote {args.out}")
    return 0


def _cmd_scenario(args):
    from .harness import run_scenario

    trace = run_scenario(args.rules, args.fixtures, args.script, realtime=args.realtime)
    fired = trace.fired_rules()
    print(f"fired rules: {', '.join(fired) if fired else '(none)'}")
    for kind, *details in trace.dispatches():
        print(f"dispatched: {kind} {details}")
    for effector, payload in trace.effects():
        print(f"effect: {effector} -> {payload!r}")
    if args.trace:
        trace.write(args.trace)
        print(f"wrote {args.trace}")
    return 0


def _cmd_gateway_echo(args):
    from .gateway import EchoPeer

    host, _, port = args.listen.rpartition(":")
    peer = EchoPeer(host or "127.0.0.1", int(port)).start()
    print(f"echo peer listening on {peer.endpoint}")
    try:
        while True:
            time.sleep(0.5)
    except KeyboardInterrupt:
        pass
    finally:
        peer.stop()
    return 0


def _cmd_probe(args):
    from .harness import latency_probe

    stats = latency_probe()
    print(f"middleware post->deliver: p50 {stats['middleware_p50_ms']:.3f} ms, "
          f"p99 {stats['middleware_p99_ms']:.3f} ms")
    print(f"baseline single message:  p50 {stats['baseline_p50_ms']:.3f} ms, "
          f"p99 {stats['baseline_p99_ms']:.3f} ms")
    ok = stats["middleware_p99_ms"] < stats["baseline_p99_ms"]
    print(f"p99(middleware) < p99(baseline): {ok}")
    return 0


def _time_ops(fn, iterations):
    t0 = time.perf_counter()
    fn(iterations)
    return iterations / (time.perf_counter() - t0)


def _cmd_bench_kernels(args):
    from ._kernels import available_backends

    backends = available_backends()
    n = args.iterations
    topics = ["Sensor.MIC.recording", "Service.ASR.response", "Service.NLG.utterance",
              "A.B.C.D.E", "Channel.7.router"]
    patterns = ["Sensor.MIC.recording", "Service.ASR.*", "Service.*", "A.B.*", "*", "X.Y"]

    def bench_match(mod):
        def run(iters):
            match = mod.match_topic
            for i in range(iters):
                match(patterns[i % 6], topics[i % 5])
        return run

    def bench_index(mod):
        index = mod.SubscriptionIndex()
        for j, pattern in enumerate(patterns):
            index.add(pattern, j)

        def run(iters):
            match = index.match
            for i in range(iters):
                match(topics[i % 5])
        return run

    def bench_lru(mod):
        core = mod.LruCore(256)

        def run(iters):
            put, get = core.put, core.get
            for i in range(iters):
                put(i & 1023, i)
                get((i * 7) & 1023)
        return run

    def bench_frames(mod):
        payloads = [bytes(64), bytes(256), bytes(1024)]

        def run(iters):
            encode = mod.encode_frame
            buf = mod.FrameBuffer()
            feed = buf.feed
            for i in range(iters // 4):
                feed(encode(payloads[i % 3], 2))
        return run

    suites = [("match_topic", bench_match), ("index.match", bench_index),
              ("lru put+get", bench_lru), ("frame codec", bench_frames)]
    print(f"{'kernel':<12}", *(f"{name + ' ops/s':>18}" for name in backends), end="")
    print("   speedup" if len(backends) > 1 else "")
    for name, factory in suites:
        rates = {bname: _time_ops(factory(mod), n) for bname, mod in backends.items()}
        row = f"{name:<12}" + "".join(f"{rates[b]:>18,.0f}" for b in backends)
        if "compiled" in rates and "pure" in rates:
            row += f"   {rates['compiled'] / rates['pure']:>6.2f}x"
        print(row)
    return 0


_COMMANDS = {
    "bench": _cmd_bench,
    "scenario": _cmd_scenario,
    "gateway-echo": _cmd_gateway_echo,
    "probe": _cmd_probe,
    "bench-kernels": _cmd_bench_kernels,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 3
    except Exception as exc:
        from .errors import SwitchboardError

        if isinstance(exc, SwitchboardError):
            print(f"error: {exc}", file=sys.stderr)
            return 3
        raise


if __name__ == "__main__":
    sys.exit(main())
