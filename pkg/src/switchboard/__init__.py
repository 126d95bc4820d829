"""Event-driven service middleware.

A message broker (publish/subscribe, request/response, pair and
router/dealer channels), a service registry with contract-based discovery
and lifecycle control, a forward-chaining decision rule engine, simulated
sensors/effectors, a handle-passing LRU cache, a framed socket gateway,
and a latency benchmark harness with a serializing baseline.
"""

from ._kernels import BACKEND as KERNEL_BACKEND
from .bus import Channel, ChannelKind, MessageBroker, PairChannel, RouterDealerChannel, TapHandle
from .cache import CacheRef, LruCache
from .events import DeliveryMode, DeliveryReport, Event, Subscription
from .registry import (
    LifecycleCommand,
    Placement,
    SelectionHints,
    ServiceDescriptor,
    ServiceHandle,
    ServiceRegistry,
    ServiceState,
    load_manifest,
    parse_manifest,
)
from .services import GenericService, ServiceHost, StubBehavior, StubService, stub_pipeline_table
from .rules import Action, Condition, Rule, RuleBase, RuleEngine, WorkingMemory, parse_rules
from .devices import (
    AccelSample,
    ActionLog,
    ActionLogEntry,
    FreeFallDetector,
    LocationFix,
    LocationTracker,
    MicSource,
    WifiSensor,
    parse_script,
)
from .gateway import AdapterConfig, AdapterPattern, EchoPeer, RemoteServiceAdapter, bridge, decode_frame, encode_frame
from .harness import (
    ExperimentSpec,
    LatencyReport,
    TraceLog,
    Transport,
    harmonic_mean,
    perf_rate,
    run_experiment,
    run_scenario,
)

__version__ = "0.1.0"
