"""Decision rule engine: DSL parser, working memory, match/resolve/fire loop.

The rule text format is line-oriented:

    RULE: <name>
      IF <path> equals <value> AND <path> notEquals <value>
      THEN Event.post : <component> : <method> : [p1,p2] AND ...

Conditions are conjunctive; one nested IF/THEN/ELSE block is allowed inside
THEN (the ELSE fires when the outer conditions hold but the nested ones do
not). Actions normalize to (component, method, params) whether written as
`Service.ASR.process` or `Service.ASR : process`. `#` starts a comment line.

The engine rides a bus tap: every intercepted event refreshes the `Event.*`
slot of the working memory and triggers an inference pass. Conflict
resolution is priority desc, then recency desc, then rule name asc;
refraction keeps a (rule, binding) from firing twice.
"""

import itertools
import logging
import re
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from .errors import CycleCapExceeded, DuplicateRuleName, ParseError, UnresolvedParam
from .events import Event

log = logging.getLogger(__name__)

_KEYWORDS = {"RULE", "IF", "AND", "THEN", "ELSE"}
_OPERATORS = {"equals", "notEquals"}
_EVENT_FIELDS = {"what", "topic", "payload", "correlation_id", "source", "timestamp"}
_MISSING = object()

# Events on these topics also assert a working-memory fact (sensor state).
DEFAULT_FACT_ROUTES = {"Sensor.WIFI.state": "WiFi.turnedOn"}


# -- rule data model ---------------------------------------------------------

@dataclass(frozen=True)
class Condition:
    left: str
    operator: str  # equals | notEquals
    right: Any     # typed literal or dotted path string

    def to_dict(self):
        return {"left": self.left, "operator": self.operator, "right": self.right}


@dataclass(frozen=True)
class Action:
    component: str
    method: str
    params: Tuple[str, ...]
    verb: str = "Event.post"

    def to_dict(self):
        return {
            "verb": self.verb,
            "component": self.component,
            "method": self.method,
            "params": list(self.params),
        }


@dataclass(frozen=True)
class Rule:
    name: str
    conditions: Tuple[Condition, ...]
    actions: Tuple[Action, ...]
    nested_conditions: Tuple[Condition, ...] = ()
    else_actions: Tuple[Action, ...] = ()
    priority: int = 0

    def __post_init__(self):
        if not self.conditions:
            raise ValueError(f"rule {self.name}: at least one condition required")
        if not self.actions:
            raise ValueError(f"rule {self.name}: at least one action required")

    def to_dict(self):
        out = {
            "name": self.name,
            "priority": self.priority,
            "conditions": [c.to_dict() for c in self.conditions],
            "actions": [a.to_dict() for a in self.actions],
        }
        if self.nested_conditions:
            out["nested_conditions"] = [c.to_dict() for c in self.nested_conditions]
        if self.else_actions:
            out["else_actions"] = [a.to_dict() for a in self.else_actions]
        return out


class RuleBase:
    """Parsed, normalized rules; names are unique."""

    def __init__(self, rules):
        self.rules = list(rules)
        self.by_name = {}
        for rule in self.rules:
            if rule.name in self.by_name:
                raise DuplicateRuleName(rule.name)
            self.by_name[rule.name] = rule

    def __len__(self):
        return len(self.rules)

    def __iter__(self):
        return iter(self.rules)

    def to_dict(self):
        return {"rules": [r.to_dict() for r in self.rules]}


# -- parser -------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"(?P<params>\[[^\]]*\])|(?P<colon>:)|(?P<word>[^\s:\[\]]+)|(?P<stray>[\[\]])"
)


@dataclass(frozen=True)
class _Token:
    kind: str  # word | colon | params
    value: str
    line: int
    column: int


def _tokenize(text):
    tokens = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if raw.lstrip().startswith("#"):
            continue
        for match in _TOKEN_RE.finditer(raw):
            kind = match.lastgroup
            if kind == "stray":
                raise ParseError("unbalanced bracket", lineno, match.start() + 1)
            tokens.append(_Token(kind, match.group(), lineno, match.start() + 1))
    return tokens


class _Parser:
    def __init__(self, tokens):
        self.tokens = tokens
        self.pos = 0

    def _fail(self, message, token=None):
        token = token or (self.tokens[self.pos] if self.pos < len(self.tokens) else None)
        if token is None:
            last = self.tokens[-1] if self.tokens else None
            raise ParseError(
                f"{message} (unexpected end of input)",
                last.line if last else 1,
                last.column if last else 1,
            )
        raise ParseError(message, token.line, token.column)

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self):
        token = self.peek()
        if token is None:
            self._fail("unexpected end of rule text")
        self.pos += 1
        return token

    def expect_word(self, value):
        token = self.take()
        if token.kind != "word" or token.value != value:
            self._fail(f"expected {value!r}, got {token.value!r}", token)
        return token

    def expect_colon(self):
        token = self.take()
        if token.kind != "colon":
            self._fail(f"expected ':', got {token.value!r}", token)

    def at_keyword(self, *names):
        token = self.peek()
        return token is not None and token.kind == "word" and token.value in names

    # grammar --------------------------------------------------------------

    def parse_rulebase(self):
        rules = []
        while self.peek() is not None:
            rules.append(self.parse_rule())
        return RuleBase(rules)

    def parse_rule(self):
        self.expect_word("RULE")
        self.expect_colon()
        name_token = self.take()
        if name_token.kind != "word" or name_token.value in _KEYWORDS:
            self._fail("expected rule name", name_token)
        self.expect_word("IF")
        conditions = self.parse_conditions()
        self.expect_word("THEN")
        nested_conditions = ()
        else_actions = ()
        if self.at_keyword("IF"):
            self.take()
            nested_conditions = self.parse_conditions()
            self.expect_word("THEN")
            actions = self.parse_actions()
            if self.at_keyword("ELSE"):
                self.take()
                else_actions = self.parse_actions()
        else:
            actions = self.parse_actions()
            if self.at_keyword("ELSE"):
                self._fail("ELSE requires a nested IF/THEN block")
        try:
            return Rule(
                name=name_token.value,
                conditions=conditions,
                actions=actions,
                nested_conditions=nested_conditions,
                else_actions=else_actions,
            )
        except ValueError as exc:
            raise ParseError(str(exc), name_token.line, name_token.column) from None

    def parse_conditions(self):
        conditions = [self.parse_condition()]
        while self.at_keyword("AND"):
            self.take()
            conditions.append(self.parse_condition())
        return tuple(conditions)

    def parse_condition(self):
        left = self.take()
        if left.kind != "word" or left.value in _KEYWORDS:
            self._fail("expected condition left-side path", left)
        _validate_path(left.value, self, left)
        op = self.take()
        if op.kind != "word" or op.value not in _OPERATORS:
            self._fail(
                f"expected operator {sorted(_OPERATORS)}, got {op.value!r}", op
            )
        right = self.take()
        if right.kind != "word" or right.value in _KEYWORDS:
            self._fail("missing right-side value", right)
        return Condition(left=left.value, operator=op.value, right=_typed_literal(right.value))

    def parse_actions(self):
        actions = [self.parse_action()]
        while self.at_keyword("AND"):
            self.take()
            actions.append(self.parse_action())
        return tuple(actions)

    def parse_action(self):
        verb = self.take()
        if verb.kind != "word" or verb.value != "Event.post":
            self._fail(f"unknown action verb {verb.value!r} (only Event.post)", verb)
        self.expect_colon()
        segments = []
        params = None
        while True:
            token = self.take()
            if token.kind == "params":
                params = _split_params(token.value)
                break
            if token.kind != "word" or token.value in _KEYWORDS:
                self._fail("expected action segment or [params]", token)
            segments.append(token)
            nxt = self.peek()
            if nxt is None or nxt.kind != "colon":
                self._fail("action missing [params]", token)
            self.expect_colon()
        if len(segments) == 1:
            fused = segments[0].value
            if "." not in fused:
                self._fail(f"cannot split fused component.method {fused!r}", segments[0])
            component, method = fused.rsplit(".", 1)
        elif len(segments) == 2:
            component, method = segments[0].value, segments[1].value
        else:
            self._fail("too many action segments", segments[2])
        return Action(component=component, method=method, params=params)


def _validate_path(path, parser=None, token=None):
    if any(not seg for seg in path.split(".")):
        if parser is not None:
            parser._fail(f"malformed dotted path {path!r}", token)
        raise ValueError(f"malformed dotted path {path!r}")


def _typed_literal(raw):
    if raw == "true":
        return True
    if raw == "false":
        return False
    try:
        return int(raw)
    except ValueError:
        pass
    try:
        return float(raw)
    except ValueError:
        return raw


def _split_params(group):
    inner = group[1:-1].strip()
    if not inner:
        return ()
    return tuple(part.strip() for part in inner.split(","))


def parse_rules(text: str) -> RuleBase:
    """Parse rule text into a normalized RuleBase (ParseError carries line/col)."""
    return _Parser(_tokenize(text)).parse_rulebase()


def load_rules(path) -> RuleBase:
    with open(path, encoding="utf-8") as fh:
        return parse_rules(fh.read())


# -- working memory ------------------------------------------------------------

@dataclass(frozen=True)
class FactEntry:
    value: Any
    ts: int


class WorkingMemory:
    """Dotted-path fact store plus the most recently intercepted event."""

    def __init__(self):
        self._facts: Dict[str, FactEntry] = {}
        self._tick = itertools.count(1)
        self._lock = threading.Lock()
        self.event: Optional[Event] = None
        self.event_ts = 0
        self._on_change = None  # engine scheduling hook

    def assert_fact(self, path: str, value) -> bool:
        """Store value under path with a fresh timestamp; True when the value changed."""
        _validate_path(path)
        with self._lock:
            old = self._facts.get(path)
            changed = old is None or old.value != value
            self._facts[path] = FactEntry(value, next(self._tick))
        if changed and self._on_change is not None:
            self._on_change(path, value)
        return changed

    def get(self, path):
        with self._lock:
            return self._facts.get(path)

    def set_event(self, event: Event):
        """Atomically expose event as the Event.* slot."""
        with self._lock:
            self.event = event
            self.event_ts = next(self._tick)

    def facts_snapshot(self):
        with self._lock:
            return dict(self._facts)


# -- matching -------------------------------------------------------------------

@dataclass(frozen=True)
class Instantiation:
    rule: Rule
    branch: str  # "then" | "else"
    actions: Tuple[Action, ...]
    binding_key: tuple
    recency: int


def _event_field(event, name):
    if event is None or name not in _EVENT_FIELDS:
        return _MISSING
    return getattr(event, name)


def _resolve_left(wm: WorkingMemory, left: str):
    """Value for a condition left-side; returns (value, bound) with bound entries
    (path, value, ts, is_event)."""
    event = wm.event
    if left.startswith("Event."):
        value = _event_field(event, left[6:])
        if value is _MISSING:
            return _MISSING, ()
        return value, ((left, value, wm.event_ts, True),)
    entry = wm.get(left)
    if entry is not None:
        return entry.value, ((left, entry.value, entry.ts, False),)
    if event is not None and "." in left:
        parent = left.rsplit(".", 1)[0]
        if event.topic == parent or event.topic.startswith(parent + "."):
            return event.payload, ((left, event.payload, wm.event_ts, True),)
    return _MISSING, ()


def _resolve_right(wm: WorkingMemory, right):
    if isinstance(right, str):
        if right.startswith("Event."):
            return _event_field(wm.event, right[6:])
        entry = wm.get(right)
        if entry is not None:
            return entry.value
    return right


def _eval_conditions(wm, conditions):
    """(satisfied, bound) for a conjunctive condition list."""
    bound = []
    for cond in conditions:
        left, left_bound = _resolve_left(wm, cond.left)
        if left is _MISSING:
            return False, ()
        right = _resolve_right(wm, cond.right)
        if right is _MISSING:
            return False, ()
        ok = left == right if cond.operator == "equals" else left != right
        if not ok:
            return False, ()
        bound.extend(left_bound)
    return True, tuple(bound)


def _binding_key(rule, branch, bound, event_ts):
    facts = tuple(sorted((path, repr(value)) for path, value, _, is_event in bound if not is_event))
    event_id = event_ts if any(is_event for *_, is_event in bound) else None
    return (rule.name, branch, event_id, facts)


def match_instantiations(rulebase: RuleBase, wm: WorkingMemory, refracted=frozenset()):
    """The conflict set: all satisfied, non-refracted instantiations."""
    out = []
    for rule in rulebase:
        ok, bound = _eval_conditions(wm, rule.conditions)
        if not ok:
            continue
        branch, actions = "then", rule.actions
        if rule.nested_conditions:
            nested_ok, nested_bound = _eval_conditions(wm, rule.nested_conditions)
            if nested_ok:
                bound = bound + nested_bound
            elif rule.else_actions:
                branch, actions = "else", rule.else_actions
            else:
                continue
        key = _binding_key(rule, branch, bound, wm.event_ts)
        if key in refracted:
            continue
        recency = max(ts for _, _, ts, _ in bound) if bound else 0
        out.append(Instantiation(rule, branch, actions, key, recency))
    return out


def resolve_param(wm: WorkingMemory, param: str):
    """Action param value: Event.* field, triggering event payload, fact, or literal."""
    event = wm.event
    if param.startswith("Event."):
        value = _event_field(event, param[6:])
        if value is _MISSING:
            raise UnresolvedParam(f"{param!r} names no field of the triggering event")
        return value
    if event is not None and "." in param:
        if param.split(".", 1)[0] in event.topic.split("."):
            return event.payload
    entry = wm.get(param)
    if entry is not None:
        return entry.value
    return param


def _usermodel_path(method):
    if not method.startswith("set") or len(method) <= 3:
        raise UnresolvedParam(f"UserModel actions must be set<Attr>, got {method!r}")
    attr = method[3:]
    return f"UserModel.{attr[0].lower()}{attr[1:]}"


# -- engine ----------------------------------------------------------------------

_WAKE = object()
_STOP = object()


class RuleEngine:
    """Single-threaded inference loop fed by a bus tap.

    Intercepted events update the Event.* slot (and any configured
    topic->fact routes), then the match / conflict-resolve / fire loop runs
    until the conflict set empties or the cycle cap trips. Fired Event.post
    actions re-enter the bus; UserModel actions assert facts.
    """

    def __init__(self, broker, rulebase: Optional[RuleBase] = None,
                 wm: Optional[WorkingMemory] = None, cycle_cap: int = 1000,
                 fact_routes: Optional[Dict[str, str]] = None):
        self.broker = broker
        self.rulebase = rulebase if rulebase is not None else RuleBase([])
        self.wm = wm if wm is not None else WorkingMemory()
        self.cycle_cap = cycle_cap
        self.fact_routes = dict(DEFAULT_FACT_ROUTES if fact_routes is None else fact_routes)
        self.fired_log: List[Tuple[str, str]] = []
        self._refracted = set()
        self._queue = deque()
        self._cv = threading.Condition(threading.Lock())
        self._thread = None
        self._tap = None
        self._busy = False
        self._running = False
        self._trace_hooks = []

    def add_trace_hook(self, hook):
        self._trace_hooks.append(hook)

    def _trace(self, kind, *details):
        for hook in self._trace_hooks:
            hook(kind, *details)

    # -- synchronous core ----------------------------------------------------

    def run_cycle(self, rulebase: Optional[RuleBase] = None,
                  wm: Optional[WorkingMemory] = None):
        """Run match/resolve/fire to quiescence; returns [(rule, branch, posted topics)]."""
        rulebase = rulebase if rulebase is not None else self.rulebase
        wm = wm if wm is not None else self.wm
        fired = []
        for _ in range(self.cycle_cap):
            conflict_set = match_instantiations(rulebase, wm, self._refracted)
            if not conflict_set:
                return fired
            conflict_set.sort(key=lambda inst: (-inst.rule.priority, -inst.recency, inst.rule.name))
            inst = conflict_set[0]
            self._refracted.add(inst.binding_key)
            posted = self._fire(inst, wm)
            fired.append((inst.rule.name, inst.branch, posted))
            self.fired_log.append((inst.rule.name, inst.branch))
            self._trace("fired", inst.rule.name, inst.branch)
        raise CycleCapExceeded(f"rule loop: {self.cycle_cap} firings without quiescence")

    def _fire(self, inst: Instantiation, wm: WorkingMemory):
        posted = []
        for action in inst.actions:
            params = [resolve_param(wm, p) for p in action.params]
            if action.component == "UserModel":
                path = _usermodel_path(action.method)
                value = params[0] if params else None
                wm.assert_fact(path, value)
                self._trace("assert", path, value)
                continue
            topic = f"{action.component}.{action.method}"
            self.broker.post(Event(topic=topic, payload=params, source="rules"))
            posted.append(topic)
        return posted

    # -- bus attachment ---------------------------------------------------------

    def attach_to_bus(self):
        """Install the all-events tap and start the engine thread."""
        if self._tap is not None:
            return self._tap
        self._running = True
        self.wm._on_change = self._on_fact_change
        self._thread = threading.Thread(target=self._loop, name="rule-engine", daemon=True)
        self._thread.start()
        self._tap = self.broker.intercept("rule-engine", self._enqueue)
        return self._tap

    def detach(self):
        if self._tap is not None:
            self._tap.remove()
            self._tap = None
        self.wm._on_change = None
        if self._thread is not None:
            with self._cv:
                self._queue.append(_STOP)
                self._cv.notify()
            self._thread.join(timeout=5)
            self._thread = None
        self._running = False

    def _enqueue(self, event):
        with self._cv:
            self._queue.append(event)
            self._cv.notify()

    def _on_fact_change(self, path, value):
        if self._running:
            with self._cv:
                self._queue.append(_WAKE)
                self._cv.notify()

    def _loop(self):
        while True:
            with self._cv:
                while not self._queue:
                    self._busy = False
                    self._cv.notify_all()
                    self._cv.wait()
                item = self._queue.popleft()
                self._busy = True
            if item is _STOP:
                with self._cv:
                    self._busy = False
                    self._cv.notify_all()
                return
            if item is not _WAKE:
                self.wm.set_event(item)
                route = self.fact_routes.get(item.topic)
                if route is not None:
                    self.wm.assert_fact(route, item.payload)
            try:
                self.run_cycle()
            except Exception as exc:
                self._trace("error", repr(exc))
                log.exception("inference pass failed")

    def wait_idle(self, timeout: Optional[float] = None) -> bool:
        with self._cv:
            return self._cv.wait_for(lambda: not self._queue and not self._busy, timeout)
