import time

import pytest

from switchboard.errors import (
    CycleCapExceeded,
    DuplicateRuleName,
    ParseError,
    UnresolvedParam,
)
from switchboard.events import Event
from switchboard.rules import (
    RuleBase,
    RuleEngine,
    WorkingMemory,
    match_instantiations,
    parse_rules,
)


def _read_rules(data_dir, name):
    return (data_dir / "rules" / f"{name}.rules").read_text(encoding="utf-8")


# -- parsing ----------------------------------------------------------------------

def test_conversation_rules_shape(data_dir):
    rulebase = parse_rules(_read_rules(data_dir, "conversation"))
    assert len(rulebase) == 5
    rule1 = rulebase.by_name["Rule1"]
    assert len(rule1.conditions) == 1
    assert len(rule1.actions) == 2  # the AND-joined pair
    # fused and 4-segment forms normalize identically
    assert rule1.actions[0].component == "Service.ASR"
    assert rule1.actions[0].method == "process"
    assert rule1.actions[1].component == "Service.NVB"
    assert rule1.actions[1].method == "processAF"
    assert rule1.actions[0].params == ("MIC.bytes",)


def test_nested_rule_shape(data_dir):
    rulebase = parse_rules(_read_rules(data_dir, "asr_selection"))
    assert len(rulebase) == 1
    rule = rulebase.rules[0]
    assert [c.left for c in rule.conditions] == ["Event.what"]
    assert [c.left for c in rule.nested_conditions] == ["WiFi.turnedOn"]
    assert rule.nested_conditions[0].right is False  # literal typing
    assert rule.actions[0].params == ("ASR.Local", "MIC.bytes")
    assert rule.else_actions[0].params == ("ASR.Remote", "MIC.byte")


def test_composite_rules_shape(data_dir):
    rulebase = parse_rules(_read_rules(data_dir, "emotion_composites"))
    assert len(rulebase) == 4
    rule2 = rulebase.by_name["Rule2"]
    assert rule2.actions[0].component == "UserModel"
    assert rule2.actions[0].method == "setEmotion"
    rule3 = rulebase.by_name["Rule3"]
    assert rule3.conditions[1].right is True


def test_empty_text_gives_empty_rulebase():
    assert len(parse_rules("")) == 0
    assert len(parse_rules("# only a comment\n")) == 0


def test_missing_right_side_is_parse_error():
    with pytest.raises(ParseError) as info:
        parse_rules("RULE: R\nIF x equals\nTHEN Event.post : A.b : [p]\n")
    assert info.value.line is not None


@pytest.mark.parametrize(
    "text",
    [
        "RULE R\nIF a.b equals 1\nTHEN Event.post : A.b : [p]\n",   # missing colon
        "RULE: R\nIF a.b near 1\nTHEN Event.post : A.b : [p]\n",     # unknown operator
        "RULE: R\nIF a.b equals 1\nTHEN Event.drop : A.b : [p]\n",   # unknown verb
        "RULE: R\nIF a.b equals 1\nTHEN Event.post : A.b\n",         # missing params
        "RULE: R\nIF a.b equals 1\nTHEN Event.post : solo : [p]\n",  # unsplittable fused form
        "RULE: R\nIF a.b equals 1\nTHEN Event.post : A.b : [p] ELSE Event.post : A.c : [p]\n",
        "RULE: R\nIF a.b equals 1\nTHEN Event.post : A.b : [p\n",    # unbalanced bracket
    ],
)
def test_parse_errors(text):
    with pytest.raises(ParseError):
        parse_rules(text)


def test_duplicate_rule_names_rejected():
    text = (
        "RULE: R\nIF a.b equals 1\nTHEN Event.post : A.b : [p]\n"
        "RULE: R\nIF a.c equals 1\nTHEN Event.post : A.b : [p]\n"
    )
    with pytest.raises(DuplicateRuleName):
        parse_rules(text)


def test_golden_dump_roundtrip(data_dir):
    import json

    for name in ("conversation", "asr_selection", "emotion_composites"):
        golden = json.loads((data_dir / "golden" / f"{name}.json").read_text())
        assert parse_rules(_read_rules(data_dir, name)).to_dict() == golden


# -- working memory -----------------------------------------------------------------

def test_assert_fact_change_semantics():
    wm = WorkingMemory()
    assert wm.assert_fact("WiFi.turnedOn", False) is True
    assert wm.assert_fact("WiFi.turnedOn", False) is False  # idempotent value
    assert wm.assert_fact("WiFi.turnedOn", True) is True
    entry = wm.get("WiFi.turnedOn")
    assert entry.value is True


def test_fact_timestamps_monotone_per_path():
    wm = WorkingMemory()
    wm.assert_fact("a.b", 1)
    t1 = wm.get("a.b").ts
    wm.assert_fact("a.b", 1)
    assert wm.get("a.b").ts > t1  # fresh timestamp even when unchanged


# -- matching and firing ----------------------------------------------------------------

class FakeBus:
    def __init__(self):
        self.posted = []

    def post(self, event):
        self.posted.append(event)


def _engine(text, bus=None):
    return RuleEngine(bus or FakeBus(), parse_rules(text))


def test_run_cycle_empty_memory_fires_nothing():
    engine = _engine("RULE: R\nIF a.b equals 1\nTHEN Event.post : A.b : [p]\n")
    assert engine.run_cycle() == []


def test_fact_match_fires_and_posts():
    engine = _engine("RULE: R\nIF a.b equals 1\nTHEN Event.post : Out.go : [lit]\n")
    engine.wm.assert_fact("a.b", 1)
    fired = engine.run_cycle()
    assert fired == [("R", "then", ["Out.go"])]
    assert engine.broker.posted[0].topic == "Out.go"
    assert engine.broker.posted[0].payload == ["lit"]


def test_refraction_binding_fires_at_most_once():
    engine = _engine(
        "RULE: R1\nIF a.b equals 1\nTHEN Event.post : Out.one : [lit]\n"
        "RULE: R2\nIF a.b equals 2\nTHEN Event.post : Out.two : [lit]\n"
    )
    engine.wm.assert_fact("a.b", 1)
    assert [f[0] for f in engine.run_cycle()] == ["R1"]
    assert engine.run_cycle() == []  # static facts: refracted
    engine.wm.assert_fact("a.b", 2)
    assert [f[0] for f in engine.run_cycle()] == ["R2"]  # new value, new binding
    engine.wm.assert_fact("a.b", 1)
    assert engine.run_cycle() == []  # identical (rule, binding) never fires twice


def test_user_model_action_asserts_fact(data_dir):
    engine = _engine(_read_rules(data_dir, "emotion_composites"))
    engine.wm.set_event(Event(topic="Service.ER.response", payload="Emotion.SAD"))
    fired = engine.run_cycle()
    assert [f[0] for f in fired] == ["Rule2"]
    assert engine.wm.get("UserModel.emotion").value == "SAD"


def test_composite_chain_to_news_filter(data_dir):
    engine = _engine(_read_rules(data_dir, "emotion_composites"))
    engine.wm.assert_fact("Service.NEWS.isOpen", True)
    engine.wm.set_event(Event(topic="Service.ER.response", payload="Emotion.SAD"))
    fired = engine.run_cycle()
    assert [f[0] for f in fired] == ["Rule2", "Rule3"]
    assert engine.broker.posted[-1].topic == "Service.NEWS.filter"
    assert engine.broker.posted[-1].payload == ["NEWS.Encouraging"]


def test_nested_else_branch(data_dir):
    engine = _engine(_read_rules(data_dir, "asr_selection"))
    engine.wm.assert_fact("WiFi.turnedOn", False)
    engine.wm.set_event(Event(topic="Sensor.MIC.recording", payload=b"pcm"))
    assert engine.run_cycle()[0][1] == "then"
    assert engine.broker.posted[-1].payload == ["ASR.Local", b"pcm"]

    engine2 = _engine(_read_rules(data_dir, "asr_selection"))
    engine2.wm.assert_fact("WiFi.turnedOn", True)
    engine2.wm.set_event(Event(topic="Sensor.MIC.recording", payload=b"pcm"))
    assert engine2.run_cycle()[0][1] == "else"
    assert engine2.broker.posted[-1].payload == ["ASR.Remote", b"pcm"]


def test_nested_if_without_wifi_fact_takes_else(data_dir):
    # unknown is neither equal nor not-equal: the nested IF fails, ELSE fires
    engine = _engine(_read_rules(data_dir, "asr_selection"))
    engine.wm.set_event(Event(topic="Sensor.MIC.recording", payload=b"pcm"))
    assert engine.run_cycle()[0][1] == "else"


def test_event_payload_param_resolution():
    engine = _engine(
        "RULE: R\nIF Event.what equals Sensor.MIC.recording\n"
        "THEN Event.post : Service.ASR.process : [MIC.bytes]\n"
    )
    chunk = b"pcm-bytes"
    engine.wm.set_event(Event(topic="Sensor.MIC.recording", payload=chunk))
    engine.run_cycle()
    assert engine.broker.posted[0].payload == [chunk]  # MIC.bytes -> event payload


def test_param_resolution_order_fact_and_literal():
    engine = _engine(
        "RULE: R\nIF a.b equals 1\nTHEN Event.post : Out.go : [known.fact,plain-literal]\n"
    )
    engine.wm.assert_fact("a.b", 1)
    engine.wm.assert_fact("known.fact", 42)
    engine.run_cycle()
    assert engine.broker.posted[0].payload == [42, "plain-literal"]


def test_unresolved_event_param_raises():
    engine = _engine("RULE: R\nIF a.b equals 1\nTHEN Event.post : Out.go : [Event.bogus]\n")
    engine.wm.assert_fact("a.b", 1)
    with pytest.raises(UnresolvedParam):
        engine.run_cycle()


def test_cycle_cap_exceeded_on_rule_loop():
    text = (
        "RULE: Flip\nIF UserModel.mode equals a\nTHEN Event.post : UserModel : setMode : [b]\n"
        "RULE: Flop\nIF UserModel.mode equals b\nTHEN Event.post : UserModel : setMode : [a]\n"
    )
    engine = RuleEngine(FakeBus(), parse_rules(text), cycle_cap=50)
    engine.wm.assert_fact("UserModel.mode", "a")
    with pytest.raises(CycleCapExceeded):
        engine.run_cycle()


def test_conflict_resolution_priority_then_recency_then_name():
    from switchboard.rules import Action, Condition, Rule

    def rule(name, left, priority=0):
        return Rule(
            name=name,
            conditions=(Condition(left=left, operator="equals", right=1),),
            actions=(Action(component="Out", method="go", params=()),),
            priority=priority,
        )

    wm = WorkingMemory()
    wm.assert_fact("old.f", 1)
    wm.assert_fact("new.f", 1)
    rulebase = RuleBase([rule("B", "old.f"), rule("A", "old.f"), rule("N", "new.f"),
                         rule("P", "old.f", priority=5)])
    insts = match_instantiations(rulebase, wm)
    insts.sort(key=lambda i: (-i.rule.priority, -i.recency, i.rule.name))
    assert [i.rule.name for i in insts] == ["P", "N", "A", "B"]


def test_determinism_same_inputs_same_firing(data_dir):
    def run():
        engine = _engine(_read_rules(data_dir, "emotion_composites"))
        engine.wm.assert_fact("Service.NEWS.isOpen", True)
        engine.wm.assert_fact("Service.MR.isOpen", True)
        engine.wm.set_event(Event(topic="Service.ER.response", payload="Emotion.SAD"))
        return [f[:2] for f in engine.run_cycle()]

    assert run() == run() == [("Rule2", "then"), ("Rule3", "then"), ("Rule4", "then")]


# -- bus attachment ---------------------------------------------------------------------

def test_attach_detach_on_live_bus(broker):
    engine = RuleEngine(
        broker,
        parse_rules("RULE: R\nIF Event.topic equals Ping.now\nTHEN Event.post : Pong.back : [x]\n"),
    )
    pongs = []
    broker.subscribe("side", "Pong.back", callback=lambda e: pongs.append(e))
    engine.attach_to_bus()
    broker.post(Event(topic="Ping.now"))
    engine.wait_idle(5)
    broker.drain(5)
    assert len(pongs) == 1
    engine.detach()
    broker.post(Event(topic="Ping.now"))
    broker.drain(5)
    time.sleep(0.05)
    assert len(pongs) == 1  # detached: no further firings


def test_empty_rulebase_tap_overhead_under_2x(broker):
    sink = []
    broker.subscribe("sink", "Load.data", callback=sink.append)

    def posts_per_second():
        best = 0.0
        for _ in range(3):
            t0 = time.perf_counter()
            for i in range(2000):
                broker.post(Event(topic="Load.data", payload=i))
            best = max(best, 2000 / (time.perf_counter() - t0))
        return best

    bare = posts_per_second()
    engine = RuleEngine(broker, RuleBase([]))
    engine.attach_to_bus()
    tapped = posts_per_second()
    engine.wait_idle(5)
    assert not engine.fired_log
    engine.detach()
    assert bare / tapped < 2.0  # tap overhead stays under 2x
