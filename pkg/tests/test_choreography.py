import random

import pytest

from ctxflow.choreography import LatencyConfig, Simulation
from ctxflow.errors import ForbiddenRoute
from ctxflow.scenario import build_simulation, parse_scenario

from .conftest import logistics_scenario_data
from .scenario_gen import random_scenario


class Recorder:
    def __init__(self):
        self.deliveries = []

    def __call__(self, kind, payload):
        self.deliveries.append((kind, payload))


# --- routing -----------------------------------------------------------------


def test_rules_to_context_is_allowed():
    sim = Simulation()
    sim.route("rules", "context", "ContextRequest")  # no exception


def test_process_to_context_is_forbidden():
    sim = Simulation()
    with pytest.raises(ForbiddenRoute):
        sim.route("process", "context", "ContextRequest")
    with pytest.raises(ForbiddenRoute):
        sim.route("context", "process", "ContextSnapshot")


def test_unknown_pool_and_kind_rejected():
    sim = Simulation()
    with pytest.raises(ForbiddenRoute):
        sim.route("process", "nowhere", "Decision")
    with pytest.raises(ForbiddenRoute):
        sim.route("process", "rules", "Telegram")


def test_send_enforces_route():
    sim = Simulation()
    with pytest.raises(ForbiddenRoute):
        sim.send("process", "context", "ContextRequest", {})


# --- delivery ordering ---------------------------------------------------------


def test_same_channel_same_tick_fifo():
    sim = Simulation()
    recorder = Recorder()
    sim.register_pool("rules", recorder)
    sim.send("process", "rules", "RuleEvalRequest", {"n": 1})
    sim.send("process", "rules", "RuleEvalRequest", {"n": 2})
    sim.send("process", "rules", "RuleEvalRequest", {"n": 3})
    sim.is_quiescent = lambda: False
    sim.run()
    assert [p["n"] for (_, p) in recorder.deliveries] == [1, 2, 3]


def test_latency_defaults_to_one_tick():
    sim = Simulation()
    seen = []
    sim.register_pool("rules", lambda kind, payload: seen.append(sim.now))
    sim.send("process", "rules", "Decision", {})
    sim.run()
    assert seen == [1]


def test_channel_latency_override():
    sim = Simulation(latency=LatencyConfig(default=1, channels={"process->rules": 5}))
    seen = []
    sim.register_pool("rules", lambda kind, payload: seen.append(sim.now))
    sim.send("process", "rules", "Decision", {})
    sim.run()
    assert seen == [5]


def test_clock_never_goes_backwards():
    sim = Simulation()
    ticks = []
    sim.register_pool("rules", lambda kind, payload: ticks.append(sim.now))
    for _ in range(5):
        sim.send("process", "rules", "Decision", {})
    sim.timer("rules", {}, 9)
    sim.run()
    assert ticks == sorted(ticks)


def test_max_steps_truncates_and_marks_trace():
    data = logistics_scenario_data()
    scenario, violations = parse_scenario(data)
    assert not violations
    assembly = build_simulation(scenario, max_steps=5)
    trace = assembly.simulation.run()
    assert assembly.simulation.truncated
    assert trace.find("run_truncated")


# --- trace-level properties -------------------------------------------------------


def run_logistics():
    scenario, violations = parse_scenario(logistics_scenario_data())
    assert not violations
    assembly = build_simulation(scenario)
    return assembly, assembly.simulation.run()


MESSAGE_KINDS = {
    "Register", "ContextRequest", "ContextSnapshot", "ContextNotification",
    "RuleEvalRequest", "Decision", "BreakRollback", "StartCompensation",
    "SourceEvent", "PollRequest", "PollResponse",
    "ProcessCompleted", "ProcessCancelled", "ShutdownModel",
}


def test_per_channel_fifo_over_full_run():
    _, trace = run_logistics()
    per_channel = {}
    for record in trace:
        if record.kind in MESSAGE_KINDS:
            channel = (record.pool, record.payload["to"])
            per_channel.setdefault(channel, []).append(record.payload["msg_seq"])
    assert per_channel, "no messages traced"
    for channel, seqs in per_channel.items():
        assert seqs == sorted(seqs), f"out-of-order delivery on {channel}"


def test_trace_seq_strictly_increasing():
    _, trace = run_logistics()
    seqs = [record.seq for record in trace]
    assert all(b > a for a, b in zip(seqs, seqs[1:]))


def test_break_rollback_originates_from_rules_only():
    _, trace = run_logistics()
    rollbacks = [r for r in trace if r.kind == "BreakRollback"]
    assert rollbacks
    assert all(r.pool == "rules" for r in rollbacks)


def test_no_forbidden_route_in_passing_trace():
    _, trace = run_logistics()
    for record in trace:
        if record.kind in MESSAGE_KINDS:
            assert (record.pool, record.payload["to"]) != ("process", "context")
            assert (record.pool, record.payload["to"]) != ("context", "process")


def test_execution_precedes_no_initialization(tmp_path):
    """Per instance: no gate evaluation before the init snapshot round-trip."""
    _, trace = run_logistics()
    init_done = {}
    for record in trace:
        if record.kind == "Decision" and record.payload["data"].get("evaluation") == "init":
            init_done.setdefault(record.payload["data"]["instance"], record.seq)
    assert init_done
    for record in trace:
        if record.kind == "RuleEvalRequest":
            instance = record.payload["data"]["instance"]
            assert record.seq > init_done[instance]


def test_every_gate_entry_resolves():
    """Each rule-evaluation request is eventually answered by a decision
    application (checkpoint) or the instance's cancellation."""
    _, trace = run_logistics()
    records = list(trace)
    requests = [(i, r.payload["data"]) for i, r in enumerate(records)
                if r.kind == "RuleEvalRequest"]
    assert requests
    for index, request in requests:
        resolved = any(
            (r.kind == "checkpoint"
             and r.payload["instance"] == request["instance"]
             and r.payload["gate"] == request["gate"])
            or (r.kind == "instance_status"
                and r.payload["instance"] == request["instance"]
                and r.payload["status"] == "Cancelled")
            for r in records[index:]
        )
        assert resolved, f"unresolved gate entry {request}"


def test_identical_seeds_identical_traces_with_jitter():
    rng = random.Random(99)
    data = random_scenario(rng, jitter=2)
    scenario_a, _ = parse_scenario(data)
    scenario_b, _ = parse_scenario(data)
    trace_a = build_simulation(scenario_a).simulation.run()
    trace_b = build_simulation(scenario_b).simulation.run()
    assert trace_a.to_text() == trace_b.to_text()


def test_different_seeds_diverge_under_jitter():
    rng = random.Random(100)
    data = random_scenario(rng, jitter=3)
    scenario_a, _ = parse_scenario(data)
    scenario_b, _ = parse_scenario(data)
    trace_a = build_simulation(scenario_a, seed=1).simulation.run()
    trace_b = build_simulation(scenario_b, seed=2).simulation.run()
    assert trace_a.to_text() != trace_b.to_text()


def test_quiescent_run_stops_despite_pending_poll_timers():
    scenario, _ = parse_scenario(logistics_scenario_data())
    assembly = build_simulation(scenario)
    assembly.simulation.run()
    assert not assembly.simulation.truncated
    assert assembly.process.all_terminal()
