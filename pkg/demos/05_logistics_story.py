"""The full spare-part delivery story, end to end.

Runs the bundled logistics scenario: a truck delivery is chosen and
packed, a thunderstorm washes out the road mid-transit, the SLA rule
fires on re-evaluation, the truck is recalled, and a compensation
process flies an identical part out in time.
"""

import json
from importlib import resources

from ctxflow import build_simulation, parse_scenario

data = json.loads(
    resources.files("ctxflow").joinpath("scenarios/logistics.json").read_text()
)
scenario, violations = parse_scenario(data)
assert not violations
assembly = build_simulation(scenario)
trace = assembly.simulation.run()

STORY_KINDS = {
    "instance_created", "model_instantiated", "gate_evaluated",
    "model_extended", "task_undone", "BreakRollback", "StartCompensation",
    "ProcessCompleted", "ProcessCancelled", "model_closed",
}

print(f"{len(trace)} trace records; highlights:\n")
for record in trace:
    p = record.payload
    if record.kind == "gate_evaluated":
        line = (f"{p['instance']}: gate {p['gate']} ({p['evaluation']}) -> "
                f"{p['decision']}"
                + (f" [rule: {p['fired_rule']}]" if p["fired_rule"] else ""))
    elif record.kind == "model_extended":
        added = ", ".join(a["category"] for a in p["added"])
        line = f"{p['model']} extended with {added} (step {p['step']})"
    elif record.kind == "model_instantiated":
        origin = f"copy of {p['copy_of']}" if "copy_of" in p else f"from {p['master']}"
        line = f"{p['model']} instantiated {origin} for {p['instance']}"
    elif record.kind == "task_undone":
        line = f"{p['instance']}: undo {p['task']}"
    elif record.kind in ("BreakRollback", "StartCompensation"):
        line = f"{record.pool} -> {p['to']}: {record.kind} {p['data']}"
    elif record.kind in ("ProcessCompleted", "ProcessCancelled"):
        line = f"{p['data']['instance']} {record.kind} at tick {p['data']['tick']}"
    elif record.kind == "instance_created":
        parent = f" (compensates {p['parent']})" if "parent" in p else ""
        line = f"instance {p['instance']} on {p['model']}{parent}"
    elif record.kind == "model_closed":
        line = f"{p['model']} closed at configuration step {p['end_step']}"
    else:
        continue
    print(f"  t={record.tick:>3}  {line}")

print("\nfinal statuses:", {
    i.instance_id: i.status for i in assembly.process.instances.values()
})
weather_update = [r for r in trace
                  if r.kind == "value_updated"
                  and r.payload["category"] == "estimatedDeliveryTime"][-1]
print("last delivery estimate:", weather_update.payload["value"]["payload"], "hours")
