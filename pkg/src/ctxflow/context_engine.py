"""Context engine: owns the context cloud and feeds the rules engine.

Ingests pushed and polled source events, resolves multi-source conflicts,
runs derivation agents and cause-and-effect propagation to quiescence,
and emits threshold-gated change notifications.  One logical writer per
instance model; everything observable happens in message-arrival order.
"""

from __future__ import annotations

import ast
import operator
from dataclasses import dataclass, field

from .errors import (
    DeletionRejected,
    DuplicateRegistration,
    KindMismatch,
    LevelViolation,
    StaleWrite,
    StepBudgetExceeded,
    UnknownMaster,
    UnknownModel,
    UnknownRegistration,
    UnknownSharedModel,
)
from .model import (
    Additions,
    ContextCategory,
    ContextValue,
    InstanceContextModel,
    MasterContextModel,
    clone_instance_model,
    instantiate_from_master,
    recent_values,
    relevant_subgraph,
    update_value,
)
from .sources import SourceDescriptor

DEFAULT_POLL_BUDGET = 16


# --- pure operations ---------------------------------------------------------


def resolve_conflict(candidates: list[ContextValue]) -> ContextValue:
    """Deterministic winner among conflicting values for one category.

    Order: reliability (certified sources win), then recency, then source
    id; trailing keys make the order total on arbitrary candidate lists.
    """
    if not candidates:
        raise ValueError("resolve_conflict needs at least one candidate")
    return sorted(
        candidates,
        key=lambda v: (-v.reliability, -v.ts, v.source_id, v.value_id, repr(v.payload)),
    )[0]


@dataclass(frozen=True)
class NotificationThreshold:
    category_id: str
    kind: str  # "numeric-delta" | "any-change"
    theta: float | None = None
    min_reliability: float = 0.0

    def __post_init__(self):
        if self.kind not in ("numeric-delta", "any-change"):
            raise ValueError(f"unknown threshold kind {self.kind!r}")
        if self.kind == "numeric-delta" and (self.theta is None or self.theta <= 0):
            raise ValueError("numeric-delta thresholds need theta > 0")


def check_threshold(old: ContextValue | None, new: ContextValue,
                    t: NotificationThreshold) -> bool:
    """Gate a change notification.

    True iff the change transgresses the threshold (first-ever values
    always do) and the new value is reliable enough.
    """
    if new.reliability < t.min_reliability:
        return False
    if old is None:
        return True
    if t.kind == "numeric-delta":
        for v in (old, new):
            if not isinstance(v.payload, (int, float)) or isinstance(v.payload, bool):
                raise KindMismatch(
                    f"numeric-delta threshold on non-numeric payload {v.payload!r}"
                )
        return abs(new.payload - old.payload) > t.theta
    return new.payload != old.payload


@dataclass(frozen=True)
class StalenessResult:
    fresh: bool
    effective_reliability: float


def apply_staleness(v: ContextValue, now: int, max_age: int,
                    decay: float) -> StalenessResult:
    """Depreciate information older than ``max_age`` ticks.

    Never mutates the value; a stale value keeps its payload but carries
    ``reliability * decay``.
    """
    if max_age < 1:
        raise ValueError("max_age must be at least one tick")
    if not 0.0 < decay <= 1.0:
        raise ValueError("decay must lie in (0, 1]")
    fresh = now - v.ts <= max_age
    return StalenessResult(fresh, v.reliability if fresh else v.reliability * decay)


# --- propagation nodes ---------------------------------------------------------

_EXPR_OPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.USub: operator.neg,
    ast.UAdd: operator.pos,
}


def compile_arithmetic(expr: str):
    """Compile a small arithmetic expression over ``x`` (no eval)."""
    tree = ast.parse(expr, mode="eval")

    def run(node, x):
        if isinstance(node, ast.Expression):
            return run(node.body, x)
        if isinstance(node, ast.BinOp) and type(node.op) in _EXPR_OPS:
            return _EXPR_OPS[type(node.op)](run(node.left, x), run(node.right, x))
        if isinstance(node, ast.UnaryOp) and type(node.op) in _EXPR_OPS:
            return _EXPR_OPS[type(node.op)](run(node.operand, x))
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return node.value
        if isinstance(node, ast.Name) and node.id == "x":
            return x
        raise ValueError(f"disallowed construct in arithmetic expression: {ast.dump(node)}")

    run(tree, 0.0)  # reject bad shapes at compile time
    return lambda x: run(tree, x)


@dataclass(frozen=True)
class CauseEffectRelation:
    """f: X -> Y between two categories; the causing timestamp propagates."""

    relation_id: str
    cause_category: str
    effect_category: str
    function: dict  # {"type": "linear"|"lookup"|"expr", ...}

    def __post_init__(self):
        if self.cause_category == self.effect_category:
            raise ValueError("cause and effect categories must differ")

    def apply(self, payload):
        kind = self.function["type"]
        if kind == "linear":
            return self.function["a"] * payload + self.function["b"]
        if kind == "lookup":
            table = self.function["table"]
            key = payload if isinstance(payload, str) else repr(payload)
            if key in table:
                return table[key]
            return self.function.get("default")
        if kind == "expr":
            return compile_arithmetic(self.function["expr"])(payload)
        raise ValueError(f"unknown cause-effect function type {kind!r}")

    @property
    def node_id(self):
        return self.relation_id

    @property
    def input_categories(self):
        return (self.cause_category,)

    @property
    def output_categories(self):
        return (self.effect_category,)


_REDUCERS = {
    "min": min,
    "max": max,
    "mean": lambda xs: sum(xs) / len(xs),
    "count": len,
    "last": lambda xs: xs[-1],
}

AGENT_KINDS = ("filter", "translate", "aggregate", "compose", "split")

_FILTER_OPS = {
    "<": operator.lt, "<=": operator.le, ">": operator.gt,
    ">=": operator.ge, "==": operator.eq, "!=": operator.ne,
}


@dataclass(frozen=True)
class DerivationAgent:
    """Event-derivation operator: filter, translate, aggregate, compose, split."""

    agent_id: str
    kind: str
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    spec: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in AGENT_KINDS:
            raise ValueError(f"unknown agent kind {self.kind!r}")

    @property
    def node_id(self):
        return self.agent_id

    @property
    def input_categories(self):
        return self.inputs

    @property
    def output_categories(self):
        return self.outputs


def topological_order(nodes):
    """Order propagation nodes so producers precede consumers; reject cycles."""
    produced_by: dict[str, list] = {}
    for node in nodes:
        for cat in node.output_categories:
            produced_by.setdefault(cat, []).append(node)
    deps = {
        node.node_id: [
            upstream.node_id
            for cat in node.input_categories
            for upstream in produced_by.get(cat, [])
        ]
        for node in nodes
    }
    by_id = {node.node_id: node for node in nodes}
    ordered, done, visiting = [], set(), set()

    def visit(node_id):
        if node_id in done:
            return
        if node_id in visiting:
            raise ValueError("cause-effect/agent graph contains a cycle")
        visiting.add(node_id)
        for dep in deps[node_id]:
            visit(dep)
        visiting.discard(node_id)
        done.add(node_id)
        ordered.append(by_id[node_id])

    for node in nodes:
        visit(node.node_id)
    return ordered


# --- engine state --------------------------------------------------------------


@dataclass
class CatalogEntry:
    category: ContextCategory
    parent: str | None = None
    requires_value: bool = True


@dataclass
class Registration:
    instance_id: str
    model_id: str
    thresholds: dict[str, NotificationThreshold]
    active: bool = False
    init_rounds: int = 0
    init_outstanding: set = field(default_factory=set)
    failed: bool = False


@dataclass
class PendingRequest:
    correlation: str
    model_id: str
    instance_id: str
    requested: list[str]
    outstanding: set = field(default_factory=set)
    unavailable: list[str] = field(default_factory=list)


class ContextEngine:
    """Message-driven owner of the context cloud."""

    POOL = "context"

    def __init__(self, sim, catalog: dict[str, CatalogEntry],
                 masters: dict[str, MasterContextModel],
                 sources: dict[str, SourceDescriptor],
                 relations=(), agents=(),
                 poll_budget: int = DEFAULT_POLL_BUDGET,
                 max_config_steps: int | None = None,
                 staleness: tuple[int, float] | None = None,
                 auto_extend_on_push: bool = True):
        self.sim = sim
        self.catalog = catalog
        self.masters = masters
        self.sources = sources
        self.relations = list(relations)
        self.agents = list(agents)
        self.propagation = topological_order(self.relations + self.agents)
        self.poll_budget = poll_budget
        self.max_config_steps = max_config_steps
        self.staleness = staleness
        self.auto_extend_on_push = auto_extend_on_push
        self.instances: dict[str, InstanceContextModel] = {}
        self.closed: dict[str, InstanceContextModel] = {}
        self.registrations: dict[str, Registration] = {}
        self.pending_requests: dict[str, PendingRequest] = {}
        # (model_id, category) -> correlations waiting on an administered fetch
        self.pending_fetches: dict[tuple[str, str], list[str]] = {}

    # -- registration / initialization ---------------------------------------

    def register_instance(self, instance_id: str, master_id: str,
                          thresholds: dict[str, NotificationThreshold],
                          share_with: str | None = None,
                          copy_from: str | None = None) -> str:
        if instance_id in self.registrations:
            raise DuplicateRegistration(f"instance {instance_id!r} already registered")
        if share_with is not None:
            if share_with not in self.instances:
                raise UnknownSharedModel(f"no live instance model {share_with!r}")
            model = self.instances[share_with]
            model.bound_instances.append(instance_id)
            self.sim.trace(self.POOL, "model_shared", {
                "model": model.model_id,
                "instance": instance_id,
                "bound": sorted(model.bound_instances),
            })
        elif copy_from is not None:
            if copy_from not in self.instances:
                raise UnknownModel(f"no live instance model {copy_from!r} to copy")
            origin = self.instances[copy_from]
            model = clone_instance_model(origin, [instance_id], f"ctx.{instance_id}")
            self.instances[model.model_id] = model
            self.sim.trace(self.POOL, "model_instantiated", {
                "model": model.model_id,
                "master": model.master_id,
                "copy_of": copy_from,
                "instance": instance_id,
                "categories": sorted(model.intersection.category_ids()),
            })
        else:
            if master_id not in self.masters:
                raise UnknownMaster(f"no master model {master_id!r}")
            master = self.masters[master_id]
            model = instantiate_from_master(
                master, [instance_id], f"ctx.{instance_id}", k=self.max_config_steps
            )
            self.instances[model.model_id] = model
            self.sim.trace(self.POOL, "model_instantiated", {
                "model": model.model_id,
                "master": master_id,
                "instance": instance_id,
                "categories": sorted(model.intersection.category_ids()),
            })
        self.registrations[instance_id] = Registration(
            instance_id=instance_id,
            model_id=model.model_id,
            thresholds=dict(thresholds),
        )
        return model.model_id

    def handle_register(self, payload: dict):
        instance = payload["instance"]
        thresholds = {
            t["category_id"]: NotificationThreshold(
                category_id=t["category_id"],
                kind=t["kind"],
                theta=t.get("theta"),
                min_reliability=t.get("min_reliability", 0.0),
            )
            for t in payload.get("thresholds", [])
        }
        try:
            self.register_instance(
                instance,
                payload.get("master", ""),
                thresholds,
                share_with=payload.get("share_with"),
                copy_from=payload.get("copy_from"),
            )
        except (DuplicateRegistration, UnknownMaster, UnknownSharedModel,
                UnknownModel) as err:
            self.sim.trace(self.POOL, "engine_error", {
                "error": type(err).__name__, "detail": str(err), "instance": instance,
            })
            self.sim.send(self.POOL, "rules", "ContextSnapshot", {
                "instance": instance, "phase": "init", "status": "error",
                "detail": type(err).__name__,
            })
            return
        self._continue_initialization(instance)

    def _unvalued_requirements(self, model: InstanceContextModel) -> list[str]:
        out = []
        for cat in model.intersection.category_ids():
            entry = self.catalog.get(cat)
            required = entry.requires_value if entry else True
            if required and cat not in model.intersection.values:
                out.append(cat)
        return out

    def _continue_initialization(self, instance_id: str):
        reg = self.registrations.get(instance_id)
        if reg is None or reg.active or reg.failed:
            return
        model = self.instances[reg.model_id]
        missing = self._unvalued_requirements(model)
        if not missing:
            self._finish_initialization(reg, model)
            return
        if reg.init_outstanding:
            return  # waiting on poll responses
        if reg.init_rounds >= self.poll_budget:
            reg.failed = True
            self.sim.trace(self.POOL, "init_timeout", {
                "instance": instance_id,
                "model": model.model_id,
                "rounds": reg.init_rounds,
                "unvalued": sorted(missing),
            })
            self.sim.send(self.POOL, "rules", "ContextSnapshot", {
                "instance": instance_id, "model": model.model_id,
                "phase": "init", "status": "timeout",
                "unvalued": sorted(missing),
            })
            return
        reg.init_rounds += 1
        by_source: dict[str, list[str]] = {}
        for cat in missing:
            source = self._best_source_for(cat)
            if source is not None:
                by_source.setdefault(source, []).append(cat)
        for source_id, cats in by_source.items():
            reg.init_outstanding.add(source_id)
            self.sim.send(self.POOL, "external", "PollRequest", {
                "source": source_id,
                "categories": sorted(cats),
                "purpose": "init",
                "instance": instance_id,
                "model": model.model_id,
            })
        if not by_source:
            # nothing pollable; burn a round per tick until budget or propagation fills it
            self.sim.timer(self.POOL, {"kind": "init_round", "instance": instance_id},
                           self.sim.now + 1)

    def _finish_initialization(self, reg: Registration, model: InstanceContextModel):
        reg.active = True
        snapshot = self._snapshot_payload(model, model.intersection.category_ids())
        snapshot.update({
            "instance": reg.instance_id, "phase": "init", "status": "ok",
        })
        self.sim.send(self.POOL, "rules", "ContextSnapshot", snapshot)

    def _best_source_for(self, category: str) -> str | None:
        best = None
        for source in self.sources.values():
            if category not in source.provided_categories:
                continue
            key = (-source.reliability, source.source_id)
            if best is None or key < best[0]:
                best = (key, source.source_id)
        return best[1] if best else None

    # -- ingestion -------------------------------------------------------------

    def handle_source_event(self, payload: dict):
        source_id = payload["source_id"]
        if source_id not in self.sources:
            self.sim.trace(self.POOL, "engine_error", {
                "error": "UnknownSource", "detail": source_id,
            })
            return
        category = payload["category_id"]
        if category not in self.catalog:
            self.sim.trace(self.POOL, "engine_error", {
                "error": "UnknownCategory", "detail": category,
            })
            return
        descriptor = self.sources[source_id]
        value = ContextValue(
            value_id=f"{category}@{source_id}",
            category_id=category,
            payload=payload["payload"],
            ts=payload["ts"],
            source_id=source_id,
            reliability=descriptor.reliability,
            cost=descriptor.cost_per_value,
        )
        for model in list(self.instances.values()):
            in_model = category in model.intersection.categories
            if not in_model and self.auto_extend_on_push:
                extended = self._administer_extension(model, [category])
                in_model = category in extended
            if in_model:
                changed = self._ingest_batch(model, [value])
                self._notify(model, changed)

    def handle_poll_response(self, payload: dict):
        source_id = payload["source"]
        values = [
            ContextValue(
                value_id=f"{item['category_id']}@{source_id}",
                category_id=item["category_id"],
                payload=item["payload"],
                ts=item["ts"],
                source_id=source_id,
                reliability=item["reliability"],
                cost=item.get("cost", 0.0),
            )
            for item in payload.get("values", [])
        ]
        purpose = payload.get("purpose", "refresh")
        if purpose == "refresh":
            for model in list(self.instances.values()):
                relevant = [v for v in values if v.category_id in model.intersection.categories]
                if relevant:
                    changed = self._ingest_batch(model, relevant)
                    self._notify(model, changed)
            return
        model = self.instances.get(payload.get("model", ""))
        if model is None:
            return  # model shut down while the poll was in flight
        changed = self._ingest_batch(model, values)
        self._notify(model, changed)
        if purpose == "init":
            reg = self.registrations.get(payload.get("instance", ""))
            if reg is not None:
                reg.init_outstanding.discard(source_id)
                self._continue_initialization(reg.instance_id)
        elif purpose == "administer":
            arrived = {v.category_id for v in values}
            absent = set(payload.get("absent", []))
            for category in sorted(arrived | absent):
                self._resolve_fetch(model.model_id, category,
                                    available=category in arrived)

    def handle_timer(self, payload: dict):
        kind = payload.get("kind")
        if kind == "init_round":
            self._continue_initialization(payload["instance"])
        elif kind == "poll":
            self._scheduled_poll(payload["source"])

    def _scheduled_poll(self, source_id: str):
        descriptor = self.sources.get(source_id)
        if descriptor is None or descriptor.mode != "poll":
            return
        wanted: list[str] = []
        live_categories = set()
        for model in self.instances.values():
            live_categories.update(model.intersection.categories)
        for category in descriptor.provided_categories:
            if category in live_categories:
                wanted.append(category)
        if wanted:
            self.sim.send(self.POOL, "external", "PollRequest", {
                "source": source_id,
                "categories": sorted(wanted),
                "purpose": "refresh",
            })
        self.sim.timer(self.POOL, {"kind": "poll", "source": source_id},
                       self.sim.now + descriptor.poll_interval)

    def _ingest_batch(self, model: InstanceContextModel,
                      values: list[ContextValue]) -> dict:
        """Apply values plus propagation to quiescence.

        Returns pre-batch vs post-quiescence pairs for every category whose
        current value changed identity.  Propagation is keyed on identity so
        the derived state always mirrors whatever conflict resolution made
        current, regardless of arrival order.
        """
        changed: dict[str, tuple[ContextValue | None, ContextValue]] = {}
        for value in values:
            self._apply_value(model, value, changed)
        for node in self.propagation:
            if not any(cat in changed for cat in node.input_categories):
                continue
            for derived in self._derive(model, node):
                self._apply_value(model, derived, changed)
        return changed

    def _apply_value(self, model: InstanceContextModel, value: ContextValue,
                     changed: dict):
        g = model.intersection
        if value.category_id not in g.categories:
            return
        old = changed[value.category_id][0] if value.category_id in changed \
            else g.values.get(value.category_id)
        try:
            update_value(g, value)
        except StaleWrite:
            self.sim.trace(self.POOL, "value_rejected", {
                "model": model.model_id,
                "category": value.category_id,
                "stream": value.value_id,
                "ts": value.ts,
                "reason": "stale",
            })
            return
        except KindMismatch as err:
            self.sim.trace(self.POOL, "engine_error", {
                "error": "KindMismatch", "detail": str(err),
                "model": model.model_id,
            })
            return
        candidates = [v for v in g.streams.values()
                      if v.category_id == value.category_id]
        winner = resolve_conflict(candidates)
        if winner != g.values[value.category_id]:
            g.values[value.category_id] = winner
        current = g.values[value.category_id]
        model.path.record_value_update(current)
        self.sim.trace(self.POOL, "value_updated", {
            "model": model.model_id,
            "category": value.category_id,
            "value": current.to_payload(),
        })
        if old is not None and current == old:
            changed.pop(value.category_id, None)  # batch restored the old value
        else:
            changed[value.category_id] = (old, current)

    def _derive(self, model: InstanceContextModel, node) -> list[ContextValue]:
        g = model.intersection
        inputs = []
        for cat in node.input_categories:
            current = g.values.get(cat)
            if current is None:
                return []
            inputs.append(current)
        if isinstance(node, CauseEffectRelation):
            cause = inputs[0]
            result = node.apply(cause.payload)
            if result is None:
                return []
            return [self._derived_value(node, node.effect_category, result, cause)]
        return self._run_agent(node, g, inputs)

    def _run_agent(self, agent: DerivationAgent, g, inputs) -> list[ContextValue]:
        trigger = max(inputs, key=lambda v: (v.ts, v.value_id))
        reliability = min(v.reliability for v in inputs)
        if agent.kind == "filter":
            op = _FILTER_OPS[agent.spec["op"]]
            if not op(inputs[0].payload, agent.spec["value"]):
                return []
            return [self._derived_value(agent, agent.outputs[0],
                                        inputs[0].payload, trigger)]
        if agent.kind == "translate":
            table = agent.spec.get("map", {})
            key = inputs[0].payload if isinstance(inputs[0].payload, str) \
                else repr(inputs[0].payload)
            if key in table:
                out = table[key]
            elif "default" in agent.spec:
                out = agent.spec["default"]
            else:
                return []
            return [self._derived_value(agent, agent.outputs[0], out, trigger)]
        if agent.kind == "aggregate":
            window = recent_values(g, agent.inputs[0], agent.spec.get("window", 4))
            reducer = _REDUCERS[agent.spec.get("reducer", "last")]
            out = reducer([v.payload for v in window])
            return [self._derived_value(agent, agent.outputs[0], out, trigger)]
        if agent.kind == "compose":
            record = {v.category_id: v.payload for v in inputs}
            return [self._derived_value(agent, agent.outputs[0], record, trigger,
                                        reliability=reliability)]
        # split: fan a record payload out to several categories
        record = inputs[0].payload
        if not isinstance(record, dict):
            return []
        out = []
        for fan_field, category in sorted(agent.spec.get("fan_out", {}).items()):
            if fan_field in record:
                out.append(self._derived_value(agent, category,
                                               record[fan_field], trigger))
        return out

    def _derived_value(self, node, category: str, payload, cause: ContextValue,
                       reliability: float | None = None) -> ContextValue:
        # one derived stream per cause stream: when conflict resolution flips
        # the current cause between sources, the derived side mirrors it
        # instead of fighting the per-stream timestamp monotonicity guard
        return ContextValue(
            value_id=f"{category}@{node.node_id}:{cause.value_id}",
            category_id=category,
            payload=payload,
            ts=cause.ts,
            source_id=node.node_id,
            reliability=cause.reliability if reliability is None else reliability,
            causing_ts=cause.causing_ts if cause.causing_ts is not None else cause.ts,
        )

    # -- notifications ----------------------------------------------------------

    def _notify(self, model: InstanceContextModel, changed: dict):
        if not changed:
            return
        for reg in self.registrations.values():
            if reg.model_id != model.model_id or not reg.active:
                continue
            changes = []
            for category, (old, new) in changed.items():
                threshold = reg.thresholds.get(category)
                if threshold is None:
                    continue
                if old is not None and new.payload == old.payload:
                    continue  # batch reverted the payload; no net change
                try:
                    transgressed = check_threshold(old, new, threshold)
                except KindMismatch:
                    transgressed = False
                if transgressed:
                    changes.append({
                        "category": category,
                        "value": new.to_payload(),
                    })
            if changes:
                self.sim.send(self.POOL, "rules", "ContextNotification", {
                    "model": model.model_id,
                    "instance": reg.instance_id,
                    "step": model.intersection.step,
                    "changes": changes,
                })

    # -- read path / administration ----------------------------------------------

    def handle_context_request(self, payload: dict):
        model_id = payload["model"]
        correlation = payload["correlation"]
        model = self.instances.get(model_id)
        if model is None:
            self.sim.send(self.POOL, "rules", "ContextSnapshot", {
                "correlation": correlation, "status": "error",
                "detail": "UnknownModel", "model": model_id,
            })
            return
        requested = list(payload["categories"])
        pending = PendingRequest(
            correlation=correlation,
            model_id=model_id,
            instance_id=payload.get("instance", ""),
            requested=requested,
        )
        missing = [c for c in requested if c not in model.intersection.categories]
        if missing:
            extendable = []
            for category in missing:
                if category not in self.catalog:
                    pending.unavailable.append(category)
                    continue
                if self._best_source_for(category) is None:
                    self.sim.trace(self.POOL, "admin_no_source", {
                        "model": model_id, "category": category,
                    })
                    pending.unavailable.append(category)
                    continue
                extendable.append(category)
            self._administer_extension(model, extendable)
            for category in extendable:
                if category not in model.intersection.categories:
                    pending.unavailable.append(category)
                    continue
                if category in model.intersection.values:
                    continue
                pending.outstanding.add(category)
                self._request_fetch(model, category)
        self.pending_requests[correlation] = pending
        self._try_reply(pending)

    def _administer_extension(self, model: InstanceContextModel,
                              categories: list[str]) -> list[str]:
        """Extend a model with catalogued categories; one step per call."""
        additions = Additions()
        for category in categories:
            if category in model.intersection.categories:
                continue
            entry = self.catalog.get(category)
            if entry is None:
                continue
            chain = self._catalog_chain(category)
            for ancestor in chain:
                if ancestor in model.intersection.categories:
                    continue
                anc_entry = self.catalog[ancestor]
                level = self._catalog_level(ancestor)
                additions.categories.append((anc_entry.category, level))
                if anc_entry.parent is not None:
                    additions.edges.append((anc_entry.parent, ancestor))
        if not additions.categories:
            return []
        try:
            added = model.apply_extension(additions)
        except (StepBudgetExceeded, LevelViolation, DeletionRejected) as err:
            self.sim.trace(self.POOL, "extension_rejected", {
                "model": model.model_id,
                "categories": [c.category_id for c, _ in additions.categories],
                "error": type(err).__name__,
                "detail": str(err),
            })
            return []
        self.sim.trace(self.POOL, "model_extended", {
            "model": model.model_id,
            "step": model.intersection.step,
            "added": [{"category": cat, "level": level} for cat, level in added],
        })
        return [cat for cat, _ in added]

    def _catalog_chain(self, category: str) -> list[str]:
        """Ancestor chain from the topmost catalogued parent down to category."""
        chain = []
        cursor: str | None = category
        while cursor is not None:
            chain.append(cursor)
            cursor = self.catalog[cursor].parent
        chain.reverse()
        return chain

    def _catalog_level(self, category: str) -> int:
        level = 1
        cursor = self.catalog[category].parent
        while cursor is not None:
            level += 1
            cursor = self.catalog[cursor].parent
        return level

    def _request_fetch(self, model: InstanceContextModel, category: str):
        key = (model.model_id, category)
        if key in self.pending_fetches:
            return  # a fetch is already in flight; requests share it
        self.pending_fetches[key] = []
        source = self._best_source_for(category)
        self.sim.send(self.POOL, "external", "PollRequest", {
            "source": source,
            "categories": [category],
            "purpose": "administer",
            "model": model.model_id,
        })

    def _resolve_fetch(self, model_id: str, category: str, available: bool):
        self.pending_fetches.pop((model_id, category), None)
        for pending in list(self.pending_requests.values()):
            if pending.model_id != model_id or category not in pending.outstanding:
                continue
            pending.outstanding.discard(category)
            if not available:
                pending.unavailable.append(category)
            self._try_reply(pending)

    def _try_reply(self, pending: PendingRequest):
        if pending.outstanding:
            return
        self.pending_requests.pop(pending.correlation, None)
        model = self.instances.get(pending.model_id)
        if model is None:
            return
        available = [c for c in pending.requested
                     if c in model.intersection.categories
                     and c not in pending.unavailable]
        snapshot = self._snapshot_payload(model, available)
        snapshot.update({
            "correlation": pending.correlation,
            "instance": pending.instance_id,
            "phase": "reply",
            "status": "ok",
            "missing": sorted(set(pending.unavailable)),
        })
        self.sim.send(self.POOL, "rules", "ContextSnapshot", snapshot)

    def _snapshot_payload(self, model: InstanceContextModel,
                          categories: list[str]) -> dict:
        sub = relevant_subgraph(model.intersection, categories)
        freshness = {}
        for category, value in sub.values.items():
            if self.staleness is None:
                freshness[category] = True
            else:
                max_age, decay = self.staleness
                freshness[category] = apply_staleness(
                    value, self.sim.now, max_age, decay
                ).fresh
        return {
            "model": model.model_id,
            "graph": sub.to_payload(),
            "freshness": {c: freshness[c] for c in sorted(freshness)},
            "now": self.sim.now,
        }

    # -- shutdown ------------------------------------------------------------------

    def shutdown_model(self, instance_id: str):
        reg = self.registrations.pop(instance_id, None)
        if reg is None:
            raise UnknownRegistration(f"no registration for instance {instance_id!r}")
        model = self.instances.get(reg.model_id)
        if model is None:
            return
        if instance_id in model.bound_instances:
            model.bound_instances.remove(instance_id)
        if not model.bound_instances:
            model.close()
            self.closed[model.model_id] = self.instances.pop(model.model_id)
            self.sim.trace(self.POOL, "model_closed", {
                "model": model.model_id,
                "end_step": model.intersection.step,
                "end": model.problem.end.to_payload(),
            })

    def handle_shutdown_model(self, payload: dict):
        try:
            self.shutdown_model(payload["instance"])
        except UnknownRegistration as err:
            self.sim.trace(self.POOL, "engine_error", {
                "error": "UnknownRegistration", "detail": str(err),
            })

    # -- dispatch --------------------------------------------------------------------

    def handle_message(self, kind: str, payload: dict):
        if kind == "Register":
            self.handle_register(payload)
        elif kind == "SourceEvent":
            self.handle_source_event(payload)
        elif kind == "PollResponse":
            self.handle_poll_response(payload)
        elif kind == "ContextRequest":
            self.handle_context_request(payload)
        elif kind == "ShutdownModel":
            self.handle_shutdown_model(payload)
        else:
            self.sim.trace(self.POOL, "engine_error", {
                "error": "UnhandledMessage", "detail": kind,
            })
