"""Scenario schema: the full cast, economics, and schedule of one simulation.

A scenario is a JSON document.  Everything an actor will do is declared up
front — behavior profiles, request arrivals, fault injections, watermark
commitments — so a run is a pure function of (scenario, seed).  Loading
validates every cross-reference; a scenario that loads is runnable.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from importlib import resources


class ScenarioError(Exception):
    def __init__(self, kind: str, message: str = ""):
        self.kind = kind
        super().__init__(f"{kind}: {message}" if message else kind)


@dataclass(frozen=True)
class ModelSpec:
    model_id: str
    kind: str  # chain | inception
    n: int
    dim: int
    model_seed: int


@dataclass(frozen=True)
class ClientSpec:
    client_id: str
    balance: int
    escrow: int
    behavior: dict  # {"kind": "honest-client" | "nonpaying-client" | "double-sign-client", ...}


@dataclass(frozen=True)
class ServerSpec:
    server_id: str
    balance: int
    models: tuple
    hw_capacity: int
    location: str
    latency: int
    behavior: dict  # {"kind": "honest-server" | "faulty-server", ...}


@dataclass(frozen=True)
class AggregatorSpec:
    aggregator_id: str
    balance: int
    server_escrow: int


@dataclass(frozen=True)
class ChallengerSpec:
    challenger_id: str
    balance: int
    behavior: dict  # {"kind": "honest-challenger" | "false-challenger", ...}


@dataclass(frozen=True)
class ExtraSpec:
    actor_id: str
    balance: int


@dataclass(frozen=True)
class SlaSpec:
    sla_id: str
    consumer: str
    supplier: str
    challenger_fee_bp: int
    pricing: dict  # model_id -> {in_bounds, out_bounds, prices}
    valid_from: int = 0
    valid_until: int | None = None


@dataclass(frozen=True)
class AttestationSpec:
    tick: int
    server_id: str
    region: str


@dataclass(frozen=True)
class ScheduleEntry:
    tick: int
    client_id: str
    model_id: str
    count: int = 1
    region_constraint: str | None = None


@dataclass(frozen=True)
class WatermarkSpec:
    owner: str
    model_id: str
    secret: str
    m: int
    salt: str  # hex
    commit_tick: int


@dataclass(frozen=True)
class ClaimSpec:
    claimant: str
    model_id: str
    source: str  # "stolen" | "fabricated"
    salt: str  # hex
    commit_tick: int
    stolen_from: str = ""
    secret: str = ""
    m: int = 0


@dataclass(frozen=True)
class JudgingSpec:
    tick: int
    model_id: str
    target: str  # "watermarked" | "plain"
    claimants: tuple


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    ticks: int
    dispute_window: int
    dispute_fee: int
    theta: float
    da_commit_timing: str
    cost_weights: dict
    models: tuple
    clients: tuple
    servers: tuple
    aggregators: tuple
    routers: tuple
    challengers: tuple
    judge: str | None
    extras: tuple
    slas: tuple
    attestations: tuple
    schedule: tuple
    watermarks: tuple
    ownership_claims: tuple
    judgings: tuple

    def actor_ids(self) -> list:
        ids = [c.client_id for c in self.clients]
        ids += [s.server_id for s in self.servers]
        ids += [a.aggregator_id for a in self.aggregators]
        ids += [c.challenger_id for c in self.challengers]
        ids += [e.actor_id for e in self.extras]
        if self.judge:
            ids.append(self.judge)
        return ids


def _require(data: dict, key: str, context: str):
    if key not in data:
        raise ScenarioError("parse-error", f"{context}: missing {key!r}")
    return data[key]


def scenario_from_dict(data: dict) -> Scenario:
    if not isinstance(data, dict):
        raise ScenarioError("parse-error", "top level must be an object")
    name = _require(data, "name", "scenario")
    seed = _require(data, "seed", "scenario")
    if not isinstance(seed, int):
        raise ScenarioError("parse-error", "seed must be an integer")

    models = tuple(
        ModelSpec(
            model_id=_require(m, "model_id", "model"),
            kind=m.get("kind", "chain"),
            n=m.get("n", 8),
            dim=m.get("dim", 4),
            model_seed=m.get("model_seed", 0),
        )
        for m in data.get("models", [])
    )
    for m in models:
        if m.kind not in ("chain", "inception"):
            raise ScenarioError("parse-error", f"model {m.model_id}: unknown kind {m.kind}")

    actors = data.get("actors", {})
    clients = tuple(
        ClientSpec(
            client_id=_require(c, "id", "client"),
            balance=c.get("balance", 1000),
            escrow=c.get("escrow", 200),
            behavior=c.get("behavior", {"kind": "honest-client"}),
        )
        for c in actors.get("clients", [])
    )
    servers = tuple(
        ServerSpec(
            server_id=_require(s, "id", "server"),
            balance=s.get("balance", 1000),
            models=tuple(s.get("models", [])),
            hw_capacity=s.get("hw_capacity", 4),
            location=s.get("location", "eu"),
            latency=s.get("latency", 20),
            behavior=s.get("behavior", {"kind": "honest-server"}),
        )
        for s in actors.get("servers", [])
    )
    aggregators = tuple(
        AggregatorSpec(
            aggregator_id=_require(a, "id", "aggregator"),
            balance=a.get("balance", 2000),
            server_escrow=a.get("server_escrow", 500),
        )
        for a in actors.get("aggregators", [])
    )
    routers = tuple(r["id"] for r in actors.get("routers", [{"id": "router-1"}]))
    challengers = tuple(
        ChallengerSpec(
            challenger_id=_require(c, "id", "challenger"),
            balance=c.get("balance", 200),
            behavior=c.get("behavior", {"kind": "honest-challenger", "sampling_rate": 0.0}),
        )
        for c in actors.get("challengers", [])
    )
    judge = actors.get("judge", {}).get("id") if actors.get("judge") else None
    extras = tuple(
        ExtraSpec(actor_id=_require(e, "id", "extra"), balance=e.get("balance", 100))
        for e in actors.get("extras", [])
    )

    slas = tuple(
        SlaSpec(
            sla_id=_require(s, "sla_id", "sla"),
            consumer=_require(s, "consumer", "sla"),
            supplier=_require(s, "supplier", "sla"),
            challenger_fee_bp=s.get("challenger_fee_bp", 0),
            pricing=_require(s, "pricing", "sla"),
            valid_from=s.get("valid_from", 0),
            valid_until=s.get("valid_until"),
        )
        for s in data.get("slas", [])
    )
    attestations = tuple(
        AttestationSpec(
            tick=_require(a, "tick", "attestation"),
            server_id=_require(a, "server", "attestation"),
            region=_require(a, "region", "attestation"),
        )
        for a in data.get("attestations", [])
    )
    schedule = tuple(
        ScheduleEntry(
            tick=_require(e, "tick", "schedule"),
            client_id=_require(e, "client", "schedule"),
            model_id=_require(e, "model", "schedule"),
            count=e.get("count", 1),
            region_constraint=e.get("region"),
        )
        for e in data.get("schedule", [])
    )
    watermarks = tuple(
        WatermarkSpec(
            owner=_require(w, "owner", "watermark"),
            model_id=_require(w, "model_id", "watermark"),
            secret=_require(w, "secret", "watermark"),
            m=w.get("m", 32),
            salt=w.get("salt", "00"),
            commit_tick=w.get("commit_tick", 1),
        )
        for w in data.get("watermarks", [])
    )
    ownership_claims = tuple(
        ClaimSpec(
            claimant=_require(c, "claimant", "claim"),
            model_id=_require(c, "model_id", "claim"),
            source=_require(c, "source", "claim"),
            salt=c.get("salt", "00"),
            commit_tick=c.get("commit_tick", 1),
            stolen_from=c.get("stolen_from", ""),
            secret=c.get("secret", ""),
            m=c.get("m", 32),
        )
        for c in data.get("ownership_claims", [])
    )
    judgings = tuple(
        JudgingSpec(
            tick=_require(j, "tick", "judging"),
            model_id=_require(j, "model_id", "judging"),
            target=j.get("target", "watermarked"),
            claimants=tuple(_require(j, "claimants", "judging")),
        )
        for j in data.get("judgings", [])
    )

    scenario = Scenario(
        name=name,
        seed=seed,
        ticks=data.get("ticks", 20),
        dispute_window=data.get("dispute_window", 5),
        dispute_fee=data.get("dispute_fee", 5),
        theta=data.get("theta", 0.9),
        da_commit_timing=data.get("da_commit_timing", "on-serve"),
        cost_weights=data.get("cost_weights", {}),
        models=models,
        clients=clients,
        servers=servers,
        aggregators=aggregators,
        routers=routers,
        challengers=challengers,
        judge=judge,
        extras=extras,
        slas=slas,
        attestations=attestations,
        schedule=schedule,
        watermarks=watermarks,
        ownership_claims=ownership_claims,
        judgings=judgings,
    )
    _validate_references(scenario)
    return scenario


def _validate_references(sc: Scenario) -> None:
    model_ids = {m.model_id for m in sc.models}
    client_ids = {c.client_id for c in sc.clients}
    server_ids = {s.server_id for s in sc.servers}
    agg_ids = {a.aggregator_id for a in sc.aggregators}
    parties = client_ids | server_ids | agg_ids

    if sc.da_commit_timing not in ("on-serve", "after-payment"):
        raise ScenarioError("parse-error", f"da_commit_timing {sc.da_commit_timing!r}")
    if sc.ticks < 1:
        raise ScenarioError("parse-error", "ticks must be >= 1")
    seen = set()
    for actor in sc.actor_ids():
        if actor in seen:
            raise ScenarioError("parse-error", f"duplicate actor id {actor}")
        seen.add(actor)

    for s in sc.servers:
        for mid in s.models:
            if mid not in model_ids:
                raise ScenarioError("unknown-reference", f"server {s.server_id}: model {mid}")
        if s.behavior.get("kind") == "faulty-server":
            node = s.behavior.get("fault_node")
            if node is None:
                raise ScenarioError("parse-error", f"server {s.server_id}: fault_node required")
    for sla in sc.slas:
        if sla.consumer not in parties:
            raise ScenarioError("unknown-reference", f"sla {sla.sla_id}: consumer {sla.consumer}")
        if sla.supplier not in parties:
            raise ScenarioError("unknown-reference", f"sla {sla.sla_id}: supplier {sla.supplier}")
        for mid in sla.pricing:
            if mid not in model_ids:
                raise ScenarioError("unknown-reference", f"sla {sla.sla_id}: model {mid}")
    for att in sc.attestations:
        if att.server_id not in server_ids:
            raise ScenarioError("unknown-reference", f"attestation: server {att.server_id}")
    for entry in sc.schedule:
        if entry.client_id not in client_ids:
            raise ScenarioError("unknown-reference", f"schedule: client {entry.client_id}")
        if entry.model_id not in model_ids:
            raise ScenarioError("unknown-reference", f"schedule: model {entry.model_id}")
    roster = set(sc.actor_ids())
    for wm in sc.watermarks:
        if wm.model_id not in model_ids:
            raise ScenarioError("unknown-reference", f"watermark: model {wm.model_id}")
        if wm.owner not in roster:
            raise ScenarioError("unknown-reference", f"watermark: owner {wm.owner}")
    owners = {w.owner for w in sc.watermarks}
    claimants = {c.claimant for c in sc.ownership_claims}
    for claim in sc.ownership_claims:
        if claim.claimant not in roster:
            raise ScenarioError("unknown-reference", f"claim: claimant {claim.claimant}")
        if claim.model_id not in model_ids:
            raise ScenarioError("unknown-reference", f"claim: model {claim.model_id}")
        if claim.source == "stolen":
            if claim.stolen_from not in owners:
                raise ScenarioError("unknown-reference", f"claim: stolen_from {claim.stolen_from}")
        elif claim.source == "fabricated":
            if not claim.secret:
                raise ScenarioError("parse-error", "fabricated claim needs a secret")
        else:
            raise ScenarioError("parse-error", f"claim source {claim.source!r}")
    for judging in sc.judgings:
        if judging.model_id not in model_ids:
            raise ScenarioError("unknown-reference", f"judging: model {judging.model_id}")
        if judging.target not in ("watermarked", "plain"):
            raise ScenarioError("parse-error", f"judging target {judging.target!r}")
        for claimant in judging.claimants:
            if claimant not in owners | claimants:
                raise ScenarioError("unknown-reference", f"judging: claimant {claimant}")
        if judging.target == "watermarked" and judging.model_id not in {
            w.model_id for w in sc.watermarks
        }:
            raise ScenarioError("unknown-reference", f"judging: no watermark on {judging.model_id}")


def load_scenario(path: str) -> Scenario:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError("parse-error", str(exc)) from exc
    return scenario_from_dict(data)


def scenario_path(name: str) -> str:
    """Resolve a scenario argument: an existing path wins, then the bundle."""
    if os.path.exists(name):
        return name
    base = name if name.endswith(".json") else f"{name}.json"
    packaged = resources.files("veriserve") / "scenarios" / base
    if packaged.is_file():
        return str(packaged)
    raise ScenarioError("parse-error", f"no such scenario: {name}")
