"""Control layer: server registry, ledger watching, and request matching.

A router keeps two pieces of state: the servers subscribed to it and an
event-sourced view of the SLA graph.  Matching filters on hard constraints
(hosted model, verified region when the request pins one, an SLA path to the
client) and ranks the survivors by a weighted soft cost built from claimed
latency, the server-side unit price, relative load, and an uptime shortfall
penalty.  Everything is deterministic: ties break toward the smallest server
id, and two routers fed the same subscriptions and event stream match
identically.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .sla import SlaChain, SlaRegistry, validate_chain


class RouterError(Exception):
    def __init__(self, kind: str, message: str = ""):
        self.kind = kind
        super().__init__(f"{kind}: {message}" if message else kind)


@dataclass
class ServerRecord:
    server_id: str
    hosted_models: tuple
    hw_capacity: int
    location: str
    advertised_latency: int
    current_load: int = 0
    location_verified: bool = False
    availability: float = 1.0

    def __post_init__(self):
        if self.hw_capacity < 1:
            raise RouterError("bad-record", f"capacity {self.hw_capacity}")
        if self.current_load < 0:
            raise RouterError("negative-load", self.server_id)


@dataclass(frozen=True)
class MatchRequest:
    client_id: str
    model_id: str
    region_constraint: str | None = None
    max_latency: int | None = None
    uptime_requirement: float | None = None

    def __post_init__(self):
        if not self.model_id:
            raise RouterError("bad-record", "empty model_id")


@dataclass(frozen=True)
class Assignment:
    server_id: str
    aggregator_id: str
    chain: SlaChain
    client_id: str
    model_id: str
    router_id: str


@dataclass(frozen=True)
class CostWeights:
    latency: float = 1.0
    price: float = 1.0
    load: float = 1.0
    uptime: float = 1.0


class Router:
    def __init__(self, router_id: str, weights: CostWeights | None = None):
        self.router_id = router_id
        self.weights = weights or CostWeights()
        self.registry = SlaRegistry()
        self.servers: dict = {}

    # --- server state ---

    def subscribe(self, record: ServerRecord) -> None:
        if record.server_id in self.servers:
            raise RouterError("duplicate-subscription", record.server_id)
        # location_verified is never taken from the server's own claim
        self.servers[record.server_id] = dataclasses.replace(record, location_verified=False)

    def unsubscribe(self, server_id: str) -> None:
        if server_id not in self.servers:
            raise RouterError("unknown-server", server_id)
        del self.servers[server_id]

    def update_load(self, server_id: str, delta: int) -> None:
        record = self.servers.get(server_id)
        if record is None:
            raise RouterError("unknown-server", server_id)
        if record.current_load + delta < 0:
            raise RouterError("negative-load", f"{server_id}: {record.current_load}{delta:+d}")
        record.current_load += delta

    def update_availability(self, server_id: str, ratio: float) -> None:
        record = self.servers.get(server_id)
        if record is None:
            raise RouterError("unknown-server", server_id)
        record.availability = ratio

    # --- ledger watching ---

    def on_ledger_event(self, event) -> None:
        """Apply one ledger event; unknown or irrelevant kinds are ignored."""
        kind = getattr(event, "kind", None)
        if kind in ("sla-registered", "sla-deregistered", "sla-expired"):
            self.registry.apply_event(event)
        elif kind == "location-attested":
            server_id = event.payload.get("server_id")
            record = self.servers.get(server_id)
            if record is not None and event.payload.get("region") == record.location:
                record.location_verified = True

    # --- matching ---

    def _unit_price(self, chain: SlaChain, model_id: str) -> int:
        # soft-cost proxy: the server-side price of the smallest bucket cell
        grid = chain.server_sla.pricing.models[model_id]
        return grid.prices[0][0]

    def _cost(self, record: ServerRecord, request: MatchRequest, chain: SlaChain) -> float:
        w = self.weights
        cost = (
            w.latency * record.advertised_latency
            + w.price * self._unit_price(chain, request.model_id)
            + w.load * record.current_load / record.hw_capacity
        )
        if request.max_latency is not None and record.advertised_latency > request.max_latency:
            cost += w.latency * (record.advertised_latency - request.max_latency)
        if request.uptime_requirement is not None and record.availability < request.uptime_requirement:
            cost += w.uptime * (request.uptime_requirement - record.availability)
        return cost

    def match(self, request: MatchRequest, tick: int) -> Assignment:
        """Pick the cheapest eligible server and reserve one unit of load."""
        best: tuple | None = None
        for server_id in sorted(self.servers):
            record = self.servers[server_id]
            if request.model_id not in record.hosted_models:
                continue
            if request.region_constraint is not None:
                if not record.location_verified or record.location != request.region_constraint:
                    continue
            chain = validate_chain(self.registry, request.client_id, server_id, request.model_id, tick)
            if chain is None:
                continue
            cost = self._cost(record, request, chain)
            if best is None or cost < best[0]:
                best = (cost, server_id, chain)
        if best is None:
            raise RouterError("no-match", f"{request.client_id} -> {request.model_id}")
        _, server_id, chain = best
        self.servers[server_id].current_load += 1
        return Assignment(
            server_id=server_id,
            aggregator_id=chain.aggregator,
            chain=chain,
            client_id=request.client_id,
            model_id=request.model_id,
            router_id=self.router_id,
        )
