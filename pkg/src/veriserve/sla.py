"""Service-level agreements: pricing tables, registration, and chained splits.

An SLA prices one unit of inference by (model, input-size bucket, output-size
bucket).  Buckets are ranges with closed upper bounds: a size exactly on an
edge falls in the lower bucket.  Service requires a two-hop chain — one SLA
from client to aggregator, one from the same aggregator to the server — and
the revenue split is exact integer arithmetic: the challenger fee is a
basis-point cut of the client price rounded down, the aggregator margin is
the remainder after the server's share, and the three components always sum
back to what the client pays.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

from .crypto import SigningKey, verify_signature
from .ledger import Ledger, LedgerError


class SlaError(Exception):
    def __init__(self, kind: str, message: str = ""):
        self.kind = kind
        super().__init__(f"{kind}: {message}" if message else kind)


@dataclass(frozen=True)
class BucketGrid:
    """Per-model price grid: bounds are ascending inclusive upper edges."""

    in_bounds: tuple
    out_bounds: tuple
    prices: tuple  # prices[i][j] for in-bucket i, out-bucket j

    def __post_init__(self):
        for bounds in (self.in_bounds, self.out_bounds):
            if not bounds or list(bounds) != sorted(set(bounds)) or bounds[0] < 1:
                raise SlaError("bad-pricing", f"bucket bounds not ascending: {bounds}")
        if len(self.prices) != len(self.in_bounds):
            raise SlaError("bad-pricing", "price rows do not match input buckets")
        for row in self.prices:
            if len(row) != len(self.out_bounds):
                raise SlaError("bad-pricing", "price row does not match output buckets")
            for p in row:
                if not isinstance(p, int) or p < 0:
                    raise SlaError("bad-pricing", f"price {p!r} not a non-negative integer")

    def bucket_of(self, bounds: tuple, size: int) -> int:
        if size < 1:
            raise SlaError("size-out-of-range", f"size {size}")
        for i, hi in enumerate(bounds):
            if size <= hi:
                return i
        raise SlaError("size-out-of-range", f"size {size} above {bounds[-1]}")

    def price(self, in_size: int, out_size: int) -> int:
        return self.prices[self.bucket_of(self.in_bounds, in_size)][
            self.bucket_of(self.out_bounds, out_size)
        ]


@dataclass(frozen=True)
class PricingTable:
    models: dict  # model_id -> BucketGrid

    def to_dict(self) -> dict:
        return {
            mid: {
                "in_bounds": list(grid.in_bounds),
                "out_bounds": list(grid.out_bounds),
                "prices": [list(row) for row in grid.prices],
            }
            for mid, grid in self.models.items()
        }

    @staticmethod
    def from_dict(data: dict) -> "PricingTable":
        models = {}
        for mid, cell in data.items():
            models[mid] = BucketGrid(
                in_bounds=tuple(cell["in_bounds"]),
                out_bounds=tuple(cell["out_bounds"]),
                prices=tuple(tuple(row) for row in cell["prices"]),
            )
        return PricingTable(models=models)


def price_of(table: PricingTable, model_id: str, in_size: int, out_size: int) -> int:
    grid = table.models.get(model_id)
    if grid is None:
        raise SlaError("unknown-model", model_id)
    return grid.price(in_size, out_size)


@dataclass(frozen=True)
class SlaTerms:
    sla_id: str
    consumer: str
    supplier: str
    pricing: PricingTable
    challenger_fee_bp: int  # basis points of the client price, rounded down
    valid_from: int = 0
    valid_until: int | None = None
    consumer_sig: bytes = b""
    supplier_sig: bytes = b""

    def __post_init__(self):
        if not 0 <= self.challenger_fee_bp < 10_000:
            raise SlaError("bad-pricing", f"fee {self.challenger_fee_bp} bp out of range")

    def unsigned_dict(self) -> dict:
        return {
            "sla_id": self.sla_id,
            "consumer": self.consumer,
            "supplier": self.supplier,
            "pricing": self.pricing.to_dict(),
            "challenger_fee_bp": self.challenger_fee_bp,
            "valid_from": self.valid_from,
            "valid_until": self.valid_until,
        }

    def unsigned_bytes(self) -> bytes:
        return json.dumps(self.unsigned_dict(), sort_keys=True, separators=(",", ":")).encode()

    def to_dict(self) -> dict:
        d = self.unsigned_dict()
        d["consumer_sig"] = self.consumer_sig.hex()
        d["supplier_sig"] = self.supplier_sig.hex()
        return d

    @staticmethod
    def from_dict(data: dict) -> "SlaTerms":
        return SlaTerms(
            sla_id=data["sla_id"],
            consumer=data["consumer"],
            supplier=data["supplier"],
            pricing=PricingTable.from_dict(data["pricing"]),
            challenger_fee_bp=data["challenger_fee_bp"],
            valid_from=data["valid_from"],
            valid_until=data["valid_until"],
            consumer_sig=bytes.fromhex(data["consumer_sig"]),
            supplier_sig=bytes.fromhex(data["supplier_sig"]),
        )

    def active_at(self, tick: int) -> bool:
        if tick < self.valid_from:
            return False
        return self.valid_until is None or tick <= self.valid_until


def sign_terms(terms: SlaTerms, consumer_key: SigningKey, supplier_key: SigningKey) -> SlaTerms:
    body = terms.unsigned_bytes()
    return SlaTerms(
        sla_id=terms.sla_id,
        consumer=terms.consumer,
        supplier=terms.supplier,
        pricing=terms.pricing,
        challenger_fee_bp=terms.challenger_fee_bp,
        valid_from=terms.valid_from,
        valid_until=terms.valid_until,
        consumer_sig=consumer_key.sign(body),
        supplier_sig=supplier_key.sign(body),
    )


@dataclass(frozen=True)
class SlaChain:
    client_sla: SlaTerms
    server_sla: SlaTerms
    aggregator: str


@dataclass(frozen=True)
class PaymentSplit:
    client_pays: int
    server_gets: int
    aggregator_margin: int
    challenger_fee: int


def register_sla(ledger: Ledger, terms: SlaTerms) -> str:
    """Verify both signatures, store the contract, emit the event."""
    key = f"sla:{terms.sla_id}"
    if key in ledger.contracts:
        raise SlaError("duplicate-id", terms.sla_id)
    body = terms.unsigned_bytes()
    for party, sig in ((terms.consumer, terms.consumer_sig), (terms.supplier, terms.supplier_sig)):
        try:
            pub = ledger.pubkey_of(party)
        except LedgerError as exc:
            raise SlaError("bad-signature", f"unknown party {party}") from exc
        if pub is None or not verify_signature(pub, sig, body):
            raise SlaError("bad-signature", f"signature of {party} does not verify")
    ledger.contracts[key] = terms
    ledger.emit("sla-registered", key, {"terms": terms.to_dict()})
    if terms.valid_until is not None:
        ledger.schedule(max(terms.valid_until + 1, ledger.clock + 1), key, "sla-expiry", {"sla_id": terms.sla_id})
    return terms.sla_id


def deregister_sla(ledger: Ledger, sla_id: str) -> None:
    key = f"sla:{sla_id}"
    if key not in ledger.contracts:
        raise SlaError("unknown-sla", sla_id)
    del ledger.contracts[key]
    ledger.emit("sla-deregistered", key, {"sla_id": sla_id})


def _on_sla_expiry(ledger: Ledger, contract_id: str, payload: dict) -> None:
    if contract_id in ledger.contracts:
        del ledger.contracts[contract_id]
        ledger.emit("sla-expired", contract_id, {"sla_id": payload.get("sla_id", "")})


def install_sla_handlers(ledger: Ledger) -> None:
    ledger.register_expiry_handler("sla-expiry", _on_sla_expiry)


class SlaRegistry:
    """Event-sourced view of active SLAs; feed it ledger events in order.

    Two registries fed identical event streams hold identical state, which is
    what lets independent routers agree on the SLA graph.
    """

    def __init__(self):
        self.terms: dict = {}

    def apply_event(self, event) -> None:
        if event.kind == "sla-registered":
            terms = SlaTerms.from_dict(event.payload["terms"])
            self.terms[terms.sla_id] = terms
        elif event.kind in ("sla-deregistered", "sla-expired"):
            self.terms.pop(event.payload.get("sla_id", ""), None)

    def active(self, tick: int):
        return [t for t in self.terms.values() if t.active_at(tick)]


def _chain_margin_ok(client_sla: SlaTerms, server_sla: SlaTerms, model_id: str) -> bool:
    """Check margin >= 0 over the refined grid of both tables for the model."""
    cg = client_sla.pricing.models.get(model_id)
    sg = server_sla.pricing.models.get(model_id)
    if cg is None or sg is None:
        return False
    in_edges = sorted(set(cg.in_bounds) | set(sg.in_bounds))
    out_edges = sorted(set(cg.out_bounds) | set(sg.out_bounds))
    limit_in = min(cg.in_bounds[-1], sg.in_bounds[-1])
    limit_out = min(cg.out_bounds[-1], sg.out_bounds[-1])
    for i in (e for e in in_edges if e <= limit_in):
        for o in (e for e in out_edges if e <= limit_out):
            client_pays = cg.price(i, o)
            fee = client_pays * client_sla.challenger_fee_bp // 10_000
            if client_pays - sg.price(i, o) - fee < 0:
                return False
    return True


def validate_chain(
    registry: SlaRegistry, client: str, server: str, model_id: str, tick: int
) -> SlaChain | None:
    """Find the client—aggregator—server SLA path covering the model.

    Deterministic: among qualifying aggregators the lowest id wins.
    """
    active = registry.active(tick)
    client_by_agg = {}
    server_by_agg = {}
    for t in active:
        if model_id not in t.pricing.models:
            continue
        if t.consumer == client:
            # keep the lowest sla_id per aggregator for determinism
            cur = client_by_agg.get(t.supplier)
            if cur is None or t.sla_id < cur.sla_id:
                client_by_agg[t.supplier] = t
        if t.supplier == server:
            cur = server_by_agg.get(t.consumer)
            if cur is None or t.sla_id < cur.sla_id:
                server_by_agg[t.consumer] = t
    for agg in sorted(set(client_by_agg) & set(server_by_agg)):
        c, s = client_by_agg[agg], server_by_agg[agg]
        if _chain_margin_ok(c, s, model_id):
            return SlaChain(client_sla=c, server_sla=s, aggregator=agg)
    return None


def split_payment(chain: SlaChain, model_id: str, in_size: int, out_size: int) -> PaymentSplit:
    client_pays = price_of(chain.client_sla.pricing, model_id, in_size, out_size)
    server_gets = price_of(chain.server_sla.pricing, model_id, in_size, out_size)
    challenger_fee = client_pays * chain.client_sla.challenger_fee_bp // 10_000
    margin = client_pays - server_gets - challenger_fee
    if margin < 0:
        raise SlaError(
            "negative-margin",
            f"model {model_id} sizes ({in_size}, {out_size}): {client_pays} < {server_gets} + {challenger_fee}",
        )
    return PaymentSplit(
        client_pays=client_pays,
        server_gets=server_gets,
        aggregator_margin=margin,
        challenger_fee=challenger_fee,
    )
