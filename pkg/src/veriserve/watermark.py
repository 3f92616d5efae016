"""Model ownership by trigger-set watermark: commit on-chain, judge on reveal.

The owner derives a secret trigger set (distinct inputs with arbitrary
expected outputs), overrides the model's output node on exactly those inputs,
and posts Hash(trigger set bytes, salt) to the ledger.  An ownership dispute
reveals the set: the judge recomputes each commitment, runs the contested
model on every trigger input, scores the match fraction, and awards the model
to the earliest qualifying commitment.  Everything is exact — no training,
no tolerance: a trigger either reproduces its expected output or it does not.
"""
from __future__ import annotations

import random
from dataclasses import dataclass

from .crypto import digest, encode_u32
from .dag import DagError, DagModel, ExecutionTrace, MODULUS, execute, tensor, tensor_bytes
from .ledger import Ledger

REGISTRY_KEY = "watermark-registry"
DEFAULT_THETA = 0.9


class WatermarkError(Exception):
    def __init__(self, kind: str, message: str = ""):
        self.kind = kind
        super().__init__(f"{kind}: {message}" if message else kind)


@dataclass(frozen=True)
class TriggerSet:
    pairs: tuple  # ((input tensor, expected output tensor), ...)

    @property
    def size(self) -> int:
        return len(self.pairs)

    def canonical_bytes(self) -> bytes:
        out = encode_u32(len(self.pairs))
        for trigger, expected in self.pairs:
            out += tensor_bytes(trigger) + tensor_bytes(expected)
        return out


def generate_trigger_set(
    owner_secret: bytes, m: int, input_dim: int, output_dim: int | None = None
) -> TriggerSet:
    """Deterministically derive m distinct trigger pairs from the secret."""
    if m < 1:
        raise WatermarkError("empty-trigger-set", f"m = {m}")
    if input_dim < 1:
        raise WatermarkError("bad-dimension", f"input_dim = {input_dim}")
    if output_dim is None:
        output_dim = input_dim
    seed = int.from_bytes(digest(b"trigger-set|" + owner_secret)[:8], "little")
    rng = random.Random(seed)
    pairs = []
    seen = set()
    while len(pairs) < m:
        trigger = tensor([rng.randrange(MODULUS) for _ in range(input_dim)])
        if trigger in seen:
            continue
        seen.add(trigger)
        expected = tensor([rng.randrange(MODULUS) for _ in range(output_dim)])
        pairs.append((trigger, expected))
    return TriggerSet(pairs=tuple(pairs))


def ts_commitment(ts: TriggerSet, salt: bytes) -> bytes:
    return digest(ts.canonical_bytes() + salt)


@dataclass(frozen=True)
class WatermarkedModel:
    """Base model plus an output-node override table for the trigger inputs."""

    base: DagModel
    overrides: dict  # input tensor -> expected output tensor

    @property
    def model_id(self) -> str:
        return self.base.model_id


def embed(model: DagModel, ts: TriggerSet) -> WatermarkedModel:
    overrides = {}
    for trigger, expected in ts.pairs:
        try:
            execute(model, trigger)
        except DagError as exc:
            if exc.kind == "dimension-mismatch":
                raise WatermarkError("dimension-mismatch", str(exc)) from exc
            raise
        overrides[trigger] = expected
    return WatermarkedModel(base=model, overrides=overrides)


def execute_wm(wm: WatermarkedModel, input_tensor: tuple) -> ExecutionTrace:
    trace = execute(wm.base, input_tensor)
    override = wm.overrides.get(tuple(input_tensor))
    if override is None:
        return trace
    values = list(trace.values)
    values[trace.output_index] = override
    return ExecutionTrace(values=tuple(values), output_index=trace.output_index)


def predict(wm: WatermarkedModel, input_tensor: tuple) -> tuple:
    return execute_wm(wm, input_tensor).final_output


@dataclass(frozen=True)
class WatermarkCommitment:
    model_id: str
    digest: bytes
    registrant: str
    timestamp: int


@dataclass(frozen=True)
class OwnershipClaim:
    registrant: str
    model_id: str
    trigger_set: TriggerSet
    salt: bytes
    commitment_digest: bytes


@dataclass(frozen=True)
class OwnershipRuling:
    winner: str | None
    match_fractions: dict
    reason: str


def _registry(ledger: Ledger) -> dict:
    return ledger.contracts.setdefault(REGISTRY_KEY, {})


def commit_watermark(
    ledger: Ledger, registrant: str, model_id: str, ts: TriggerSet, salt: bytes
) -> WatermarkCommitment:
    d = ts_commitment(ts, salt)
    registry = _registry(ledger)
    key = (registrant, model_id, d.hex())
    if key in registry:
        raise WatermarkError("duplicate-commitment", f"{registrant}/{model_id}")
    commitment = WatermarkCommitment(
        model_id=model_id, digest=d, registrant=registrant, timestamp=ledger.clock
    )
    registry[key] = commitment
    ledger.emit(
        "watermark-commitment",
        REGISTRY_KEY,
        {"registrant": registrant, "model_id": model_id, "digest": d.hex(), "tick": ledger.clock},
    )
    return commitment


def judge_ownership(
    ledger: Ledger, model_under_test, claims, theta: float = DEFAULT_THETA
) -> OwnershipRuling:
    """Score each claim against the contested model and apply earliest-wins.

    ``model_under_test`` is any callable mapping an input tensor to an output
    tensor.  A claim whose revealed set does not hash to its referenced
    commitment is disqualified (its fraction is still reported).  The result
    does not depend on the order claims are submitted in.
    """
    registry = _registry(ledger)
    fractions: dict = {}
    qualifying = []
    for claim in claims:
        key = (claim.registrant, claim.model_id, claim.commitment_digest.hex())
        commitment = registry.get(key)
        if commitment is None:
            raise WatermarkError("unknown-commitment", f"{claim.registrant}/{claim.model_id}")
        m = claim.trigger_set.size
        matches = sum(
            1
            for trigger, expected in claim.trigger_set.pairs
            if tuple(model_under_test(trigger)) == tuple(expected)
        )
        fraction = matches / m
        fractions[claim.registrant] = fraction
        if ts_commitment(claim.trigger_set, claim.salt) != claim.commitment_digest:
            continue  # reveal does not open the commitment: disqualified
        if fraction >= theta:
            qualifying.append((commitment.timestamp, claim.registrant))
    if not qualifying:
        return OwnershipRuling(
            winner=None, match_fractions=fractions, reason="no claim met the match threshold"
        )
    timestamp, winner = min(qualifying)
    return OwnershipRuling(
        winner=winner,
        match_fractions=fractions,
        reason=f"earliest qualifying commitment at tick {timestamp}",
    )
