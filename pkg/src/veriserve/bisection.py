"""Interactive dispute game that pins an inference disagreement to one layer.

Two parties, an asserter who produced an output and a challenger who disputes
it, each hold a full execution trace for the same model and input.  A referee
narrows the disagreement by querying per-node output digests:

* The candidate set starts as every node (all are plausible first points of
  divergence).  Each round the referee picks the unknown candidate x that
  maximizes ``min(k, n - k)``, where k counts x plus its ancestors inside the
  candidate set and n is the candidate count.  k is exactly how many
  candidates fall away if the digests match, and n - k how many fall away if
  they differ, so the greedy choice maximizes the guaranteed elimination; on
  chains it degenerates to binary search.  Ties go to the smallest index.
* Matching digests mark x consistent and prune x with all its ancestors.
  Differing digests mark x inconsistent and narrow the candidates to x and
  its ancestors.  Statuses are never overwritten, so no node is queried twice
  and total queries are bounded by the node count.

Pruning an ancestor presumes its output would have matched, and a fault whose
effect cancels on the queried path can defeat that presumption.  The isolation
rule repairs it: a node is only isolated once every parent has been explicitly
queried consistent.  A parent query that comes back unequal resets the
candidate set to that parent's ancestor closure and the hunt continues there.
For evaluators that miscompute a single node this terminates at exactly that
node: any other node with differing outputs must have a differing parent, and
that parent can never be confirmed consistent.

Arbitration then needs one referee layer evaluation.  Both parties reveal the
isolated node's parent tensors; a reveal that contradicts the revealer's own
earlier digest is equivocation and loses outright.  Otherwise the parent
tensors are pinned by matching digests, the referee recomputes the single
layer, and whoever claimed a different output digest loses.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

from .crypto import DIGEST_SIZE
from .dag import DagIndex, DagModel, ExecutionTrace, LayerSpec, Tensor, commit, dag_index, eval_layer


class BisectionError(Exception):
    def __init__(self, kind: str, message: str = ""):
        self.kind = kind
        super().__init__(f"{kind}: {message}" if message else kind)


class Party(Enum):
    ASSERTER = "asserter"
    CHALLENGER = "challenger"


class NodeStatus(Enum):
    UNKNOWN = "unknown"
    CONSISTENT = "consistent"
    INCONSISTENT = "inconsistent"


class Phase(Enum):
    QUERYING = "querying"
    REVEALING = "revealing"
    ARBITRATED = "arbitrated"


@dataclass(frozen=True)
class Verdict:
    divergent_node: int
    faulty_party: Party
    reason: str  # wrong-layer-output | equivocation | non-response


@dataclass(frozen=True)
class DisputeState:
    """Referee-side state; evolved functionally, one step per query round."""

    model: DagModel
    index: DagIndex
    request_id: str
    input_tensor: Tensor
    statuses: tuple
    candidates_mask: int
    consistent_mask: int
    submitted: dict  # (Party, node) -> digest bytes; append-only
    round: int = 0
    phase: Phase = Phase.QUERYING
    current_query: int | None = None

    def candidate_set(self) -> set:
        out, mask, i = set(), self.candidates_mask, 0
        while mask:
            if mask & 1:
                out.add(i)
            mask >>= 1
            i += 1
        return out

    def candidate_count(self) -> int:
        return self.candidates_mask.bit_count()


def _closure_mask(index: DagIndex, node: int) -> int:
    return index.ancestor_masks[node] | (1 << node)


def start_dispute(
    model: DagModel,
    request_id: str,
    input_tensor: Tensor,
    asserter_output_digest: bytes,
    challenger_output_digest: bytes,
    index: DagIndex | None = None,
) -> DisputeState:
    """Open a dispute over one request's final output."""
    if asserter_output_digest == challenger_output_digest:
        raise BisectionError("digests-equal", "nothing to dispute")
    idx = index if index is not None else dag_index(model)
    out = model.output_node
    statuses = [NodeStatus.UNKNOWN] * model.n
    statuses[out] = NodeStatus.INCONSISTENT
    submitted = {
        (Party.ASSERTER, out): asserter_output_digest,
        (Party.CHALLENGER, out): challenger_output_digest,
    }
    return DisputeState(
        model=model,
        index=idx,
        request_id=request_id,
        input_tensor=input_tensor,
        statuses=tuple(statuses),
        candidates_mask=_closure_mask(idx, out),
        consistent_mask=0,
        submitted=submitted,
    )


def score_node(state: DisputeState, node: int) -> int:
    """Guaranteed eliminations from querying ``node``: min over both outcomes.

    With k = |{node} union ancestors(node)| restricted to candidates and n the
    candidate count, a matching answer eliminates k candidates and a differing
    answer eliminates n - k, so the score is min(k, n - k).
    """
    bit = 1 << node
    if not state.candidates_mask & bit:
        raise BisectionError("not-a-candidate", str(node))
    k = (_closure_mask(state.index, node) & state.candidates_mask).bit_count()
    n = state.candidates_mask.bit_count()
    return min(k, n - k)


def select_query(state: DisputeState) -> int:
    """Pick the next node to query: max score, ties to the smallest index."""
    if state.phase is not Phase.QUERYING:
        raise BisectionError("wrong-phase", state.phase.value)
    if state.candidate_count() <= 1:
        raise BisectionError("already-isolated", "one candidate left")
    best, best_score = None, -1
    mask, node = state.candidates_mask, 0
    while mask:
        if mask & 1 and state.statuses[node] is NodeStatus.UNKNOWN:
            s = score_node(state, node)
            if s > best_score:
                best, best_score = node, s
        mask >>= 1
        node += 1
    if best is None:
        raise BisectionError("no-queryable-candidate", "all candidates have known status")
    return best


def _expected_query(state: DisputeState) -> int | None:
    """The node the referee wants next: a greedy pick, or an unknown parent of
    the sole candidate, or None when isolation conditions already hold."""
    if state.candidate_count() > 1:
        return select_query(state)
    z = state.candidates_mask.bit_length() - 1
    for p in state.index.parents[z]:
        if state.statuses[p] is NodeStatus.UNKNOWN:
            return p
    return None


def submit_digest(state: DisputeState, party: Party, node: int, value: bytes) -> DisputeState:
    if state.phase is not Phase.QUERYING:
        raise BisectionError("wrong-phase", state.phase.value)
    if len(value) != DIGEST_SIZE:
        raise BisectionError("malformed-digest", f"{len(value)} bytes")
    target = state.current_query if state.current_query is not None else _expected_query(state)
    if target is None or node != target:
        raise BisectionError("wrong-node", f"submitted {node}, expected {target}")
    if (party, node) in state.submitted:
        raise BisectionError("duplicate-submission", f"{party.value} already answered {node}")
    submitted = dict(state.submitted)
    submitted[(party, node)] = value
    return replace(state, submitted=submitted, current_query=node)


def step(state: DisputeState) -> DisputeState:
    """Apply the prune/narrow rule for the current query and advance a round."""
    x = state.current_query
    if x is None:
        raise BisectionError("no-open-query")
    a = state.submitted.get((Party.ASSERTER, x))
    b = state.submitted.get((Party.CHALLENGER, x))
    if a is None or b is None:
        raise BisectionError("missing-digest", f"node {x} lacks both answers")
    closure = _closure_mask(state.index, x)
    statuses = list(state.statuses)
    if a == b:
        statuses[x] = NodeStatus.CONSISTENT
        candidates = state.candidates_mask & ~closure
        consistent = state.consistent_mask | (1 << x)
    else:
        statuses[x] = NodeStatus.INCONSISTENT
        consistent = state.consistent_mask
        if state.candidates_mask & (1 << x):
            candidates = state.candidates_mask & closure
        else:
            # parent check failed on a pruned node: the consistency presumption
            # was wrong, restart the hunt inside this parent's closure
            candidates = closure & ~consistent
    return replace(
        state,
        statuses=tuple(statuses),
        candidates_mask=candidates,
        consistent_mask=consistent,
        round=state.round + 1,
        current_query=None,
    )


def isolate(state: DisputeState) -> int | None:
    """The isolated node, or None while candidates or parent checks remain."""
    if state.candidate_count() != 1:
        return None
    z = state.candidates_mask.bit_length() - 1
    for p in state.index.parents[z]:
        if state.statuses[p] is not NodeStatus.CONSISTENT:
            return None
    return z


def arbitrate(
    state: DisputeState,
    revealed: dict,
    layer_spec: LayerSpec,
    asserter_claim: bytes,
    challenger_claim: bytes,
) -> Verdict:
    """Rule on the isolated node with exactly one referee layer evaluation.

    ``revealed`` maps each party to {parent node: tensor}.  Checks run in
    order: claimed output digests against the record, revealed parent tensors
    present and matching the revealer's own recorded digests, then the single
    recomputation.  If both claims differ from the recomputed digest the
    asserter loses (it carried the burden of the original assertion).
    """
    z = isolate(state)
    if z is None:
        raise BisectionError("not-isolated", "arbitration before isolation")
    if layer_spec != state.model.spec_of(z):
        raise BisectionError("wrong-layer-spec", f"node {z}")
    claims = {Party.ASSERTER: asserter_claim, Party.CHALLENGER: challenger_claim}
    for party in (Party.ASSERTER, Party.CHALLENGER):
        recorded = state.submitted.get((party, z))
        if recorded is not None and claims[party] != recorded:
            return Verdict(z, party, "equivocation")
    parents = state.index.parents[z]
    for party in (Party.ASSERTER, Party.CHALLENGER):
        reveals = revealed.get(party) or {}
        for p in parents:
            t = reveals.get(p)
            if t is None:
                return Verdict(z, party, "non-response")
            if commit(t) != state.submitted[(party, p)]:
                return Verdict(z, party, "equivocation")
    if parents:
        agreed = [revealed[Party.ASSERTER][p] for p in parents]
        other = [revealed[Party.CHALLENGER][p] for p in parents]
        # matching digests pin the tensors; a mismatch here would be a hash
        # collision, which is out of scope at desk scale
        assert agreed == other, "parent digests matched but tensors differ"
    else:
        # the isolated node is the input layer; its parent tensor is the
        # request input, which both parties signed up to at dispute start
        agreed = [state.input_tensor]
    expected = commit(eval_layer(layer_spec, agreed))
    asserter_wrong = claims[Party.ASSERTER] != expected
    challenger_wrong = claims[Party.CHALLENGER] != expected
    if asserter_wrong:
        return Verdict(z, Party.ASSERTER, "wrong-layer-output")
    if challenger_wrong:
        return Verdict(z, Party.CHALLENGER, "wrong-layer-output")
    raise BisectionError("claims-agree", "both claims match the recomputation")


class TraceResponder:
    """Answers referee queries from a fixed execution trace.

    Subclasses override ``digest_for`` or ``tensor_for`` to model unresponsive
    or equivocating parties; returning None simulates a missed deadline.
    """

    def __init__(self, trace: ExecutionTrace):
        self.trace = trace
        self._digests: dict = {}

    def digest_for(self, node: int) -> bytes | None:
        d = self._digests.get(node)
        if d is None:
            d = commit(self.trace.values[node])
            self._digests[node] = d
        return d

    def tensor_for(self, node: int) -> Tensor | None:
        return self.trace.values[node]

    def output_digest(self) -> bytes:
        return self.digest_for(self.trace.output_index)


@dataclass(frozen=True)
class QueryRecord:
    round: int
    node: int
    asserter_digest: str
    challenger_digest: str
    action: str  # pruned | narrowed | reset | parent-confirmed
    candidates_before: tuple | None = None


@dataclass(frozen=True)
class GameResult:
    verdict: Verdict
    rounds: int
    transcript: tuple
    state: DisputeState

    def transcript_dicts(self) -> list:
        return [
            {
                "round": r.round,
                "node": r.node,
                "asserter_digest": r.asserter_digest,
                "challenger_digest": r.challenger_digest,
                "action": r.action,
                **(
                    {"candidates_before": list(r.candidates_before)}
                    if r.candidates_before is not None
                    else {}
                ),
            }
            for r in self.transcript
        ]


def run_game(
    model: DagModel,
    request_id: str,
    input_tensor: Tensor,
    asserter: TraceResponder,
    challenger: TraceResponder,
    index: DagIndex | None = None,
    record_candidates: bool = False,
) -> GameResult:
    """Drive a dispute from opening through arbitration.

    The parties answer digest queries from their stored traces; the referee
    itself evaluates exactly one layer, inside :func:`arbitrate`.
    """
    idx = index if index is not None else dag_index(model)
    a_out = asserter.output_digest()
    c_out = challenger.output_digest()
    state = start_dispute(model, request_id, input_tensor, a_out, c_out, index=idx)
    transcript = []
    while True:
        z = isolate(state)
        if z is not None:
            break
        in_candidates = None
        x = _expected_query(state)
        assert x is not None, "no isolation and no queryable node"
        if record_candidates:
            in_candidates = tuple(sorted(state.candidate_set()))
        parent_check = not (state.candidates_mask & (1 << x))
        da = asserter.digest_for(x)
        if da is None:
            verdict = Verdict(x, Party.ASSERTER, "non-response")
            return GameResult(verdict, state.round, tuple(transcript), state)
        db = challenger.digest_for(x)
        if db is None:
            verdict = Verdict(x, Party.CHALLENGER, "non-response")
            return GameResult(verdict, state.round, tuple(transcript), state)
        state = submit_digest(state, Party.ASSERTER, x, da)
        state = submit_digest(state, Party.CHALLENGER, x, db)
        before = state.candidates_mask
        state = step(state)
        if da == db:
            action = "parent-confirmed" if parent_check else "pruned"
        else:
            action = "reset" if parent_check else "narrowed"
        if not parent_check:
            assert state.candidates_mask.bit_count() < before.bit_count(), "no progress"
        transcript.append(
            QueryRecord(
                round=state.round,
                node=x,
                asserter_digest=da.hex(),
                challenger_digest=db.hex(),
                action=action,
                candidates_before=in_candidates,
            )
        )
    state = replace(state, phase=Phase.REVEALING)
    parents = idx.parents[z]
    revealed = {Party.ASSERTER: {}, Party.CHALLENGER: {}}
    for party, responder in ((Party.ASSERTER, asserter), (Party.CHALLENGER, challenger)):
        for p in parents:
            t = responder.tensor_for(p)
            if t is not None:
                revealed[party][p] = t
    verdict = arbitrate(
        state,
        revealed,
        model.spec_of(z),
        state.submitted[(Party.ASSERTER, z)],
        state.submitted[(Party.CHALLENGER, z)],
    )
    state = replace(state, phase=Phase.ARBITRATED)
    return GameResult(verdict, state.round, tuple(transcript), state)
