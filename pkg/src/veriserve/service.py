"""Query/response data path: signed requests, gated payments, witnesses.

A session rides on one match assignment and two channels (client to
aggregator, aggregator to server).  Requests are strictly serialized: a new
request is accepted only once the previous one is paid, so a server can never
be more than one unit of work ahead of payment.  Serving records the full
execution trace, which later feeds the bisection game if the unit is
challenged; settlement signs the client micropayment and the aggregator's
mirrored micropayment in one atomic step and accrues the challenger fee for
the unit.  Witness collection packages the evidence a payment dispute needs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .channel import ChannelState, Micropayment, accept_micropayment, make_micropayment
from .crypto import SigningKey, digest, encode_str, verify_signature
from .dag import DagError, ExecutionTrace, commit, tensor_bytes
from .ledger import Ledger
from .router import Assignment, Router
from .sla import PaymentSplit, split_payment, validate_chain

PHASE_REQUESTED = "requested"
PHASE_SERVED = "served"
PHASE_PAID = "paid"
PHASE_FAILED = "failed"


class ServiceError(Exception):
    def __init__(self, kind: str, message: str = ""):
        self.kind = kind
        super().__init__(f"{kind}: {message}" if message else kind)


@dataclass(frozen=True)
class InferenceRequest:
    request_id: str
    session_id: str
    model_id: str
    input: tuple
    client_sig: bytes

    def unsigned_bytes(self) -> bytes:
        return (
            encode_str(self.request_id)
            + encode_str(self.session_id)
            + encode_str(self.model_id)
            + tensor_bytes(self.input)
        )

    def verify(self, pubkey: bytes) -> bool:
        return verify_signature(pubkey, self.client_sig, self.unsigned_bytes())


def sign_request(
    signer: SigningKey, request_id: str, session_id: str, model_id: str, input_tensor: tuple
) -> InferenceRequest:
    body = (
        encode_str(request_id)
        + encode_str(session_id)
        + encode_str(model_id)
        + tensor_bytes(input_tensor)
    )
    return InferenceRequest(
        request_id=request_id,
        session_id=session_id,
        model_id=model_id,
        input=input_tensor,
        client_sig=signer.sign(body),
    )


@dataclass(frozen=True)
class InferenceResponse:
    request_id: str
    output: tuple
    output_digest: bytes
    da_ref: int | None = None  # ledger event seq of the DA commitment, if posted


@dataclass(frozen=True)
class PaymentRecord:
    client_mp: Micropayment
    client_prev: Micropayment | None
    server_mp: Micropayment
    server_prev: Micropayment | None
    split: PaymentSplit


@dataclass(frozen=True)
class EvidenceBundle:
    request: InferenceRequest
    response_digest: bytes | None
    da_ref: int | None
    predecessor: Micropayment | None
    claimed: Micropayment | None
    channel_id: str


@dataclass
class Session:
    session_id: str
    assignment: Assignment
    client_channel: ChannelState
    server_channel: ChannelState
    da_timing: str = "on-serve"  # or "after-payment"
    status: str = "open"
    requests: dict = field(default_factory=dict)
    phases: dict = field(default_factory=dict)
    responses: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)
    order: list = field(default_factory=list)
    pending: str | None = None
    payments: dict = field(default_factory=dict)
    fees_accrued: int = 0

    def units_paid(self) -> int:
        return len(self.payments)


def open_session(
    ledger: Ledger,
    router: Router,
    assignment: Assignment,
    client_channel: ChannelState,
    server_channel: ChannelState,
    session_id: str,
    da_timing: str = "on-serve",
) -> Session:
    """Both sides re-check the SLA path; the match's load reservation either
    becomes the session's or is released on failure."""
    record = router.servers.get(assignment.server_id)
    if record is None:
        raise ServiceError("server-unavailable", assignment.server_id)

    def fail(kind: str, message: str):
        router.update_load(assignment.server_id, -1)
        return ServiceError(kind, message)

    if record.current_load > record.hw_capacity:
        raise fail("server-unavailable", f"{assignment.server_id} at capacity")
    chain = validate_chain(
        router.registry, assignment.client_id, assignment.server_id, assignment.model_id, ledger.clock
    )
    if chain is None:
        raise fail("no-sla-path", f"{assignment.client_id} -> {assignment.server_id}")
    if client_channel.payer != assignment.client_id or client_channel.payee != assignment.aggregator_id:
        raise fail("bad-channel", client_channel.channel_id)
    if server_channel.payer != assignment.aggregator_id or server_channel.payee != assignment.server_id:
        raise fail("bad-channel", server_channel.channel_id)
    return Session(
        session_id=session_id,
        assignment=assignment,
        client_channel=client_channel,
        server_channel=server_channel,
        da_timing=da_timing,
    )


def submit_request(session: Session, request: InferenceRequest, client_pub: bytes) -> None:
    if session.status != "open":
        raise ServiceError("session-closed", session.session_id)
    if session.pending is not None:
        raise ServiceError("unpaid-previous-request", session.pending)
    if request.session_id != session.session_id:
        raise ServiceError("wrong-session", request.session_id)
    if request.request_id in session.requests:
        raise ServiceError("duplicate-request-id", request.request_id)
    if request.model_id != session.assignment.model_id:
        raise ServiceError("wrong-session", f"model {request.model_id}")
    if not request.verify(client_pub):
        raise ServiceError("bad-signature", request.request_id)
    session.requests[request.request_id] = request
    session.phases[request.request_id] = PHASE_REQUESTED
    session.order.append(request.request_id)
    session.pending = request.request_id


def serve(ledger: Ledger, session: Session, request_id: str, evaluator) -> InferenceResponse:
    """Run the evaluator, keep the trace, commit to the output."""
    if session.phases.get(request_id) != PHASE_REQUESTED or session.pending != request_id:
        raise ServiceError("not-requested", request_id)
    request = session.requests[request_id]
    try:
        trace: ExecutionTrace = evaluator(request.input)
    except DagError as exc:
        session.phases[request_id] = PHASE_FAILED
        session.pending = None
        raise ServiceError("evaluation-error", str(exc)) from exc
    output = trace.final_output
    output_digest = commit(output)
    da_ref = None
    if session.da_timing == "on-serve":
        ev = ledger.emit(
            "da-commitment",
            session.client_channel.channel_id,
            {"request_id": request_id, "output_digest": output_digest.hex()},
        )
        da_ref = ev.seq
    response = InferenceResponse(
        request_id=request_id, output=output, output_digest=output_digest, da_ref=da_ref
    )
    session.traces[request_id] = trace
    session.responses[request_id] = response
    session.phases[request_id] = PHASE_SERVED
    return response


def settle_unit(
    ledger: Ledger,
    session: Session,
    request_id: str,
    client_signer: SigningKey | None,
    aggregator_signer: SigningKey,
) -> PaymentRecord:
    """Pay for one served unit on both channels atomically."""
    if session.phases.get(request_id) != PHASE_SERVED:
        raise ServiceError("not-served", request_id)
    if client_signer is None:
        raise ServiceError("payment-refused", f"client withheld payment for {request_id}")
    request = session.requests[request_id]
    response = session.responses[request_id]
    split = split_payment(
        session.assignment.chain,
        session.assignment.model_id,
        len(request.input),
        len(response.output),
    )
    client_prev = session.client_channel.latest_accepted
    server_prev = session.server_channel.latest_accepted
    client_base = client_prev.cumulative if client_prev else 0
    server_base = server_prev.cumulative if server_prev else 0
    # check both escrows up front so the pair settles atomically or not at all
    if client_base + split.client_pays > session.client_channel.escrow:
        raise ServiceError("payment-refused", f"client escrow exhausted at {request_id}")
    if server_base + split.server_gets > session.server_channel.escrow:
        raise ServiceError("payment-refused", f"aggregator escrow exhausted at {request_id}")
    client_mp = make_micropayment(
        session.client_channel, client_signer, client_prev, request_id, split.client_pays
    )
    accept_micropayment(session.client_channel, client_mp)
    server_mp = make_micropayment(
        session.server_channel, aggregator_signer, server_prev, request_id, split.server_gets
    )
    accept_micropayment(session.server_channel, server_mp)
    record = PaymentRecord(
        client_mp=client_mp,
        client_prev=client_prev,
        server_mp=server_mp,
        server_prev=server_prev,
        split=split,
    )
    session.payments[request_id] = record
    session.fees_accrued += split.challenger_fee
    session.phases[request_id] = PHASE_PAID
    session.pending = None
    if session.da_timing == "after-payment":
        response = session.responses[request_id]
        if response.da_ref is None:
            ev = ledger.emit(
                "da-commitment",
                session.client_channel.channel_id,
                {"request_id": request_id, "output_digest": response.output_digest.hex()},
            )
            session.responses[request_id] = InferenceResponse(
                request_id=request_id,
                output=response.output,
                output_digest=response.output_digest,
                da_ref=ev.seq,
            )
    return record


def collect_witnesses(session: Session, request_id: str) -> EvidenceBundle:
    request = session.requests.get(request_id)
    if request is None:
        raise ServiceError("unknown-request", request_id)
    response = session.responses.get(request_id)
    record = session.payments.get(request_id)
    if record is not None:
        claimed, predecessor = record.client_mp, record.client_prev
    else:
        claimed, predecessor = None, session.client_channel.latest_accepted
    return EvidenceBundle(
        request=request,
        response_digest=response.output_digest if response else None,
        da_ref=response.da_ref if response else None,
        predecessor=predecessor,
        claimed=claimed,
        channel_id=session.client_channel.channel_id,
    )


def close_session(router: Router, session: Session) -> None:
    if session.status != "open":
        return
    session.status = "closed"
    if session.assignment.server_id in router.servers:
        router.update_load(session.assignment.server_id, -1)
