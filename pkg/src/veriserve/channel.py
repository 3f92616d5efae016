"""Unidirectional micropayment channels with on-chain dispute resolution.

A channel escrows tokens from payer to payee at open.  Payment then happens
off-chain: the payer signs a hash-chained sequence of micropayments, each
carrying a nonce (incremented by one per payment), the cumulative total
payable so far, and the digest of its predecessor.  Only the close step and
disputes touch the ledger.

Dispute rulings, in the order they are considered:

  d. the payee cannot back the claimed micropayment's request id with a
     payer-signed request witness: the case is dismissed, the channel settles
     at the predecessor cumulative, and the payee pays the dispute fee;
  c. a second payer-signed micropayment with the same nonce but different
     content exists (supplied as counter-evidence or recorded at close):
     payer fraud; the payee receives the claimed cumulative capped at escrow
     and the payer pays the dispute fee;
  b. counter-evidence carries a valid higher-nonce micropayment: the channel
     settles at the highest valid cumulative;
  a. otherwise the chain stands as claimed: the payee is paid the claimed
     cumulative and the payer is refunded the remainder.

A dispute raised after close (inside the dispute window) corrects the earlier
settlement by transferring the shortfall from the payer's refund; settlements
are never revised downward.  Fees go to the shared ``fee-pool`` account.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .crypto import ZERO_DIGEST, SigningKey, digest, encode_str, encode_u64, verify_signature
from .ledger import Ledger, LedgerError

FEE_POOL = "fee-pool"

CHANNEL_OPEN = "open"
CHANNEL_DISPUTED = "disputed"
CHANNEL_CLOSED = "closed"


class ChannelError(Exception):
    def __init__(self, kind: str, message: str = ""):
        self.kind = kind
        super().__init__(f"{kind}: {message}" if message else kind)


@dataclass(frozen=True)
class Micropayment:
    channel_id: str
    request_id: str
    nonce: int
    cumulative: int
    prev_hash: bytes
    payer_sig: bytes

    def unsigned_bytes(self) -> bytes:
        return (
            encode_str(self.channel_id)
            + encode_str(self.request_id)
            + encode_u64(self.nonce)
            + encode_u64(self.cumulative)
            + self.prev_hash
        )

    def to_dict(self) -> dict:
        return {
            "channel_id": self.channel_id,
            "request_id": self.request_id,
            "nonce": self.nonce,
            "cumulative": self.cumulative,
            "prev_hash": self.prev_hash.hex(),
            "payer_sig": self.payer_sig.hex(),
        }


def mp_digest(mp: Micropayment) -> bytes:
    """Digest binding the full micropayment, signature included."""
    return digest(mp.unsigned_bytes() + mp.payer_sig)


@dataclass
class ChannelState:
    channel_id: str
    payer: str
    payee: str
    escrow: int
    payer_pub: bytes
    dispute_window: int
    dispute_fee: int
    latest_accepted: Micropayment | None = None
    status: str = CHANNEL_OPEN
    settled_cumulative: int = 0
    settled_final: Micropayment | None = None
    closed_at: int | None = None
    disputes: list = field(default_factory=list)

    def held_tokens(self) -> int:
        return self.escrow if self.status != CHANNEL_CLOSED else 0


@dataclass(frozen=True)
class PaymentDisputeCase:
    case_id: str
    channel_id: str
    claimed: Micropayment
    predecessor: Micropayment | None
    raised_by: str
    evidence: object | None = None  # request witness: .request_id, .verify(pubkey)
    raised_at: int = 0


@dataclass(frozen=True)
class PaymentRuling:
    case_id: str
    kind: str  # "a" | "b" | "c" | "d"
    disputed_unit: int
    paid_to_payee: int
    refunded_to_payer: int
    fee_from: str | None
    reason: str


def open_channel(
    ledger: Ledger,
    payer: str,
    payee: str,
    escrow: int,
    dispute_window: int = 10,
    dispute_fee: int = 5,
    channel_id: str | None = None,
) -> ChannelState:
    if channel_id is None:
        channel_id = f"ch:{payer}:{payee}"
    if channel_id in ledger.contracts:
        raise ChannelError("duplicate-channel", channel_id)
    payer_pub = ledger.pubkey_of(payer)
    if payer_pub is None:
        raise ChannelError("insufficient-funds", f"{payer} has no registered key")
    try:
        ledger.deposit_to_contract(payer, channel_id, escrow)
    except LedgerError as exc:
        raise ChannelError("insufficient-funds", str(exc)) from exc
    channel = ChannelState(
        channel_id=channel_id,
        payer=payer,
        payee=payee,
        escrow=escrow,
        payer_pub=payer_pub,
        dispute_window=dispute_window,
        dispute_fee=dispute_fee,
    )
    ledger.contracts[channel_id] = channel
    ledger.emit("channel-open", channel_id, {"payer": payer, "payee": payee, "escrow": escrow})
    return channel


def make_micropayment(
    channel: ChannelState,
    signer: SigningKey,
    prev: Micropayment | None,
    request_id: str,
    unit_price: int,
) -> Micropayment:
    """Sign the next link of the chain; refuses to overcommit the escrow."""
    if unit_price < 0:
        raise ChannelError("cumulative-exceeds-escrow", "negative unit price")
    if prev is not None and prev.channel_id != channel.channel_id:
        raise ChannelError("channel-mismatch", prev.channel_id)
    nonce = 0 if prev is None else prev.nonce + 1
    cumulative = unit_price if prev is None else prev.cumulative + unit_price
    if cumulative > channel.escrow:
        raise ChannelError(
            "cumulative-exceeds-escrow", f"{cumulative} > escrow {channel.escrow}"
        )
    prev_hash = ZERO_DIGEST if prev is None else mp_digest(prev)
    unsigned = (
        encode_str(channel.channel_id)
        + encode_str(request_id)
        + encode_u64(nonce)
        + encode_u64(cumulative)
        + prev_hash
    )
    return Micropayment(
        channel_id=channel.channel_id,
        request_id=request_id,
        nonce=nonce,
        cumulative=cumulative,
        prev_hash=prev_hash,
        payer_sig=signer.sign(unsigned),
    )


def verify_micropayment(
    channel: ChannelState, mp: Micropayment, prev: Micropayment | None
) -> str | None:
    """Return None when the link is sound, else the first violation kind.

    Check order is fixed: signature, channel match, nonce succession, hash
    link, monotone cumulative, escrow bound.
    """
    if not verify_signature(channel.payer_pub, mp.payer_sig, mp.unsigned_bytes()):
        return "bad-signature"
    if mp.channel_id != channel.channel_id:
        return "channel-mismatch"
    if prev is None:
        if mp.nonce != 0:
            return "nonce-gap"
        if mp.prev_hash != ZERO_DIGEST:
            return "broken-hash-chain"
        if mp.cumulative < 0:
            return "cumulative-decrease"
    else:
        if mp.nonce != prev.nonce + 1:
            return "nonce-gap"
        if mp.prev_hash != mp_digest(prev):
            return "broken-hash-chain"
        if mp.cumulative < prev.cumulative:
            return "cumulative-decrease"
    if mp.cumulative > channel.escrow:
        return "exceeds-escrow"
    return None


def accept_micropayment(channel: ChannelState, mp: Micropayment) -> None:
    """Payee-side acceptance: verify against the latest accepted link."""
    if channel.status != CHANNEL_OPEN:
        raise ChannelError("already-closed", channel.channel_id)
    violation = verify_micropayment(channel, mp, channel.latest_accepted)
    if violation is not None:
        raise ChannelError(violation, f"nonce {mp.nonce}")
    channel.latest_accepted = mp


def close_channel(
    ledger: Ledger, channel: ChannelState, final_mp: Micropayment | None
) -> tuple:
    """Settle on-chain: payee gets the final cumulative, payer the remainder.

    Validation here is structural only (channel id, payer signature, escrow
    bound); a cheated counterparty corrects the split through a dispute
    inside the window.  Returns (paid_to_payee, refunded_to_payer).
    """
    if channel.status == CHANNEL_CLOSED:
        raise ChannelError("already-closed", channel.channel_id)
    cumulative = 0
    if final_mp is not None:
        if final_mp.channel_id != channel.channel_id:
            raise ChannelError("invalid-final-payment", "wrong channel")
        if not verify_signature(channel.payer_pub, final_mp.payer_sig, final_mp.unsigned_bytes()):
            raise ChannelError("invalid-final-payment", "bad signature")
        if final_mp.cumulative > channel.escrow or final_mp.cumulative < 0:
            raise ChannelError("invalid-final-payment", "cumulative out of range")
        cumulative = final_mp.cumulative
    refund = channel.escrow - cumulative
    ledger.release_from_contract(channel.payee, cumulative)
    ledger.release_from_contract(channel.payer, refund)
    channel.status = CHANNEL_CLOSED
    channel.settled_cumulative = cumulative
    channel.settled_final = final_mp
    channel.closed_at = ledger.clock
    ledger.emit(
        "channel-close",
        channel.channel_id,
        {"paid": cumulative, "refunded": refund,
         "final_nonce": final_mp.nonce if final_mp else None},
    )
    return cumulative, refund


def _ensure_fee_pool(ledger: Ledger) -> None:
    if FEE_POOL not in ledger.accounts:
        ledger.create_account(FEE_POOL, 0)


def raise_payment_dispute(ledger: Ledger, case: PaymentDisputeCase) -> str:
    channel = ledger.contracts.get(case.channel_id)
    if not isinstance(channel, ChannelState):
        raise ChannelError("malformed-case", f"no channel {case.channel_id}")
    if channel.status == CHANNEL_DISPUTED:
        raise ChannelError("duplicate-dispute", case.channel_id)
    if channel.status == CHANNEL_CLOSED:
        assert channel.closed_at is not None
        if ledger.clock > channel.closed_at + channel.dispute_window:
            raise ChannelError("dispute-window-expired", case.channel_id)
    claimed = case.claimed
    if not verify_signature(channel.payer_pub, claimed.payer_sig, claimed.unsigned_bytes()):
        raise ChannelError("malformed-case", "claimed signature invalid")
    if claimed.channel_id != channel.channel_id:
        raise ChannelError("malformed-case", "claimed is for another channel")
    if case.predecessor is None:
        if claimed.nonce != 0 or claimed.prev_hash != ZERO_DIGEST:
            raise ChannelError("malformed-case", "missing predecessor")
    else:
        pred = case.predecessor
        if not verify_signature(channel.payer_pub, pred.payer_sig, pred.unsigned_bytes()):
            raise ChannelError("malformed-case", "predecessor signature invalid")
        if claimed.nonce != pred.nonce + 1 or claimed.prev_hash != mp_digest(pred):
            raise ChannelError("malformed-case", "hash link broken")
    case = PaymentDisputeCase(
        case_id=case.case_id,
        channel_id=case.channel_id,
        claimed=case.claimed,
        predecessor=case.predecessor,
        raised_by=case.raised_by,
        evidence=case.evidence,
        raised_at=ledger.clock,
    )
    if channel.status == CHANNEL_OPEN:
        channel.status = CHANNEL_DISPUTED
    channel.disputes.append({"case": case, "ruling": None})
    ledger.schedule(
        ledger.clock + channel.dispute_window,
        case.channel_id,
        "payment-dispute-expiry",
        {"case_id": case.case_id},
    )
    ledger.emit(
        "payment-dispute-raised",
        case.channel_id,
        {"case_id": case.case_id, "raised_by": case.raised_by,
         "claimed_nonce": claimed.nonce, "request_id": claimed.request_id},
    )
    return case.case_id


def _find_open_case(channel: ChannelState, case_id: str) -> dict | None:
    for entry in channel.disputes:
        if entry["case"].case_id == case_id and entry["ruling"] is None:
            return entry
    return None


def _witness_ok(channel: ChannelState, case: PaymentDisputeCase) -> bool:
    witness = case.evidence
    if witness is None:
        return False
    if getattr(witness, "request_id", None) != case.claimed.request_id:
        return False
    verify = getattr(witness, "verify", None)
    return callable(verify) and bool(verify(channel.payer_pub))


def _conflicting_same_nonce(
    channel: ChannelState, claimed: Micropayment, counter: Micropayment | None
) -> Micropayment | None:
    candidates = [counter, channel.settled_final]
    for other in candidates:
        if other is None:
            continue
        if other.channel_id != channel.channel_id:
            continue
        if other.nonce != claimed.nonce:
            continue
        if mp_digest(other) == mp_digest(claimed):
            continue
        if verify_signature(channel.payer_pub, other.payer_sig, other.unsigned_bytes()):
            return other
    return None


def resolve_payment_dispute(
    ledger: Ledger, channel: ChannelState, case_id: str, counter_evidence: Micropayment | None = None
) -> PaymentRuling:
    """Produce a ruling and settle it; always terminates the dispute."""
    entry = _find_open_case(channel, case_id)
    if entry is None:
        raise ChannelError("unknown-dispute", case_id)
    case: PaymentDisputeCase = entry["case"]
    claimed = case.claimed
    pred_cum = case.predecessor.cumulative if case.predecessor else 0
    disputed_unit = claimed.cumulative - pred_cum

    fee_from: str | None = None
    if not _witness_ok(channel, case):
        kind = "d"
        target = min(pred_cum, channel.escrow)
        fee_from = channel.payee
        reason = "no payer-signed request witness for the claimed request"
    else:
        conflicting = _conflicting_same_nonce(channel, claimed, counter_evidence)
        if conflicting is not None:
            kind = "c"
            target = min(claimed.cumulative, channel.escrow)
            fee_from = channel.payer
            reason = f"payer double-signed nonce {claimed.nonce}"
        elif (
            counter_evidence is not None
            and counter_evidence.channel_id == channel.channel_id
            and counter_evidence.nonce > claimed.nonce
            and counter_evidence.cumulative <= channel.escrow
            and verify_signature(
                channel.payer_pub, counter_evidence.payer_sig, counter_evidence.unsigned_bytes()
            )
        ):
            kind = "b"
            target = max(claimed.cumulative, counter_evidence.cumulative)
            target = min(target, channel.escrow)
            reason = f"counter-evidence settles at nonce {counter_evidence.nonce}"
        else:
            kind = "a"
            target = min(claimed.cumulative, channel.escrow)
            reason = "claimed chain stands"

    paid = refunded = 0
    if channel.status == CHANNEL_DISPUTED:
        # still open: settle the whole escrow now
        paid = target
        refunded = channel.escrow - target
        ledger.release_from_contract(channel.payee, paid)
        ledger.release_from_contract(channel.payer, refunded)
        channel.status = CHANNEL_CLOSED
        channel.settled_cumulative = target
        channel.closed_at = ledger.clock
    else:
        # post-close correction: claw the shortfall out of the payer's refund
        shortfall = target - channel.settled_cumulative
        if shortfall > 0:
            paid = min(shortfall, ledger.balance(channel.payer))
            ledger.transfer(channel.payer, channel.payee, paid)
            channel.settled_cumulative += paid

    if fee_from is not None:
        _ensure_fee_pool(ledger)
        fee = min(channel.dispute_fee, ledger.balance(fee_from))
        ledger.transfer(fee_from, FEE_POOL, fee)

    ruling = PaymentRuling(
        case_id=case_id,
        kind=kind,
        disputed_unit=disputed_unit,
        paid_to_payee=paid,
        refunded_to_payer=refunded,
        fee_from=fee_from,
        reason=reason,
    )
    entry["ruling"] = ruling
    ledger.emit(
        "payment-dispute-resolved",
        channel.channel_id,
        {"case_id": case_id, "kind": kind, "disputed_unit": disputed_unit,
         "paid_to_payee": paid, "refunded_to_payer": refunded, "fee_from": fee_from},
    )
    return ruling


def _on_dispute_expiry(ledger: Ledger, contract_id: str, payload: dict) -> None:
    channel = ledger.contracts.get(contract_id)
    if not isinstance(channel, ChannelState):
        return
    entry = _find_open_case(channel, payload.get("case_id", ""))
    if entry is None:
        return  # resolved before the window ran out
    resolve_payment_dispute(ledger, channel, payload["case_id"], counter_evidence=None)


def install_channel_handlers(ledger: Ledger) -> None:
    """Register the expiry handler; call once per ledger."""
    ledger.register_expiry_handler("payment-dispute-expiry", _on_dispute_expiry)
