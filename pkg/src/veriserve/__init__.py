"""veriserve: a deterministic, desk-scale simulator of a verifiable AI-service marketplace.

The package models the full protocol stack as exact integer computation so every
run is reproducible byte for byte: toy computation DAGs stand in for models,
an interactive bisection game resolves inference disputes at the cost of a
single referee layer evaluation, unidirectional micropayment channels carry
per-request payments, SLA chains link clients to servers through aggregators,
and a simulated ledger with a logical clock ties settlement together.  The
``veriserve.harness`` subpackage runs scripted Byzantine scenarios end to end
and the ``veriserve`` CLI exposes them.
"""

__version__ = "0.1.0"

from .dag import DagModel, ExecutionTrace, LayerSpec, MODULUS, commit, execute
from .bisection import Party, TraceResponder, Verdict, run_game
from .ledger import Ledger, LedgerError
from .channel import ChannelState, Micropayment, open_channel, close_channel
from .sla import SlaTerms, PaymentSplit, register_sla, split_payment, validate_chain
from .router import Router, ServerRecord, MatchRequest
from .service import Session, open_session, submit_request, serve, settle_unit
from .watermark import TriggerSet, generate_trigger_set, embed, judge_ownership

__all__ = [
    "ChannelState",
    "DagModel",
    "ExecutionTrace",
    "LayerSpec",
    "Ledger",
    "LedgerError",
    "MODULUS",
    "MatchRequest",
    "Micropayment",
    "Party",
    "PaymentSplit",
    "Router",
    "ServerRecord",
    "Session",
    "SlaTerms",
    "TraceResponder",
    "TriggerSet",
    "Verdict",
    "close_channel",
    "commit",
    "embed",
    "execute",
    "generate_trigger_set",
    "judge_ownership",
    "open_channel",
    "open_session",
    "register_sla",
    "run_game",
    "serve",
    "settle_unit",
    "split_payment",
    "submit_request",
    "validate_chain",
    "__version__",
]
