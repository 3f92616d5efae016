"""The scenario runner: one logical clock driving the whole protocol stack.

All nondeterminism flows from a single seeded generator, consumed in a fixed
processing order (schedule order, then actor id order), so a scenario run is
reproducible down to the trace bytes.  The runner enforces the global checks
as it goes — token conservation after every tick, router load equal to open
sessions — and assembles the run report the acceptance suite reads.
"""
from __future__ import annotations

import random

from ..bisection import Party, TraceResponder, run_game
from ..channel import (
    FEE_POOL,
    ChannelState,
    Micropayment,
    PaymentDisputeCase,
    close_channel,
    install_channel_handlers,
    open_channel,
    raise_payment_dispute,
    resolve_payment_dispute,
)
from ..crypto import SigningKey
from ..dag import (
    MODULUS,
    chain_model,
    commit,
    dag_index,
    execute,
    inception_model,
    make_faulty_evaluator,
    model_digest,
    random_tensor,
)
from ..ledger import Ledger
from ..router import CostWeights, MatchRequest, Router, RouterError, ServerRecord
from ..service import (
    ServiceError,
    close_session,
    open_session,
    serve,
    settle_unit,
    sign_request,
    submit_request,
)
from ..sla import PricingTable, SlaTerms, install_sla_handlers, register_sla, sign_terms, split_payment
from ..watermark import (
    OwnershipClaim,
    commit_watermark,
    embed,
    execute_wm,
    generate_trigger_set,
    predict,
    ts_commitment,
)
from .report import RunReport
from .scenario import Scenario
from .trace import TraceLog

CHALLENGER_POOL = "challenger-pool"


class HarnessError(Exception):
    def __init__(self, kind: str, message: str = ""):
        self.kind = kind
        super().__init__(f"{kind}: {message}" if message else kind)


class ScenarioRunner:
    def __init__(self, scenario: Scenario, seed: int | None = None):
        self.sc = scenario
        self.seed = scenario.seed if seed is None else seed
        self.rng = random.Random(self.seed)
        self.ledger = Ledger()
        self.trace = TraceLog()
        self.report = RunReport(scenario_name=scenario.name, seed=self.seed)

        self.keys: dict = {}
        self.models: dict = {}
        self.indexes: dict = {}
        self.model_dims: dict = {}
        self.wm_models: dict = {}  # model_id -> (WatermarkedModel, TriggerSet, salt, owner)
        self.routers: list = []
        self.router_cursor = 0
        self.channels: dict = {}  # (payer, payee) -> ChannelState
        self.sessions: dict = {}  # client -> Session
        self.all_sessions: list = []
        self.client_specs = {c.client_id: c for c in scenario.clients}
        self.server_specs = {s.server_id: s for s in scenario.servers}
        self.paid_units: dict = {}
        self.last_payment: dict = {}  # client -> (request_id, PaymentRecord)
        self.consumed_fair: dict = {}
        self.stopped: set = set()
        self.disputed_requests: set = set()
        self.challenger_wins: dict = {}
        self.pending_payment_disputes: dict = {}  # case_id -> bookkeeping
        self.claim_reveals: dict = {}  # actor -> (model_id, TriggerSet, salt bytes, digest)
        self.fault_index: dict = {}  # request_id -> index into report.faults
        self.session_count = 0
        self.request_count = 0
        self.dispute_count = 0
        self.initial_total = 0
        self.event_cursor = 0

    # --- identity helpers ---

    def _key(self, actor: str) -> SigningKey:
        return self.keys[actor]

    def _pub(self, actor: str) -> bytes:
        return self.keys[actor].public_bytes

    def _honest(self, actor: str) -> bool:
        spec = self.client_specs.get(actor)
        if spec is not None:
            return spec.behavior.get("kind") == "honest-client"
        sspec = self.server_specs.get(actor)
        if sspec is not None:
            return sspec.behavior.get("kind") == "honest-server"
        for ch in self.sc.challengers:
            if ch.challenger_id == actor:
                return ch.behavior.get("kind") == "honest-challenger"
        if actor in {c.claimant for c in self.sc.ownership_claims}:
            return False
        return True  # aggregators, judge, owners, system roles

    # --- setup ---

    def setup(self) -> None:
        ledger = self.ledger
        install_channel_handlers(ledger)
        install_sla_handlers(ledger)

        roster = []
        for c in self.sc.clients:
            roster.append((c.client_id, c.balance))
        for s in self.sc.servers:
            roster.append((s.server_id, s.balance))
        for a in self.sc.aggregators:
            roster.append((a.aggregator_id, a.balance))
        for ch in self.sc.challengers:
            roster.append((ch.challenger_id, ch.balance))
        for e in self.sc.extras:
            roster.append((e.actor_id, e.balance))
        if self.sc.judge:
            roster.append((self.sc.judge, 0))
        for actor, balance in roster:
            key = SigningKey.from_identity(actor)
            self.keys[actor] = key
            ledger.create_account(actor, balance, pubkey=key.public_bytes)
        ledger.create_account(FEE_POOL, 0)
        ledger.create_account(CHALLENGER_POOL, 0)

        self.trace.append(0, "scenario-start", name=self.sc.name, seed=self.seed)

        for mspec in self.sc.models:
            if mspec.kind == "chain":
                model = chain_model(mspec.model_id, mspec.n, dim=mspec.dim, seed=mspec.model_seed)
            else:
                model = inception_model(mspec.model_id, dim=mspec.dim, seed=mspec.model_seed)
            self.models[mspec.model_id] = model
            self.indexes[mspec.model_id] = dag_index(model)
            self.model_dims[mspec.model_id] = mspec.dim
            self.trace.append(
                0, "model-built", model_id=mspec.model_id, model_kind=mspec.kind,
                nodes=model.n, digest=model_digest(model).hex(),
            )

        for wspec in self.sc.watermarks:
            dim = self.model_dims[wspec.model_id]
            ts = generate_trigger_set(wspec.secret.encode(), wspec.m, dim)
            wm = embed(self.models[wspec.model_id], ts)
            salt = bytes.fromhex(wspec.salt)
            self.wm_models[wspec.model_id] = (wm, ts, salt, wspec.owner)

        for sspec in self.sc.slas:
            terms = SlaTerms(
                sla_id=sspec.sla_id,
                consumer=sspec.consumer,
                supplier=sspec.supplier,
                pricing=PricingTable.from_dict(sspec.pricing),
                challenger_fee_bp=sspec.challenger_fee_bp,
                valid_from=sspec.valid_from,
                valid_until=sspec.valid_until,
            )
            terms = sign_terms(terms, self._key(sspec.consumer), self._key(sspec.supplier))
            register_sla(ledger, terms)

        weights = CostWeights(
            latency=self.sc.cost_weights.get("latency", 1.0),
            price=self.sc.cost_weights.get("price", 1.0),
            load=self.sc.cost_weights.get("load", 1.0),
            uptime=self.sc.cost_weights.get("uptime", 1.0),
        )
        for rid in self.sc.routers:
            self.routers.append(Router(rid, weights))
        for sspec in self.sc.servers:
            record = ServerRecord(
                server_id=sspec.server_id,
                hosted_models=tuple(sspec.models),
                hw_capacity=sspec.hw_capacity,
                location=sspec.location,
                advertised_latency=sspec.latency,
            )
            self.routers[0].subscribe(record)

        # one channel per SLA edge: client->aggregator and aggregator->server
        for sspec in self.sc.slas:
            if sspec.consumer in self.client_specs:
                pair = (sspec.consumer, sspec.supplier)
                if pair not in self.channels:
                    escrow = self.client_specs[sspec.consumer].escrow
                    self.channels[pair] = open_channel(
                        ledger, pair[0], pair[1], escrow,
                        dispute_window=self.sc.dispute_window,
                        dispute_fee=self.sc.dispute_fee,
                    )
            elif sspec.supplier in self.server_specs:
                pair = (sspec.consumer, sspec.supplier)
                if pair not in self.channels:
                    agg = next(
                        a for a in self.sc.aggregators if a.aggregator_id == sspec.consumer
                    )
                    self.channels[pair] = open_channel(
                        ledger, pair[0], pair[1], agg.server_escrow,
                        dispute_window=self.sc.dispute_window,
                        dispute_fee=self.sc.dispute_fee,
                    )

        self._feed_routers()
        self.report.initial_balances = {k: v.balance for k, v in ledger.accounts.items()}
        self.initial_total = ledger.total_supply()
        self._check_conservation("setup")

    # --- event plumbing ---

    def _feed_routers(self) -> None:
        events = self.ledger.events[self.router_cursor:]
        self.router_cursor = len(self.ledger.events)
        for event in events:
            for router in self.routers:
                router.on_ledger_event(event)

    def _mirror_events(self) -> None:
        events = self.ledger.events[self.event_cursor:]
        self.event_cursor = len(self.ledger.events)
        for ev in events:
            self.trace.append(
                ev.tick, "ledger-event", event_seq=ev.seq, event_kind=ev.kind,
                contract=ev.contract, payload=ev.payload,
            )
            if ev.kind == "payment-dispute-resolved":
                self._finish_payment_dispute(ev.payload)

    def _finish_payment_dispute(self, payload: dict) -> None:
        info = self.pending_payment_disputes.pop(payload.get("case_id", ""), None)
        if info is None:
            return
        winner = info["honest_party"]
        self.report.disputes.append(
            {
                "kind": "payment",
                "case_id": payload["case_id"],
                "ruling": payload["kind"],
                "winner": winner,
                "loser": info["dishonest"],
                "winner_honest": self._honest(winner),
                "disputed_unit": payload["disputed_unit"],
            }
        )
        if info.get("fault_ref") is not None:
            self.report.faults[info["fault_ref"]]["outcome"] = "detected-dispute-won"

    def _check_conservation(self, label: str) -> None:
        total = self.ledger.total_supply()
        self.report.conservation.append((label, total))
        if total != self.initial_total:
            self.report.conservation_ok = False
            raise HarnessError(
                "conservation-violated", f"{label}: {total} != {self.initial_total}"
            )

    def _check_load_accounting(self) -> None:
        loads = sum(r.current_load for r in self.routers[0].servers.values())
        open_sessions = sum(1 for s in self.sessions.values() if s.status == "open")
        if loads != open_sessions:
            raise HarnessError(
                "load-accounting", f"router load {loads} != open sessions {open_sessions}"
            )

    # --- per-tick work ---

    def tick(self, t: int) -> None:
        self.ledger.advance(1)
        for att in self.sc.attestations:
            if att.tick == t:
                self.ledger.emit(
                    "location-attested", "", {"server_id": att.server_id, "region": att.region}
                )
        self._feed_routers()
        for wspec in self.sc.watermarks:
            if wspec.commit_tick == t:
                _, ts, salt, owner = self.wm_models[wspec.model_id]
                commitment = commit_watermark(self.ledger, owner, wspec.model_id, ts, salt)
                self.claim_reveals[owner] = (wspec.model_id, ts, salt, commitment.digest)
        for claim in self.sc.ownership_claims:
            if claim.commit_tick == t:
                salt = bytes.fromhex(claim.salt)
                if claim.source == "stolen":
                    ts = self.claim_reveals[claim.stolen_from][1]
                else:
                    dim = self.model_dims[claim.model_id]
                    ts = generate_trigger_set(claim.secret.encode(), claim.m, dim)
                commitment = commit_watermark(self.ledger, claim.claimant, claim.model_id, ts, salt)
                self.claim_reveals[claim.claimant] = (claim.model_id, ts, salt, commitment.digest)
        for judging in self.sc.judgings:
            if judging.tick == t:
                self._run_judging(judging)
        for entry in self.sc.schedule:
            if entry.tick == t:
                for _ in range(entry.count):
                    self._process_request(entry)
        self._check_load_accounting()
        self._check_conservation(f"tick-{t}")
        self.trace.append(
            t, "tick-end", total_supply=self.initial_total,
            open_sessions=sum(1 for s in self.sessions.values() if s.status == "open"),
        )
        self._mirror_events()

    def _run_judging(self, judging) -> None:
        model = self.models[judging.model_id]
        index = self.indexes[judging.model_id]
        if judging.target == "watermarked":
            wm = self.wm_models[judging.model_id][0]
            evaluator = lambda x: predict(wm, x)
        else:
            evaluator = lambda x: execute(model, x, index).final_output
        claims = []
        for claimant in judging.claimants:
            model_id, ts, salt, digest = self.claim_reveals[claimant]
            claims.append(
                OwnershipClaim(
                    registrant=claimant,
                    model_id=model_id,
                    trigger_set=ts,
                    salt=salt,
                    commitment_digest=digest,
                )
            )
        ruling = self.ledger_judge(claims, evaluator)
        fractions = {k: ruling.match_fractions[k] for k in sorted(ruling.match_fractions)}
        record = {
            "model_id": judging.model_id,
            "target": judging.target,
            "claimants": list(judging.claimants),
            "winner": ruling.winner,
            "match_fractions": fractions,
            "reason": ruling.reason,
        }
        self.report.ownership_rulings.append(record)
        self.trace.append(self.ledger.clock, "ownership-judging", **record)
        if ruling.winner is not None:
            losers = [c for c in judging.claimants if c != ruling.winner]
            self.report.disputes.append(
                {
                    "kind": "ownership",
                    "winner": ruling.winner,
                    "loser": losers[0] if losers else None,
                    "winner_honest": self._honest(ruling.winner),
                    "model_id": judging.model_id,
                }
            )
        elif all(not self._honest(c) for c in judging.claimants):
            # nobody qualified and no honest party was contesting: the ruling
            # correctly denied every false claim
            self.report.disputes.append(
                {
                    "kind": "ownership",
                    "winner": None,
                    "loser": judging.claimants[0],
                    "winner_honest": True,
                    "model_id": judging.model_id,
                }
            )

    def ledger_judge(self, claims, evaluator):
        from ..watermark import judge_ownership

        return judge_ownership(self.ledger, evaluator, claims, theta=self.sc.theta)

    # --- the request lifecycle ---

    def _ensure_session(self, entry):
        client = entry.client_id
        session = self.sessions.get(client)
        if session is not None and session.status == "open":
            if session.assignment.model_id == entry.model_id:
                return session
            close_session(self.routers[0], session)
        request = MatchRequest(
            client_id=client,
            model_id=entry.model_id,
            region_constraint=entry.region_constraint,
        )
        try:
            assignment = self.routers[0].match(request, tick=self.ledger.clock)
        except RouterError as exc:
            self.trace.append(self.ledger.clock, "no-match", client=client, reason=exc.kind)
            return None
        client_ch = self.channels[(client, assignment.aggregator_id)]
        server_ch = self.channels[(assignment.aggregator_id, assignment.server_id)]
        session_id = f"s{self.session_count}"
        self.session_count += 1
        try:
            session = open_session(
                self.ledger, self.routers[0], assignment, client_ch, server_ch,
                session_id, da_timing=self.sc.da_commit_timing,
            )
        except ServiceError as exc:
            self.trace.append(
                self.ledger.clock, "session-failed", client=client, reason=exc.kind
            )
            return None
        self.sessions[client] = session
        self.all_sessions.append(session)
        self.trace.append(
            self.ledger.clock, "session-open", session_id=session_id, client=client,
            server=assignment.server_id, aggregator=assignment.aggregator_id,
            model=entry.model_id,
        )
        return session

    def _process_request(self, entry) -> None:
        client = entry.client_id
        if client in self.stopped:
            self.trace.append(self.ledger.clock, "client-stopped", client=client)
            return
        session = self._ensure_session(entry)
        if session is None:
            return
        model = self.models[entry.model_id]
        index = self.indexes[entry.model_id]
        dim = self.model_dims[entry.model_id]
        request_id = f"r{self.request_count}"
        self.request_count += 1
        input_tensor = random_tensor(self.rng, dim)
        request = sign_request(
            self._key(client), request_id, session.session_id, entry.model_id, input_tensor
        )
        try:
            submit_request(session, request, self._pub(client))
        except ServiceError as exc:
            self.trace.append(
                self.ledger.clock, "request-rejected", client=client,
                request_id=request_id, reason=exc.kind,
            )
            return
        self.trace.append(
            self.ledger.clock, "request", request_id=request_id,
            session_id=session.session_id, model=entry.model_id, input=list(input_tensor),
        )

        server_id = session.assignment.server_id
        sspec = self.server_specs[server_id]
        evaluator = lambda x: execute(model, x, index)
        faulty = False
        if sspec.behavior.get("kind") == "faulty-server":
            if self.rng.random() < sspec.behavior.get("probability", 1.0):
                fault_node = sspec.behavior["fault_node"]
                node_dim = len(execute(model, input_tensor, index).values[fault_node])
                perturbation = tuple(self.rng.randrange(1, MODULUS) for _ in range(node_dim))
                evaluator = make_faulty_evaluator(model, fault_node, perturbation, index)
                faulty = True
        response = serve(self.ledger, session, request_id, evaluator)
        self.report.requests_served += 1
        self.trace.append(
            self.ledger.clock, "serve", request_id=request_id,
            output_digest=response.output_digest.hex(), faulty=faulty, da_ref=response.da_ref,
        )
        if faulty:
            self.fault_index[request_id] = len(self.report.faults)
            self.report.faults.append(
                {"kind": "faulty-serve", "actor": server_id, "request_id": request_id,
                 "outcome": "not-sampled"}
            )

        paid = self._pay_unit(entry, session, request_id)
        if paid:
            self._run_audits(session, request_id, input_tensor, response, model, index)

    def _pay_unit(self, entry, session, request_id) -> bool:
        client = entry.client_id
        behavior = self.client_specs[client].behavior
        kind = behavior.get("kind", "honest-client")
        refuses = (
            kind == "nonpaying-client"
            and self.paid_units.get(client, 0) >= behavior.get("after_units", 0)
        )
        request = session.requests[request_id]
        response = session.responses[request_id]
        split = split_payment(
            session.assignment.chain, session.assignment.model_id,
            len(request.input), len(response.output),
        )
        base = (
            session.client_channel.latest_accepted.cumulative
            if session.client_channel.latest_accepted
            else 0
        )
        server_base = (
            session.server_channel.latest_accepted.cumulative
            if session.server_channel.latest_accepted
            else 0
        )
        exhausted = (
            base + split.client_pays > session.client_channel.escrow
            or server_base + split.server_gets > session.server_channel.escrow
        )
        if not refuses and exhausted:
            # the channel cannot carry another unit: orderly halt, no dispute
            self.trace.append(
                self.ledger.clock, "escrow-exhausted", client=client, request_id=request_id
            )
            self.report.faults.append(
                {"kind": "escrow-exhaustion", "actor": client, "request_id": request_id,
                 "outcome": "session-closed-clean"}
            )
            close_session(self.routers[0], session)
            self.stopped.add(client)
            return False
        try:
            record = settle_unit(
                self.ledger, session, request_id,
                None if refuses else self._key(client),
                self._key(session.assignment.aggregator_id),
            )
        except ServiceError as exc:
            self.trace.append(
                self.ledger.clock, "payment-refused", client=client,
                request_id=request_id, reason=exc.kind,
            )
            fault_ref = len(self.report.faults)
            self.report.faults.append(
                {"kind": "nonpayment", "actor": client, "request_id": request_id,
                 "outcome": "pending"}
            )
            self.stopped.add(client)
            self._raise_nonpayment_dispute(session, fault_ref)
            return False
        self.report.payments_settled += 1
        self.paid_units[client] = self.paid_units.get(client, 0) + 1
        self.consumed_fair[client] = self.consumed_fair.get(client, 0) + record.split.client_pays
        self.last_payment[client] = (request_id, record)
        self.trace.append(
            self.ledger.clock, "payment", request_id=request_id,
            client_pays=record.split.client_pays, server_gets=record.split.server_gets,
            aggregator_margin=record.split.aggregator_margin,
            challenger_fee=record.split.challenger_fee,
            client_nonce=record.client_mp.nonce, server_nonce=record.server_mp.nonce,
        )
        return True

    def _raise_nonpayment_dispute(self, session, fault_ref: int) -> None:
        """The aggregator force-settles the client channel at the last signed link."""
        client = session.assignment.client_id
        last = self.last_payment.get(client)
        if last is None:
            return  # nothing was ever signed; nothing to claim
        paid_request_id, record = last
        case_id = f"pd{self.dispute_count}"
        self.dispute_count += 1
        case = PaymentDisputeCase(
            case_id=case_id,
            channel_id=session.client_channel.channel_id,
            claimed=record.client_mp,
            predecessor=record.client_prev,
            raised_by=session.assignment.aggregator_id,
            evidence=session.requests[paid_request_id],
        )
        raise_payment_dispute(self.ledger, case)
        self.pending_payment_disputes[case_id] = {
            "honest_party": session.assignment.aggregator_id,
            "dishonest": client,
            "fault_ref": fault_ref,
        }
        self.trace.append(
            self.ledger.clock, "payment-dispute", case_id=case_id,
            channel=session.client_channel.channel_id,
            claimed_nonce=record.client_mp.nonce,
        )

    def _run_audits(self, session, request_id, input_tensor, response, model, index) -> None:
        for cspec in self.sc.challengers:
            behavior = cspec.behavior
            kind = behavior.get("kind")
            if kind == "honest-challenger":
                if self.rng.random() >= behavior.get("sampling_rate", 0.0):
                    continue
                honest_trace = execute(model, input_tensor, index)
                mismatch = commit(honest_trace.final_output) != response.output_digest
                self.trace.append(
                    self.ledger.clock, "audit", challenger=cspec.challenger_id,
                    request_id=request_id, mismatch=mismatch,
                )
                if not mismatch or request_id in self.disputed_requests:
                    continue
                self._run_inference_dispute(
                    session, request_id, input_tensor, model, index,
                    challenger_id=cspec.challenger_id,
                    challenger_trace=honest_trace,
                    challenger_honest=True,
                )
            elif kind == "false-challenger":
                if self.rng.random() >= behavior.get("challenge_rate", 0.0):
                    continue
                if request_id in self.disputed_requests:
                    continue
                node_dim = len(session.traces[request_id].values[model.output_node])
                perturbation = tuple(self.rng.randrange(1, MODULUS) for _ in range(node_dim))
                fake_trace = make_faulty_evaluator(model, model.output_node, perturbation, index)(
                    input_tensor
                )
                self.trace.append(
                    self.ledger.clock, "audit", challenger=cspec.challenger_id,
                    request_id=request_id, mismatch=True, fabricated=True,
                )
                fault_ref = len(self.report.faults)
                self.report.faults.append(
                    {"kind": "false-challenge", "actor": cspec.challenger_id,
                     "request_id": request_id, "outcome": "pending"}
                )
                self._run_inference_dispute(
                    session, request_id, input_tensor, model, index,
                    challenger_id=cspec.challenger_id,
                    challenger_trace=fake_trace,
                    challenger_honest=False,
                    fault_ref=fault_ref,
                )

    def _run_inference_dispute(
        self, session, request_id, input_tensor, model, index,
        challenger_id, challenger_trace, challenger_honest, fault_ref=None,
    ) -> None:
        self.disputed_requests.add(request_id)
        server_id = session.assignment.server_id
        asserter = TraceResponder(session.traces[request_id])
        challenger = TraceResponder(challenger_trace)
        result = run_game(model, request_id, input_tensor, asserter, challenger, index=index)
        verdict = result.verdict
        self.report.bisection_rounds.append(result.rounds)
        server_lost = verdict.faulty_party is Party.ASSERTER
        if server_lost != challenger_honest:
            raise HarnessError(
                "dispute-accounting",
                f"{request_id}: verdict {verdict.faulty_party} vs challenger_honest={challenger_honest}",
            )
        if server_lost:
            # the disputed unit's full client price flows back, and the loser
            # funds the dispute fee
            client = session.assignment.client_id
            record = session.payments[request_id]
            self.ledger.transfer(server_id, client, record.split.client_pays)
            self.ledger.transfer(server_id, FEE_POOL, self.sc.dispute_fee)
            self.consumed_fair[client] -= record.split.client_pays
            self.challenger_wins[challenger_id] = self.challenger_wins.get(challenger_id, 0) + 1
            if request_id in self.fault_index:
                self.report.faults[self.fault_index[request_id]]["outcome"] = "detected-dispute-won"
            winner, loser = challenger_id, server_id
        else:
            self.ledger.transfer(challenger_id, FEE_POOL, self.sc.dispute_fee)
            if fault_ref is not None:
                self.report.faults[fault_ref]["outcome"] = "defeated"
            winner, loser = server_id, challenger_id
        self.report.disputes.append(
            {
                "kind": "inference",
                "request_id": request_id,
                "divergent_node": verdict.divergent_node,
                "faulty_party": verdict.faulty_party.value,
                "reason": verdict.reason,
                "rounds": result.rounds,
                "winner": winner,
                "loser": loser,
                "winner_honest": self._honest(winner),
            }
        )
        self.trace.append(
            self.ledger.clock, "inference-dispute", request_id=request_id,
            challenger=challenger_id, divergent_node=verdict.divergent_node,
            faulty_party=verdict.faulty_party.value, reason=verdict.reason,
            rounds=result.rounds, transcript=result.transcript_dicts(),
        )

    # --- settlement ---

    def _forged_close(self, client: str) -> None:
        """A double-signing client closes with a conflicting lower final state."""
        session = self.sessions.get(client)
        last = self.last_payment.get(client)
        if session is None or last is None:
            return
        if session.status == "open":
            close_session(self.routers[0], session)
        paid_request_id, record = last
        channel = session.client_channel
        latest = channel.latest_accepted
        short = record.split.client_pays
        forged_unsigned = Micropayment(
            channel_id=channel.channel_id,
            request_id=f"forged-{paid_request_id}",
            nonce=latest.nonce,
            cumulative=latest.cumulative - short,
            prev_hash=latest.prev_hash,
            payer_sig=b"",
        )
        forged = Micropayment(
            channel_id=forged_unsigned.channel_id,
            request_id=forged_unsigned.request_id,
            nonce=forged_unsigned.nonce,
            cumulative=forged_unsigned.cumulative,
            prev_hash=forged_unsigned.prev_hash,
            payer_sig=self._key(client).sign(forged_unsigned.unsigned_bytes()),
        )
        close_channel(self.ledger, channel, forged)
        fault_ref = len(self.report.faults)
        self.report.faults.append(
            {"kind": "double-sign", "actor": client, "request_id": paid_request_id,
             "outcome": "pending"}
        )
        self.trace.append(
            self.ledger.clock, "forged-close", client=client,
            channel=channel.channel_id, forged_nonce=forged.nonce,
            forged_cumulative=forged.cumulative, true_cumulative=latest.cumulative,
        )
        # the aggregator answers with the true latest state inside the window
        case_id = f"pd{self.dispute_count}"
        self.dispute_count += 1
        case = PaymentDisputeCase(
            case_id=case_id,
            channel_id=channel.channel_id,
            claimed=latest,
            predecessor=record.client_prev,
            raised_by=session.assignment.aggregator_id,
            evidence=session.requests[paid_request_id],
        )
        raise_payment_dispute(self.ledger, case)
        self.pending_payment_disputes[case_id] = {
            "honest_party": session.assignment.aggregator_id,
            "dishonest": client,
            "fault_ref": fault_ref,
        }
        resolve_payment_dispute(self.ledger, channel, case_id, counter_evidence=None)

    def settle(self) -> None:
        tick = self.ledger.clock
        for c in self.sc.clients:
            if c.behavior.get("kind") == "double-sign-client":
                self._forged_close(c.client_id)
        for client in sorted(self.sessions):
            session = self.sessions[client]
            if session.status == "open":
                close_session(self.routers[0], session)
                self.trace.append(tick, "session-close", session_id=session.session_id)
        # any dispute still open settles by its default rule now
        for pair in sorted(self.channels, key=lambda p: self.channels[p].channel_id):
            channel = self.channels[pair]
            if channel.status == "disputed":
                open_cases = [e["case"].case_id for e in channel.disputes if e["ruling"] is None]
                for case_id in open_cases:
                    resolve_payment_dispute(self.ledger, channel, case_id, counter_evidence=None)
        for pair in sorted(self.channels, key=lambda p: self.channels[p].channel_id):
            channel = self.channels[pair]
            if channel.status == "open":
                paid, refunded = close_channel(self.ledger, channel, channel.latest_accepted)
                self.trace.append(
                    tick, "channel-close", channel=channel.channel_id,
                    paid=paid, refunded=refunded,
                )
        fees_by_aggregator: dict = {}
        for session in self.all_sessions:
            agg = session.assignment.aggregator_id
            fees_by_aggregator[agg] = fees_by_aggregator.get(agg, 0) + session.fees_accrued
        for agg in sorted(fees_by_aggregator):
            amount = fees_by_aggregator[agg]
            if amount > 0:
                self.ledger.transfer(agg, CHALLENGER_POOL, amount)
                self.trace.append(tick, "fee-settlement", aggregator=agg, amount=amount)
        winners = sorted(c for c, wins in self.challenger_wins.items() if wins > 0)
        if winners:
            pool = self.ledger.balance(CHALLENGER_POOL)
            share = pool // len(winners)
            for challenger_id in winners:
                if share > 0:
                    self.ledger.transfer(CHALLENGER_POOL, challenger_id, share)
                    self.trace.append(
                        tick, "challenger-reward", challenger=challenger_id, amount=share
                    )
        self._check_load_accounting()
        self._check_conservation("settlement")
        self._mirror_events()

    # --- finish ---

    def _build_solvency(self) -> None:
        for actor in sorted(self.report.initial_balances):
            if actor in (FEE_POOL, CHALLENGER_POOL):
                continue
            initial = self.report.initial_balances[actor]
            final = self.ledger.balance(actor)
            consumed = self.consumed_fair.get(actor, 0)
            honest = self._honest(actor)
            solvent = final >= initial - consumed
            self.report.solvency.append(
                {
                    "actor": actor,
                    "honest": honest,
                    "initial": initial,
                    "final": final,
                    "consumed_fair_price": consumed,
                    "solvent": solvent,
                }
            )
            if honest and not solvent:
                raise HarnessError("insolvent-honest-actor", actor)

    def run(self) -> RunReport:
        self.setup()
        for t in range(1, self.sc.ticks + 1):
            self.tick(t)
        self.settle()
        for fault in self.report.faults:
            if fault["outcome"] == "pending":
                raise HarnessError("fault-unresolved", str(fault))
        self.report.final_balances = {
            k: v.balance for k, v in self.ledger.accounts.items()
        }
        self._build_solvency()
        self.trace.append(
            self.ledger.clock, "scenario-end",
            requests_served=self.report.requests_served,
            payments_settled=self.report.payments_settled,
            disputes=len(self.report.disputes),
        )
        self.report.trace_digest = self.trace.digest()
        return self.report


def run_scenario(scenario: Scenario, seed: int | None = None) -> tuple:
    """Run one scenario; returns (report, trace)."""
    runner = ScenarioRunner(scenario, seed=seed)
    report = runner.run()
    return report, runner.trace
