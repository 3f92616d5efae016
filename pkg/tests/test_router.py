"""Tests for server subscription, ledger watching, and deterministic matching."""
import pytest

from veriserve.crypto import SigningKey
from veriserve.ledger import Ledger
from veriserve.router import Assignment, CostWeights, MatchRequest, Router, RouterError, ServerRecord
from veriserve.sla import BucketGrid, PricingTable, SlaTerms, install_sla_handlers, register_sla, sign_terms

MODEL = "m"


def one_cell(price):
    return PricingTable(models={MODEL: BucketGrid(in_bounds=(8,), out_bounds=(8,), prices=((price,),))})


def market(server_prices, client_price=30, fee_bp=0):
    """Ledger with one client->agg SLA and one agg->server SLA per server."""
    led = Ledger()
    install_sla_handlers(led)
    keys = {}
    for p in ["client-1", "agg-1"] + sorted(server_prices):
        keys[p] = SigningKey.from_identity(p)
        led.create_account(p, balance=100, pubkey=keys[p].public_bytes)
    terms = SlaTerms(sla_id="sla-client", consumer="client-1", supplier="agg-1",
                     pricing=one_cell(client_price), challenger_fee_bp=fee_bp)
    register_sla(led, sign_terms(terms, keys["client-1"], keys["agg-1"]))
    for sid in sorted(server_prices):
        terms = SlaTerms(sla_id=f"sla-{sid}", consumer="agg-1", supplier=sid,
                         pricing=one_cell(server_prices[sid]), challenger_fee_bp=0)
        register_sla(led, sign_terms(terms, keys["agg-1"], keys[sid]))
    return led


def feed(router, led):
    for ev in led.read_events():
        router.on_ledger_event(ev)


def rec(server_id, latency=10, capacity=4, location="eu", load=0, models=(MODEL,), availability=1.0):
    return ServerRecord(server_id=server_id, hosted_models=tuple(models), hw_capacity=capacity,
                        location=location, advertised_latency=latency, current_load=load,
                        availability=availability)


def request(**kw):
    return MatchRequest(client_id="client-1", model_id=MODEL, **kw)


def test_record_validation():
    with pytest.raises(RouterError) as exc:
        rec("s", capacity=0)
    assert exc.value.kind == "bad-record"
    with pytest.raises(RouterError) as exc:
        rec("s", load=-1)
    assert exc.value.kind == "negative-load"
    with pytest.raises(RouterError) as exc:
        MatchRequest(client_id="c", model_id="")
    assert exc.value.kind == "bad-record"


def test_subscribe_discards_claimed_verification():
    router = Router("router-1")
    claimed = ServerRecord(server_id="server-a", hosted_models=(MODEL,), hw_capacity=4,
                           location="eu", advertised_latency=10, location_verified=True)
    router.subscribe(claimed)
    assert router.servers["server-a"].location_verified is False
    with pytest.raises(RouterError) as exc:
        router.subscribe(rec("server-a"))
    assert exc.value.kind == "duplicate-subscription"


def test_unsubscribe():
    router = Router("router-1")
    router.subscribe(rec("server-a"))
    router.unsubscribe("server-a")
    assert router.servers == {}
    with pytest.raises(RouterError) as exc:
        router.unsubscribe("server-a")
    assert exc.value.kind == "unknown-server"


def test_load_and_availability_updates():
    router = Router("router-1")
    router.subscribe(rec("server-a"))
    router.update_load("server-a", 2)
    router.update_load("server-a", -1)
    assert router.servers["server-a"].current_load == 1
    with pytest.raises(RouterError) as exc:
        router.update_load("server-a", -2)
    assert exc.value.kind == "negative-load"
    assert router.servers["server-a"].current_load == 1
    with pytest.raises(RouterError) as exc:
        router.update_load("ghost", 1)
    assert exc.value.kind == "unknown-server"
    router.update_availability("server-a", 0.5)
    assert router.servers["server-a"].availability == 0.5
    with pytest.raises(RouterError) as exc:
        router.update_availability("ghost", 0.5)
    assert exc.value.kind == "unknown-server"


def test_match_requires_hosted_model_and_sla_path():
    led = market({"server-a": 7})
    router = Router("router-1")
    feed(router, led)
    router.subscribe(rec("server-a", models=("other",)))
    with pytest.raises(RouterError) as exc:
        router.match(request(), tick=0)
    assert exc.value.kind == "no-match"
    # hosts the model but no aggregator SLA covers it
    router.subscribe(rec("server-x"))
    with pytest.raises(RouterError) as exc:
        router.match(request(), tick=0)
    assert exc.value.kind == "no-match"


def test_match_picks_cheapest_and_reserves_load():
    led = market({"server-a": 7, "server-b": 7})
    router = Router("router-1")
    feed(router, led)
    router.subscribe(rec("server-a", latency=10))
    router.subscribe(rec("server-b", latency=5))
    assignment = router.match(request(), tick=0)
    assert isinstance(assignment, Assignment)
    assert assignment.server_id == "server-b"
    assert assignment.aggregator_id == "agg-1"
    assert assignment.router_id == "router-1"
    assert assignment.chain.server_sla.sla_id == "sla-server-b"
    assert router.servers["server-b"].current_load == 1
    assert router.servers["server-a"].current_load == 0


def test_price_term_in_cost():
    led = market({"server-a": 3, "server-b": 20})
    router = Router("router-1")
    feed(router, led)
    # b is faster but its unit price more than makes up the difference
    router.subscribe(rec("server-a", latency=10))
    router.subscribe(rec("server-b", latency=5))
    assert router.match(request(), tick=0).server_id == "server-a"


def test_tie_breaks_to_smallest_server_id():
    led = market({"server-a": 7, "server-b": 7})
    router = Router("router-1")
    feed(router, led)
    router.subscribe(rec("server-b"))
    router.subscribe(rec("server-a"))
    assert router.match(request(), tick=0).server_id == "server-a"


def test_load_reservations_rotate_matches():
    # identical servers except a starts at load 3: matching drains toward the
    # idle one until relative loads equalise, then ties fall back to the id
    led = market({"server-a": 7, "server-b": 7})
    router = Router("router-1")
    feed(router, led)
    router.subscribe(rec("server-a", load=3, capacity=4))
    router.subscribe(rec("server-b", load=0, capacity=4))
    picks = [router.match(request(), tick=0).server_id for _ in range(4)]
    assert picks == ["server-b", "server-b", "server-b", "server-a"]


def test_region_constraint_needs_attestation():
    led = market({"server-a": 7})
    router = Router("router-1")
    feed(router, led)
    router.subscribe(rec("server-a", location="eu"))
    with pytest.raises(RouterError):
        router.match(request(region_constraint="eu"), tick=0)
    # an attestation for the wrong region proves nothing
    router.on_ledger_event(led.emit("location-attested", "attest", {"server_id": "server-a", "region": "us"}))
    assert router.servers["server-a"].location_verified is False
    # attesting an unknown server is ignored
    router.on_ledger_event(led.emit("location-attested", "attest", {"server_id": "ghost", "region": "eu"}))
    router.on_ledger_event(led.emit("location-attested", "attest", {"server_id": "server-a", "region": "eu"}))
    assert router.servers["server-a"].location_verified is True
    assert router.match(request(region_constraint="eu"), tick=0).server_id == "server-a"
    # verified, but in the wrong region for this request
    with pytest.raises(RouterError) as exc:
        router.match(request(region_constraint="us"), tick=0)
    assert exc.value.kind == "no-match"


def test_latency_penalty_flips_choice():
    led = market({"server-a": 20, "server-b": 5})
    router = Router("router-1")
    feed(router, led)
    router.subscribe(rec("server-a", latency=12))
    router.subscribe(rec("server-b", latency=20))
    # unconstrained: a costs 12+20=32, b costs 20+5=25
    assert router.match(request(), tick=0).server_id == "server-b"
    router.servers["server-b"].current_load = 0
    # max_latency 10 penalises both overruns: a 32+2=34, b 25+10=35
    assert router.match(request(max_latency=10), tick=0).server_id == "server-a"


def test_uptime_penalty_flips_choice():
    led = market({"server-a": 5, "server-b": 7})
    router = Router("router-1", weights=CostWeights(uptime=100.0))
    feed(router, led)
    router.subscribe(rec("server-a", availability=0.5))
    router.subscribe(rec("server-b", availability=1.0))
    # cheapest wins while nobody asks about uptime
    assert router.match(request(), tick=0).server_id == "server-a"
    router.servers["server-a"].current_load = 0
    # shortfall of 0.49 at weight 100 buries a's price advantage
    assert router.match(request(uptime_requirement=0.99), tick=0).server_id == "server-b"


def test_chain_margin_is_a_hard_filter():
    # server-b undercuts on latency but its price breaks the client margin
    led = market({"server-a": 7, "server-b": 40}, client_price=30)
    router = Router("router-1")
    feed(router, led)
    router.subscribe(rec("server-a", latency=50))
    router.subscribe(rec("server-b", latency=1))
    assert router.match(request(), tick=0).server_id == "server-a"


def test_expired_sla_drops_path():
    led = Ledger()
    install_sla_handlers(led)
    keys = {}
    for p in ("client-1", "agg-1", "server-a"):
        keys[p] = SigningKey.from_identity(p)
        led.create_account(p, balance=100, pubkey=keys[p].public_bytes)
    terms = SlaTerms(sla_id="sla-client", consumer="client-1", supplier="agg-1",
                     pricing=one_cell(30), challenger_fee_bp=0, valid_until=3)
    register_sla(led, sign_terms(terms, keys["client-1"], keys["agg-1"]))
    terms = SlaTerms(sla_id="sla-server", consumer="agg-1", supplier="server-a",
                     pricing=one_cell(7), challenger_fee_bp=0)
    register_sla(led, sign_terms(terms, keys["agg-1"], keys["server-a"]))
    router = Router("router-1")
    feed(router, led)
    router.subscribe(rec("server-a"))
    assert router.match(request(), tick=3).server_id == "server-a"
    led.advance(4)
    for ev in led.read_events(kind="sla-expired"):
        router.on_ledger_event(ev)
    with pytest.raises(RouterError) as exc:
        router.match(request(), tick=4)
    assert exc.value.kind == "no-match"


def test_two_routers_fed_the_same_events_agree():
    led = market({"server-a": 7, "server-b": 9, "server-c": 5})
    weights = CostWeights(latency=2.0, price=1.5, load=4.0, uptime=10.0)
    routers = [Router("router-1", weights=weights), Router("router-2", weights=weights)]
    for router in routers:
        feed(router, led)
        router.subscribe(rec("server-a", latency=10, capacity=2))
        router.subscribe(rec("server-b", latency=4, capacity=4))
        router.subscribe(rec("server-c", latency=8, capacity=3, availability=0.8))
    picks = [[], []]
    for step in range(6):
        req = request(uptime_requirement=0.9) if step % 2 else request()
        for i, router in enumerate(routers):
            picks[i].append(router.match(req, tick=0).server_id)
    assert picks[0] == picks[1]
    loads = [{sid: r.servers[sid].current_load for sid in r.servers} for r in routers]
    assert loads[0] == loads[1]
