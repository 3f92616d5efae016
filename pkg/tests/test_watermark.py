"""Tests for trigger-set watermarks, commitments, and ownership judging."""
import struct

import pytest

from veriserve.dag import chain_model, execute, tensor
from veriserve.ledger import Ledger
from veriserve.watermark import (
    OwnershipClaim,
    WatermarkError,
    commit_watermark,
    embed,
    generate_trigger_set,
    judge_ownership,
    predict,
    ts_commitment,
)

DIM = 4
M = 32
SECRET = b"owner-secret"
MODEL = chain_model("wm-model", length=3, dim=DIM, seed=9)


def wm_callable(wm):
    return lambda t: predict(wm, t)


def claim_for(registrant, ts, salt, commitment):
    return OwnershipClaim(registrant=registrant, model_id=MODEL.model_id, trigger_set=ts,
                          salt=salt, commitment_digest=commitment.digest)


def test_trigger_set_deterministic_distinct_and_sized():
    a = generate_trigger_set(SECRET, M, DIM)
    b = generate_trigger_set(SECRET, M, DIM)
    assert a == b
    assert a.size == M
    triggers = [pair[0] for pair in a.pairs]
    assert len(set(triggers)) == M
    for trigger, expected in a.pairs:
        assert len(trigger) == DIM and len(expected) == DIM
    other = generate_trigger_set(b"different", M, DIM)
    assert other != a
    narrow = generate_trigger_set(SECRET, 4, DIM, output_dim=2)
    assert all(len(e) == 2 for _, e in narrow.pairs)


def test_trigger_set_validation():
    with pytest.raises(WatermarkError) as exc:
        generate_trigger_set(SECRET, 0, DIM)
    assert exc.value.kind == "empty-trigger-set"
    with pytest.raises(WatermarkError) as exc:
        generate_trigger_set(SECRET, 4, 0)
    assert exc.value.kind == "bad-dimension"


def test_canonical_bytes_layout():
    ts = generate_trigger_set(SECRET, 2, 1)
    expected = struct.pack("<I", 2)
    for trigger, out in ts.pairs:
        expected += struct.pack("<II", 1, trigger[0]) + struct.pack("<II", 1, out[0])
    assert ts.canonical_bytes() == expected


def test_commitment_is_salt_and_content_sensitive():
    ts = generate_trigger_set(SECRET, 4, DIM)
    base = ts_commitment(ts, b"\x01\x02")
    assert ts_commitment(ts, b"\x01\x03") != base
    other = generate_trigger_set(b"other-secret", 4, DIM)
    assert ts_commitment(other, b"\x01\x02") != base


def test_embed_overrides_exactly_the_triggers():
    ts = generate_trigger_set(SECRET, M, DIM)
    wm = embed(MODEL, ts)
    for trigger, expected in ts.pairs:
        assert predict(wm, trigger) == expected
        assert execute(MODEL, trigger).final_output != expected
    plain_input = tensor([1, 2, 3, 4])
    assert plain_input not in wm.overrides
    assert predict(wm, plain_input) == execute(MODEL, plain_input).final_output


def test_embed_rejects_wrong_dimension():
    ts = generate_trigger_set(SECRET, 4, DIM + 1)
    with pytest.raises(WatermarkError) as exc:
        embed(MODEL, ts)
    assert exc.value.kind == "dimension-mismatch"


def test_commit_watermark_event_and_duplicate():
    led = Ledger()
    ts = generate_trigger_set(SECRET, 4, DIM)
    commitment = commit_watermark(led, "owner-1", MODEL.model_id, ts, b"salt")
    assert commitment.timestamp == led.clock
    events = led.read_events(kind="watermark-commitment")
    assert len(events) == 1
    assert events[0].payload["registrant"] == "owner-1"
    assert events[0].payload["digest"] == commitment.digest.hex()
    with pytest.raises(WatermarkError) as exc:
        commit_watermark(led, "owner-1", MODEL.model_id, ts, b"salt")
    assert exc.value.kind == "duplicate-commitment"
    # same set under a fresh salt is a distinct commitment
    commit_watermark(led, "owner-1", MODEL.model_id, ts, b"salt-2")


def test_judge_unknown_commitment():
    led = Ledger()
    ts = generate_trigger_set(SECRET, 4, DIM)
    bogus = OwnershipClaim(registrant="owner-1", model_id=MODEL.model_id, trigger_set=ts,
                           salt=b"s", commitment_digest=ts_commitment(ts, b"s"))
    with pytest.raises(WatermarkError) as exc:
        judge_ownership(led, wm_callable(embed(MODEL, ts)), [bogus])
    assert exc.value.kind == "unknown-commitment"


def test_owner_beats_fabricated_claim():
    led = Ledger()
    owner_ts = generate_trigger_set(SECRET, M, DIM)
    wm = embed(MODEL, owner_ts)
    led.advance(1)
    owner_c = commit_watermark(led, "owner-1", MODEL.model_id, owner_ts, b"salt-a")
    led.advance(3)
    fab_ts = generate_trigger_set(b"fabricated", M, DIM)
    fab_c = commit_watermark(led, "faker-1", MODEL.model_id, fab_ts, b"salt-b")
    ruling = judge_ownership(led, wm_callable(wm), [
        claim_for("owner-1", owner_ts, b"salt-a", owner_c),
        claim_for("faker-1", fab_ts, b"salt-b", fab_c),
    ])
    assert ruling.winner == "owner-1"
    assert ruling.match_fractions["owner-1"] == 1.0
    # fabricated triggers never hit the override table or the random outputs
    assert ruling.match_fractions["faker-1"] == 0.0
    assert "tick 1" in ruling.reason


def test_plain_model_scores_zero():
    led = Ledger()
    ts = generate_trigger_set(SECRET, M, DIM)
    c = commit_watermark(led, "owner-1", MODEL.model_id, ts, b"salt")
    plain = lambda t: execute(MODEL, t).final_output
    ruling = judge_ownership(led, plain, [claim_for("owner-1", ts, b"salt", c)])
    assert ruling.winner is None
    assert ruling.match_fractions["owner-1"] == 0.0
    assert ruling.reason == "no claim met the match threshold"


def test_bad_reveal_is_disqualified_but_reported():
    # the thief registered a commitment to a fabricated set, then at reveal
    # time presents the leaked true set: perfect score, broken hash
    led = Ledger()
    owner_ts = generate_trigger_set(SECRET, M, DIM)
    wm = embed(MODEL, owner_ts)
    owner_c = commit_watermark(led, "owner-1", MODEL.model_id, owner_ts, b"salt-a")
    led.advance(1)
    thief_c = commit_watermark(led, "thief-1", MODEL.model_id,
                               generate_trigger_set(b"thief", M, DIM), b"salt-t")
    ruling = judge_ownership(led, wm_callable(wm), [
        claim_for("owner-1", owner_ts, b"salt-a", owner_c),
        claim_for("thief-1", owner_ts, b"salt-t", thief_c),
    ])
    assert ruling.match_fractions["thief-1"] == 1.0
    assert ruling.winner == "owner-1"


def test_earliest_commitment_wins_in_any_claim_order():
    # a copier learned the true set and committed to it — later
    led = Ledger()
    ts = generate_trigger_set(SECRET, M, DIM)
    wm = embed(MODEL, ts)
    led.advance(1)
    owner_c = commit_watermark(led, "owner-1", MODEL.model_id, ts, b"salt-a")
    led.advance(4)
    copier_c = commit_watermark(led, "copier-1", MODEL.model_id, ts, b"salt-c")
    claims = [
        claim_for("owner-1", ts, b"salt-a", owner_c),
        claim_for("copier-1", ts, b"salt-c", copier_c),
    ]
    forward = judge_ownership(led, wm_callable(wm), claims)
    reverse = judge_ownership(led, wm_callable(wm), list(reversed(claims)))
    assert forward.winner == reverse.winner == "owner-1"
    assert forward.match_fractions == reverse.match_fractions
    assert forward.match_fractions["copier-1"] == 1.0


def test_same_tick_tie_breaks_to_lowest_registrant():
    led = Ledger()
    ts = generate_trigger_set(SECRET, M, DIM)
    wm = embed(MODEL, ts)
    c_b = commit_watermark(led, "party-b", MODEL.model_id, ts, b"salt-b")
    c_a = commit_watermark(led, "party-a", MODEL.model_id, ts, b"salt-a")
    ruling = judge_ownership(led, wm_callable(wm), [
        claim_for("party-b", ts, b"salt-b", c_b),
        claim_for("party-a", ts, b"salt-a", c_a),
    ])
    assert ruling.winner == "party-a"


def test_theta_boundary_is_inclusive():
    led = Ledger()
    ts = generate_trigger_set(SECRET, 10, DIM)
    c = commit_watermark(led, "owner-1", MODEL.model_id, ts, b"salt")
    claim = claim_for("owner-1", ts, b"salt", c)

    def matching(k):
        table = {pair[0]: pair[1] for pair in ts.pairs[:k]}
        return lambda t: table.get(tuple(t), tensor([0] * DIM))

    at_theta = judge_ownership(led, matching(9), [claim], theta=0.9)
    assert at_theta.winner == "owner-1"
    assert at_theta.match_fractions["owner-1"] == 0.9
    below = judge_ownership(led, matching(8), [claim], theta=0.9)
    assert below.winner is None
    assert below.match_fractions["owner-1"] == 0.8
