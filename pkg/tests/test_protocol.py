import pytest
from hypothesis import given, strategies as st

from gnomeswarm import protocol as pc
from gnomeswarm.protocol import (CONFUSED, UNAWARE, Announce, Awareness, GnomeState, Mode, Proposal, ProtocolError,
                                 Radius, alpha_step, backdate_check, check_sanity, clock_step, consensus_reached,
                                 on_conflict, order_proposals, phase_of, propose)

awareness = st.one_of(st.just(CONFUSED), st.just(UNAWARE), st.integers(0, 40).map(Radius))
honest_awareness = st.one_of(st.just(UNAWARE), st.integers(0, 40).map(Radius))


def test_awareness_order():
    assert CONFUSED < UNAWARE < Radius(0) < Radius(1) < Radius(50)
    assert min([Radius(3), UNAWARE, Radius(1)]) == UNAWARE
    assert Radius(12).value() == 12 and UNAWARE.value() == -1 and CONFUSED.value() == float("-inf")


@pytest.mark.parametrize("a", [CONFUSED, UNAWARE, Radius(0), Radius(17)])
def test_awareness_codes_and_tokens(a):
    assert Awareness.from_code(a.code) == a
    assert Awareness.from_token(a.token()) == a


def test_alpha_step_examples():
    assert alpha_step(UNAWARE, [UNAWARE, UNAWARE]) == UNAWARE
    assert alpha_step(UNAWARE, [UNAWARE, Radius(0), Radius(2)]) == Radius(0)
    assert alpha_step(Radius(3), [Radius(3), Radius(4), CONFUSED]) == CONFUSED
    assert alpha_step(Radius(2), [Radius(2), Radius(2), Radius(3)]) == Radius(3)


def test_alpha_step_clamps_faulty_input():
    # a lying neighbor cannot drag an honest gnome backward
    assert alpha_step(Radius(5), [Radius(5), Radius(0)]) == Radius(5)


@given(own=honest_awareness, heard=st.lists(awareness, min_size=1, max_size=8), data=st.data())
def test_alpha_step_order_insensitive(own, heard, data):
    perm = data.draw(st.permutations(heard))
    assert alpha_step(own, heard) == alpha_step(own, perm)


@given(own=honest_awareness, heard=st.lists(awareness, min_size=1, max_size=8))
def test_alpha_step_monotone_or_confused(own, heard):
    out = alpha_step(own, heard)
    assert out == CONFUSED or out >= own


@given(heard=st.lists(awareness, min_size=1, max_size=8))
def test_confused_absorbs(heard):
    assert alpha_step(CONFUSED, heard) == CONFUSED


def test_consensus_reached():
    assert consensus_reached(Radius(4), 4)
    assert consensus_reached(Radius(9), 4)
    assert not consensus_reached(Radius(3), 4)
    assert not consensus_reached(CONFUSED, 4)
    assert not consensus_reached(UNAWARE, 0)


def test_phase_examples():
    assert phase_of(Radius(0), 4) == 0
    assert phase_of(Radius(4), 4) == 1
    assert phase_of(Radius(8), 4) == 2
    assert phase_of(UNAWARE, 4) is None
    assert phase_of(CONFUSED, 4) is None
    with pytest.raises(ValueError):
        phase_of(Radius(1), 0)


@given(k=st.integers(0, 500), d=st.integers(1, 30))
def test_phase_shift(k, d):
    assert phase_of(Radius(k + d), d) == phase_of(Radius(k), d) + 1


proposals = st.builds(Proposal, pid=st.integers(0, 6), proposer=st.integers(0, 5), nominal_turn=st.integers(0, 4),
                      proposer_rank=st.integers(0, 3))


def test_order_examples():
    a = Proposal(1, 0, 5, 9)
    b = Proposal(2, 1, 7, 0)
    assert order_proposals(a, b) == -1 and order_proposals(b, a) == 1
    c = Proposal(3, 2, 7, 2)
    d = Proposal(4, 3, 7, 9)
    assert order_proposals(c, d) == -1
    e = Proposal(5, 4, 7, 2)
    assert order_proposals(c, e) == -1 and order_proposals(e, c) == 1
    with pytest.raises(ValueError):
        order_proposals(a, a)


@given(a=proposals, b=proposals, c=proposals)
def test_order_is_strict_total(a, b, c):
    if len({a.pid, b.pid, c.pid}) < 3:
        return
    assert order_proposals(a, b) == -order_proposals(b, a)
    if order_proposals(a, b) == -1 and order_proposals(b, c) == -1:
        assert order_proposals(a, c) == -1


def test_backdate_check_boundaries():
    d = 4
    p = Proposal(1, 0, 10, 0)
    assert backdate_check(p, 10 + d, d) == "plausible"
    assert backdate_check(p, 10 + d + 1, d) == "expel_proposer"
    assert backdate_check(p, 10, d) == "plausible"


def test_clock_step_examples():
    assert clock_step(GnomeState(0, swarm_clock=7), [7, 7, 8]).swarm_clock == 8
    assert clock_step(GnomeState(0, swarm_clock=7), [5]).swarm_clock == 7
    swarm = [GnomeState(g, swarm_clock=3) for g in range(4)]
    assert {clock_step(s, [3, 3, 3]).swarm_clock for s in swarm} == {4}


@given(own=st.integers(0, 100), heard=st.lists(st.integers(0, 100), max_size=6))
def test_clock_never_decreases(own, heard):
    assert clock_step(GnomeState(0, swarm_clock=own), [own] + heard).swarm_clock >= own


def test_propose_fresh_round():
    st0 = GnomeState(3)
    st1, ann, prop = propose(st0, b"go", 4, pid=11)
    assert ann.alpha == Radius(0) and ann.pid == 11 and ann.sender == 3
    assert prop.nominal_turn == 0 and prop.rank_key == (0, 3, 11)
    assert st1.active == {11: Radius(0)}


def test_propose_while_busy_is_refused():
    st1, _, _ = propose(GnomeState(0), b"a", 4, pid=1)
    with pytest.raises(ProtocolError):
        propose(st1, b"b", 4, pid=2)


def test_propose_refused_while_confused_or_joining():
    with pytest.raises(ProtocolError):
        propose(GnomeState(0, confused=True), b"", 3)
    with pytest.raises(ProtocolError):
        propose(GnomeState(0, join_pending=True), b"", 3)


def test_propose_after_confusion_timeout_opens_new_round():
    cfg = pc.StepConfig(d=2)
    st1, _, _ = propose(GnomeState(0), b"", 2, pid=1)
    props = {1: Proposal(1, 0, 0, 0), 2: Proposal(2, 1, 0, 1)}
    st1, ev = pc.step(st1, [Announce(1, 2, Radius(0), 0, 0, 0)], [1], props, cfg)
    assert st1.confused and ev.newly_confused
    for _ in range(cfg.timeout):
        if not st1.confused:
            break
        st1, _ = pc.step(st1, [], [1], props, cfg)
    assert not st1.confused and st1.round == 1
    st2, ann, prop = propose(st1, b"again", 2, pid=3)
    assert prop.round == 1 and ann.alpha == Radius(0)


def test_on_conflict_modes():
    base = GnomeState(0, active={1: Radius(2), 2: Radius(0)})
    assert on_conflict(base, [1, 2]).confused
    assert not on_conflict(base, [1, 1]).confused
    props = {1: Proposal(1, 0, 3, 0), 2: Proposal(2, 5, 1, 5)}
    ranked = on_conflict(base, [1, 2], proposals=props, mode=Mode.RANKED)
    assert not ranked.confused and set(ranked.active) == {2}


def test_announce_rejects_unaware_and_round_trips():
    with pytest.raises(ValueError):
        Announce(0, 1, UNAWARE, 0)
    a = Announce(4, 9, Radius(3), 12)
    assert a.csv_row() == "12,4,9,3"
    assert Announce.from_csv_row(a.csv_row()) == a
    c = Announce(4, None, CONFUSED, 2)
    assert c.csv_row() == "2,4,,C"


def ann(alpha, pid=1, rnd=0):
    return Announce(7, pid, alpha, 0, rnd)


def test_sanity_rule_examples():
    assert check_sanity(7, ann(Radius(3)), ann(Radius(2)), Radius(5), 1) == 1
    assert check_sanity(7, ann(Radius(2)), ann(Radius(2)), Radius(2), 3) == 2
    assert check_sanity(7, ann(Radius(1)), ann(Radius(3)), Radius(1), 1) == 3
    assert check_sanity(7, ann(Radius(1), pid=1), ann(Radius(2), pid=2), Radius(5), 1) == 4
    assert check_sanity(7, ann(Radius(1)), ann(Radius(2)), Radius(5), 1, conflict_told=True) == 5


def test_sanity_quiet_cases():
    assert check_sanity(7, None, ann(Radius(0)), UNAWARE, 0) is None
    assert check_sanity(7, ann(Radius(2)), ann(Radius(3)), Radius(2), 1) is None
    # a stalled value is fine when nothing is circulating
    assert check_sanity(7, ann(Radius(2)), ann(Radius(2)), Radius(2), 5, active=False) is None
    # ranked takeover and completed rounds are legitimate switches
    assert check_sanity(7, ann(Radius(1), pid=1), ann(Radius(0), pid=2), Radius(5), 1, switch_ok=True) is None
    assert check_sanity(7, ann(Radius(1), pid=1), ann(Radius(0), pid=2), Radius(5), 1, prev_completed=True) is None


def test_sanity_reports_lowest_rule():
    # backtrack and jump-too-far at once: rule 1 wins
    assert check_sanity(7, ann(Radius(9)), ann(Radius(8)), Radius(1), 1) == 1
