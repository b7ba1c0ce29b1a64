import numpy as np
import pytest

from gnomeswarm import adversary as adv
from gnomeswarm.adversary import ChurnError, ChurnScript, JokerScript
from gnomeswarm.checks import random_topology
from gnomeswarm.protocol import CONFUSED_CODE, Mode
from gnomeswarm.sim_sync import Scenario, run
from gnomeswarm.topology import bfs_distances, generate, k_neighborhood

PATH6 = generate("path", 6, 5)


def honest(topo, p=0, **kw):
    return Scenario(topo, [(p, 0, b"")], **kw)


def reach_avoiding(topo, src, banned):
    seen, todo = {src}, [src]
    while todo:
        for v in topo.neighbors(todo.pop()).tolist():
            if v != banned and v not in seen:
                seen.add(v)
                todo.append(v)
    return seen


def test_confuse_precludes_consensus():
    res = run(adv.inject_confuse(honest(PATH6, max_turns=30), 5, 2))
    assert res.outcome == "confused" and not res.acted
    confused_turn = {}
    for tr in res.traces:
        for g in np.flatnonzero(tr.alpha == CONFUSED_CODE):
            confused_turn.setdefault(int(g), tr.turn)
    assert set(confused_turn) >= set(res.honest)
    assert max(confused_turn.values()) <= 2 + 5


def test_confuse_ranked_keeps_earlier_proposal():
    res = run(adv.inject_confuse(honest(PATH6, mode=Mode.RANKED), 5, 2))
    assert res.outcome == "consensus"
    assert {pid for pid, _ in res.acted.values()} == {1}


def test_retry_round_completes_within_2d():
    res = run(adv.inject_confuse(honest(PATH6, retry=True), 5, 2))
    assert res.outcome == "consensus"
    rnd, start, done = res.rounds[-1]
    assert rnd >= 1 and done is not None and done - start <= 2 * 5


def test_confusion_safety_sweep():
    # a gnome k hops from the joker is confused by turn t_c + k; it acts only
    # if consensus turn T comes first
    rng = np.random.default_rng(3)
    blocked = 0
    for _ in range(80):
        topo, _ = random_topology(rng, 40, n_min=3)
        d = topo.d_bound
        p, j = (int(x) for x in rng.choice(topo.n, 2, replace=False))
        T = run(honest(topo, p)).consensus_turn
        t_c = int(rng.integers(0, T))
        res = run(adv.inject_confuse(honest(topo, p, max_turns=6 * d, stop_at_consensus=False), j, t_c))
        dist = bfs_distances(topo, j)
        assert len({pid for pid, _ in res.acted.values()}) <= 1
        assert set(res.acted) == {g for g in res.honest if t_c + dist[g] > T}
        assert all(t == T for _, t in res.acted.values())
        if t_c + dist.max() <= T:
            blocked += 1
            ever = set().union(*(np.flatnonzero(tr.alpha == CONFUSED_CODE).tolist() for tr in res.traces))
            assert reach_avoiding(topo, p, j) <= ever
    assert blocked > 20


def test_fool_partition_and_monotonicity():
    d = 5
    res = run(adv.inject_fool(honest(PATH6, stop_at_consensus=False, max_turns=3 * d), 5, d + 1))
    acting, fooled = adv.fooled_partition(res, [5])
    assert acting and fooled and acting | fooled == {0, 1, 2, 3, 4}
    sizes = []
    for t_f in range(d, 2 * d + 1):
        r = run(adv.inject_fool(honest(PATH6, stop_at_consensus=False, max_turns=3 * d), 5, t_f))
        sizes.append(len(adv.fooled_partition(r, [5])[1]))
    assert sizes == sorted(sizes, reverse=True)
    assert sizes[-1] == 0


def test_trick_stays_inside_ripple():
    topo = generate("grid", 16, 6)
    d = 6
    base = run(honest(topo, stop_at_consensus=False, max_turns=4 * d))
    for t_t in range(2 * d, 3 * d + 2):
        res = run(adv.inject_trick(honest(topo, stop_at_consensus=False, max_turns=4 * d), 15, t_t))
        assert set(res.acted) == set(base.acted) - {15}
        assert all(res.acted[g] == base.acted[g] for g in res.acted)
        tricked = adv.divergence(res, base, 3 * d)
        assert tricked <= k_neighborhood(topo, 15, max(3 * d - t_t, -1))


def test_ripple_bound_all_strategies():
    rng = np.random.default_rng(11)
    for i in range(40):
        topo, _ = random_topology(rng, 40, n_min=3)
        d = topo.d_bound
        p, j = (int(x) for x in rng.choice(topo.n, 2, replace=False))
        strat = ["confuse", "fool", "trick", "backdate"][i % 4]
        t_x = int(rng.integers(0, 2 * d))
        sc = honest(topo, p, stop_at_consensus=False, max_turns=4 * d)
        base = run(sc)
        res = run(adv._with_joker(sc, JokerScript(j, strat, t_x, 2)))
        for k in range(0, 4 * d - t_x):
            assert adv.divergence(res, base, t_x + k) <= k_neighborhood(topo, j, k)


def test_backdate_beyond_d_expelled_on_first_contact():
    topo = generate("ring", 10, 5)
    sc = honest(topo, mode=Mode.RANKED, backdate_guard=True, sanity="expel")
    res = run(adv.inject_backdate(sc, 5, 2, 6))
    by_turn = {(t, g) for t, g, v, why in res.expulsions if v == 5 and why == "backdate"}
    assert by_turn == {(3, 4), (3, 6)}
    assert all(pid == 1 for pid, _ in res.acted.values()) and res.outcome == "consensus"


@pytest.mark.parametrize("offset", [1, 3, 5])
def test_backdate_within_d_never_acted(offset):
    sc = honest(PATH6, mode=Mode.RANKED, backdate_guard=True, max_turns=40, stop_at_consensus=False)
    res = run(adv.inject_backdate(sc, 5, 3, offset))
    bogus = max(res.proposals)
    assert res.proposals[bogus].proposer == 5
    assert all(pid != bogus for pid, _ in res.acted.values())
    assert not res.expulsions


def test_backdate_zero_is_a_plain_confuse():
    a = run(adv.inject_backdate(honest(PATH6, max_turns=30), 5, 2, 0))
    b = run(adv.inject_confuse(honest(PATH6, max_turns=30), 5, 2))
    assert a.alpha_matrix().tolist() == b.alpha_matrix().tolist()


def test_merry_single_proposal_matches_plain():
    topo = generate("small-world", 30, 6, seed=2)
    plain = run(honest(topo, 4))
    merry = run(honest(topo, 4, mode=Mode.MERRY))
    assert merry.consensus_turn == plain.consensus_turn


def test_merry_opposite_ends_unanimous():
    topo = generate("path", 7, 6)
    res = run(Scenario(topo, [(0, 0, b"a"), (6, 0, b"b")], mode=Mode.MERRY), keep_announces=True)
    assert res.outcome == "consensus"
    assert len({pid for pid, _ in res.acted.values()}) == 1
    chosen = adv.merry_resolve(adv.merry_views(res, 6), res.proposals)
    assert {chosen[g] for g in range(7)} == {res.acted[0][0]}


def test_merry_late_second_loses():
    topo = generate("ring", 12, 6)
    res = run(Scenario(topo, [(0, 0, b"a"), (6, 13, b"b")], mode=Mode.MERRY, max_turns=40))
    assert {pid for pid, _ in res.acted.values()} == {1}


def test_merry_unanimity_sweep():
    rng = np.random.default_rng(5)
    for _ in range(100):
        topo, _ = random_topology(rng, 60, n_min=2)
        d = topo.d_bound
        a, b = (int(x) for x in rng.choice(topo.n, 2, replace=False))
        sc = Scenario(topo, [(a, 0, b"a"), (b, int(rng.integers(0, d + 1)), b"b")], mode=Mode.MERRY,
                      ranks={g: int(x) for g, x in enumerate(rng.permutation(topo.n))})
        res = run(sc)
        assert res.outcome == "consensus"
        assert len({pid for pid, _ in res.acted.values()}) == 1


def test_churn_join_is_ignored_until_next_round():
    topo = generate("ring", 8, 6)
    base = run(honest(topo))
    res = run(honest(topo, churn=ChurnScript([(2, 8, "join", [3, 4])])))
    assert res.consensus_turn == base.consensus_turn
    assert 8 not in res.acted


def test_churn_leaf_leaves_mid_round():
    topo = generate("star", 8, 2)
    res = run(honest(topo, 0, churn=ChurnScript([(1, 7, "leave")])))
    assert res.outcome == "consensus" and res.consensus_turn <= 2 * 2
    assert 7 not in res.acted


def test_churn_breaking_bound_rejected():
    with pytest.raises(ChurnError, match="exceeds"):
        run(honest(generate("ring", 8, 5), churn=ChurnScript([(3, 6, "leave")])))
    with pytest.raises(ChurnError):
        run(honest(generate("path", 4, 3), churn=ChurnScript([(1, 1, "leave")])))


RULE_SCRIPTS = {
    1: (PATH6, [(0, 0, b"")], JokerScript(3, "custom", 0, 0, ((6, "honest", "0"),))),
    2: (PATH6, [(0, 0, b"")], JokerScript(3, "custom", 0, 0, ((5, "honest", "1"), (6, "honest", "1"),
                                                             (7, "honest", "1")))),
    3: (PATH6, [(0, 0, b"")], JokerScript(3, "custom", 0, 0, ((4, "honest", "4"),))),
    4: (PATH6, [(0, 0, b"")], JokerScript(3, "custom", 0, 0, ((5, "bogus", "0"),))),
    # both ends propose, the middle joker keeps raising one pid after being told of the conflict
    5: (generate("path", 5, 4), [(0, 0, b""), (4, 0, b"")],
        JokerScript(2, "custom", 0, 0, tuple((t, "1", str(t - 2)) for t in range(2, 8)))),
}


@pytest.mark.parametrize("rule", sorted(RULE_SCRIPTS))
def test_each_rule_fires_on_its_script(rule):
    topo, props, js = RULE_SCRIPTS[rule]
    res = run(Scenario(topo, props, jokers=[js], sanity="log", stop_at_consensus=False, max_turns=10))
    assert any(v[3] == rule and v[2] == js.joker for v in res.violations)
    # logging alone lets a stall spread to honest neighbors; the joker is still caught first
    assert min(res.violations)[2] == js.joker


@pytest.mark.parametrize("rule", sorted(RULE_SCRIPTS))
def test_expel_mode_drops_violator(rule):
    topo, props, js = RULE_SCRIPTS[rule]
    res = run(Scenario(topo, props, jokers=[js], sanity="expel", stop_at_consensus=False, max_turns=10))
    assert any(v[3] == rule for v in res.violations)
    assert res.expulsions and {e[2] for e in res.expulsions} == {js.joker}
    assert {v[2] for v in res.violations} == {js.joker}


def test_expulsions_only_hit_jokers():
    rng = np.random.default_rng(0)
    strategies = ["confuse", "fool", "trick", "backdate", "stubborn"]
    for i in range(120):
        topo, _ = random_topology(rng, 40, n_min=3)
        d = topo.d_bound
        p, j = (int(x) for x in rng.choice(topo.n, 2, replace=False))
        js = JokerScript(j, strategies[i % 5], int(rng.integers(0, 3 * d)), int(rng.integers(0, d + 3)))
        mode = [Mode.PLAIN, Mode.RANKED, Mode.MERRY][int(rng.integers(3))]
        res = run(Scenario(topo, [(p, 0, b"")], jokers=[js], sanity="expel", mode=mode, backdate_guard=True,
                           retry=bool(rng.integers(2)), max_turns=6 * d + 6))
        assert {e[2] for e in res.expulsions} <= {j}
        assert {v[2] for v in res.violations} <= {j}


def test_honest_object_runs_raise_no_violations():
    rng = np.random.default_rng(1)
    for i in range(90):
        topo, _ = random_topology(rng, 40, n_min=3)
        d = topo.d_bound
        mode = [Mode.PLAIN, Mode.RANKED, Mode.MERRY][i % 3]
        k = 1 if mode == Mode.PLAIN else 2
        props = [(int(g), int(rng.integers(0, d)), b"") for g in rng.choice(topo.n, k, replace=False)]
        res = run(Scenario(topo, props, sanity="log", mode=mode, retry=True, max_turns=4 * d,
                           stop_at_consensus=False))
        assert res.violations == []


def test_vectorised_audit_on_honest_traces():
    rng = np.random.default_rng(2)
    for _ in range(40):
        topo, _ = random_topology(rng, 300)
        res = run(honest(topo, int(rng.integers(topo.n)), stop_at_consensus=False, max_turns=3 * topo.d_bound))
        assert adv.audit_trace(res, topo) == []


def test_violations_csv():
    assert adv.violations_csv([(4, 2, 3, 3)]) == "turn,detector,violator,rule\n4,2,3,3\n"
