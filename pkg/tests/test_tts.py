import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from prmscale.env import Action, Degradation, EnvConfig, base_policy_sample, expert_action, observe, reset
from prmscale.numeric.rng import RngStream
from prmscale.tts import (EVAL_COLUMNS, OracleScorer, TtsConfig, binomial_ci, eval_rows, expand_guided,
                          expand_random, gripper_vote, guided_candidate, pooled_se, run_episode, run_eval,
                          select_action)


def _angle(v, u):
    c = v @ u / (np.linalg.norm(v) * np.linalg.norm(u))
    return math.acos(max(-1.0, min(1.0, c)))


def _streams(seed=0, step=0):
    root = RngStream(seed, "tts-test")
    return lambda j: root.substream(0, step, j)


@pytest.fixture
def state():
    return reset(RngStream(2, "tts-state").generator)


def _policy(state):
    return lambda g: base_policy_sample(state, g, Degradation())


class ConstantScorer:
    """Every candidate gets the same reward; counts calls."""

    d_dir = 2

    def __init__(self):
        self.encodes = 0

    def pre_encode(self, obs, stamp=None):
        self.encodes += 1
        return object()

    def score_arrays(self, cache, actions, stamp=None):
        n = len(actions)
        u = np.tile([1.0, 0.0], (n, 1))
        return np.zeros(n), u, np.zeros(n, dtype=bool)


class ExplodingScorer(ConstantScorer):
    def pre_encode(self, obs, stamp=None):
        raise AssertionError("scorer must not be called")


def test_config_validation():
    assert TtsConfig(N=2, M=4, mode="dg").mode == "direction_guided"
    assert TtsConfig(N=2, M=6, mode="none").M == 0
    assert TtsConfig(N=4, M=12, mode="random").K == 16
    for bad in (dict(N=0), dict(M=-1, mode="random"), dict(N=3, M=4, mode="random"), dict(alpha=0.0),
                dict(alpha=4.0), dict(sigma_exp=-0.1), dict(mode="beam")):
        with pytest.raises(ValueError):
            TtsConfig(**bad)


def test_guided_candidate_examples():
    a = guided_candidate(Action([0, 0], 1), np.array([1.0, 0.0]), np.array([0.0, 1.0]), math.pi / 4,
                         0.1 * math.sqrt(2))
    assert np.allclose(a.pose, [0.1, 0.1], atol=1e-15) and a.gripper == 1
    u = np.array([0.6, 0.8])
    b = guided_candidate(Action([0.2, -0.1], -1), u, np.array([0.8, -0.6]), 0.0, 0.05)
    assert np.array_equal(b.pose, np.array([0.2, -0.1]) + 0.05 * u)


@pytest.mark.parametrize("d", [2, 6])
@pytest.mark.parametrize("alpha", [math.pi / 6, math.pi / 3, math.pi])
def test_guided_expansion_angle_bound(d, alpha):
    gen = RngStream(d, "cone").generator
    u = gen.standard_normal(d)
    u /= np.linalg.norm(u)
    a_p = Action(gen.normal(0, 0.1, d), 1)
    cfg = TtsConfig(N=1, M=1, alpha=alpha, mode="dg")
    cands = expand_guided(a_p, u, cfg, gen, n=20_000 if alpha != math.pi / 3 else 100_000)
    delta = np.stack([c.pose for c in cands]) - a_p.pose
    nz = np.linalg.norm(delta, axis=1) > 0
    cos = delta[nz] @ u / np.linalg.norm(delta[nz], axis=1)
    assert np.all(np.arccos(np.clip(cos, -1, 1)) <= alpha + 1e-9)
    assert all(c.gripper == 1 for c in cands)


def test_guided_expansion_degenerate_projection():
    # in one dimension nothing is orthogonal to u: the fallback is theta = 0
    cands = expand_guided(Action([0.3], -1), np.array([-1.0]), TtsConfig(N=1, M=3, mode="dg"), RngStream(0))
    assert all(c.pose[0] <= 0.3 for c in cands)


def test_guided_expansion_validation():
    with pytest.raises(ValueError):
        expand_guided(Action([0, 0], 1), np.array([1.0, 1.0]), TtsConfig(N=1, M=1, mode="dg"), RngStream(0))
    zero = TtsConfig(N=1, M=4, sigma_exp=0.0, mode="dg")
    assert all(c == Action([0.1, 0.2], 1) for c in expand_guided(Action([0.1, 0.2], 1), np.array([1.0, 0]),
                                                                  zero, RngStream(0)))


def test_random_expansion_oracle():
    cfg = TtsConfig(N=1, M=1, mode="random")
    a_p = Action([0.05, -0.02], -1)
    cands = expand_random(a_p, cfg, RngStream(4, "iso"), n=100_000)
    delta = np.stack([c.pose for c in cands]) - a_p.pose
    assert np.all(np.abs(delta.std(axis=0) / 0.1 - 1) < 0.03)
    fixed = np.array([0.6, -0.8])
    assert abs(np.mean(delta @ fixed / np.linalg.norm(delta, axis=1))) < 0.01
    assert all(c.gripper == -1 for c in cands[:100])
    zero = TtsConfig(N=1, M=3, sigma_exp=0.0, mode="random")
    assert all(c == a_p for c in expand_random(a_p, zero, RngStream(0)))


def test_gripper_vote_examples():
    A = lambda g: Action([0.0, 0.0], g)  # noqa: E731
    assert gripper_vote([A(1), A(1), A(-1)]) == 1
    assert gripper_vote([A(-1)]) == -1
    assert gripper_vote([A(1), A(-1)]) == 1
    assert gripper_vote([A(-1), A(1)]) == -1
    assert gripper_vote([A(0.3), A(-0.2), A(-0.7)]) == -1
    with pytest.raises(ValueError):
        gripper_vote([])


def test_single_proposal_is_returned_unscored(state):
    obs = observe(state)
    a, cs, timing = select_action(obs, _policy(state), ExplodingScorer(), TtsConfig(), _streams())
    assert a == base_policy_sample(state, _streams()(0), Degradation())
    assert len(cs) == 1 and timing["score"] == 0.0


@pytest.mark.parametrize("mode", ["random", "dg"])
def test_candidate_set_structure(state, mode):
    obs = observe(state)
    scorer = OracleScorer().for_state(state)
    cfg = TtsConfig(N=4, M=12, mode=mode)
    a, cs, timing = select_action(obs, _policy(state), scorer, cfg, _streams())
    raw = [base_policy_sample(state, _streams()(j), Degradation()) for j in range(4)]
    vote = gripper_vote(raw)
    assert len(cs) == cfg.K == len(cs.rewards)
    assert cs.tags[:4] == [("policy", j) for j in range(4)]
    assert all(np.array_equal(cs.actions[j].pose, raw[j].pose) for j in range(4))
    assert all(c.gripper == vote for c in cs.actions) and a.gripper == vote
    assert set(timing) >= {"propose", "encode", "score", "expand", "total"}


@given(st.integers(0, 10_000), st.sampled_from([(1, 3), (2, 6), (4, 12), (8, 0)]),
       st.sampled_from(["random", "dg", "none"]))
def test_oracle_argmax_is_never_dominated(seed, nm, mode):
    s = reset(RngStream(seed, "dom").generator)
    scorer = OracleScorer().for_state(s)
    cfg = TtsConfig(N=nm[0], M=nm[1], mode=mode)
    a, cs, _ = select_action(observe(s), _policy(s), scorer, cfg, _streams(seed))
    e = scorer.expert.pose
    dist = [math.sqrt(np.mean((c.pose - e) ** 2)) for c in cs.actions]
    assert math.sqrt(np.mean((a.pose - e) ** 2)) <= min(dist)


def test_guided_expansions_follow_predicted_direction(state):
    scorer = OracleScorer().for_state(state)
    cfg = TtsConfig(N=2, M=10, mode="dg", alpha=math.pi / 6)
    _, cs, _ = select_action(observe(state), _policy(state), scorer, cfg, _streams())
    for a, tag, in zip(cs.actions, cs.tags):
        if tag[0] == "expansion":
            base = cs.actions[tag[1]]
            assert _angle(a.pose - base.pose, cs.directions[tag[1]]) <= math.pi / 6 + 1e-9


def test_ties_go_to_first_proposal(state):
    a, cs, _ = select_action(observe(state), _policy(state), ConstantScorer(), TtsConfig(N=4, M=8, mode="random"),
                             _streams())
    assert a is cs.actions[0]


def test_one_encode_per_step(state):
    sc = ConstantScorer()
    select_action(observe(state), _policy(state), sc, TtsConfig(N=4, M=12, mode="dg"), _streams())
    assert sc.encodes == 1


def test_selection_is_deterministic(state):
    scorer = OracleScorer().for_state(state)
    cfg = TtsConfig(N=4, M=12, mode="dg")
    a1, c1, _ = select_action(observe(state), _policy(state), scorer, cfg, _streams(7))
    a2, c2, _ = select_action(observe(state), _policy(state), scorer, cfg, _streams(7))
    assert a1 == a2 and c1.actions == c2.actions and np.array_equal(c1.rewards, c2.rewards)


def test_proposals_do_not_depend_on_expansion(state):
    scorer = OracleScorer().for_state(state)
    sets = [select_action(observe(state), _policy(state), scorer, TtsConfig(N=4, M=m, mode=mode), _streams())[1]
            for m, mode in ((0, "none"), (4, "random"), (12, "dg"))]
    for cs in sets[1:]:
        assert cs.actions[:4] == sets[0].actions[:4]


def test_dimension_mismatch_rejected(state):
    six = OracleScorer(Action(np.zeros(6), 1))
    with pytest.raises(ValueError):
        select_action(observe(state), _policy(state), six, TtsConfig(N=2, M=2, mode="random"), _streams())


def test_mode_none_ignores_m():
    oracle = OracleScorer()
    runs = [run_episode(oracle, TtsConfig(N=2, M=m, mode="none"), 3, seed=1) for m in (0, 4, 8)]
    assert all(r[:2] == runs[0][:2] for r in runs)
    assert all(np.array_equal(s.agent, t.agent) for r in runs for s, t in zip(r[2], runs[0][2]))


def test_run_eval_errors_and_rows():
    with pytest.raises(ValueError):
        run_eval(OracleScorer(), [TtsConfig()], episodes=0)
    with pytest.raises(ValueError):
        run_eval(OracleScorer(), [], episodes=2)
    cells = run_eval(OracleScorer(), [TtsConfig(), TtsConfig(N=2, M=2, mode="random")], episodes=3, seed=0)
    rows = eval_rows(cells)
    assert len(rows) == 2 and all(len(r) == len(EVAL_COLUMNS) for r in rows)
    for c in cells:
        assert 0 <= c.ci[0] <= c.rate <= c.ci[1] <= 1


def test_wilson_interval_oracle():
    # closed-form Wilson score interval at z = 1.959963984540054
    z = 1.959963984540054
    for k, n in ((0, 10), (7, 20), (120, 200), (200, 200)):
        p = k / n
        c = (p + z * z / (2 * n)) / (1 + z * z / n)
        h = z / (1 + z * z / n) * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
        lo, hi = binomial_ci(k, n)
        assert lo == pytest.approx(c - h, abs=1e-9) and hi == pytest.approx(c + h, abs=1e-9)


def test_pooled_se():
    assert pooled_se(100, 200, 100, 200) == pytest.approx(math.sqrt(0.25 * 0.01))
    assert pooled_se(200, 200, 200, 200) == 0.0


def test_oracle_scorer_outputs():
    sc = OracleScorer(Action([0.1, 0.0], 1))
    r, u, deg = sc.score_arrays(sc.pre_encode(), [Action([0.1, 0.0], 1), Action([0.0, 0.0], 1)])
    assert r[0] == 0.0 and deg[0] and not deg[1]
    assert np.allclose(u[1], [1, 0]) and r[1] == pytest.approx(-0.1 / math.sqrt(2))
    with pytest.raises(ValueError):
        OracleScorer().pre_encode()
    s = reset(RngStream(0).generator)
    assert OracleScorer().for_state(s).expert == expert_action(s, EnvConfig())
