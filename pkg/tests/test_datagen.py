import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from prmscale.datagen import (ANCHOR, EXPERT, AnchorTupleSampler, DegenerateTupleError,
                              NoiseConfig, adaptive_sigma, deviation_stats, deviation_table, gt_direction,
                              halfspace_project, make_anchor, make_tuple, rank_pairs, rmse_distance,
                              split_episode_ids)
from prmscale.env import Action
from prmscale.numeric.rng import RngStream

vec2 = st.tuples(st.floats(-1, 1), st.floats(-1, 1)).map(np.array)


def test_make_anchor_zero_sigma():
    a_e = Action([0.1, -0.2], 1)
    assert make_anchor(a_e, NoiseConfig(sigma_base=0.0, sigma_min=0.0), RngStream(0)) == a_e


def test_make_anchor_spread_oracle():
    gen = RngStream(3, "anchor").generator
    a_e = Action(np.zeros(6), -1)
    d = np.array([make_anchor(a_e, NoiseConfig(), gen).pose for _ in range(100_000)])
    assert np.all(np.abs(d.std(axis=0) / 0.1 - 1) < 0.03)


def test_anchor_keeps_gripper():
    a_e = Action([0.0, 0.0], 1)
    assert all(make_anchor(a_e, NoiseConfig(), RngStream(i)).gripper == 1.0 for i in range(10))


def test_gt_direction_examples():
    u, deg = gt_direction(Action([1, 0], 1), Action([0, 0], 1))
    assert np.allclose(u, [1, 0]) and not deg
    u, _ = gt_direction(Action([0, 0], 1), Action([3, 4], 1))
    assert np.allclose(u, [-0.6, -0.8])
    _, deg = gt_direction(Action([0.2, 0.2], 1), Action([0.2, 0.2], 1))
    assert deg


def test_rmse_examples():
    assert rmse_distance(np.full(6, 0.1), np.zeros(6)) == pytest.approx(0.1)
    assert rmse_distance(np.ones(2), np.ones(2)) == 0.0
    assert rmse_distance(np.array([0.3, 0.4]), np.zeros(2)) == pytest.approx(np.sqrt(0.125))


def test_adaptive_sigma_examples():
    cfg = NoiseConfig()
    assert adaptive_sigma(0.05, cfg) == pytest.approx(0.05)
    assert adaptive_sigma(0.5, cfg) == 0.1
    assert adaptive_sigma(0.001, cfg) == 0.01


@given(st.floats(0, 10))
def test_adaptive_sigma_in_band(d0):
    cfg = NoiseConfig()
    assert cfg.sigma_min <= adaptive_sigma(d0, cfg) <= cfg.sigma_base


def test_halfspace_examples():
    u = np.array([1.0, 0.0])
    assert np.array_equal(halfspace_project([-0.3, 0.2], u, "better"), [0.3, -0.2])
    assert np.array_equal(halfspace_project([0.3, 0.2], u, "better"), [0.3, 0.2])
    assert np.array_equal(halfspace_project([0.0, 0.2], u, "better"), [0.0, -0.2])
    assert np.array_equal(halfspace_project([0.0, 0.2], u, "worse"), [0.0, -0.2])
    with pytest.raises(ValueError):
        halfspace_project([0.1, 0.1], u, "sideways")


@given(vec2, st.floats(0, 2 * np.pi))
def test_halfspace_preserves_norm_and_side(eps, theta):
    u = np.array([np.cos(theta), np.sin(theta)])
    b = halfspace_project(eps, u, "better")
    w = halfspace_project(eps, u, "worse")
    assert np.linalg.norm(b) == np.linalg.norm(eps) == np.linalg.norm(w)
    if eps @ u != 0:
        assert b @ u > 0 and w @ u < 0


def test_rank_pairs_consistency():
    pairs = rank_pairs(np.array([0.2, 0.1, 0.3]))
    assert set(pairs) == {(1, 0), (0, 2), (1, 2), (3, 0), (3, 1), (3, 2)}
    assert rank_pairs(np.array([0.2, 0.1, 0.3]), include_expert=False) == [(0, 2), (1, 0), (1, 2)]
    # ties produce no pair
    assert (0, 1) not in rank_pairs(np.array([0.1, 0.1, 0.3])) and (1, 0) not in rank_pairs(np.array([0.1, 0.1, 0.3]))


def _reference_tuple(a_e, cfg, gen):
    """Scalar re-derivation from the primitives with the same draws as the vectorized sampler."""
    noise = gen.standard_normal((1, 3, a_e.d_dir))[0]
    anc = a_e.pose + cfg.sigma_base * noise[0]
    u, _ = gt_direction(a_e, anc)
    sig = adaptive_sigma(rmse_distance(anc, a_e), cfg)
    better = anc + halfspace_project(sig * noise[1], u, "better")
    worse = anc + halfspace_project(sig * noise[2], u, "worse")
    dists = np.array([rmse_distance(p, a_e) for p in (anc, better, worse)])
    return anc, better, worse, rank_pairs(dists)


@pytest.mark.parametrize("d_dir", [2, 6])
def test_make_tuple_matches_scalar_reference(d_dir):
    for seed in range(50):
        a_e = Action(np.random.default_rng(seed).normal(0, 0.1, d_dir), 1)
        t = make_tuple(None, a_e, NoiseConfig(), RngStream(seed, "t").generator)
        anc, better, worse, pairs = _reference_tuple(a_e, NoiseConfig(), RngStream(seed, "t").generator)
        assert np.allclose(t.a_anc.pose, anc, rtol=0, atol=1e-15)
        assert np.allclose(t.a_better.pose, better, rtol=0, atol=1e-15)
        assert np.allclose(t.a_worse.pose, worse, rtol=0, atol=1e-15)
        assert sorted(t.pairs) == sorted(pairs)


def test_make_tuple_invariants():
    gen = RngStream(1, "inv").generator
    for _ in range(500):
        a_e = Action(gen.normal(0, 0.1, 2), -1)
        t = make_tuple(None, a_e, NoiseConfig(), gen)
        u = t.u_gt[ANCHOR]
        assert (t.a_better.pose - t.a_anc.pose) @ u > 0
        assert (t.a_worse.pose - t.a_anc.pose) @ u < 0
        assert all(a.gripper == a_e.gripper for a in t.actions)
        d = [rmse_distance(a, a_e) for a in t.actions]
        for i, j in t.pairs:
            assert d[i] < d[j] and (j, i) not in t.pairs
        for k, a in enumerate((t.a_anc, t.a_better, t.a_worse)):
            assert np.allclose(t.u_gt[k], gt_direction(a_e, a)[0])


def test_all_zero_noise_rejected():
    with pytest.raises(DegenerateTupleError):
        make_tuple(None, Action([0.1, 0.1], 1), NoiseConfig(sigma_base=0.0, sigma_min=0.0), RngStream(0))


def test_sampler_is_deterministic(episodes):
    a = AnchorTupleSampler(seed=4).fit(episodes).transform(episodes)
    b = AnchorTupleSampler(seed=4).fit(episodes).transform(episodes)
    assert np.array_equal(a.actions, b.actions) and np.array_equal(a.refs, b.refs)
    c = AnchorTupleSampler(seed=5).fit(episodes).transform(episodes)
    assert not np.array_equal(a.actions[:5], c.actions[:5])


def test_sampler_subsample_fraction(episodes):
    ds = AnchorTupleSampler(subsample=0.2, tuples_per_step=1).fit(episodes).transform(episodes)
    steps = sum(len(e) for e in episodes)
    assert 0.1 * steps < len(np.unique(ds.refs, axis=0)) < 0.3 * steps


def test_sampler_dataset_structure(episodes):
    ds = AnchorTupleSampler(subsample=1.0).fit(episodes).transform(episodes, [0, 1])
    assert set(ds.refs[:, 0]) <= {0, 1}
    for i in range(len(ds)):
        e, s = ds.refs[i]
        assert np.array_equal(ds.actions[i, EXPERT], episodes[e].expert_actions[s].as_vector())
        assert np.array_equal(ds.grids[ds.obs_index[i]], episodes[e].observations[s].grid)


def test_sampler_estimator_params():
    s = AnchorTupleSampler(sigma_base=0.2, seed=3)
    assert s.get_params()["sigma_base"] == 0.2
    assert s.set_params(k=2.0).k == 2.0


def test_split_disjoint_and_stable():
    tr, va = split_episode_ids(1000, 0)
    assert not set(tr) & set(va) and len(tr) + len(va) == 1000
    assert 50 < len(va) < 150
    assert split_episode_ids(1000, 0) == (tr, va)


def test_deviation_stats_zero_gap():
    acts = [Action([0.1, 0.2], 1), Action([-0.1, 0.0], -1)]
    s = deviation_stats(acts, acts)
    assert np.all(s["mean"] == 0) and np.all(s["std"] == 0) and s["dist_max"] == 0


def test_deviation_stats_oracle():
    gen = RngStream(0, "dev").generator
    delta = 0.05 * gen.standard_normal((100_000, 2))
    s = deviation_stats(delta, np.zeros_like(delta))
    assert np.all(np.abs(s["std"] / 0.05 - 1) < 0.03)
    table = deviation_table(s)
    assert table[0] == ["quantity", "axis0", "axis1"] and len(table) == 8


def test_deviation_stats_empty():
    with pytest.raises(ValueError):
        deviation_stats([], [])
