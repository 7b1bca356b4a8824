"""End-to-end acceptance checks.

Each test prints one ``criterion N: PASS|FAIL`` line (also collected in the
terminal summary). The default verifier is trained once per session at the
default configuration, which takes several minutes on a single CPU core.
"""
import math
import time

import numpy as np
import pytest

from prmscale.bench import bench_cache
from prmscale.cli import main
from prmscale.datagen import AnchorTupleSampler, NoiseConfig, sample_tuple_arrays
from prmscale.env import (Degradation, Synth6dConfig, base_policy_sample, generate_expert_episodes, observe,
                          reset)
from prmscale.model import PrmConfig, PrmNetwork
from prmscale.numeric import autodiff as ad
from prmscale.numeric.rng import RngStream
from prmscale.pipeline import DataConfig, make_episodes, make_tuple_splits, train_verifier
from prmscale.training import TrainConfig, batch_losses, loss_dir, loss_rew, total_loss, validate
from prmscale.tts import OracleScorer, TtsConfig, pooled_se, run_eval, select_action

LN2 = math.log(2.0)
TRAIN_BUDGET_S = 20 * 60


@pytest.fixture
def record(request):
    def _record(n: int, ok: bool, detail: str):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        request.config.acceptance_lines.append(line)
        assert ok, line
    return _record


@pytest.fixture(scope="module")
def default_data():
    data = DataConfig()
    eps = make_episodes(data, seed=0)
    return make_tuple_splits(eps, data, seed=0)


@pytest.fixture(scope="module")
def default_run(default_data):
    dtr, dva = default_data
    t = time.perf_counter()
    net, hist = train_verifier(dtr, dva, PrmConfig(), TrainConfig(), seed=0)
    return net, hist, time.perf_counter() - t


@pytest.fixture(scope="module")
def ablation_run(default_data):
    dtr, dva = default_data
    return train_verifier(dtr, dva, PrmConfig(amplifier=False), TrainConfig(), seed=0)


def _expert_poses(n, d, gen):
    if d == 2:
        return gen.uniform(-0.1, 0.1, (n, 2))
    return gen.standard_normal((n, 6)) * np.array(Synth6dConfig().scales)


def test_c01_halfspace_construction(record):
    t = time.perf_counter()
    bad, total = 0, 0
    for d in (2, 6):
        gen = RngStream(d, "acceptance-halfspace").generator
        pose_e = _expert_poses(100_000, d, gen)
        keep, poses, u, _, _ = sample_tuple_arrays(pose_e, NoiseConfig(), gen)
        ua = u[:, 0]
        bad += int(np.sum(np.einsum("nd,nd->n", poses[:, 1] - poses[:, 0], ua) <= 0))
        bad += int(np.sum(np.einsum("nd,nd->n", poses[:, 2] - poses[:, 0], ua) >= 0))
        total += keep.size
    dt = time.perf_counter() - t
    record(1, bad == 0 and total == 200_000 and dt < 30,
           f"{total} tuples (d_dir 2 and 6), {bad} half-space violations, {dt:.1f}s")


def test_c02_expectation_ordering(record):
    gen = RngStream(0, "acceptance-ordering").generator
    pose_e = _expert_poses(100_000, 2, gen)
    keep, poses, _, _, _ = sample_tuple_arrays(pose_e, NoiseConfig(), gen)
    rmse = np.sqrt(np.mean((poses - pose_e[keep][:, None]) ** 2, axis=2)).mean(axis=0)
    anc, better, worse = rmse
    record(2, better < anc < worse,
           f"mean rmse better={better:.5f} < anchor={anc:.5f} < worse={worse:.5f}")


def test_c03_gradient_fidelity(record, tuples):
    cfg = PrmConfig(hidden=16, n_layers=2, n_heads=2)
    tc = TrainConfig()
    worst = 0.0
    for draw in range(20):
        gen = np.random.default_rng(draw)
        net = PrmNetwork(cfg, seed=draw)
        for _, p in net.params.items():
            p.data = p.data + gen.normal(0, 0.1, p.data.shape)
        idx = gen.choice(len(tuples), size=4, replace=False)
        net.params.zero_grad()
        total_loss(net, tuples, idx, tc, clip=False)

        def f():
            with ad.no_grad():
                return float(batch_losses(net, tuples, idx, tc)[0].data)

        for _, p in net.params.items():
            coords = gen.choice(p.data.size, size=min(3, p.data.size), replace=False)
            num = ad.numerical_grad(f, p.data, h=1e-4, indices=coords)
            err = ad.relative_error(p.grad.reshape(-1)[coords], num.reshape(-1)[coords])
            worst = max(worst, float(err.max()))
    record(3, worst < 1e-3, f"max relative error {worst:.2e} over 20 draws (h=1e-4, float64)")


@pytest.mark.slow
def test_c04_cache_equivalence_and_speedup(record, default_run):
    net = default_run[0]
    gen = RngStream(0, "acceptance-cache").generator
    worst = 0.0
    for i in range(100):
        state = reset(gen)
        obs = observe(state)
        acts = np.concatenate([gen.uniform(-0.15, 0.15, (10, 2)), np.sign(gen.uniform(-1, 1, (10, 1)))], axis=1)
        r, u, _ = net.score_arrays(net.pre_encode(obs), acts)
        rf, uf, _ = net.forward_full(obs, acts)
        worst = max(worst, float(np.max(np.abs(r - rf))), float(np.max(np.abs(u - uf))))
    rep = bench_cache(net, observe(reset(gen)), counts=(10, 100, 1000), reps=5, warmup=2)
    s10, s1000 = rep.row(10).speedup, rep.row(1000).speedup
    ok = worst <= 1e-12 and s1000 > 3 and s1000 > s10
    record(4, ok, f"1000 pairs max |diff| {worst:.1e}; speedup x{s10:.2f} at 10, x{rep.row(100).speedup:.2f} "
                  f"at 100, x{s1000:.2f} at 1000 ({rep.hardware})")


@pytest.mark.slow
def test_c05_verifier_quality(record, default_run, default_data):
    net, hist, seconds = default_run
    rep = validate(net, default_data[1])
    ok = rep.pair_acc > 0.85 and rep.spearman < -0.7 and rep.cos_align > 0.7 and seconds <= TRAIN_BUDGET_S
    record(5, ok, f"pair_acc={rep.pair_acc:.4f} spearman={rep.spearman:.4f} cos={rep.cos_align:.4f} "
                  f"on {rep.n_tuples} held-out tuples; training {seconds / 60:.1f} min")


@pytest.mark.slow
def test_c06_tts_gain(record, default_run):
    net = default_run[0]
    cells = [TtsConfig(1, 0, mode="none"), TtsConfig(8, 0, mode="none"),
             TtsConfig(4, 12, mode="random"), TtsConfig(4, 12, mode="direction_guided")]
    n = 200
    base, bon, rnd, dg = run_eval(net, cells, n, seed=0)
    gap1, se1 = bon.rate - base.rate, pooled_se(bon.successes, n, base.successes, n)
    gap2, se2 = dg.rate - rnd.rate, pooled_se(dg.successes, n, rnd.successes, n)
    # supporting diagnostic, not part of the pass condition: per-step precision of the selected action
    root = RngStream(0, "acceptance-precision")
    err = {"random": [], "direction_guided": []}
    for t in range(300):
        state = reset(root.child("state").substream(t))
        expert = OracleScorer().for_state(state).expert
        policy = lambda g, s=state: base_policy_sample(s, g, Degradation())  # noqa: E731
        for mode in err:
            a, _, _ = select_action(observe(state), policy, net, TtsConfig(4, 12, mode=mode),
                                    lambda j, t=t: root.substream(t, 0, j))
            err[mode].append(math.sqrt(np.mean((a.pose - expert.pose) ** 2)))
    ok = gap1 > se1 and gap2 >= 0 and gap2 > se2
    record(6, ok, f"N=1 {base.rate:.3f}, best-of-8 {bon.rate:.3f} (gap {gap1:+.3f}, se {se1:.3f}); "
                  f"random(4,12) {rnd.rate:.3f}, guided(4,12) {dg.rate:.3f} (gap {gap2:+.3f}, se {se2:.3f}); "
                  f"mean steps random {rnd.mean_steps:.1f} vs guided {dg.mean_steps:.1f}; selected-action rmse "
                  f"random {np.mean(err['random']):.4f} vs guided {np.mean(err['direction_guided']):.4f}")


@pytest.mark.slow
def test_c07_oracle_sanity(record):
    trials, N = 10_000, 4
    ms = (0, 4, 8, 12, 16)
    root = RngStream(0, "acceptance-oracle")
    means = np.zeros(len(ms))
    dominated = 0
    for t in range(trials):
        state = reset(root.child("state").substream(t))
        scorer = OracleScorer().for_state(state)
        obs = observe(state)
        policy = lambda g, s=state: base_policy_sample(s, g, Degradation())  # noqa: E731
        for k, m in enumerate(ms):
            cfg = TtsConfig(N, m, mode="direction_guided" if m else "none")
            a, cs, _ = select_action(obs, policy, scorer, cfg, lambda j, t=t: root.substream(t, 0, j))
            d = np.sqrt(np.mean((cs.pose_matrix() - scorer.expert.pose) ** 2, axis=1))
            sel = math.sqrt(np.mean((a.pose - scorer.expert.pose) ** 2))
            dominated += sel > d.min()
            means[k] += sel / trials
    ok = bool(np.all(np.diff(means) <= 0)) and dominated == 0
    curve = ", ".join(f"M={m}: {v:.5f}" for m, v in zip(ms, means))
    record(7, ok, f"N=4 mean selected rmse {curve}; {dominated} dominated selections in {trials} trials per M")


def test_c08_loss_identities(record):
    gen = RngStream(0, "acceptance-loss").generator
    r = gen.normal(0, 3, (10_000, 2))
    r[:1000, 1] = r[:1000, 0]
    s = np.array([loss_rew(a, b) + loss_rew(b, a) for a, b in r])
    eq = r[:, 0] == r[:, 1]
    sym_ok = bool(np.all(s >= 2 * LN2 - 1e-15) and np.all(np.abs(s[eq] - 2 * LN2) < 1e-15)
                  and np.all(s[~eq] > 2 * LN2))
    net = PrmNetwork(PrmConfig(hidden=16, n_layers=1, n_heads=2), seed=0)
    eps = generate_expert_episodes(2, seed=0)
    ds = AnchorTupleSampler(subsample=1.0).fit(eps).transform(eps)
    l_rew = float(batch_losses(net, ds, np.arange(min(64, len(ds))), TrainConfig())[2].data)
    dirs_ok = True
    for d in (2, 6):
        a = gen.standard_normal((10_000, d))
        b = gen.standard_normal((10_000, d))
        a /= np.linalg.norm(a, axis=1, keepdims=True)
        b /= np.linalg.norm(b, axis=1, keepdims=True)
        vals = np.array([loss_dir(x, y) for x, y in zip(a, b)])
        dirs_ok &= bool(np.all((vals >= 0) & (vals <= 2)))
    ok = sym_ok and l_rew == LN2 and dirs_ok
    record(8, ok, f"symmetric sum >= 2 ln 2 on 1e4 pairs: {sym_ok}; zero-head L_rew = {l_rew!r} "
                  f"(ln 2 = {LN2!r}); loss_dir in [0, 2]: {dirs_ok}")


@pytest.mark.slow
def test_c09_amplifier_ablation(record, default_run, ablation_run, default_data):
    net, hist, _ = default_run
    net_off, _ = ablation_run
    acc_on = validate(net, default_data[1]).pair_acc
    acc_off = validate(net_off, default_data[1]).pair_acc
    step0 = hist.initial_loss[0]
    epoch1 = hist.epochs[0]["total"]
    ok = acc_off < acc_on and epoch1 < step0
    record(9, ok, f"pair_acc with amplifier {acc_on:.4f} vs without {acc_off:.4f}; "
                  f"epoch-1 mean loss {epoch1:.4f} vs step-0 loss {step0:.4f}")


def _pipeline(runs):
    tiny = ["--set", "hidden=16", "--set", "n_heads=2", "--set", "n_layers=1"]
    common = ["--seed", "3", "--runs", str(runs)]
    assert main(["gen-episodes", "--episodes", "30", *common]) == 0
    ep = runs / "gen-episodes-seed3" / "episodes.rvep"
    assert main(["gen-tuples", "--episodes-file", str(ep), *common]) == 0
    tup = runs / "gen-tuples-seed3"
    assert main(["train", "--episodes-file", str(ep), "--train", str(tup / "train.rvtp"), "--val",
                 str(tup / "val.rvtp"), "--epochs", "2", *common, *tiny]) == 0
    ckpt = runs / "train-seed3" / "checkpoints" / "final.rvpm"
    assert main(["validate", "--episodes-file", str(ep), "--tuples", str(tup / "val.rvtp"), "--prm", str(ckpt),
                 *common]) == 0
    assert main(["eval-tts", "--n", "1,4", "--m", "0,4", "--mode", "none,random,dg", "--episodes", "3",
                 "--prm", str(ckpt), *common]) == 0
    assert main(["analyze-deviations", "--episodes", "3", *common]) == 0
    assert main(["dump-field", "--prm", str(ckpt), "--resolution", "5", *common]) == 0
    return {p.relative_to(runs): p.read_bytes() for p in sorted(runs.rglob("*")) if p.is_file()}


def test_c10_determinism(record, tmp_path):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    diff = [str(k) for k in a if a[k] != b.get(k)]
    wanted = {"episodes.rvep", "train.rvtp", "val.rvtp", "final.rvpm", "eval.csv", "train_log.csv",
              "validation.csv", "field.csv"}
    covered = wanted <= {k.name for k in a}
    record(10, not diff and a.keys() == b.keys() and covered,
           f"{len(a)} output files compared byte-wise across two runs; differing: {diff or 'none'}")
