"""Command-line entry point.

Every subcommand resolves its settings from built-in defaults, then an
optional ``--config`` file of ``key = value`` lines, then ``--set key=value``
overrides, then dedicated flags. Outputs go to a fresh run directory holding
``config.txt`` and ``seed.txt``; an existing run directory is never reused.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import formats
from .bench import BenchReport, bench_cache, dump_direction_field
from .datagen import deviation_stats, deviation_table
from .env import Degradation, EnvConfig, base_policy_sample, expert_action, observe, reset, step
from .model import PrmConfig, PrmNetwork
from .numeric.rng import RngStream
from .pipeline import DataConfig, make_episodes, make_tuple_splits, train_verifier
from .plots import line_plot_svg
from .training import LOG_COLUMNS, TrainConfig, validate
from .tts import EVAL_COLUMNS, OracleScorer, TtsConfig, eval_rows, run_eval

log = logging.getLogger("prmscale")

SECTIONS = {"data": DataConfig, "env": EnvConfig, "degradation": Degradation, "model": PrmConfig,
            "train": TrainConfig, "tts": TtsConfig}


class RunDirExistsError(FileExistsError):
    pass


# ---------------------------------------------------------------- settings

@dataclasses.dataclass
class Settings:
    raw: dict
    seed: int

    def section(self, name):
        cls = SECTIONS[name]
        names = {f.name for f in dataclasses.fields(cls)}
        return formats.coerce_dataclass(cls, {k: v for k, v in self.raw.items() if k in names}, strict=True)

    def snapshot(self) -> dict:
        out = {"seed": self.seed}
        for name in SECTIONS:
            for k, v in dataclasses.asdict(self.section(name)).items():
                out.setdefault(k, v)
        return out


def _known_keys() -> set:
    keys = {"seed"}
    for cls in SECTIONS.values():
        keys |= {f.name for f in dataclasses.fields(cls)}
    return keys


def load_settings(args) -> Settings:
    raw = {}
    if args.config:
        raw.update(formats.parse_config_text(Path(args.config).read_text()))
    for item in args.set or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    unknown = set(raw) - _known_keys()
    if unknown:
        raise SystemExit(f"unknown config keys: {sorted(unknown)}")
    # dedicated flags win over file and --set values and land in the snapshot
    for key in ("episodes", "epochs", "alpha", "sigma_exp"):
        if key == "episodes" and args.command != "gen-episodes":
            continue  # elsewhere --episodes counts rollouts, not demonstrations
        val = getattr(args, key, None)
        if val is not None:
            raw[key] = str(val)
    for flag, key in (("n", "N"), ("m", "M"), ("mode", "mode")):
        val = getattr(args, flag, None)
        if val is not None and "," not in str(val):
            raw[key] = str(val)
    seed = int(raw.pop("seed", 0))
    if getattr(args, "seed", None) is not None:
        seed = args.seed
    return Settings(raw, seed)


def open_run_dir(args, settings: Settings) -> tuple[Path, str]:
    run_id = args.run_id or f"{args.command}-seed{settings.seed}"
    path = Path(args.runs) / run_id
    if path.exists():
        raise RunDirExistsError(f"run directory {path} already exists; choose another --run-id")
    path.mkdir(parents=True)
    (path / "checkpoints").mkdir()
    text = formats.config_to_text(settings.snapshot())
    (path / "config.txt").write_text(text)
    (path / "seed.txt").write_text(f"{settings.seed}\n")
    return path, formats.config_hash(text)


# ---------------------------------------------------------------- subcommands

def cmd_gen_episodes(args, s: Settings, run: Path, h: str) -> int:
    env = s.section("env")
    eps = make_episodes(s.section("data"), s.seed, env)
    formats.save_episodes(eps, run / "episodes.rvep", env.horizon)
    if args.jsonl:
        formats.episodes_to_jsonl(eps, run / "episodes.jsonl")
    rate = float(np.mean([e.success for e in eps])) if eps else 0.0
    formats.write_csv(run / "episodes.csv", ["episodes", "steps", "success_rate"],
                      [[len(eps), sum(len(e) for e in eps), rate]], h)
    print(f"wrote {len(eps)} episodes to {run / 'episodes.rvep'} (success {rate:.3f})")
    return 0


def cmd_gen_tuples(args, s: Settings, run: Path, h: str) -> int:
    eps, _ = formats.load_episodes(args.episodes_file)
    try:
        dtr, dva = make_tuple_splits(eps, s.section("data"), s.seed)
    except ValueError as err:
        raise SystemExit(str(err))
    formats.save_tuples(dtr, run / "train.rvtp")
    formats.save_tuples(dva, run / "val.rvtp")
    formats.write_csv(run / "tuples.csv", ["split", "tuples", "episodes"],
                      [["train", len(dtr), len({int(e) for e, _ in dtr.refs})],
                       ["val", len(dva), len({int(e) for e, _ in dva.refs})]], h)
    print(f"wrote {len(dtr)} train / {len(dva)} val tuples to {run}")
    return 0


def policy_deviation_samples(n_episodes: int, seed: int, env: EnvConfig, deg: Degradation):
    """Paired (policy, expert) actions along base-policy rollouts."""
    root = RngStream(seed, "deviations")
    pol, exp = [], []
    for e in range(n_episodes):
        state = reset(root.child("reset").substream(e), env)
        for t in range(env.horizon):
            a = base_policy_sample(state, root.substream(e, t), deg, env)
            pol.append(a)
            exp.append(expert_action(state, env))
            state = step(state, a, env)
    return pol, exp


def cmd_analyze_deviations(args, s: Settings, run: Path, h: str) -> int:
    n = args.episodes if args.episodes is not None else 50
    pol, exp = policy_deviation_samples(n, s.seed, s.section("env"), s.section("degradation"))
    stats = deviation_stats(pol, exp)
    table = deviation_table(stats)
    formats.write_csv(run / "deviations.csv", table[0], table[1:], h)
    print(f"n={stats['n']} mean |delta|={stats['dist_mean']:.4f} median={stats['dist_median']:.4f} "
          f"std={np.round(stats['std'], 4).tolist()}")
    return 0


def cmd_train(args, s: Settings, run: Path, h: str) -> int:
    eps, _ = formats.load_episodes(args.episodes_file)
    dtr = formats.load_tuples(args.train, eps)
    dva = formats.load_tuples(args.val, eps) if args.val else None
    rows = []

    def on_epoch(epoch, row):
        rows.append([row[c] for c in LOG_COLUMNS])
        formats.write_csv(run / "train_log.csv", LOG_COLUMNS, rows, h)
        print(" ".join(f"{c}={row[c]:.4f}" if isinstance(row[c], float) else f"{c}={row[c]}"
                       for c in LOG_COLUMNS), flush=True)

    net, _ = train_verifier(dtr, dva, s.section("model"), s.section("train"), s.seed,
                            checkpoint_dir=run / "checkpoints", on_epoch=on_epoch)
    formats.save_checkpoint(net, run / "checkpoints" / "final.rvpm")
    if not rows:
        formats.write_csv(run / "train_log.csv", LOG_COLUMNS, rows, h)
    return 0


def cmd_validate(args, s: Settings, run: Path, h: str) -> int:
    eps, _ = formats.load_episodes(args.episodes_file)
    ds = formats.load_tuples(args.tuples, eps)
    net = formats.load_checkpoint(args.prm)
    rep = validate(net, ds)
    cols = ["cos_align", "angle_err", "spearman", "pair_acc", "n_tuples"]
    formats.write_csv(run / "validation.csv", cols, [[getattr(rep, c) for c in cols]], h)
    print(" ".join(f"{c}={getattr(rep, c):.4f}" for c in cols[:4]), f"n={rep.n_tuples}")
    return 0


def _split(v: str, conv):
    return [conv(x) for x in str(v).split(",") if x.strip()]


def tts_cells(args, s: Settings) -> list[TtsConfig]:
    base = s.section("tts")
    ns = _split(args.n, int) if args.n else [base.N]
    ms = _split(args.m, int) if args.m else [base.M]
    modes = _split(args.mode, str) if args.mode else [base.mode]
    cells = []
    for mode in modes:
        for n in ns:
            for m in ms:
                if mode != "none" and m == 0 and len(ms) > 1:
                    continue  # same as best-of-N, which the none series covers
                cfg = TtsConfig(n, m, base.alpha, base.sigma_exp, mode)
                if cfg not in cells:
                    cells.append(cfg)
    return cells


def _scorer(path):
    if path in (None, "", "oracle"):
        return OracleScorer()
    return formats.load_checkpoint(path)


def cmd_eval_tts(args, s: Settings, run: Path, h: str) -> int:
    cells = tts_cells(args, s)
    if args.prm is None and any(c.mode == "direction_guided" for c in cells):
        raise SystemExit("direction-guided expansion needs --prm (a checkpoint or 'oracle')")
    scorer = _scorer(args.prm)
    if isinstance(scorer, OracleScorer):
        scorer = OracleScorer(cfg=s.section("env"))
    n = args.episodes if args.episodes is not None else 200
    res = run_eval(scorer, cells, n, s.seed, s.section("env"), s.section("degradation"),
                   progress=lambda c: print(f"mode={c.cfg.mode} N={c.cfg.N} M={c.cfg.M} "
                                            f"success={c.rate:.3f} [{c.ci[0]:.3f}, {c.ci[1]:.3f}]",
                                            flush=True))
    out = Path(args.out) if args.out else run / "eval.csv"
    formats.write_csv(out, EVAL_COLUMNS, eval_rows(res), h)
    series = {}
    for c in res:
        series.setdefault(c.cfg.mode, []).append((c.cfg.K, c.rate))
    (run / "scaling.svg").write_text(line_plot_svg(series, "candidate budget K", "success rate"))
    return 0


def _probe_observation(seed: int, env: EnvConfig):
    state = reset(RngStream(seed, "probe").generator, env)
    return state, observe(state, env)


def cmd_bench_cache(args, s: Settings, run: Path, h: str) -> int:
    net = formats.load_checkpoint(args.prm) if args.prm else PrmNetwork(s.section("model"), seed=s.seed)
    _, obs = _probe_observation(s.seed, s.section("env"))
    counts = _split(args.counts, int)
    rep: BenchReport = bench_cache(net, obs, counts, reps=args.reps, warmup=args.warmup, seed=s.seed)
    formats.write_csv(run / "bench.csv", BenchReport.COLUMNS, rep.csv_rows(), h)
    (run / "bench.txt").write_text(f"hardware: {rep.hardware}\nprotocol: {rep.protocol}\n")
    for r in rep.rows:
        print(f"count={r.count} nocache={r.t_nocache:.4f}s cache={r.t_cache:.4f}s "
              f"speedup={r.speedup:.2f}x per_action={r.per_action_ms:.4f}ms")
    return 0


def cmd_dump_field(args, s: Settings, run: Path, h: str) -> int:
    env = s.section("env")
    state, obs = _probe_observation(s.seed, env)
    a_e = expert_action(state, env)
    scorer = _scorer(args.prm)
    if isinstance(scorer, OracleScorer):
        scorer = OracleScorer(a_e, env)
    b = args.bound
    bounds = ((a_e.pose[0] - b, a_e.pose[0] + b), (a_e.pose[1] - b, a_e.pose[1] + b))
    dump = dump_direction_field(scorer, obs, bounds, (args.resolution, args.resolution), a_e.gripper)
    formats.write_csv(run / "field.csv", dump.COLUMNS, dump.csv_rows(), h)
    (run / "field.svg").write_text(dump.to_svg(target=a_e.pose))
    print(f"{len(dump.points)} probes; mean cosine to expert direction {dump.alignment(a_e.pose):.4f}")
    return 0


COMMANDS = {
    "gen-episodes": cmd_gen_episodes,
    "gen-tuples": cmd_gen_tuples,
    "analyze-deviations": cmd_analyze_deviations,
    "train": cmd_train,
    "validate": cmd_validate,
    "eval-tts": cmd_eval_tts,
    "bench-cache": cmd_bench_cache,
    "dump-field": cmd_dump_field,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prmscale", description="Process reward model for test-time action scaling.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value settings file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")
    common.add_argument("--seed", type=int)
    common.add_argument("--runs", default="runs", help="parent directory for run directories")
    common.add_argument("--run-id", help="run directory name (must not exist)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    c = sub.add_parser("gen-episodes", parents=[common], help="roll out expert demonstrations")
    c.add_argument("--episodes", type=int)
    c.add_argument("--jsonl", action="store_true", help="also write a JSON-lines export")

    c = sub.add_parser("gen-tuples", parents=[common], help="build anchor-centred training tuples")
    c.add_argument("--episodes-file", required=True)

    c = sub.add_parser("analyze-deviations", parents=[common], help="policy-vs-expert action gap statistics")
    c.add_argument("--episodes", type=int)

    c = sub.add_parser("train", parents=[common], help="train the reward model")
    c.add_argument("--episodes-file", required=True)
    c.add_argument("--train", required=True, help="training tuple file")
    c.add_argument("--val", help="held-out tuple file")
    c.add_argument("--epochs", type=int)

    c = sub.add_parser("validate", parents=[common], help="held-out verifier metrics")
    c.add_argument("--episodes-file", required=True)
    c.add_argument("--tuples", required=True)
    c.add_argument("--prm", required=True)

    c = sub.add_parser("eval-tts", parents=[common], help="success rates under test-time scaling")
    c.add_argument("--n", help="policy proposals (comma list allowed)")
    c.add_argument("--m", help="expanded candidates (comma list allowed)")
    c.add_argument("--alpha", type=float)
    c.add_argument("--sigma-exp", type=float)
    c.add_argument("--mode", help="none, random or dg (comma list allowed)")
    c.add_argument("--episodes", type=int)
    c.add_argument("--prm", help="checkpoint path, or 'oracle' for the -rmse scorer")
    c.add_argument("--out", help="CSV path (default: run directory)")

    c = sub.add_parser("bench-cache", parents=[common], help="perception-cache latency benchmark")
    c.add_argument("--prm")
    c.add_argument("--counts", default="10,100,1000")
    c.add_argument("--reps", type=int, default=5)
    c.add_argument("--warmup", type=int, default=2)

    c = sub.add_parser("dump-field", parents=[common], help="direction field around one observation")
    c.add_argument("--prm", help="checkpoint path, or 'oracle'")
    c.add_argument("--bound", type=float, default=0.2)
    c.add_argument("--resolution", type=int, default=15)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else 2
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = load_settings(args)
        run, h = open_run_dir(args, settings)
    except (SystemExit, RunDirExistsError, formats.FormatError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1 if isinstance(e, RunDirExistsError) else 2
    return COMMANDS[args.command](args, settings, run, h)


if __name__ == "__main__":
    sys.exit(main())
