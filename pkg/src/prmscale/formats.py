"""On-disk formats: episode datasets, tuple datasets, checkpoints, configs, CSV.

All binary numbers are little-endian; reals are 64-bit IEEE floats.

Episode file (``RVEP``)::

    magic[4] version:u32 d_dir:u32 horizon:u32 n_episodes:u32
    state_dim:u32 channels:u32 grid:u32
    per episode: task_id:u32 success:u8 length:u32
        per step: state_vec f64[state_dim] grid f64[channels*grid*grid] a_e f64[d_dir+1]

Tuple file (``RVTP``)::

    magic[4] version:u32 d_dir:u32 n_tuples:u32
    per tuple: episode:u32 step:u32 actions f64[4*(d_dir+1)] u_gt f64[3*d_dir]
        n_pairs:u8 (preferred:u8 dispreferred:u8)*n_pairs

Checkpoint (``RVPM``)::

    magic[4] version:u32 hidden n_layers n_heads d_dir patch grid channels
    state_dim n_tasks (u32 each) amplifier:u8 n_params:u32
    per parameter: name_len:u32 name[utf-8] ndim:u32 shape u32[ndim] data f64[prod(shape)]
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import os
import struct
from pathlib import Path

import numpy as np

from .datagen import MAX_PAIRS, TupleDataset
from .env import Action, Episode, Observation
from .model import PrmConfig, PrmNetwork

VERSION = 1
EP_MAGIC = b"RVEP"
TP_MAGIC = b"RVTP"
PM_MAGIC = b"RVPM"


class FormatError(ValueError):
    pass


def _f64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated file")
        out = self.buf[self.pos: self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def f64(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------- episodes

def episodes_to_bytes(episodes: list[Episode], horizon: int) -> bytes:
    first = next((e for e in episodes if len(e)), None)
    if first is None:
        d_dir, sd, (c, s) = 2, 8, (3, 32)
    else:
        d_dir = first.expert_actions[0].d_dir
        sd = first.observations[0].state_vec.size
        c, s = first.observations[0].grid.shape[:2]
    out = io.BytesIO()
    out.write(EP_MAGIC)
    out.write(struct.pack("<7I", VERSION, d_dir, horizon, len(episodes), sd, c, s))
    for ep in episodes:
        out.write(struct.pack("<IBI", ep.task_id, int(ep.success), len(ep)))
        for obs, a in zip(ep.observations, ep.expert_actions):
            out.write(_f64(obs.state_vec))
            out.write(_f64(obs.grid))
            out.write(_f64(a.as_vector()))
    return out.getvalue()


def save_episodes(episodes: list[Episode], path, horizon: int) -> None:
    _atomic_write(Path(path), episodes_to_bytes(episodes, horizon))


def load_episodes(path) -> tuple[list[Episode], dict]:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != EP_MAGIC:
        raise FormatError("not an episode file")
    version, d_dir, horizon, n, sd, c, s = r.unpack("<7I")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    eps = []
    for _ in range(n):
        task_id, success, length = r.unpack("<IBI")
        ep = Episode(success=bool(success), task_id=task_id)
        for _ in range(length):
            sv = r.f64(sd)
            grid = r.f64(c * s * s).reshape(c, s, s)
            a = r.f64(d_dir + 1)
            ep.observations.append(Observation(sv, grid, task_id))
            ep.expert_actions.append(Action.from_vector(a))
        eps.append(ep)
    return eps, {"d_dir": d_dir, "horizon": horizon}


def episodes_to_jsonl(episodes: list[Episode], path) -> None:
    """Human-readable export: one JSON object per step (raster omitted, summarized by channel sums)."""
    with open(path, "w") as f:
        for e, ep in enumerate(episodes):
            for s, (obs, a) in enumerate(zip(ep.observations, ep.expert_actions)):
                f.write(json.dumps({
                    "episode": e, "step": s, "task_id": ep.task_id, "success": ep.success,
                    "state_vec": obs.state_vec.tolist(),
                    "grid_channel_sums": obs.grid.sum(axis=(1, 2)).tolist(),
                    "expert_action": a.as_vector().tolist(),
                }) + "\n")


# ---------------------------------------------------------------- tuples

def tuples_to_bytes(ds: TupleDataset) -> bytes:
    out = io.BytesIO()
    out.write(TP_MAGIC)
    out.write(struct.pack("<3I", VERSION, ds.d_dir, len(ds)))
    for i in range(len(ds)):
        e, s = ds.refs[i]
        out.write(struct.pack("<2I", int(e), int(s)))
        out.write(_f64(ds.actions[i]))
        out.write(_f64(ds.u_gt[i]))
        pairs = ds.pairs[i][ds.pair_mask[i]]
        out.write(struct.pack("<B", len(pairs)))
        for a, b in pairs:
            out.write(struct.pack("<2B", int(a), int(b)))
    return out.getvalue()


def save_tuples(ds: TupleDataset, path) -> None:
    _atomic_write(Path(path), tuples_to_bytes(ds))


def load_tuples(path, episodes: list[Episode] | None = None) -> TupleDataset:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != TP_MAGIC:
        raise FormatError("not a tuple file")
    version, d, n = r.unpack("<3I")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    refs = np.zeros((n, 2), dtype=np.int64)
    acts = np.zeros((n, 4, d + 1))
    us = np.zeros((n, 3, d))
    pairs = np.full((n, MAX_PAIRS, 2), -1, dtype=np.int64)
    mask = np.zeros((n, MAX_PAIRS), dtype=bool)
    for i in range(n):
        refs[i] = r.unpack("<2I")
        acts[i] = r.f64(4 * (d + 1)).reshape(4, d + 1)
        us[i] = r.f64(3 * d).reshape(3, d)
        (k,) = r.unpack("<B")
        for p in range(k):
            pairs[i, p] = r.unpack("<2B")
            mask[i, p] = True
    ds = TupleDataset(d, refs, np.zeros(n, dtype=np.int64), acts, us, pairs, mask)
    if episodes is not None:
        ds.attach_observations(episodes)
    return ds


# ---------------------------------------------------------------- checkpoints

_CFG_INTS = ("hidden", "n_layers", "n_heads", "d_dir", "patch", "grid_size", "channels",
             "state_dim", "n_tasks")


def checkpoint_to_bytes(net: PrmNetwork) -> bytes:
    c = net.cfg
    out = io.BytesIO()
    out.write(PM_MAGIC)
    out.write(struct.pack("<I", VERSION))
    out.write(struct.pack(f"<{len(_CFG_INTS)}I", *(getattr(c, k) for k in _CFG_INTS)))
    out.write(struct.pack("<B", int(c.amplifier)))
    out.write(struct.pack("<I", len(net.params)))
    for name, p in net.params.items():
        raw = name.encode("utf-8")
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
        out.write(struct.pack("<I", p.data.ndim))
        out.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        out.write(_f64(p.data))
    return out.getvalue()


def save_checkpoint(net: PrmNetwork, path) -> None:
    _atomic_write(Path(path), checkpoint_to_bytes(net))


def load_checkpoint(path) -> PrmNetwork:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != PM_MAGIC:
        raise FormatError("not a checkpoint file")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    vals = r.unpack(f"<{len(_CFG_INTS)}I")
    (amp,) = r.unpack("<B")
    cfg = PrmConfig(**dict(zip(_CFG_INTS, vals)), amplifier=bool(amp))
    (n,) = r.unpack("<I")
    state = {}
    for _ in range(n):
        (ln,) = r.unpack("<I")
        name = r.take(ln).decode("utf-8")
        (nd,) = r.unpack("<I")
        shape = r.unpack(f"<{nd}I") if nd else ()
        state[name] = r.f64(int(np.prod(shape))).reshape(shape)
    net = PrmNetwork(cfg, seed=0)
    net.load_state_dict(state)
    return net


# ---------------------------------------------------------------- config text + CSV

def config_to_text(values: dict) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in values.items())


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def coerce_dataclass(cls, raw: dict, strict: bool = True):
    """Build dataclass ``cls`` from string values, converting by field default type."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if strict and unknown:
        raise FormatError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for name, f in fields.items():
        if name not in raw:
            continue
        kwargs[name] = _coerce(raw[name], f.default)
    return cls(**kwargs)


def _coerce(s, default):
    if not isinstance(s, str):
        return s
    if isinstance(default, bool):
        if s.lower() in ("1", "true", "yes", "on"):
            return True
        if s.lower() in ("0", "false", "no", "off"):
            return False
        raise FormatError(f"bad boolean {s!r}")
    if isinstance(default, int):
        return int(s)
    if isinstance(default, float):
        return float(s)
    if isinstance(default, tuple):
        return tuple(float(x) for x in s.split(",") if x.strip())
    return s


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def write_csv(path, header, rows, cfg_hash: str) -> None:
    """CSV with a header row; every row carries the producing config hash."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(header) + ["config_hash"])
    for row in rows:
        w.writerow([_cell(x) for x in row] + [cfg_hash])
    _atomic_write(Path(path), buf.getvalue().encode("utf-8"))


def _cell(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
