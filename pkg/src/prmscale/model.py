"""The process reward model: perception encoder, action encoder, fusion, heads.

Layout of one evaluation::

    obs ──patchify/embed──> obs tokens ──(L-1 self-attention blocks)──> cache
    action ──embed──> amplifier ──> action token
    [action token] attends over [cache, itself] in blocks 0..L-2
    [reward query, direction query] attend over [cache, action] in block L-1
    reward query ──> H → H/2 → H/4 → 1
    direction query ──> H → H/2 → d_dir ──> unit normalize

Observation tokens never attend to the action, so everything on the
observation side can be computed once per control step and shared by all
candidates (:meth:`PrmNetwork.pre_encode`).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .env import STATE_DIM, Action, Observation
from .numeric import autodiff as ad
from .numeric.autodiff import Var, no_grad
from .numeric.params import ParamStore, trunc_normal
from .numeric.rng import RngStream


class StaleCacheError(RuntimeError):
    """A perception cache was used at a step other than the one it was built for."""


@dataclass(frozen=True)
class PrmConfig:
    hidden: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_dir: int = 2
    patch: int = 8
    grid_size: int = 32
    channels: int = 3
    state_dim: int = STATE_DIM
    n_tasks: int = 4
    amplifier: bool = True

    def __post_init__(self):
        if self.hidden % self.n_heads:
            raise ValueError(f"hidden={self.hidden} not divisible by n_heads={self.n_heads}")
        if self.d_dir not in (2, 6):
            raise ValueError(f"d_dir must be 2 or 6, got {self.d_dir}")
        if self.grid_size % self.patch:
            raise ValueError(f"grid_size={self.grid_size} not divisible by patch={self.patch}")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.hidden % 4:
            raise ValueError("hidden must be divisible by 4 (reward head widths)")

    @property
    def n_patches(self) -> int:
        return (self.grid_size // self.patch) ** 2

    @property
    def n_obs_tokens(self) -> int:
        return self.n_patches + 2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PerceptionCache:
    tokens: np.ndarray          # [T_obs, H] input to the final block
    kv: list                    # per block: (keys [T_obs, H], values [T_obs, H])
    stamp: tuple | None = None  # (episode, step)


@dataclass
class PrmOutput:
    reward: float
    direction: np.ndarray
    degenerate_direction: bool = False


def patchify(grid: np.ndarray, patch: int) -> np.ndarray:
    """``[..., C, S, S]`` raster -> ``[..., n_patches, C*patch*patch]``."""
    *lead, c, s, _ = grid.shape
    n = s // patch
    x = grid.reshape(*lead, c, n, patch, n, patch)
    k = len(lead)
    x = x.transpose(*range(k), k + 1, k + 3, k, k + 2, k + 4)
    return x.reshape(*lead, n * n, c * patch * patch)


class PrmNetwork:
    """Parameters plus the three evaluation routes (train graph, cached, monolithic)."""

    def __init__(self, cfg: PrmConfig = PrmConfig(), seed: int = 0):
        self.cfg = cfg
        self.params = ParamStore()
        self._init(seed)

    # ------------------------------------------------------------ init

    def _init(self, seed: int) -> None:
        c = self.cfg
        H = c.hidden
        gen = RngStream(seed, "init").generator
        P = self.params

        def w(name, shape):
            P.add(name, trunc_normal(gen, shape))

        def z(name, shape):
            P.add(name, np.zeros(shape))

        def ln(name, dim):
            P.add(name + ".g", np.ones(dim))
            z(name + ".b", dim)

        w("patch.w", (c.channels * c.patch * c.patch, H)); z("patch.b", H)
        w("state.w", (c.state_dim, H)); z("state.b", H)
        w("goal.emb", (c.n_tasks, H))
        w("pos", (c.n_obs_tokens, H))
        ln("obs_ln", H)
        w("act.w", (c.d_dir + 1, H)); z("act.b", H)
        if c.amplifier:
            w("amp.w1", (H, 2 * H)); z("amp.b1", 2 * H)
            ln("amp.ln", 2 * H)
            w("amp.w2", (2 * H, H)); z("amp.b2", H)
        for l in range(c.n_layers):
            b = f"block{l}"
            ln(b + ".ln1", H)
            for m in ("q", "k", "v", "o"):
                w(f"{b}.w{m}", (H, H)); z(f"{b}.b{m}", H)
            ln(b + ".ln2", H)
            w(b + ".ff1.w", (H, 4 * H)); z(b + ".ff1.b", 4 * H)
            w(b + ".ff2.w", (4 * H, H)); z(b + ".ff2.b", H)
        w("query", (2, H))
        ln("final_ln", H)
        w("rhead.w1", (H, H // 2)); z("rhead.b1", H // 2)
        w("rhead.w2", (H // 2, H // 4)); z("rhead.b2", H // 4)
        z("rhead.w3", (H // 4, 1)); z("rhead.b3", 1)
        w("dhead.w1", (H, H // 2)); z("dhead.b1", H // 2)
        # small random (not zero) so the direction is defined and receives gradient at step 0
        w("dhead.w2", (H // 2, c.d_dir)); z("dhead.b2", c.d_dir)

    # ------------------------------------------------------------ graph pieces

    def _p(self, name: str) -> Var:
        return self.params[name]

    def _ln(self, x: Var, name: str) -> Var:
        return ad.layer_norm(x, self._p(name + ".g"), self._p(name + ".b"))

    def _lin(self, x: Var, name: str) -> Var:
        return ad.linear(x, self._p(name + ".w"), self._p(name + ".b"))

    def _proj(self, x: Var, block: str, m: str) -> Var:
        return ad.linear(x, self._p(f"{block}.w{m}"), self._p(f"{block}.b{m}"))

    def _ffn(self, x: Var, block: str) -> Var:
        h = ad.gelu(self._lin(self._ln(x, block + ".ln2"), block + ".ff1"))
        return ad.add(x, self._lin(h, block + ".ff2"))

    def encode_obs(self, grid: np.ndarray, state_vec: np.ndarray, task_id: np.ndarray):
        """Batched observation encoding.

        Returns ``(tokens, kv)`` where ``tokens`` is ``[B, T, H]`` (input to the
        final block) and ``kv`` holds the per-block key/value Vars of the
        observation rows.
        """
        c = self.cfg
        B = grid.shape[0]
        patches = ad.const(patchify(grid, c.patch))
        pt = self._lin(patches, "patch")
        st = ad.reshape(self._lin(ad.const(state_vec), "state"), (B, 1, c.hidden))
        gt = ad.reshape(ad.take_rows(self._p("goal.emb"), task_id), (B, 1, c.hidden))
        x = ad.concat([pt, st, gt], axis=1)
        x = self._ln(ad.add(x, self._p("pos")), "obs_ln")
        kv = []
        for l in range(c.n_layers):
            b = f"block{l}"
            hn = self._ln(x, b + ".ln1")
            k = self._proj(hn, b, "k")
            v = self._proj(hn, b, "v")
            kv.append((k, v))
            if l == c.n_layers - 1:
                break
            q = ad.reshape(self._proj(hn, b, "q"), (B, 1) + x.shape[1:])
            att = ad.reshape(ad.attention(q, k, v, None, None, c.n_heads), x.shape)
            x = ad.add(x, self._proj(att, b, "o"))
            x = self._ffn(x, b)
        return x, kv

    def encode_actions(self, actions: np.ndarray) -> Var:
        """``[..., d_dir+1]`` action vectors -> ``[..., H]`` action tokens."""
        if actions.shape[-1] != self.cfg.d_dir + 1:
            raise ValueError(f"action vectors must have {self.cfg.d_dir + 1} components, got {actions.shape[-1]}")
        e = self._lin(ad.const(actions), "act")
        if not self.cfg.amplifier:
            return e
        h = ad.gelu(self._ln(ad.linear(e, self._p("amp.w1"), self._p("amp.b1")), "amp.ln"))
        return ad.add(e, ad.linear(h, self._p("amp.w2"), self._p("amp.b2")))

    def fuse(self, kv, act_tok: Var):
        """Score action tokens ``[B, A, H]`` against per-block observation key/values.

        Returns ``(reward [B, A], raw_direction [B, A, d_dir])``.
        """
        c = self.cfg
        B, A, H = act_tok.shape
        z = ad.reshape(act_tok, (B, A, 1, H))
        L = c.n_layers
        for l in range(L - 1):
            b = f"block{l}"
            kc, vc = kv[l]
            hn = self._ln(z, b + ".ln1")
            att = ad.attention(self._proj(hn, b, "q"), kc, vc,
                               self._proj(hn, b, "k"), self._proj(hn, b, "v"), c.n_heads)
            z = ad.add(z, self._proj(att, b, "o"))
            z = self._ffn(z, b)
        b = f"block{L - 1}"
        kc, vc = kv[L - 1]
        hn = self._ln(z, b + ".ln1")
        k_own = self._proj(hn, b, "k")
        v_own = self._proj(hn, b, "v")
        query = self._p("query")
        qproj = self._proj(self._ln(query, b + ".ln1"), b, "q")
        q = ad.broadcast_to(qproj, (B, A, 2, H))
        att = ad.attention(q, kc, vc, k_own, v_own, c.n_heads)
        y = ad.add(query, self._proj(att, b, "o"))
        y = self._ffn(y, b)
        y = self._ln(y, "final_ln")
        yr = y[:, :, 0, :]
        yd = y[:, :, 1, :]
        r = ad.gelu(ad.linear(yr, self._p("rhead.w1"), self._p("rhead.b1")))
        r = ad.gelu(ad.linear(r, self._p("rhead.w2"), self._p("rhead.b2")))
        r = ad.linear(r, self._p("rhead.w3"), self._p("rhead.b3"))
        d = ad.gelu(ad.linear(yd, self._p("dhead.w1"), self._p("dhead.b1")))
        d = ad.linear(d, self._p("dhead.w2"), self._p("dhead.b2"))
        return ad.reshape(r, (B, A)), d

    def forward(self, grid, state_vec, task_id, actions):
        """Training graph: ``B`` observations, each with ``A`` actions ``[B, A, d_dir+1]``.

        Returns ``(reward Var [B, A], unit-direction Var [B, A, d_dir], degenerate mask)``.
        """
        _, kv = self.encode_obs(grid, state_vec, task_id)
        tok = self.encode_actions(actions)
        r, d = self.fuse(kv, tok)
        u, deg = ad.normalize(d)
        return r, u, deg

    # ------------------------------------------------------------ inference (cached)

    def _check_obs(self, obs: Observation) -> None:
        c = self.cfg
        if obs.grid.shape != (c.channels, c.grid_size, c.grid_size):
            raise ValueError(f"raster shape {obs.grid.shape} does not match config")
        if obs.state_vec.shape != (c.state_dim,):
            raise ValueError(f"state vector shape {obs.state_vec.shape} does not match config")

    def pre_encode(self, obs: Observation, stamp: tuple | None = None) -> PerceptionCache:
        """Encode the observation once for all candidates at this step."""
        self._check_obs(obs)
        with no_grad():
            tokens, kv = self.encode_obs(obs.grid[None], obs.state_vec[None],
                                         np.array([obs.task_id]))
        return PerceptionCache(tokens=tokens.data[0],
                               kv=[(k.data[0], v.data[0]) for k, v in kv],
                               stamp=stamp)

    def action_encode(self, actions) -> np.ndarray:
        """Action token(s): ``[d_dir+1]`` -> ``[1, H]``; ``[K, d_dir+1]`` -> ``[K, H]``."""
        arr = _as_action_array(actions, self.cfg.d_dir)
        with no_grad():
            return self.encode_actions(arr).data

    def score_tokens(self, cache: PerceptionCache, tokens: np.ndarray, stamp: tuple | None = None):
        """Raw arrays ``(reward [K], direction [K, d_dir], degenerate [K])`` for encoded actions."""
        if stamp is not None and cache.stamp is not None and tuple(stamp) != tuple(cache.stamp):
            raise StaleCacheError(f"cache built for step {cache.stamp}, used at {stamp}")
        K = tokens.shape[0]
        if K == 0:
            return np.zeros(0), np.zeros((0, self.cfg.d_dir)), np.zeros(0, dtype=bool)
        with no_grad():
            kv = [(Var(k[None]), Var(v[None])) for k, v in cache.kv]
            r, d = self.fuse(kv, Var(tokens[None]))
            u, deg = ad.normalize(d)
        return r.data[0], u.data[0], deg[0]

    def score_arrays(self, cache: PerceptionCache, actions, stamp: tuple | None = None):
        arr = _as_action_array(actions, self.cfg.d_dir)
        if arr.shape[0] == 0:
            return self.score_tokens(cache, np.zeros((0, self.cfg.hidden)), stamp)
        return self.score_tokens(cache, self.action_encode(arr), stamp)

    def score(self, cache: PerceptionCache, action, stamp: tuple | None = None) -> PrmOutput:
        """Score one action (an :class:`Action`, an action vector, or a precomputed ``[1, H]`` token)."""
        if isinstance(action, np.ndarray) and action.ndim == 2 and action.shape[1] == self.cfg.hidden:
            r, u, deg = self.score_tokens(cache, action, stamp)
        else:
            r, u, deg = self.score_arrays(cache, [action], stamp)
        return PrmOutput(float(r[0]), u[0], bool(deg[0]))

    def score_batch(self, cache: PerceptionCache, actions, stamp: tuple | None = None) -> list[PrmOutput]:
        if len(actions) == 0:
            return []
        r, u, deg = self.score_arrays(cache, actions, stamp)
        return [PrmOutput(float(r[i]), u[i], bool(deg[i])) for i in range(len(r))]

    # ------------------------------------------------------------ monolithic reference

    def forward_full(self, obs: Observation, actions):
        """Re-encode everything per candidate as one masked sequence (no cache).

        Independent of the cached route: each candidate builds the sequence
        ``[obs tokens, action token, reward query, direction query]`` and runs
        every block over it with a block-causal mask.
        """
        self._check_obs(obs)
        arr = _as_action_array(actions, self.cfg.d_dir)
        K = arr.shape[0]
        c = self.cfg
        H = c.hidden
        T = c.n_obs_tokens
        if K == 0:
            return np.zeros(0), np.zeros((0, c.d_dir)), np.zeros(0, dtype=bool)
        p = {k: v.data for k, v in self.params.items()}
        grid = np.broadcast_to(obs.grid, (K,) + obs.grid.shape)
        patches = patchify(grid, c.patch) @ p["patch.w"] + p["patch.b"]
        st = (obs.state_vec @ p["state.w"] + p["state.b"])[None, None].repeat(K, 0)
        gt = p["goal.emb"][obs.task_id][None, None].repeat(K, 0)
        x = _np_ln(np.concatenate([patches, st, gt], axis=1) + p["pos"], p, "obs_ln")
        e = arr @ p["act.w"] + p["act.b"]
        if c.amplifier:
            h = _np_gelu(_np_ln(e @ p["amp.w1"] + p["amp.b1"], p, "amp.ln"))
            e = e + h @ p["amp.w2"] + p["amp.b2"]
        x = np.concatenate([x, e[:, None], np.broadcast_to(p["query"], (K, 2, H))], axis=1)
        n = T + 3
        # row i may attend to column j
        mask = np.zeros((n, n), dtype=bool)
        mask[:T, :T] = True
        mask[T, : T + 1] = True
        mask[T + 1:, : T + 1] = True
        for l in range(c.n_layers):
            b = f"block{l}"
            hn = _np_ln(x, p, b + ".ln1")
            q = hn @ p[b + ".wq"] + p[b + ".bq"]
            k = hn @ p[b + ".wk"] + p[b + ".bk"]
            v = hn @ p[b + ".wv"] + p[b + ".bv"]
            att = _np_masked_mha(q, k, v, mask, c.n_heads)
            x = x + att @ p[b + ".wo"] + p[b + ".bo"]
            hn = _np_ln(x, p, b + ".ln2")
            x = x + _np_gelu(hn @ p[b + ".ff1.w"] + p[b + ".ff1.b"]) @ p[b + ".ff2.w"] + p[b + ".ff2.b"]
            if l < c.n_layers - 1:
                # queries enter at the final block only
                x[:, T + 1:] = p["query"]
        y = _np_ln(x[:, T + 1:], p, "final_ln")
        r = _np_gelu(y[:, 0] @ p["rhead.w1"] + p["rhead.b1"])
        r = _np_gelu(r @ p["rhead.w2"] + p["rhead.b2"])
        r = (r @ p["rhead.w3"] + p["rhead.b3"])[:, 0]
        d = _np_gelu(y[:, 1] @ p["dhead.w1"] + p["dhead.b1"]) @ p["dhead.w2"] + p["dhead.b2"]
        nrm = np.linalg.norm(d, axis=-1, keepdims=True)
        deg = nrm[:, 0] <= ad.EPS_NORM
        u = d / np.where(nrm > ad.EPS_NORM, nrm, 1.0)
        u[deg] = np.eye(c.d_dir)[0]
        return r, u, deg

    # ------------------------------------------------------------ misc

    def state_dict(self):
        return self.params.state_dict()

    def load_state_dict(self, state) -> None:
        self.params.load_state_dict(state)

    def n_parameters(self) -> int:
        return self.params.n_values()


def _as_action_array(actions, d_dir: int) -> np.ndarray:
    if isinstance(actions, Action):
        actions = [actions]
    if isinstance(actions, np.ndarray):
        arr = np.asarray(actions, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None]
    else:
        rows = [a.as_vector() if isinstance(a, Action) else np.asarray(a, dtype=np.float64) for a in actions]
        arr = np.array(rows, dtype=np.float64).reshape(len(rows), -1) if rows else np.zeros((0, d_dir + 1))
    if arr.shape[-1] != d_dir + 1:
        raise ValueError(f"expected actions with {d_dir} pose components + gripper, got width {arr.shape[-1]}")
    return arr


def _np_gelu(x):
    return 0.5 * x * (1.0 + np.tanh(ad.GELU_C * (x + ad.GELU_A * x ** 3)))


def _np_ln(x, p, name, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * p[name + ".g"] + p[name + ".b"]


def _np_masked_mha(q, k, v, mask, n_heads):
    K, n, H = q.shape
    d = H // n_heads
    qh = q.reshape(K, n, n_heads, d).transpose(0, 2, 1, 3)
    kh = k.reshape(K, n, n_heads, d).transpose(0, 2, 1, 3)
    vh = v.reshape(K, n, n_heads, d).transpose(0, 2, 1, 3)
    logits = qh @ kh.transpose(0, 1, 3, 2) / np.sqrt(d)
    logits = np.where(mask, logits, -np.inf)
    logits = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    w = w / w.sum(axis=-1, keepdims=True)
    return (w @ vh).transpose(0, 2, 1, 3).reshape(K, n, H)
