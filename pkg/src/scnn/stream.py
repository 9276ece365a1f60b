"""Online inference over a frozen model, one observation at a time.

Exact mode keeps the trailing raw window and reruns the network on it, so
every forecast equals the offline one. EMA mode replaces the windowed
statistics by exponential moving averages, which keeps per-push work and
memory fixed no matter how long the window is.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import tape
from .decouple import ComponentSet, ResidualStack
from .network import SCNN, ForecastDistribution


class StreamError(RuntimeError):
    pass


def ema_update(acc, x, lam: float):
    """acc' = lam * acc + (1 - lam) * x."""
    return lam * acc + (1.0 - lam) * x


class EMA:
    """Moving average started from zero; ``read`` applies the bias correction."""

    __slots__ = ("lam", "acc", "steps")

    def __init__(self, lam: float, shape=()):
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"decay must lie in [0, 1], got {lam}")
        self.lam = lam
        self.acc = np.zeros(shape)
        self.steps = 0

    def update(self, x) -> None:
        self.acc = ema_update(self.acc, x, self.lam)
        self.steps += 1

    def read(self) -> np.ndarray:
        if self.steps == 0:
            raise StreamError("moving average read before any update")
        corr = 1.0 - self.lam ** self.steps
        # lam == 1 never moves away from zero; report the raw accumulator
        return self.acc / corr if corr > 0 else self.acc


class Ring:
    """Fixed-capacity buffer of equally shaped arrays, oldest first on read."""

    def __init__(self, capacity: int, shape):
        if capacity < 1:
            raise ValueError("ring capacity must be >= 1")
        self.buf = np.zeros((capacity,) + tuple(shape))
        self.capacity = capacity
        self.count = 0

    def push(self, x) -> None:
        self.buf[self.count % self.capacity] = x
        self.count += 1

    @property
    def full(self) -> bool:
        return self.count >= self.capacity

    def ordered(self) -> np.ndarray:
        """Contents in time order (oldest first)."""
        n = min(self.count, self.capacity)
        start = self.count % self.capacity if self.full else 0
        idx = (start + np.arange(n)) % self.capacity
        return self.buf[idx]

    def latest(self, lag: int = 0) -> Optional[np.ndarray]:
        """Element pushed ``lag`` steps ago, or None if not available."""
        if lag >= min(self.count, self.capacity):
            return None
        return self.buf[(self.count - 1 - lag) % self.capacity]


@dataclass
class _BlockStats:
    lt: List[EMA]                    # first and second moments
    se: List[List[EMA]]              # per phase: first and second moments
    st: List[EMA]
    fuse_in: Ring                    # last k concatenated [Z, H] rows


@dataclass
class StreamState:
    model: SCNN
    mode: str = "exact"
    step: int = 0
    window: Optional[Ring] = None
    blocks: List[_BlockStats] = field(default_factory=list)
    ar_hist: Optional[Ring] = None   # final block: the eight AR streams
    se_hist: Optional[Ring] = None   # final block: seasonal mu/sigma
    lt_last: Optional[np.ndarray] = None

    @property
    def warmup(self) -> int:
        cfg = self.model.cfg
        if self.mode == "exact":
            return cfg.t_in
        return max(cfg.delta_st, cfg.m, cfg.kernel_size)


def init(model: SCNN, mode: str = "exact") -> StreamState:
    """Fresh state for a frozen model; ``mode`` is ``exact`` or ``ema``."""
    cfg = model.cfg
    if not model.blocks:
        raise StreamError("streaming needs a model with at least one block")
    st = StreamState(model, mode)
    N, d = cfg.n_vars, cfg.d_z
    if mode == "exact":
        st.window = Ring(cfg.t_in, (N,))
        return st
    if mode != "ema":
        raise StreamError(f"unknown stream mode {mode!r}")
    lam_lt = 1.0 - 1.0 / cfg.delta_lt
    lam_se = 1.0 - 1.0 / cfg.tau
    lam_st = 1.0 - 1.0 / cfg.delta_st
    shape = (N, d)
    for _ in model.blocks:
        st.blocks.append(_BlockStats(
            lt=[EMA(lam_lt, shape), EMA(lam_lt, shape)],
            se=[[EMA(lam_se, shape), EMA(lam_se, shape)] for _ in range(cfg.m)],
            st=[EMA(lam_st, shape), EMA(lam_st, shape)],
            fuse_in=Ring(cfg.kernel_size, (N, 12 * d))))
    hist = max(cfg.delta_st, cfg.m)
    st.ar_hist = Ring(hist, (8, N, d))
    st.se_hist = Ring(hist, (2, N, d))
    return st


def _moments(m1: EMA, m2: EMA, x: np.ndarray, eps: float):
    m1.update(x)
    m2.update(x * x)
    mu = m1.read()
    var = np.maximum(m2.read() - mu * mu, 0.0)
    return mu, np.sqrt(var + eps)


def _conv_row(rows: Ring, W: np.ndarray, b) -> np.ndarray:
    # sum_j W[j] @ x[t - j]; missing lags contribute nothing, like the offline zero fill
    out = 0.0
    for j in range(W.shape[0]):
        x = rows.latest(j)
        if x is not None:
            out = out + x @ W[j].T
    return out + b if b is not None else out


def _ema_push(st: StreamState, y_t: np.ndarray) -> Optional[ForecastDistribution]:
    model, cfg = st.model, st.model.cfg
    eps = cfg.eps
    W, b = model.embed_W.data, model.embed_b.data
    x = y_t[:, None] * W + b                       # (N, d)
    phase = st.step % cfg.m
    for li, (bp, bs) in enumerate(zip(model.blocks, st.blocks)):
        mu_lt, s_lt = _moments(*bs.lt, x, eps)
        z1 = (x - mu_lt) / s_lt
        mu_se, s_se = _moments(*bs.se[phase], z1, eps)
        z2 = (z1 - mu_se) / s_se
        mu_st, s_st = _moments(*bs.st, z2, eps)
        z3 = (z2 - mu_st) / s_st
        # co-evolving statistics need no history: exact in both modes
        a = bp.attn.data
        w = np.exp(a - a.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        mu_ce = w @ z3
        s_ce = np.sqrt(np.maximum(w @ (z3 * z3) - mu_ce * mu_ce, 0.0) + eps)
        z4 = (z3 - mu_ce) / s_ce
        if li == len(model.blocks) - 1:
            st.ar_hist.push(np.stack([z1, z2, z3, z4, mu_st, s_st, mu_ce, s_ce]))
            st.se_hist.push(np.stack([mu_se, s_se]))
            st.lt_last = np.stack([mu_lt, s_lt])
            break
        bs.fuse_in.push(np.concatenate([z1, z2, z3, z4, mu_lt, s_lt, mu_se, s_se,
                                        mu_st, s_st, mu_ce, s_ce], axis=-1))
        f = bp.fusion
        x = (_conv_row(bs.fuse_in, f.W1.data, f.b1.data if f.b1 else None)
             * _conv_row(bs.fuse_in, f.W2.data, f.b2.data if f.b2 else None))
    st.step += 1
    if st.step < st.warmup:
        return None
    ar = st.ar_hist.ordered()           # (Lh, 8, N, d)
    se = st.se_hist.ordered()
    Lh = ar.shape[0]
    lt = np.broadcast_to(st.lt_last[:, None], (2, Lh) + st.lt_last.shape[1:])

    def seq(a):                          # (Lh, N, d) -> (N, Lh, d)
        return tape.as_node(np.ascontiguousarray(np.swapaxes(a, 0, 1)))

    comps = ComponentSet(seq(lt[0]), seq(lt[1]), seq(se[:, 0]), seq(se[:, 1]),
                         seq(ar[:, 4]), seq(ar[:, 5]), seq(ar[:, 6]), seq(ar[:, 7]))
    res = ResidualStack(seq(ar[:, 0]), seq(ar[:, 1]), seq(ar[:, 2]), seq(ar[:, 3]))
    with tape.no_grad():
        main, _ = model.forecast_from_layer(comps, res, Lh - 1, with_aux=False)
    out = main.numpy()
    out.origin_t = st.step - 1
    return out


def push(st: Optional[StreamState], y_t) -> Optional[ForecastDistribution]:
    """Feed one standardized observation (N,). Returns the (N, t_out)
    forecast from this origin, or None while warming up."""
    if st is None or not isinstance(st, StreamState):
        raise StreamError("push before init: create the state with stream.init(model)")
    y_t = np.asarray(y_t, dtype=np.float64).reshape(-1)
    if y_t.shape[0] != st.model.cfg.n_vars:
        raise StreamError(f"observation has {y_t.shape[0]} values, model expects {st.model.cfg.n_vars}")
    if not np.all(np.isfinite(y_t)):
        raise StreamError("observation contains non-finite values")
    if st.mode == "ema":
        return _ema_push(st, y_t)
    st.window.push(y_t)
    st.step += 1
    if not st.window.full:
        return None
    window = st.window.ordered().T      # (N, t_in)
    out = st.model.predict(window)
    out.origin_t = st.step - 1
    return out
