"""Project components and residuals from the history onto the forecast horizons.

Long-term and seasonal components are copied forward by fixed rules; the
short-term and co-evolving components and the four residual streams each get
a direct multi-horizon auto-regressive map. An interaction gate then merges
everything into one state vector per horizon.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from . import tape
from .decouple import TIME_AXIS, ComponentSet, ResidualStack
from .tape import Node, Parameter

AR_STREAMS = ("z1", "z2", "z3", "z4", "mu_st", "sigma_st", "mu_ce", "sigma_ce")
RESIDUAL_STREAMS = ("z1", "z2", "z3", "z4")


class InsufficientHistoryError(ValueError):
    pass


@dataclass
class ExtrapConfig:
    t_out: int
    delta_ar: int
    m: int
    d_z: int
    gate_bias: bool = True

    def __post_init__(self):
        if self.t_out < 1 or self.delta_ar < 1:
            raise ValueError(f"t_out and delta_ar must be >= 1, got {self.t_out}, {self.delta_ar}")


@dataclass
class ARExtrapolator:
    W: Parameter  # (t_out, delta_ar, d_z, d_z); W[i, j] maps lag j to horizon i+1
    b: Parameter  # (t_out, d_z)

    @classmethod
    def init(cls, name: str, cfg: ExtrapConfig, rng: np.random.Generator) -> "ARExtrapolator":
        d = cfg.d_z
        W = rng.normal(0.0, 0.01, size=(cfg.t_out, cfg.delta_ar, d, d))
        W[:, 0] += 0.9 * np.eye(d)
        return cls(Parameter.create(f"{name}.W", W),
                   Parameter.create(f"{name}.b", np.zeros((cfg.t_out, d))))

    def parameters(self) -> List[Parameter]:
        return [self.W, self.b]


@dataclass
class InteractionGate:
    W1: Parameter  # (d_z, 12 d_z)
    W2: Parameter
    b1: Optional[Parameter] = None
    b2: Optional[Parameter] = None

    @classmethod
    def init(cls, name: str, d_z: int, rng: np.random.Generator, bias: bool = True) -> "InteractionGate":
        width = 12 * d_z
        W1 = rng.normal(0.0, 1.0 / np.sqrt(width), size=(d_z, width))
        if bias:
            # second branch starts close to all-ones, i.e. a nearly transparent gate
            W2 = rng.normal(0.0, 0.01, size=(d_z, width))
            return cls(Parameter.create(f"{name}.W1", W1), Parameter.create(f"{name}.W2", W2),
                       Parameter.create(f"{name}.b1", np.zeros(d_z)),
                       Parameter.create(f"{name}.b2", np.ones(d_z)))
        W2 = rng.normal(0.0, 1.0 / np.sqrt(width), size=(d_z, width))
        return cls(Parameter.create(f"{name}.W1", W1), Parameter.create(f"{name}.W2", W2))

    def parameters(self) -> List[Parameter]:
        return [p for p in (self.W1, self.W2, self.b1, self.b2) if p is not None]


@dataclass
class ExtrapParams:
    ar: Dict[str, ARExtrapolator]
    gate: InteractionGate

    @classmethod
    def init(cls, cfg: ExtrapConfig, rng: np.random.Generator) -> "ExtrapParams":
        ar = {s: ARExtrapolator.init(f"ar.{s}", cfg, rng) for s in AR_STREAMS}
        return cls(ar, InteractionGate.init("gate", cfg.d_z, rng, bias=cfg.gate_bias))

    def parameters(self) -> List[Parameter]:
        out = []
        for s in AR_STREAMS:
            out.extend(self.ar[s].parameters())
        out.extend(self.gate.parameters())
        return out


def seasonal_source_index(t: int, i: int, m: int) -> int:
    """History position copied to horizon i: same phase, most recent cycle."""
    return t - m * (-(-i // m)) + i


def extrapolate_regular(components: ComponentSet, t: int, cfg: ExtrapConfig):
    """Long-term: hold the value at t. Seasonal: copy from the same phase one cycle back.

    Returns four nodes of shape (..., N, t_out, d_z).
    """
    lt_idx = np.full(cfg.t_out, t)
    se_idx = np.array([seasonal_source_index(t, i, cfg.m) for i in range(1, cfg.t_out + 1)])
    if se_idx.min() < 0:
        raise InsufficientHistoryError(
            f"seasonal extrapolation at t={t} needs index {se_idx.min()} (m={cfg.m})")
    c = components
    return (tape.take(c.mu_lt, lt_idx, TIME_AXIS), tape.take(c.sigma_lt, lt_idx, TIME_AXIS),
            tape.take(c.mu_se, se_idx, TIME_AXIS), tape.take(c.sigma_se, se_idx, TIME_AXIS))


def history(stream: Node, t: int, delta: int) -> Node:
    """The ``delta`` most recent values up to t, most recent first: (..., N, delta, d_z)."""
    if t - delta + 1 < 0:
        raise InsufficientHistoryError(f"need {delta} steps of history at t={t}")
    return tape.take(stream, np.arange(t, t - delta, -1), TIME_AXIS)


def extrapolate_ar(stream_history: Node, ar: ARExtrapolator, i: Optional[int] = None) -> Node:
    """G_hat[t+i] = sum_j W[i, j] @ G[t-j] + b[i].

    ``stream_history`` is (..., N, delta, d_z), most recent first. Returns
    (..., N, t_out, d_z), or (..., N, d_z) for the single horizon ``i`` (1-based).
    """
    t_out, delta, d, _ = ar.W.shape
    if stream_history.shape[-2] < delta:
        raise InsufficientHistoryError(
            f"history holds {stream_history.shape[-2]} steps, AR map needs {delta}")
    if stream_history.shape[-2] > delta:
        stream_history = tape.take(stream_history, np.arange(delta), -2)
    lead = stream_history.shape[:-2]
    flat = tape.reshape(stream_history, lead + (delta * d,))
    Wr = tape.reshape(tape.transpose(ar.W.node, (1, 3, 0, 2)), (delta * d, t_out * d))
    out = tape.reshape(flat @ Wr, lead + (t_out, d)) + ar.b.node
    if i is None:
        return out
    if not 1 <= i <= t_out:
        raise ValueError(f"horizon {i} outside 1..{t_out}")
    return tape.reshape(tape.take(out, [i - 1], -2), lead + (d,))


def gate(z_hat: Node, h_hat: Node, g: InteractionGate, mask_residuals: bool = False) -> Node:
    """(W1 [Z, H] + b1) * (W2 [Z, H] + b2), element-wise.

    With ``mask_residuals`` the residual part is zeroed and cut from the graph.
    """
    d_z = g.W1.shape[0]
    if z_hat.shape[-1] != 4 * d_z or h_hat.shape[-1] != 8 * d_z:
        raise ValueError(f"gate expects widths {4 * d_z} and {8 * d_z}, "
                         f"got {z_hat.shape[-1]} and {h_hat.shape[-1]}")
    if mask_residuals:
        z_hat = tape.zero_mask(z_hat, True)
    x = tape.concat([z_hat, h_hat], axis=-1)
    a = x @ tape.transpose(g.W1.node, (1, 0))
    c = x @ tape.transpose(g.W2.node, (1, 0))
    if g.b1 is not None:
        a = a + g.b1.node
    if g.b2 is not None:
        c = c + g.b2.node
    return a * c


def extrapolate_all(components: ComponentSet, residuals: ResidualStack, t: int,
                    params: ExtrapParams, cfg: ExtrapConfig):
    """Assemble the extrapolated components and residuals, then gate them.

    Returns ``(S_hat, H_hat, Z_hat)`` with widths d_z, 8 d_z and 4 d_z.
    """
    mu_lt, s_lt, mu_se, s_se = extrapolate_regular(components, t, cfg)
    streams = {"z1": residuals.z1, "z2": residuals.z2, "z3": residuals.z3, "z4": residuals.z4,
               "mu_st": components.mu_st, "sigma_st": components.sigma_st,
               "mu_ce": components.mu_ce, "sigma_ce": components.sigma_ce}
    proj = {s: extrapolate_ar(history(streams[s], t, cfg.delta_ar), params.ar[s])
            for s in AR_STREAMS}
    H_hat = tape.concat([mu_lt, s_lt, mu_se, s_se,
                         proj["mu_st"], proj["sigma_st"], proj["mu_ce"], proj["sigma_ce"]], axis=-1)
    Z_hat = tape.concat([proj[s] for s in RESIDUAL_STREAMS], axis=-1)
    return gate(Z_hat, H_hat, params.gate), H_hat, Z_hat


def contribution_matrix(ar: ARExtrapolator) -> np.ndarray:
    """Frobenius norm of each lag-to-horizon weight block: rows horizon, cols lag."""
    W = ar.W.data
    return np.sqrt(np.sum(W * W, axis=(2, 3)))
