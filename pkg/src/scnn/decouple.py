"""Component decoupling: four stacked normalization layers.

Each layer estimates a location/scale pair for one structured component and
standardizes its input by it. Tensors are laid out ``(..., N, T, d_z)``:
variables, time, channels, with any number of leading batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import tape
from .tape import Node, Parameter

VAR_AXIS, TIME_AXIS = -3, -2

COMPONENTS = ("lt", "se", "st", "ce")


class ConfigError(ValueError):
    pass


@dataclass
class DecoupleConfig:
    delta_lt: int
    m: int
    tau: Optional[int] = None
    delta_st: int = 8
    eps: float = 1.0
    n_vars: int = 1
    d_z: int = 8
    # eps == 0 is only accepted for invariance checks, never for training
    test_mode: bool = False

    def __post_init__(self):
        if self.tau is None:
            self.tau = max(1, self.delta_lt // max(self.m, 1))
        self.validate()

    def validate(self) -> None:
        if not (self.m >= 1 and self.tau >= 1 and self.delta_st >= 1):
            raise ConfigError(f"m, tau and delta_st must be >= 1 (m={self.m}, tau={self.tau}, "
                              f"delta_st={self.delta_st})")
        if self.delta_lt < self.m * self.tau:
            raise ConfigError(f"delta_lt={self.delta_lt} must be >= m*tau={self.m * self.tau}")
        if self.eps < 0 or (self.eps == 0 and not self.test_mode):
            raise ConfigError(f"eps must be > 0, got {self.eps}")


class ComponentSet(NamedTuple):
    mu_lt: Node
    sigma_lt: Node
    mu_se: Node
    sigma_se: Node
    mu_st: Node
    sigma_st: Node
    mu_ce: Node
    sigma_ce: Node


class ResidualStack(NamedTuple):
    z1: Node
    z2: Node
    z3: Node
    z4: Node


def init_attention(n_vars: int, rng: np.random.Generator, name: str = "attn.alpha") -> Parameter:
    """Attention logits, near-uniform after softmax."""
    return Parameter.create(name, rng.normal(0.0, 0.01, size=(n_vars, n_vars)))


def _standardize(x: Node, mu: Node, second: Node, eps: float):
    # centred second moment can come out as -1e-17 from cancellation
    var = tape.clamp_min(second - tape.square(mu), 0.0)
    sigma = tape.sqrt(var + eps)
    return mu, sigma, (x - mu) / sigma


def _windowed(x: Node, window: int, dilation: int, eps: float):
    mu = tape.window_mean(x, window, dilation, axis=TIME_AXIS)
    second = tape.window_mean(tape.square(x), window, dilation, axis=TIME_AXIS)
    return _standardize(x, mu, second, eps)


def _check_finite(x: Node, where: str) -> None:
    if not np.all(np.isfinite(x.data)):
        raise ValueError(f"{where}: non-finite input")


def longterm_layer(z0: Node, cfg: DecoupleConfig):
    """Sliding window of ``delta_lt`` steps."""
    _check_finite(z0, "longterm_layer")
    return _windowed(z0, cfg.delta_lt, 1, cfg.eps)


def seasonal_layer(z1: Node, cfg: DecoupleConfig):
    """Dilated window: ``tau`` taps spaced one cycle (``m`` steps) apart."""
    T = z1.shape[TIME_AXIS]
    if cfg.m >= T:
        raise ConfigError(f"cycle length m={cfg.m} must be shorter than the sequence (T={T})")
    return _windowed(z1, cfg.tau, cfg.m, cfg.eps)


def shortterm_layer(z2: Node, cfg: DecoupleConfig):
    return _windowed(z2, cfg.delta_st, 1, cfg.eps)


def coevolving_layer(z3: Node, attn: Parameter | Node, cfg: DecoupleConfig):
    """Attention-weighted moments across variables at each time step."""
    alpha = attn.node if isinstance(attn, Parameter) else attn
    a = tape.softmax_rows(alpha)
    mu = tape.mix(a, z3, axis=VAR_AXIS)
    second = tape.mix(a, tape.square(z3), axis=VAR_AXIS)
    return _standardize(z3, mu, second, cfg.eps)


def decouple_layers(z0: Node, attn, cfg: DecoupleConfig):
    """Run lt -> se -> st -> ce and return ``(components, residuals)``."""
    mu_lt, s_lt, z1 = longterm_layer(z0, cfg)
    mu_se, s_se, z2 = seasonal_layer(z1, cfg)
    mu_st, s_st, z3 = shortterm_layer(z2, cfg)
    mu_ce, s_ce, z4 = coevolving_layer(z3, attn, cfg)
    return ComponentSet(mu_lt, s_lt, mu_se, s_se, mu_st, s_st, mu_ce, s_ce), ResidualStack(z1, z2, z3, z4)


def decouple_block(z0: Node, attn, cfg: DecoupleConfig):
    """Run lt -> se -> st -> ce.

    Returns ``(components, residuals, H, Z)`` where H stacks the eight
    location/scale tensors (width 8*d_z) and Z the four residuals (4*d_z).
    """
    comps, res = decouple_layers(z0, attn, cfg)
    H = tape.concat(list(comps), axis=-1)
    Z = tape.concat(list(res), axis=-1)
    return comps, res, H, Z


def recompose(mu_sigma: dict, residual: np.ndarray) -> np.ndarray:
    """Undo the four normalizations: rebuild the block input from its factors.

    ``mu_sigma`` maps ``(component, "mu"|"sigma")`` to arrays; ``residual`` is
    the innermost representation (z4 / R).
    """
    x = np.asarray(residual, dtype=np.float64)
    for comp in ("ce", "st", "se", "lt"):
        x = mu_sigma[(comp, "sigma")] * x + mu_sigma[(comp, "mu")]
    return x


def component_dict(comps: ComponentSet) -> dict:
    out = {}
    for comp in COMPONENTS:
        out[(comp, "mu")] = getattr(comps, f"mu_{comp}").data
        out[(comp, "sigma")] = getattr(comps, f"sigma_{comp}").data
    return out
