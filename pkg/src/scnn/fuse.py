"""Historical-path fusion and the stacking of decoupling blocks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import tape
from .decouple import TIME_AXIS, ComponentSet, DecoupleConfig, ResidualStack, decouple_layers
from .tape import Node, Parameter


@dataclass
class FusionParams:
    W1: Parameter  # (k, d_z, 12 d_z); W1[j] applies to lag j
    W2: Parameter
    b1: Optional[Parameter] = None
    b2: Optional[Parameter] = None

    @property
    def k(self) -> int:
        return self.W1.shape[0]

    @classmethod
    def init(cls, name: str, k: int, d_z: int, rng: np.random.Generator,
             bias: bool = True) -> "FusionParams":
        if k < 1:
            raise ValueError(f"kernel size must be >= 1, got {k}")
        width = 12 * d_z
        scale = 1.0 / np.sqrt(k * width)
        W1 = rng.normal(0.0, scale, size=(k, d_z, width))
        if bias:
            W2 = rng.normal(0.0, 0.01, size=(k, d_z, width))
            return cls(Parameter.create(f"{name}.W1", W1), Parameter.create(f"{name}.W2", W2),
                       Parameter.create(f"{name}.b1", np.zeros(d_z)),
                       Parameter.create(f"{name}.b2", np.ones(d_z)))
        W2 = rng.normal(0.0, scale, size=(k, d_z, width))
        return cls(Parameter.create(f"{name}.W1", W1), Parameter.create(f"{name}.W2", W2))

    def parameters(self) -> List[Parameter]:
        return [p for p in (self.W1, self.W2, self.b1, self.b2) if p is not None]


def _conv_pair(x: Node, p: FusionParams):
    # one GEMM for every tap of both branches, then sum_j W[j] @ x[t - j];
    # lags that fall before the sequence start contribute nothing
    k, d, width = p.W1.shape
    W = tape.concat([p.W1.node, p.W2.node], axis=0)
    W = tape.transpose(tape.reshape(W, (2 * k * d, width)), (1, 0))
    y = x @ W
    outs = []
    for branch, b in ((0, p.b1), (1, p.b2)):
        out = None
        for j in range(k):
            lo = (branch * k + j) * d
            tap = tape.delay(tape.take(y, np.arange(lo, lo + d), -1), j, TIME_AXIS)
            out = tap if out is None else out + tap
        if b is not None:
            out = out + b.node
        outs.append(out)
    return outs


def fuse(Z: Node, H: Node, p: FusionParams) -> Node:
    """Two causal convolutions over [Z, H], multiplied element-wise."""
    d = p.W1.shape[1]
    if Z.shape[-1] != 4 * d or H.shape[-1] != 8 * d:
        raise ValueError(f"fuse expects widths {4 * d} and {8 * d}, "
                         f"got {Z.shape[-1]} and {H.shape[-1]}")
    return fuse_stacked(tape.concat([Z, H], axis=-1), p)


def fuse_stacked(x: Node, p: FusionParams) -> Node:
    """``fuse`` on an already concatenated [Z, H] of width 12*d_z."""
    a, c = _conv_pair(x, p)
    return a * c


@dataclass
class BlockParams:
    attn: Parameter
    fusion: FusionParams

    def parameters(self) -> List[Parameter]:
        return [self.attn] + self.fusion.parameters()


@dataclass
class LayerOutput:
    components: ComponentSet
    residuals: ResidualStack
    S: Optional[Node]

    @property
    def H(self) -> Node:
        return tape.concat(list(self.components), axis=-1)

    @property
    def Z(self) -> Node:
        return tape.concat(list(self.residuals), axis=-1)


@dataclass
class StackResult:
    layers: List[LayerOutput] = field(default_factory=list)

    @property
    def final(self) -> LayerOutput:
        return self.layers[-1]


def stack_blocks(y_embedded: Node, blocks: List[BlockParams], cfg: DecoupleConfig,
                 fuse_last: bool = True) -> StackResult:
    """Chain decouple -> fuse; block l reads the fused state of block l-1.

    The final block's fusion feeds nothing downstream; ``fuse_last=False``
    skips computing it.
    """
    if len(blocks) < 1:
        raise ValueError("need at least one block")
    result = StackResult()
    z = y_embedded
    for li, bp in enumerate(blocks):
        comps, res = decouple_layers(z, bp.attn, cfg)
        last = li == len(blocks) - 1
        S = None
        if fuse_last or not last:
            # [Z, H] in one copy rather than building H and Z first
            S = fuse_stacked(tape.concat(list(res) + list(comps), axis=-1), bp.fusion)
        result.layers.append(LayerOutput(comps, res, S))
        z = S
    return result
