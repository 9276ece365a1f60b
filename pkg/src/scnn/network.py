"""The full forecasting network: embedding, stacked blocks, extrapolation, heads, losses."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from . import tape
from .decouple import DecoupleConfig, init_attention
from .extrapolate import ExtrapConfig, ExtrapParams, extrapolate_all, gate
from .fuse import BlockParams, FusionParams, StackResult, stack_blocks
from .tape import Node, Parameter

CHECKPOINT_MAGIC = "scnn-checkpoint 1"


@dataclass
class ModelConfig:
    n_vars: int
    t_in: int
    t_out: int = 3
    d_z: int = 8
    n_layers: int = 4
    kernel_size: int = 2
    delta_lt: Optional[int] = None   # defaults to t_in
    m: int = 24
    tau: Optional[int] = None        # defaults to delta_lt // m
    delta_st: int = 8
    eps: float = 1.0
    alpha: float = 0.5
    gate_bias: bool = True
    conv_bias: bool = True
    per_var_embed: bool = False
    loss_mode: str = "mle"
    aux_loss_mode: str = "mle"
    seed: int = 0

    def __post_init__(self):
        if self.delta_lt is None:
            self.delta_lt = self.t_in
        if self.tau is None:
            self.tau = max(1, self.delta_lt // self.m)
        self.validate()

    def validate(self) -> None:
        if self.n_vars < 1 or self.t_in < 1 or self.t_out < 1 or self.d_z < 1:
            raise ValueError("n_vars, t_in, t_out and d_z must be positive")
        if self.n_layers < 0 or self.kernel_size < 1:
            raise ValueError("n_layers must be >= 0 and kernel_size >= 1")
        if self.loss_mode not in ("mle", "mse") or self.aux_loss_mode not in ("mle", "mse"):
            raise ValueError(f"unknown loss mode {self.loss_mode!r}/{self.aux_loss_mode!r}")
        if self.t_in <= self.m:
            raise ValueError(f"t_in={self.t_in} must exceed the cycle length m={self.m}")
        if self.t_in < self.delta_st:
            raise ValueError(f"t_in={self.t_in} must be >= delta_st={self.delta_st}")
        self.decouple_config()

    def decouple_config(self) -> DecoupleConfig:
        return DecoupleConfig(delta_lt=self.delta_lt, m=self.m, tau=self.tau, delta_st=self.delta_st,
                              eps=self.eps, n_vars=self.n_vars, d_z=self.d_z)

    def extrap_config(self) -> ExtrapConfig:
        return ExtrapConfig(t_out=self.t_out, delta_ar=self.delta_st, m=self.m, d_z=self.d_z,
                            gate_bias=self.gate_bias)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ForecastDistribution:
    """Gaussian forecast per (variable, horizon). Fields are nodes inside the
    training graph and plain arrays everywhere else."""
    mean: Union[Node, np.ndarray]
    std: Union[Node, np.ndarray]
    origin_t: Optional[int] = None

    def numpy(self) -> "ForecastDistribution":
        m = self.mean.data if isinstance(self.mean, Node) else np.asarray(self.mean)
        s = self.std.data if isinstance(self.std, Node) else np.asarray(self.std)
        return ForecastDistribution(m, s, self.origin_t)


class SCNN:
    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        d, N = cfg.d_z, cfg.n_vars
        emb_shape = (N, d) if cfg.per_var_embed else (d,)
        self.embed_W = Parameter.create("embed.W", 1.0 + 0.1 * rng.normal(size=emb_shape))
        self.embed_b = Parameter.create("embed.b", 0.1 * rng.normal(size=emb_shape))
        self.blocks: List[BlockParams] = []
        for li in range(cfg.n_layers):
            attn = init_attention(N, rng, name=f"attn.{li}.alpha")
            fusion = FusionParams.init(f"fuse.{li}", cfg.kernel_size, d, rng, bias=cfg.conv_bias)
            self.blocks.append(BlockParams(attn, fusion))
        self.extrap = ExtrapParams.init(cfg.extrap_config(), rng)
        self.head_mean_W = Parameter.create("head.mean.W", rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, 1)))
        self.head_mean_b = Parameter.create("head.mean.b", np.zeros(1))
        self.head_std_W = Parameter.create("head.std.W", rng.normal(0.0, 0.01, size=(d, 1)))
        # softplus(log(e - 1)) == 1
        self.head_std_b = Parameter.create("head.std.b", np.full(1, np.log(np.e - 1.0)))

    # -- parameter bookkeeping ---------------------------------------------

    def parameters(self) -> List[Parameter]:
        out = [self.embed_W, self.embed_b]
        for bp in self.blocks:
            out.extend(bp.parameters())
        out.extend(self.extrap.parameters())
        out.extend([self.head_mean_W, self.head_mean_b, self.head_std_W, self.head_std_b])
        return out

    def named_parameters(self) -> Dict[str, Parameter]:
        out = {}
        for p in self.parameters():
            if p.name in out:
                raise ValueError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        missing = set(named) - set(state)
        if missing:
            raise ValueError(f"state is missing parameters {sorted(missing)}")
        for name, p in named.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.node.data[...] = arr

    # -- forward -------------------------------------------------------------

    def embed(self, y: Node) -> Node:
        W, b = self.embed_W.node, self.embed_b.node
        if self.cfg.per_var_embed:
            N, d = self.embed_W.shape
            W, b = tape.reshape(W, (N, 1, d)), tape.reshape(b, (N, 1, d))
        x = tape.reshape(y, y.shape + (1,))
        return x * W + b

    def heads(self, s_hat: Node) -> ForecastDistribution:
        lead = s_hat.shape[:-1]
        mean = tape.reshape(s_hat @ self.head_mean_W.node, lead) + self.head_mean_b.node
        raw = tape.reshape(s_hat @ self.head_std_W.node, lead) + self.head_std_b.node
        return ForecastDistribution(mean, tape.softplus(raw))

    def run_blocks(self, y_window, fuse_last: bool = False) -> StackResult:
        y = tape.as_node(np.asarray(y_window, dtype=np.float64))
        if y.shape[-1] != self.cfg.t_in or y.shape[-2] != self.cfg.n_vars:
            raise ValueError(f"expected window (..., {self.cfg.n_vars}, {self.cfg.t_in}), got {y.shape}")
        if not np.all(np.isfinite(y.data)):
            raise ValueError("input window contains non-finite values")
        if not self.blocks:
            raise ValueError("forward needs at least one block (n_layers >= 1)")
        return stack_blocks(self.embed(y), self.blocks, self.cfg.decouple_config(), fuse_last=fuse_last)

    def forward(self, y_window, with_aux: bool = True
                ) -> Tuple[ForecastDistribution, Optional[ForecastDistribution]]:
        """y_window: (..., N, t_in) standardized values. Forecasts are (..., N, t_out)."""
        stack = self.run_blocks(y_window)
        return self.forecast_from_layer(stack.final.components, stack.final.residuals,
                                        self.cfg.t_in - 1, with_aux)

    def forecast_from_layer(self, components, residuals, t: int, with_aux: bool = True):
        s_hat, h_hat, z_hat = extrapolate_all(components, residuals, t, self.extrap,
                                              self.cfg.extrap_config())
        main = self.heads(s_hat)
        aux = None
        if with_aux:
            aux = self.heads(gate(z_hat, h_hat, self.extrap.gate, mask_residuals=True))
        main.origin_t = aux_origin = t
        if aux is not None:
            aux.origin_t = aux_origin
        return main, aux

    def loss(self, y_window, truth) -> Node:
        cfg = self.cfg
        need_aux = cfg.loss_mode == "mle" and cfg.alpha != 0
        main, aux = self.forward(y_window, with_aux=need_aux)
        return total_loss(truth, main, aux, cfg.alpha, cfg.loss_mode, cfg.aux_loss_mode)

    def predict(self, windows: np.ndarray, batch_size: int = 16) -> ForecastDistribution:
        """Inference without graph recording over (W, N, t_in) windows."""
        windows = np.asarray(windows, dtype=np.float64)
        single = windows.ndim == 2
        if single:
            windows = windows[None]
        means, stds = [], []
        with tape.no_grad():
            for s in range(0, len(windows), batch_size):
                main, _ = self.forward(windows[s:s + batch_size], with_aux=False)
                means.append(main.mean.data)
                stds.append(main.std.data)
        mean, std = np.concatenate(means), np.concatenate(stds)
        if single:
            mean, std = mean[0], std[0]
        return ForecastDistribution(mean, std, self.cfg.t_in - 1)


# -- losses ----------------------------------------------------------------

def _batch_mean_of_sums(x: Node) -> Node:
    per_window = tape.sum(x, axis=(-2, -1)) if x.ndim >= 2 else tape.sum(x)
    return tape.mean(per_window)


def mle_loss(truth, f: ForecastDistribution) -> Node:
    """sum_{n,i} [log s + (y - mean)^2 / (2 s^2)], averaged over leading batch axes."""
    y = tape.as_node(np.asarray(truth, dtype=np.float64))
    mu, s = tape.as_node(f.mean), tape.as_node(f.std)
    err2 = tape.square(y - mu)
    terms = tape.log(s) + err2 / (2.0 * tape.square(s))
    return _batch_mean_of_sums(terms)


def mse_loss(truth, f: ForecastDistribution) -> Node:
    y = tape.as_node(np.asarray(truth, dtype=np.float64))
    return tape.mean(tape.square(y - tape.as_node(f.mean)))


def _half_sse(truth, f: ForecastDistribution) -> Node:
    y = tape.as_node(np.asarray(truth, dtype=np.float64))
    return _batch_mean_of_sums(tape.square(y - tape.as_node(f.mean)) * 0.5)


def total_loss(truth, main: ForecastDistribution, aux: Optional[ForecastDistribution],
               alpha: float, loss_mode: str = "mle", aux_loss_mode: str = "mle") -> Node:
    """mle: alpha * L_aux + L_main. mse: plain mean squared error of the main mean."""
    if loss_mode == "mse":
        return mse_loss(truth, main)
    if loss_mode != "mle":
        raise ValueError(f"unknown loss mode {loss_mode!r}")
    total = mle_loss(truth, main)
    if alpha != 0:
        if aux is None:
            raise ValueError("alpha > 0 needs the auxiliary forecast")
        aux_term = mle_loss(truth, aux) if aux_loss_mode == "mle" else _half_sse(truth, aux)
        total = total + alpha * aux_term
    return total


def count_parameters(params) -> int:
    if isinstance(params, SCNN):
        params = params.parameters()
    return int(sum(p.size for p in params))


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(path, model: SCNN, extras: Optional[Dict[str, np.ndarray]] = None) -> None:
    """Text manifest (one ``name<TAB>shape`` line per array, then a blank
    line) followed by the raw little-endian float64 data in manifest order."""
    arrays = [(p.name, p.data) for p in model.parameters()]
    for name, arr in (extras or {}).items():
        arrays.append((name, np.asarray(arr, dtype=np.float64)))
    lines = [CHECKPOINT_MAGIC, "#config " + json.dumps(model.cfg.to_dict(), sort_keys=True)]
    for name, arr in arrays:
        lines.append(f"{name}\t{','.join(str(s) for s in arr.shape)}")
    header = ("\n".join(lines) + "\n\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(header)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Tuple[SCNN, Dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise ValueError(f"{path}: missing manifest terminator")
    lines = raw[:sep].decode("utf-8").split("\n")
    if not lines or lines[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    cfg_dict, entries = None, []
    for line in lines[1:]:
        if line.startswith("#config "):
            cfg_dict = json.loads(line[len("#config "):])
        elif line:
            name, shape_txt = line.split("\t")
            shape = tuple(int(s) for s in shape_txt.split(",")) if shape_txt else ()
            entries.append((name, shape))
    if cfg_dict is None:
        raise ValueError(f"{path}: manifest has no #config line")
    body = memoryview(raw)[sep + 2:]
    offset, state = 0, {}
    for name, shape in entries:
        n = int(np.prod(shape)) if shape else 1
        nbytes = 8 * n
        if offset + nbytes > len(body):
            raise ValueError(f"{path}: truncated data for {name}")
        state[name] = np.frombuffer(body[offset:offset + nbytes], dtype="<f8").astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(body):
        raise ValueError(f"{path}: {len(body) - offset} trailing bytes")
    model = SCNN(ModelConfig.from_dict(cfg_dict))
    names = set(model.named_parameters())
    model.load_state_dict({k: v for k, v in state.items() if k in names})
    extras = {k: v for k, v in state.items() if k not in names}
    return model, extras
