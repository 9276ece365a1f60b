"""Windowing, the training loop, evaluation metrics and baseline forecasters."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, fields
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import tape
from .data import SeriesBatch, Standardizer
from .network import SCNN, mle_loss

log = logging.getLogger(__name__)

MAPE_ZERO_GUARD = 1e-3


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 1e-4
    alpha: Optional[float] = None      # overrides the model's alpha when set
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    train_frac: float = 0.7
    val_frac: float = 0.1
    max_train_seconds: Optional[float] = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    def validate(self) -> None:
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1:
            raise ValueError("batch_size >= 1, max_epochs >= 0 and patience >= 1 required")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not (0 < self.train_frac < 1 and 0 <= self.val_frac < 1 and self.train_frac + self.val_frac < 1):
            raise ValueError(f"bad split fractions {self.train_frac}/{self.val_frac}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# -- windows and splits -----------------------------------------------------

def window_origins(T: int, t_in: int, t_out: int, lo: int = 0, hi: Optional[int] = None) -> np.ndarray:
    """Origins t whose input [t-t_in+1, t] and targets [t+1, t+t_out] lie in [lo, hi)."""
    hi = T if hi is None else hi
    first, last = lo + t_in - 1, hi - t_out - 1
    return np.arange(first, last + 1) if last >= first else np.arange(0)


def gather(values: np.ndarray, origins: np.ndarray, t_in: int, t_out: int) -> Tuple[np.ndarray, np.ndarray]:
    """Materialize (W, N, t_in) inputs and (W, N, t_out) targets for the given origins."""
    origins = np.asarray(origins, dtype=np.intp)
    x_idx = origins[:, None] + np.arange(-t_in + 1, 1)
    y_idx = origins[:, None] + np.arange(1, t_out + 1)
    x = np.moveaxis(values[:, x_idx], 0, 1)
    y = np.moveaxis(values[:, y_idx], 0, 1)
    return x, y


def make_windows(batch, t_in: int, t_out: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield (input window, target block) for every valid origin."""
    values = batch.values if isinstance(batch, SeriesBatch) else np.asarray(batch)
    for t in window_origins(values.shape[1], t_in, t_out):
        yield values[:, t - t_in + 1:t + 1], values[:, t + 1:t + t_out + 1]


@dataclass
class Splits:
    """Chronological boundaries: train [0, a), val [a, b), test [b, T)."""
    a: int
    b: int
    T: int

    @classmethod
    def from_fractions(cls, T: int, train_frac: float, val_frac: float) -> "Splits":
        a = int(round(T * train_frac))
        b = int(round(T * (train_frac + val_frac)))
        return cls(a, b, T)

    def origins(self, part: str, t_in: int, t_out: int, context: bool = True) -> np.ndarray:
        """Origins whose targets lie inside ``part``. With ``context`` the input
        window may reach back into earlier splits (targets never cross)."""
        lo, hi = {"train": (0, self.a), "val": (self.a, self.b), "test": (self.b, self.T)}[part]
        if context and lo > 0:
            o = window_origins(self.T, t_in, t_out, 0, hi)
            return o[o + 1 >= lo]
        return window_origins(self.T, t_in, t_out, lo, hi)


# -- training ----------------------------------------------------------------

@dataclass
class FitResult:
    model: SCNN
    curve: List[Tuple[int, float, float]] = field(default_factory=list)  # epoch, train, val
    best_epoch: int = 0
    steps: int = 0
    seconds: float = 0.0

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for e, tr, va in self.curve:
            w.writerow([e, repr(tr), repr(va)])
        return buf.getvalue()


def validation_loss(model: SCNN, x: np.ndarray, y: np.ndarray, batch_size: int = 16) -> float:
    """Main-branch MLE averaged over windows."""
    if len(x) == 0:
        return float("nan")
    total = 0.0
    with tape.no_grad():
        for s in range(0, len(x), batch_size):
            main, _ = model.forward(x[s:s + batch_size], with_aux=False)
            total += float(mle_loss(y[s:s + batch_size], main).data) * len(x[s:s + batch_size])
    return total / len(x)


def fit(model: SCNN, train_xy: Tuple[np.ndarray, np.ndarray], val_xy: Optional[Tuple[np.ndarray, np.ndarray]],
        cfg: TrainConfig) -> FitResult:
    """Adam over shuffled mini-batches; early stopping on validation main loss.

    The epoch-0 curve entry holds the losses before any update. The
    best-validation parameters are restored before returning.
    """
    cfg.validate()
    if cfg.alpha is not None:
        model.cfg.alpha = cfg.alpha
    x_tr, y_tr = train_xy
    if len(x_tr) == 0:
        raise ValueError("no training windows")
    has_val = val_xy is not None and len(val_xy[0]) > 0
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    res = FitResult(model)
    t_start = time.perf_counter()

    def score(epoch):
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                return validation_loss(model, *val_xy) if has_val else validation_loss(model, x_tr, y_tr)
        except tape.DomainError as e:
            raise DivergenceError(f"validation after epoch {epoch} (before step {res.steps + 1}): {e}") from None

    best = score(0)
    res.curve.append((0, validation_loss(model, x_tr, y_tr) if has_val else best, best))
    best_state, since_best = model.state_dict(), 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(x_tr))
        run, n = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss = model.loss(x_tr[idx], y_tr[idx])
            except tape.DomainError as e:
                raise DivergenceError(f"epoch {epoch}, step {res.steps + 1}: {e}") from None
            val = float(loss.data)
            if not math.isfinite(val):
                raise DivergenceError(f"non-finite loss {val} at epoch {epoch}, step {res.steps + 1}")
            loss.backward()
            tape.adam_step(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps_adam)
            tape.zero_grad(params)
            res.steps += 1
            run += val * len(idx)
            n += len(idx)
        v = score(epoch)
        res.curve.append((epoch, run / n, v))
        log.info("epoch %d train %.5f val %.5f", epoch, run / n, v)
        if not math.isfinite(v):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        if v < best:
            best, best_state, since_best, res.best_epoch = v, model.state_dict(), 0, epoch
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
        if cfg.max_train_seconds is not None and time.perf_counter() - t_start > cfg.max_train_seconds:
            log.info("time budget reached after epoch %d", epoch)
            break
    model.load_state_dict(best_state)
    res.seconds = time.perf_counter() - t_start
    return res


# -- evaluation ----------------------------------------------------------------

@dataclass
class EvalReport:
    mae: np.ndarray          # (t_out,)
    rmse: np.ndarray
    mape_pct: np.ndarray
    n: np.ndarray            # points counted per horizon (MAE/RMSE)
    seconds_per_step: float = 0.0

    @property
    def mae_all(self) -> float:
        return float(np.sum(self.mae * self.n) / max(np.sum(self.n), 1))

    @property
    def rmse_all(self) -> float:
        return float(np.sqrt(np.sum(self.rmse ** 2 * self.n) / max(np.sum(self.n), 1)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["horizon", "mae", "rmse", "mape_pct", "n"])
        for i in range(len(self.mae)):
            w.writerow([i + 1, repr(float(self.mae[i])), repr(float(self.rmse[i])),
                        repr(float(self.mape_pct[i])), int(self.n[i])])
        return buf.getvalue()


def metrics(pred: np.ndarray, truth: np.ndarray, mask: Optional[np.ndarray] = None,
            seconds_per_step: float = 0.0) -> EvalReport:
    """Per-horizon metrics over (W, N, t_out) arrays in original units.

    Masked targets are skipped everywhere; MAPE also skips |y| < 1e-3.
    """
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {truth.shape}")
    keep = np.ones(truth.shape, dtype=bool) if mask is None else ~np.asarray(mask, dtype=bool)
    axes = tuple(range(truth.ndim - 1))
    err = np.where(keep, pred - truth, 0.0)
    n = keep.sum(axis=axes)
    cnt = np.maximum(n, 1)
    mae = np.abs(err).sum(axis=axes) / cnt
    rmse = np.sqrt((err ** 2).sum(axis=axes) / cnt)
    pkeep = keep & (np.abs(truth) >= MAPE_ZERO_GUARD)
    safe = np.where(pkeep, truth, 1.0)
    mape = 100.0 * np.where(pkeep, np.abs(err / safe), 0.0).sum(axis=axes) / np.maximum(pkeep.sum(axis=axes), 1)
    return EvalReport(mae, rmse, mape, n, seconds_per_step)


def evaluate(model: SCNN, x: np.ndarray, y_orig: np.ndarray, standardizer: Standardizer,
             mask: Optional[np.ndarray] = None, batch_size: int = 16) -> EvalReport:
    """``x`` standardized windows (W, N, t_in); ``y_orig`` targets in original units."""
    t0 = time.perf_counter()
    f = model.predict(x, batch_size=batch_size)
    dt = (time.perf_counter() - t0) / max(len(x), 1)
    pred = standardizer.inverse(f.mean, axis=-2)
    return metrics(pred, y_orig, mask, dt)


# -- baselines -------------------------------------------------------------------

BASELINES = ("persistence", "seasonal_persistence", "historical_mean")


def baseline_forecast(kind: str, window: np.ndarray, t_out: int, m: Optional[int] = None) -> np.ndarray:
    """Forecast (..., N, t_out) from windows (..., N, t_in)."""
    window = np.asarray(window, dtype=np.float64)
    shape = window.shape[:-1] + (t_out,)
    if kind == "persistence":
        return np.broadcast_to(window[..., -1:], shape).copy()
    if kind == "historical_mean":
        return np.broadcast_to(window.mean(axis=-1, keepdims=True), shape).copy()
    if kind == "seasonal_persistence":
        if m is None or m < 1:
            raise ValueError("seasonal_persistence needs the cycle length m")
        t_in = window.shape[-1]
        # value at t+i-m, stepping back whole cycles when i > m
        src = np.array([t_in - 1 + i - m * -(-i // m) for i in range(1, t_out + 1)])
        if src.min() < 0:
            raise ValueError(f"window of {t_in} steps is too short for m={m}")
        return window[..., src]
    raise ValueError(f"unknown baseline {kind!r}; choose from {BASELINES}")


def baseline_reports(x_orig: np.ndarray, y_orig: np.ndarray, m: int,
                     mask: Optional[np.ndarray] = None) -> dict:
    t_out = y_orig.shape[-1]
    return {k: metrics(baseline_forecast(k, x_orig, t_out, m), y_orig, mask) for k in BASELINES}


# -- dataset preparation -----------------------------------------------------------

@dataclass
class Prepared:
    """Standardized windows for each split plus what is needed to map back."""
    standardizer: Standardizer
    splits: Splits
    train: Tuple[np.ndarray, np.ndarray]
    val: Tuple[np.ndarray, np.ndarray]
    test: Tuple[np.ndarray, np.ndarray]
    test_origins: np.ndarray


def prepare(batch: SeriesBatch, t_in: int, t_out: int, cfg: TrainConfig) -> Prepared:
    """Fit the standardizer on the training split and cut windows for all splits."""
    cfg.validate()
    sp = Splits.from_fractions(batch.length, cfg.train_frac, cfg.val_frac)
    st = Standardizer.fit(batch.values[:, :sp.a], batch.mask[:, :sp.a])
    z = st.transform(batch.values)
    out = {}
    for part in ("train", "val", "test"):
        o = sp.origins(part, t_in, t_out)
        out[part] = (gather(z, o, t_in, t_out), o)
    if len(out["train"][1]) == 0:
        raise ValueError(f"series of length {batch.length} leaves no training windows for t_in={t_in}")
    return Prepared(st, sp, out["train"][0], out["val"][0], out["test"][0], out["test"][1])
