"""Series containers, CSV I/O, standardization, synthetic data and corruptions."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .decouple import COMPONENTS, recompose

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8


class DataError(ValueError):
    """Malformed input data; messages cite the offending line where possible."""


@dataclass
class SeriesBatch:
    values: np.ndarray                     # (N, T) float64
    var_names: List[str]
    t0: int = 0
    freq_steps_per_cycle: Optional[int] = None
    mask: Optional[np.ndarray] = None      # (N, T) bool, True where the value was missing
    times: Optional[np.ndarray] = None     # (T,) int64; defaults to t0 + arange(T)
    time_name: str = "time"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError(f"values must be (N, T), got shape {self.values.shape}")
        if len(self.var_names) != self.values.shape[0]:
            raise DataError(f"{len(self.var_names)} names for {self.values.shape[0]} variables")
        if self.times is None:
            self.times = self.t0 + np.arange(self.values.shape[1], dtype=np.int64)
        else:
            self.times = np.asarray(self.times, dtype=np.int64)
            if self.times.size:
                self.t0 = int(self.times[0])
        if self.mask is None:
            self.mask = np.zeros(self.values.shape, dtype=bool)

    @property
    def n_vars(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    def index_of(self, t: int) -> int:
        """Column index of time stamp ``t``."""
        hits = np.nonzero(self.times == t)[0]
        if not hits.size:
            raise DataError(f"time {t} not in series ({self.times[0]}..{self.times[-1]})")
        return int(hits[0])


# -- CSV ----------------------------------------------------------------------

def _parse_float(txt: str, line_no: int, col: str) -> float:
    try:
        return float(txt)
    except ValueError:
        raise DataError(f"line {line_no}: cannot parse {txt!r} as a number in column {col!r}") from None


def parse_rows(rows: Sequence[Sequence[str]], header: Sequence[str], first_line: int = 2):
    """Turn text rows into (times, values, mask). Empty cells are missing."""
    width = len(header)
    times, vals, miss = [], [], []
    prev = None
    for k, row in enumerate(rows):
        line_no = first_line + k
        if len(row) != width:
            raise DataError(f"line {line_no}: expected {width} fields, got {len(row)}")
        t_txt = row[0].strip()
        try:
            t = int(t_txt)
        except ValueError:
            raise DataError(f"line {line_no}: time stamp {t_txt!r} is not an integer") from None
        if prev is not None and t <= prev:
            raise DataError(f"line {line_no}: time {t} is not after previous time {prev}")
        prev = t
        rv, rm = [], []
        for col, cell in zip(header[1:], row[1:]):
            cell = cell.strip()
            if cell == "":
                rv.append(0.0)
                rm.append(True)
            else:
                rv.append(_parse_float(cell, line_no, col))
                rm.append(False)
        times.append(t)
        vals.append(rv)
        miss.append(rm)
    n = width - 1
    values = np.array(vals, dtype=np.float64).reshape(len(vals), n).T
    mask = np.array(miss, dtype=bool).reshape(len(miss), n).T
    return np.array(times, dtype=np.int64), values, mask


def load_csv(path, impute: bool = True) -> SeriesBatch:
    """Read ``time,<var_0>,...``. Missing cells are masked, then filled by LOCF."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(header) < 2:
            raise DataError(f"{path}: line 1: need a time column and at least one variable")
        rows = [r for r in reader if r]
    times, values, mask = parse_rows(rows, header)
    batch = SeriesBatch(values, [h.strip() for h in header[1:]], mask=mask, times=times,
                        time_name=header[0].strip())
    if impute and mask.any():
        batch.values = impute_locf(batch.values, mask)
    return batch


def save_csv(batch: SeriesBatch, path) -> None:
    """Write to a path or text stream with shortest round-trip float text;
    masked cells are left empty."""
    if hasattr(path, "write"):
        _write_rows(batch, path)
        return
    with open(path, "w", newline="") as fh:
        _write_rows(batch, fh)


def _write_rows(batch: SeriesBatch, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow([batch.time_name] + list(batch.var_names))
    for j, t in enumerate(batch.times):
        row = [str(int(t))]
        for i in range(batch.n_vars):
            row.append("" if batch.mask[i, j] else repr(float(batch.values[i, j])))
        w.writerow(row)


def impute_locf(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Last observation carried forward; leading gaps take the first observation,
    fully-missing variables become 0."""
    out = np.array(values, dtype=np.float64, copy=True)
    for i in range(out.shape[0]):
        obs = np.nonzero(~mask[i])[0]
        if not obs.size:
            out[i] = 0.0
            continue
        idx = np.where(~mask[i], np.arange(out.shape[1]), 0)
        np.maximum.accumulate(idx, out=idx)
        idx[:obs[0]] = obs[0]
        out[i] = out[i, idx]
    return out


# -- standardization ---------------------------------------------------------------

@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray, mask: Optional[np.ndarray] = None) -> "Standardizer":
        """Per-variable mean/std of ``values`` (N, T), ignoring masked points."""
        values = np.asarray(values, dtype=np.float64)
        if mask is not None and mask.any():
            keep = ~mask
            cnt = np.maximum(keep.sum(axis=1), 1)
            mean = np.where(keep, values, 0.0).sum(axis=1) / cnt
            var = np.where(keep, (values - mean[:, None]) ** 2, 0.0).sum(axis=1) / cnt
            std = np.sqrt(var)
        else:
            mean, std = values.mean(axis=1), values.std(axis=1)
        return cls(mean, np.maximum(std, STD_FLOOR))

    def _bcast(self, arr, axis: int):
        shape = [1] * arr.ndim
        shape[axis] = -1
        return self.mean.reshape(shape), self.std.reshape(shape)

    def transform(self, values, axis: int = 0) -> np.ndarray:
        """Standardize; ``axis`` is the variable axis of ``values``."""
        values = np.asarray(values, dtype=np.float64)
        m, s = self._bcast(values, axis)
        return (values - m) / s

    def inverse(self, values, axis: int = 0) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        m, s = self._bcast(values, axis)
        return values * s + m

    def inverse_scale(self, std, axis: int = 0) -> np.ndarray:
        std = np.asarray(std, dtype=np.float64)
        _, s = self._bcast(std, axis)
        return std * s


# -- synthetic generator ----------------------------------------------------

@dataclass
class SynthSpec:
    """Settings for the layered generator (residual -> ce -> st -> se -> lt)."""
    n_vars: int = 16
    length: int = 4000
    m: int = 24
    seed: int = 0
    name: str = "synthetic"
    # long-term: level + slow drift + optional late linear ramp
    lt_level: float = 10.0
    lt_level_spread: float = 0.2
    lt_drift_amp: float = 1.0
    lt_drift_timescale: float = 400.0
    lt_scale: float = 1.0
    lt_scale_var: float = 0.1
    lt_ramp: float = 0.0            # relative level increase reached at the end
    lt_ramp_start: float = 1.0      # fraction of the series where the ramp begins
    # seasonal: fixed per-phase profile for location, milder one for scale
    se_amplitude: float = 2.0
    se_harmonics: int = 3
    se_scale_var: float = 0.2
    # short-term: persistent shocks (AR(1) with jump innovations)
    st_rate: float = 0.05
    st_magnitude: float = 1.0
    st_duration: float = 12.0
    st_scale_var: float = 0.1
    # co-evolving: shocks shared inside groups of variables
    ce_groups: int = 4
    ce_rate: float = 0.05
    ce_magnitude: float = 1.0
    ce_duration: float = 6.0
    ce_scale_var: float = 0.1
    noise_std: float = 0.5

    def validate(self) -> None:
        if self.n_vars < 1 or self.length < 2 or self.m < 1:
            raise ValueError("n_vars >= 1, length >= 2 and m >= 1 required")
        for name in ("lt_scale", "lt_drift_timescale", "st_duration", "ce_duration"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("lt_scale_var", "se_scale_var", "st_scale_var", "ce_scale_var", "noise_std",
                     "st_rate", "ce_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 <= self.st_rate <= 1 or not 0 <= self.ce_rate <= 1:
            raise ValueError("shock rates must lie in [0, 1]")
        if self.ce_groups < 1:
            raise ValueError("ce_groups must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        names = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise ValueError(f"unknown data spec keys: {sorted(unknown)}")
        return cls(**d)


def _smooth_noise(rng: np.random.Generator, shape: Tuple[int, int], timescale: float) -> np.ndarray:
    """Unit-variance AR(1) paths with correlation time ``timescale`` along axis 1."""
    phi = math.exp(-1.0 / timescale)
    eps = rng.normal(size=shape)
    out = np.empty(shape)
    out[:, 0] = eps[:, 0]
    c = math.sqrt(1.0 - phi * phi)
    for t in range(1, shape[1]):
        out[:, t] = phi * out[:, t - 1] + c * eps[:, t]
    return out


def _shock_process(rng: np.random.Generator, shape: Tuple[int, int], rate: float,
                   magnitude: float, duration: float) -> np.ndarray:
    """AR(1) driven by sparse Gaussian jumps: shocks that decay over ``duration`` steps."""
    phi = math.exp(-1.0 / duration)
    jumps = (rng.random(shape) < rate) * rng.normal(0.0, magnitude, size=shape)
    out = np.empty(shape)
    out[:, 0] = jumps[:, 0]
    for t in range(1, shape[1]):
        out[:, t] = phi * out[:, t - 1] + jumps[:, t]
    return out


def generate(spec: SynthSpec) -> Tuple[SeriesBatch, Dict[Tuple[str, str], np.ndarray], np.ndarray]:
    """Sample a series from the layered generative process.

    Returns ``(batch, factors, residual)``; ``factors`` maps
    ``(component, "mu"|"sigma")`` to (N, T) arrays and the observation is
    ``recompose(factors, residual)``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    N, T, m = spec.n_vars, spec.length, spec.m
    t = np.arange(T)

    # long-term
    level = spec.lt_level * (1.0 + spec.lt_level_spread * rng.normal(size=(N, 1)))
    drift = spec.lt_drift_amp * _smooth_noise(rng, (N, T), spec.lt_drift_timescale)
    ramp = np.zeros(T)
    start = int(round(spec.lt_ramp_start * T))
    if spec.lt_ramp and start < T:
        ramp[start:] = np.linspace(0.0, 1.0, T - start + 1)[1:]
    mu_lt = level * (1.0 + spec.lt_ramp * ramp) + drift
    sigma_lt = spec.lt_scale * np.exp(spec.lt_scale_var * _smooth_noise(rng, (N, T), spec.lt_drift_timescale))

    # seasonal: random Fourier profile per variable, exactly periodic in m
    phase = 2 * np.pi * (t % m) / m
    prof_mu = np.zeros((N, T))
    prof_sig = np.zeros((N, T))
    for h in range(1, spec.se_harmonics + 1):
        a, b = rng.normal(size=(2, N, 1)) / h
        prof_mu += a * np.cos(h * phase) + b * np.sin(h * phase)
        c, d = rng.normal(size=(2, N, 1)) / h
        prof_sig += c * np.cos(h * phase) + d * np.sin(h * phase)
    prof_mu /= max(np.abs(prof_mu).max(), 1e-12)
    prof_sig /= max(np.abs(prof_sig).max(), 1e-12)
    mu_se = spec.se_amplitude * prof_mu
    sigma_se = np.exp(spec.se_scale_var * prof_sig)

    # short-term
    mu_st = _shock_process(rng, (N, T), spec.st_rate, spec.st_magnitude, spec.st_duration)
    sigma_st = np.exp(spec.st_scale_var * _smooth_noise(rng, (N, T), spec.st_duration))

    # co-evolving: group-level shocks copied to every member
    groups = rng.integers(0, spec.ce_groups, size=N)
    g_shock = _shock_process(rng, (spec.ce_groups, T), spec.ce_rate, spec.ce_magnitude, spec.ce_duration)
    g_scale = np.exp(spec.ce_scale_var * _smooth_noise(rng, (spec.ce_groups, T), spec.ce_duration))
    mu_ce = g_shock[groups]
    sigma_ce = g_scale[groups]

    residual = spec.noise_std * rng.normal(size=(N, T))
    factors = {("lt", "mu"): mu_lt, ("lt", "sigma"): sigma_lt,
               ("se", "mu"): mu_se, ("se", "sigma"): sigma_se,
               ("st", "mu"): mu_st, ("st", "sigma"): sigma_st,
               ("ce", "mu"): mu_ce, ("ce", "sigma"): sigma_ce}
    values = compose(factors, residual)
    names = [f"v{i}" for i in range(N)]
    return SeriesBatch(values, names, 0, freq_steps_per_cycle=m), factors, residual


def compose(factors: Dict[Tuple[str, str], np.ndarray], residual: np.ndarray) -> np.ndarray:
    """Z3 = s_ce R + mu_ce, Z2 = s_st Z3 + mu_st, Z1 = s_se Z2 + mu_se, Z0 = s_lt Z1 + mu_lt."""
    z3 = factors[("ce", "sigma")] * residual + factors[("ce", "mu")]
    z2 = factors[("st", "sigma")] * z3 + factors[("st", "mu")]
    z1 = factors[("se", "sigma")] * z2 + factors[("se", "mu")]
    return factors[("lt", "sigma")] * z1 + factors[("lt", "mu")]


def save_ground_truth(factors: Dict[Tuple[str, str], np.ndarray], batch: SeriesBatch,
                      out_dir, dataset: str) -> List[Path]:
    """One CSV per factor trace: ``<dataset>.<component>.<mu|sigma>.csv``."""
    out_dir = Path(out_dir)
    paths = []
    for comp in COMPONENTS:
        for kind in ("mu", "sigma"):
            p = out_dir / f"{dataset}.{comp}.{kind}.csv"
            save_csv(replace(batch, values=factors[(comp, kind)], mask=None), p)
            paths.append(p)
    return paths


# -- corruptions ----------------------------------------------------------------

def corrupt(batch: SeriesBatch, kind: str, level: float, seed: int) -> SeriesBatch:
    """``gaussian``: add N(0, level^2) noise everywhere. ``missing``: zero a
    Bernoulli(level) subset and mark it in the mask."""
    rng = np.random.default_rng(seed)
    values = batch.values.copy()
    mask = batch.mask.copy()
    if kind == "gaussian":
        if level < 0:
            raise ValueError("noise level must be non-negative")
        values = values + rng.normal(0.0, level, size=values.shape) if level > 0 else values
    elif kind == "missing":
        if not 0 <= level <= 1:
            raise ValueError("missing rate must lie in [0, 1]")
        drop = rng.random(values.shape) < level
        values[drop] = 0.0
        mask |= drop
    else:
        raise ValueError(f"unknown corruption kind {kind!r}")
    return replace(batch, values=values, mask=mask)


def parse_corruption(spec: str) -> Tuple[str, float]:
    """``"gaussian:0.1"`` -> ("gaussian", 0.1)."""
    kind, _, level = spec.partition(":")
    if kind not in ("gaussian", "missing") or not level:
        raise ValueError(f"corruption must look like gaussian:<std> or missing:<rate>, got {spec!r}")
    return kind, float(level)


# -- cycle detection -------------------------------------------------------------

PEAK_WARN_THRESHOLD = 0.2


def autocorrelation(values: np.ndarray, max_lag: int) -> np.ndarray:
    """Biased autocorrelation per variable for lags 0..max_lag, via FFT."""
    x = np.asarray(values, dtype=np.float64)
    x = x - x.mean(axis=1, keepdims=True)
    T = x.shape[1]
    n = 1 << int(np.ceil(np.log2(2 * T)))
    f = np.fft.rfft(x, n=n, axis=1)
    acov = np.fft.irfft(f * np.conj(f), n=n, axis=1)[:, :max_lag + 1] / T
    denom = acov[:, :1]
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(denom > 0, acov / np.where(denom > 0, denom, 1.0), 0.0)


def detect_cycle(batch, max_period: int) -> int:
    """Lag in [2, max_period] with the highest mean autocorrelation (ties -> smaller lag)."""
    values = batch.values if isinstance(batch, SeriesBatch) else np.atleast_2d(batch)
    if max_period < 2:
        raise ValueError("max_period must be >= 2")
    if values.shape[1] < 2 * max_period:
        raise DataError(f"series of length {values.shape[1]} is shorter than 2*max_period={2 * max_period}")
    ac = autocorrelation(values, max_period).mean(axis=0)
    cand = ac[2:]
    best = int(np.argmax(cand)) + 2
    if ac[best] < PEAK_WARN_THRESHOLD:
        log.warning("cycle detection unreliable: peak autocorrelation %.3f at lag %d", ac[best], best)
    return best
