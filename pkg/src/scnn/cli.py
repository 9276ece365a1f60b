"""Command-line entry point: ``scnn <subcommand> ...``."""

from __future__ import annotations

import argparse
import ast
import configparser
import csv
import dataclasses
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, TextIO

import numpy as np

from . import stream as streaming
from . import tape
from .data import (DataError, SeriesBatch, Standardizer, SynthSpec, corrupt, detect_cycle, generate,
                   load_csv, parse_corruption, parse_rows, save_csv, save_ground_truth)
from .decouple import COMPONENTS, ConfigError
from .extrapolate import AR_STREAMS, contribution_matrix
from .fuse import stack_blocks
from .network import SCNN, ModelConfig, load_checkpoint, save_checkpoint
from .train import DivergenceError, Splits, TrainConfig, evaluate, fit, gather, prepare, window_origins

log = logging.getLogger("scnn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": SynthSpec}


class CLIError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(EXIT_USAGE, f"{self.prog}: {message}")


# -- run configuration -----------------------------------------------------------

def _parse_value(text: str):
    low = text.strip().lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", ""):
        return None
    try:
        return ast.literal_eval(text.strip())
    except (ValueError, SyntaxError):
        return text.strip()


def read_run_config(path: Optional[str]) -> Dict[str, dict]:
    """INI file with [model], [train] and [data] sections; unknown keys are errors."""
    out: Dict[str, dict] = {s: {} for s in SECTIONS}
    if path is None:
        return out
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as e:
        raise CLIError(EXIT_USAGE, f"cannot read config {path}: {e.strerror}") from None
    except configparser.Error as e:
        raise CLIError(EXIT_USAGE, f"config {path}: {e}") from None
    for section in cp.sections():
        if section not in SECTIONS:
            raise CLIError(EXIT_USAGE, f"config {path}: unknown section [{section}]")
        known = {f.name for f in dataclasses.fields(SECTIONS[section])}
        for key, raw in cp.items(section):
            if key not in known:
                raise CLIError(EXIT_USAGE, f"config {path}: unknown key {key!r} in [{section}]")
            out[section][key] = _parse_value(raw)
    return out


def apply_overrides(cfg: Dict[str, dict], items: List[str]) -> None:
    for item in items or []:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or section not in SECTIONS:
            raise CLIError(EXIT_USAGE, f"--set expects section.key=value, got {item!r}")
        if name not in {f.name for f in dataclasses.fields(SECTIONS[section])}:
            raise CLIError(EXIT_USAGE, f"unknown key {name!r} in [{section}]")
        cfg[section][name] = _parse_value(value)


def write_run_config(path: Path, sections: Dict[str, dict]) -> None:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for name, values in sections.items():
        cp[name] = {k: repr(v) if isinstance(v, str) else str(v) for k, v in values.items()}
    with open(path, "w") as fh:
        cp.write(fh)


# -- helpers -----------------------------------------------------------------

def _load_data(path: str) -> SeriesBatch:
    try:
        return load_csv(path)
    except OSError as e:
        raise CLIError(EXIT_DATA, f"cannot read {path}: {e.strerror}") from None


def _load_model(path: str):
    try:
        model, extras = load_checkpoint(path)
    except OSError as e:
        raise CLIError(EXIT_DATA, f"cannot read checkpoint {path}: {e.strerror}") from None
    except ValueError as e:
        raise CLIError(EXIT_DATA, f"bad checkpoint {path}: {e}") from None
    if "standardizer.mean" not in extras or "standardizer.std" not in extras:
        raise CLIError(EXIT_DATA, f"checkpoint {path} carries no standardizer")
    return model, Standardizer(extras["standardizer.mean"], extras["standardizer.std"]), extras


def _check_vars(model: SCNN, batch: SeriesBatch) -> None:
    if batch.n_vars != model.cfg.n_vars:
        raise CLIError(EXIT_DATA, f"data has N={batch.n_vars} variables but the checkpoint "
                                  f"expects N={model.cfg.n_vars}")


def _writer(out: TextIO):
    return csv.writer(out, lineterminator="\n")


def _fmt(x) -> str:
    return repr(float(x))


# -- subcommands -------------------------------------------------------------

def cmd_generate(args, out: TextIO) -> int:
    cfg = read_run_config(args.spec)
    apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg["data"]["seed"] = args.seed
    try:
        spec = SynthSpec.from_dict(cfg["data"])
        batch, factors, _ = generate(spec)
    except (TypeError, ValueError) as e:
        raise CLIError(EXIT_USAGE, f"invalid data spec: {e}") from None
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_csv(batch, out_dir / f"{spec.name}.csv")
    save_ground_truth(factors, batch, out_dir, spec.name)
    write_run_config(out_dir / "config.ini", {"data": dataclasses.asdict(spec)})
    print(str(out_dir / f"{spec.name}.csv"), file=out)
    return EXIT_OK


def cmd_train(args, out: TextIO) -> int:
    cfg = read_run_config(args.config)
    apply_overrides(cfg, args.set)
    if args.seed is not None:
        cfg["model"]["seed"] = args.seed
        cfg["train"]["seed"] = args.seed
    if args.epochs is not None:
        cfg["train"]["max_epochs"] = args.epochs
    batch = _load_data(args.data)
    mcfg = dict(cfg["model"])
    if mcfg.get("n_vars") not in (None, batch.n_vars):
        raise CLIError(EXIT_DATA, f"config expects N={mcfg['n_vars']} variables, data has N={batch.n_vars}")
    mcfg["n_vars"] = batch.n_vars
    if mcfg.get("m") == "auto":
        mcfg["m"] = detect_cycle(batch, max_period=min(batch.length // 2, 168))
        log.info("detected cycle length %d", mcfg["m"])
    mcfg.setdefault("m", 24)
    mcfg.setdefault("t_in", 2 * mcfg["m"])
    try:
        tcfg = TrainConfig.from_dict(cfg["train"])
        tcfg.validate()
        model_cfg = ModelConfig.from_dict(mcfg)
    except (TypeError, ValueError) as e:
        raise CLIError(EXIT_USAGE, f"invalid configuration: {e}") from None
    try:
        prep = prepare(batch, model_cfg.t_in, model_cfg.t_out, tcfg)
    except ValueError as e:
        raise CLIError(EXIT_DATA, str(e)) from None
    model = SCNN(model_cfg)
    result = fit(model, prep.train, prep.val, tcfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    extras = {"standardizer.mean": prep.standardizer.mean, "standardizer.std": prep.standardizer.std,
              "split.fractions": np.array([tcfg.train_frac, tcfg.val_frac])}
    save_checkpoint(out_dir / "model.ckpt", model, extras)
    (out_dir / "loss_curve.csv").write_text(result.curve_csv())
    write_run_config(out_dir / "config.ini", {"model": model.cfg.to_dict(),
                                              "train": dataclasses.asdict(tcfg)})
    print(str(out_dir / "model.ckpt"), file=out)
    return EXIT_OK


def cmd_evaluate(args, out: TextIO) -> int:
    model, st, extras = _load_model(args.model)
    batch = _load_data(args.data)
    _check_vars(model, batch)
    cfg = model.cfg
    fr = extras.get("split.fractions", np.array([0.7, 0.1]))
    if args.split == "all":
        sp = None
        origins = window_origins(batch.length, cfg.t_in, cfg.t_out)
    else:
        sp = Splits.from_fractions(batch.length, float(fr[0]), float(fr[1]))
        origins = sp.origins(args.split, cfg.t_in, cfg.t_out)
    if len(origins) == 0:
        raise CLIError(EXIT_DATA, f"no complete windows in the {args.split} split "
                                  f"(T={batch.length}, t_in={cfg.t_in}, t_out={cfg.t_out})")
    x, _ = gather(st.transform(batch.values), origins, cfg.t_in, cfg.t_out)
    _, y = gather(batch.values, origins, cfg.t_in, cfg.t_out)
    _, ymask = gather(batch.mask.astype(np.float64), origins, cfg.t_in, cfg.t_out)
    rep = evaluate(model, x, y, st, mask=ymask > 0)
    out.write(rep.to_csv())
    return EXIT_OK


def cmd_forecast(args, out: TextIO) -> int:
    model, st, _ = _load_model(args.model)
    batch = _load_data(args.data)
    _check_vars(model, batch)
    cfg = model.cfg
    try:
        idx = batch.index_of(args.at)
    except DataError as e:
        raise CLIError(EXIT_DATA, str(e)) from None
    if idx < cfg.t_in - 1:
        raise CLIError(EXIT_DATA, f"origin {args.at} has {idx + 1} steps of history, model needs {cfg.t_in}")
    window = st.transform(batch.values[:, idx - cfg.t_in + 1:idx + 1])
    f = model.predict(window)
    mean = st.inverse(f.mean, axis=0)
    std = st.inverse_scale(f.std, axis=0)
    w = _writer(out)
    w.writerow(["origin_t", "var", "horizon", "mean", "std"])
    for n, name in enumerate(batch.var_names):
        for i in range(cfg.t_out):
            w.writerow([args.at, name, i + 1, _fmt(mean[n, i]), _fmt(std[n, i])])
    return EXIT_OK


def cmd_decompose(args, out: TextIO) -> int:
    model, st, _ = _load_model(args.model)
    batch = _load_data(args.data)
    _check_vars(model, batch)
    cfg = model.cfg
    if not 1 <= args.layer <= cfg.n_layers:
        raise CLIError(EXIT_USAGE, f"--layer must lie in 1..{cfg.n_layers}")
    if batch.length <= cfg.m:
        raise CLIError(EXIT_DATA, f"series of length {batch.length} is not longer than m={cfg.m}")
    # window statistics are causal, so one pass over the whole series gives every position
    with tape.no_grad():
        y = tape.as_node(st.transform(batch.values))
        stack = stack_blocks(model.embed(y), model.blocks[:args.layer], cfg.decouple_config(), fuse_last=False)
    comps = stack.final.components
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for comp in COMPONENTS:
        for kind, field_name in (("mu", f"mu_{comp}"), ("sigma", f"sigma_{comp}")):
            trace = getattr(comps, field_name).data.mean(axis=-1)
            path = out_dir / f"layer{args.layer}.{comp}.{kind}.csv"
            save_csv(dataclasses.replace(batch, values=trace, mask=None), path)
            print(str(path), file=out)
    return EXIT_OK


def cmd_explain(args, out: TextIO) -> int:
    model, _, _ = _load_model(args.model)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in AR_STREAMS:
        mat = contribution_matrix(model.extrap.ar[name])
        path = out_dir / f"explain.{name}.csv"
        with open(path, "w", newline="") as fh:
            w = _writer(fh)
            w.writerow(["horizon"] + [f"lag{j}" for j in range(mat.shape[1])])
            for i, row in enumerate(mat):
                w.writerow([i + 1] + [_fmt(v) for v in row])
        print(str(path), file=out)
    return EXIT_OK


def cmd_corrupt(args, out: TextIO) -> int:
    try:
        kind, level = parse_corruption(args.kind)
    except ValueError as e:
        raise CLIError(EXIT_USAGE, str(e)) from None
    batch = _load_data(args.data)
    try:
        bad = corrupt(batch, kind, level, args.seed)
    except ValueError as e:
        raise CLIError(EXIT_USAGE, str(e)) from None
    save_csv(bad, args.out or out)
    return EXIT_OK


def cmd_stream(args, out: TextIO, inp: TextIO) -> int:
    model, st, _ = _load_model(args.model)
    state = streaming.init(model, "ema" if args.ema else "exact")
    w = _writer(out)
    w.writerow(["t", "var", "horizon", "mean", "std"])
    header = None
    last = None
    names = [f"v{i}" for i in range(model.cfg.n_vars)]
    for line_no, row in enumerate(csv.reader(inp), start=1):
        if not row:
            continue
        if line_no == 1 and row[0].strip() and not row[0].strip().lstrip("-").isdigit():
            header = row
            names = [h.strip() for h in row[1:]]
            if len(names) != model.cfg.n_vars:
                raise CLIError(EXIT_DATA, f"stream header has N={len(names)} variables, "
                                          f"checkpoint expects N={model.cfg.n_vars}")
            continue
        width = model.cfg.n_vars + 1
        try:
            times, values, mask = parse_rows([row], header or ["time"] + names, first_line=line_no)
        except DataError as e:
            raise CLIError(EXIT_DATA, str(e)) from None
        if len(row) != width:
            raise CLIError(EXIT_DATA, f"line {line_no}: expected {width} fields")
        y = values[:, 0]
        if mask.any():
            # carry the previous observation forward; nothing before it means zero (the training mean)
            prev = last if last is not None else st.mean
            y = np.where(mask[:, 0], prev, y)
        last = y
        f = streaming.push(state, st.transform(y))
        if f is not None:
            mean = st.inverse(f.mean, axis=0)
            std = st.inverse_scale(f.std, axis=0)
            for n, name in enumerate(names):
                for i in range(model.cfg.t_out):
                    w.writerow([int(times[0]), name, i + 1, _fmt(mean[n, i]), _fmt(std[n, i])])
        out.flush()
    return EXIT_OK


def cmd_bench(args, out: TextIO) -> int:
    model, st, _ = _load_model(args.model)
    batch = _load_data(args.data)
    _check_vars(model, batch)
    cfg = model.cfg
    origins = window_origins(batch.length, cfg.t_in, cfg.t_out)
    if len(origins) == 0:
        raise CLIError(EXIT_DATA, f"series of length {batch.length} has no complete window")
    z = st.transform(batch.values)
    x, y = gather(z, origins[:max(args.batch_size, 1) * args.repeats], cfg.t_in, cfg.t_out)
    bs = args.batch_size
    params = model.parameters()
    saved = model.state_dict()
    t0 = time.perf_counter()
    n_train = 0
    for r in range(args.repeats):
        xb, yb = x[r * bs:(r + 1) * bs], y[r * bs:(r + 1) * bs]
        if len(xb) == 0:
            break
        loss = model.loss(xb, yb)
        loss.backward()
        tape.zero_grad(params)
        n_train += len(xb)
    train_per = (time.perf_counter() - t0) / max(n_train, 1)
    model.load_state_dict(saved)
    t0 = time.perf_counter()
    model.predict(x)
    infer_per = (time.perf_counter() - t0) / len(x)
    state = streaming.init(model, "ema")
    n_push = min(batch.length, 4 * max(cfg.m, cfg.delta_st))
    t0 = time.perf_counter()
    for t in range(n_push):
        streaming.push(state, z[:, t])
    push_per = (time.perf_counter() - t0) / n_push
    w = _writer(out)
    w.writerow(["measure", "seconds_per_sample", "samples"])
    w.writerow(["train_step", _fmt(train_per), n_train])
    w.writerow(["inference", _fmt(infer_per), len(x)])
    w.writerow(["stream_push_ema", _fmt(push_per), n_push])
    return EXIT_OK


# -- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scnn", description="Structured component forecasting toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="sample a synthetic dataset with ground-truth factors")
    g.add_argument("--spec", help="INI file with a [data] section")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")

    t = sub.add_parser("train", help="fit a model and write a checkpoint")
    t.add_argument("--config", help="INI file with [model] and [train] sections")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")

    e = sub.add_parser("evaluate", help="per-horizon metrics as CSV")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "val", "test", "all"), default="test")

    f = sub.add_parser("forecast", help="forecast from one origin")
    f.add_argument("--model", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--at", type=int, required=True, help="time stamp of the forecast origin")

    d = sub.add_parser("decompose", help="component traces of one layer")
    d.add_argument("--model", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--layer", type=int, default=1)
    d.add_argument("--out", required=True)

    x = sub.add_parser("explain", help="lag-to-horizon contribution matrices")
    x.add_argument("--model", required=True)
    x.add_argument("--out", required=True)

    c = sub.add_parser("corrupt", help="inject noise or missing values")
    c.add_argument("--kind", required=True, help="gaussian:<std> or missing:<rate>")
    c.add_argument("--seed", type=int, required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--out")

    s = sub.add_parser("stream", help="read rows from stdin, write forecasts to stdout")
    s.add_argument("--model", required=True)
    s.add_argument("--ema", action="store_true", help="moving-average statistics instead of exact windows")

    b = sub.add_parser("bench", help="latency measurements as CSV")
    b.add_argument("--model", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--batch-size", type=int, default=8)
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate,
            "forecast": cmd_forecast, "decompose": cmd_decompose, "explain": cmd_explain,
            "corrupt": cmd_corrupt, "bench": cmd_bench}


def main(argv: Optional[List[str]] = None, stdout: Optional[TextIO] = None,
         stderr: Optional[TextIO] = None, stdin: Optional[TextIO] = None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    stdin = stdin or sys.stdin
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=stderr)
        if args.command == "stream":
            return cmd_stream(args, stdout, stdin)
        return COMMANDS[args.command](args, stdout)
    except CLIError as e:
        code, msg = e.code, str(e)
    except DataError as e:
        code, msg = EXIT_DATA, str(e)
    except DivergenceError as e:
        code, msg = EXIT_DIVERGED, str(e)
    except (streaming.StreamError, ConfigError) as e:
        code, msg = EXIT_DATA, str(e)
    print(f"ERROR {code}: {msg}", file=stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
