"""Command-line front end: ``simulate | pretrain | train | evaluate | predict``.

Every option can come from a plain-text config file (``key = value`` lines,
dotted keys or ``[section]`` headers) and be overridden by a flag of the same
name, e.g. ``--train.lr 0.001``.  Exit codes: 0 success, 1 usage or config
error, 2 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import re
import sys
from dataclasses import dataclass
from typing import Any, Callable, Optional

import numpy as np

from . import __version__
from .channelsim import (default_environment, file_digest, perturb_velocity, read_dataset,
                         simulate, write_dataset)
from .evaluation import EmptyRegionError, chart_metrics, downstream_accuracy, embedding_csv
from .features import DisconnectedGraphError, preprocess_batch
from .models import (CELL_KINDS, Checkpoint, EncoderSpec, PredictorSpec, encode,
                     load_checkpoint, rollout, save_checkpoint)
from .ndnum import NumericError
from .training import TrainConfig, TrainLog, pretrain_encoder, train

log = logging.getLogger("chartjepa")

TOOL = f"chartjepa {__version__}"


class ConfigError(Exception):
    """Bad flags, config file or input paths (exit code 1)."""


class RunError(Exception):
    """Failure while the command runs (exit code 2)."""


# --------------------------------------------------------------------------
# value parsing

_PI_TERM = re.compile(r"^([+-]?)\s*(?:([0-9.eE+-]+)\s*\*\s*)?pi\s*(?:/\s*([0-9.eE+-]+))?\s*$")


def parse_angle(text: str) -> float:
    """A float, or ``pi``, ``pi/65``, ``2*pi/3`` style literals."""
    text = text.strip()
    m = _PI_TERM.match(text)
    if m:
        sign = -1.0 if m.group(1) == "-" else 1.0
        num = float(m.group(2)) if m.group(2) else 1.0
        den = float(m.group(3)) if m.group(3) else 1.0
        return sign * num * math.pi / den
    return float(text)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(conv):
    def parse(text: str):
        return tuple(conv(t) for t in text.split(",") if t.strip())
    return parse


PARSERS: dict[str, Callable[[str], Any]] = {
    "int": int,
    "float": float,
    "str": str.strip,
    "bool": _bool,
    "ints": _list(int),
    "floats": _list(parse_angle),
    "strs": _list(str.strip),
    "path": str.strip,
    "paths": _list(str.strip),
}


@dataclass(frozen=True)
class Key:
    name: str
    kind: str
    default: Any
    help: str = ""
    role: str = "value"  # value | input | output


def _k(name, kind, default, help="", role="value"):
    return Key(name, kind, default, help, role)


COMMON = [
    _k("seed", "int", 0, "global seed, recorded in every output header"),
]

SIM_KEYS = [
    _k("out", "path", "dataset.ds", "dataset file (a .manifest is written next to it)", "output"),
    _k("sim.trajectories", "int", 50, "number of trajectories"),
    _k("sim.steps", "int", 100, "slots per trajectory"),
    _k("sim.test_every", "int", 5, "every n-th trajectory is held out"),
    _k("sim.regions", "int", 10, "region count for the downstream task"),
    _k("sim.scatterers", "int", 25, "scatterer count"),
    _k("sim.env_seed", "int", 7, "seed of the scatterer layout"),
    _k("sim.antennas", "int", 8, "antennas per array"),
    _k("sim.subcarriers", "int", 32, "subcarriers"),
    _k("sim.snr_db", "float", 20.0, "per-sample SNR in dB"),
    _k("sim.speed_mean", "float", 1.3, "mean walking speed, m/s"),
    _k("sim.heading_noise", "float", 0.08, "max heading change per slot, rad"),
]

_TRAIN_KINDS = {int: "int", float: "float", str: "str"}
TRAIN_KEYS = [
    _k(f"train.{f.name}", _TRAIN_KINDS[type(f.default)], None, f"TrainConfig.{f.name} (default from preset)")
    for f in dataclasses.fields(TrainConfig) if f.name not in ("seed", "stage")
]

MODEL_KEYS = [
    _k("preset", "str", "desk", "desk | full: base values for train.* and model.*"),
    _k("model.widths", "ints", None, "encoder hidden widths (default from preset)"),
    _k("model.cell", "str", "gru", "rnn | gru | lstm"),
    _k("model.hidden", "int", None, "predictor hidden size (default from preset)"),
    _k("model.head_hidden", "int", 64, "predictor head hidden size"),
    _k("model.input_gain", "float", 10.0, "gain on per-slot displacement fed to the cell"),
]

DATASET = _k("dataset", "path", "dataset.ds", "dataset file", "input")

COMMANDS: dict[str, list[Key]] = {
    "simulate": COMMON + SIM_KEYS,
    "pretrain": COMMON + MODEL_KEYS + TRAIN_KEYS + [
        DATASET,
        _k("mode", "str", "geodesic", "adp | geodesic"),
        _k("out", "path", "stage1.ckpt", "stage-1 checkpoint", "output"),
        _k("report", "path", "", "metrics CSV (default: <out>.metrics.csv)", "output"),
    ],
    "train": COMMON + MODEL_KEYS + TRAIN_KEYS + [
        DATASET,
        _k("mode", "str", "geodesic", "stage-1 dissimilarity when no init checkpoint: adp | geodesic"),
        _k("init", "path", "", "stage-1 checkpoint to start from (skips stage 1)", "input"),
        _k("from_scratch", "bool", False, "skip stage 1 entirely"),
        _k("out", "path", "model.ckpt", "trained checkpoint", "output"),
        _k("log", "path", "", "TrainLog CSV (default: <out>.log.csv)", "output"),
    ],
    "evaluate": COMMON + [
        DATASET,
        _k("checkpoint", "paths", ("model.ckpt",), "one or more checkpoints, comma separated", "input"),
        _k("labels", "strs", (), "labels for the checkpoints (default: file stems)"),
        _k("out", "path", "eval", "output prefix", "output"),
        _k("horizons", "ints", (10, 25, 50), "prediction horizons, slots"),
        _k("biases", "floats", (0.0,), "angular velocity biases, rad/s (pi/65 style allowed)"),
        _k("methods", "strs", ("rollout", "greedy"), "rollout, greedy, oracle, encoder"),
        _k("regions", "int", 10, "region count"),
        _k("fit_fraction", "float", 0.1, "share of the test split used to fit the 1-NN"),
    ],
    "predict": COMMON + [
        DATASET,
        _k("checkpoint", "path", "model.ckpt", "trained checkpoint", "input"),
        _k("start", "int", 0, "sample index of the window start"),
        _k("horizon", "int", 50, "slots to predict"),
        _k("bias", "floats", (0.0,), "angular velocity bias, rad/s"),
        _k("out", "path", "prediction.csv", "predicted chart trajectory CSV", "output"),
    ],
}

ALL_KEYS = {k.name for keys in COMMANDS.values() for k in keys}


# --------------------------------------------------------------------------
# config resolution


def read_config_file(path: str) -> dict[str, str]:
    """``key = value`` lines; ``[section]`` prefixes later keys with ``section.``."""
    out, section = {}, ""
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    for no, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{no}: expected 'key = value'")
        key = key.strip()
        if section and key not in ALL_KEYS:
            key = f"{section}.{key}"
        if key not in ALL_KEYS:
            raise ConfigError(f"{path}:{no}: unknown key {key!r}")
        out[key] = val.strip()
    return out


def resolve(command: str, flags: dict[str, Optional[str]], config_path: Optional[str]) -> dict[str, Any]:
    """Merge defaults, config file and flags (in rising priority) into typed values."""
    raw = read_config_file(config_path) if config_path else {}
    cfg = {}
    for key in COMMANDS[command]:
        text = flags.get(key.name)
        if text is None:
            text = raw.get(key.name)
        if text is None:
            cfg[key.name] = key.default
            continue
        try:
            cfg[key.name] = PARSERS[key.kind](text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key.name}: {text!r} ({exc})") from exc
    return cfg


def config_hash(command: str, cfg: dict[str, Any]) -> str:
    """Digest of the command, every non-output value and every input file's content.

    Paths themselves are left out so relocated runs hash identically.
    """
    items = {"command": command}
    for key in COMMANDS[command]:
        val = cfg[key.name]
        if key.role == "output":
            continue
        if key.role == "input":
            paths = val if isinstance(val, tuple) else ((val,) if val else ())
            val = [file_digest(p) for p in paths]
        items[key.name] = val
    blob = json.dumps(items, sort_keys=True, default=repr).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _check_paths(command: str, cfg: dict[str, Any]) -> None:
    for key in COMMANDS[command]:
        val = cfg[key.name]
        paths = val if isinstance(val, tuple) else ((val,) if val else ())
        for p in paths:
            if key.role == "input" and not os.path.isfile(p):
                raise ConfigError(f"{key.name}: no such file {p}")
            if key.role == "output":
                parent = os.path.dirname(os.path.abspath(p))
                if not os.path.isdir(parent):
                    raise ConfigError(f"{key.name}: directory {parent} does not exist")
                if not os.access(parent, os.W_OK):
                    raise ConfigError(f"{key.name}: directory {parent} is not writable")


# --------------------------------------------------------------------------
# helpers shared by commands


@dataclass
class Run:
    command: str
    cfg: dict[str, Any]
    hash: str
    quiet: bool = False

    @property
    def seed(self) -> int:
        return self.cfg["seed"]

    def header(self) -> dict[str, str]:
        return {"tool": TOOL, "config_hash": self.hash}

    def csv_banner(self) -> str:
        return f"# {TOOL} config_hash={self.hash} seed={self.seed}\n"

    def write_csv(self, path: str, body: str) -> None:
        with open(path, "w", encoding="ascii", newline="\n") as f:
            f.write(self.csv_banner() + body)

    def say(self, text: str) -> None:
        if not self.quiet:
            print(text)


def _train_config(cfg: dict[str, Any], stage: str) -> TrainConfig:
    base = TrainConfig.desk() if cfg["preset"] == "desk" else TrainConfig()
    kw = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("train.") and v is not None}
    return dataclasses.replace(base, stage=stage, seed=cfg["seed"], **kw)


def _encoder_spec(cfg: dict[str, Any], in_dim: int) -> EncoderSpec:
    spec = EncoderSpec.desk(in_dim) if cfg["preset"] == "desk" else EncoderSpec(in_dim)
    if cfg["model.widths"] is not None:
        spec = dataclasses.replace(spec, widths=tuple(cfg["model.widths"]))
    return spec


def _predictor_spec(cfg: dict[str, Any]) -> PredictorSpec:
    spec = PredictorSpec.desk() if cfg["preset"] == "desk" else PredictorSpec()
    kw = {"cell": cfg["model.cell"], "head_hidden": cfg["model.head_hidden"],
          "input_gain": cfg["model.input_gain"]}
    if cfg["model.hidden"] is not None:
        kw["hidden"] = cfg["model.hidden"]
    return dataclasses.replace(spec, **kw)


def _validate_model_keys(cfg: dict[str, Any]) -> None:
    if cfg["preset"] not in ("desk", "full"):
        raise ConfigError(f"preset must be desk or full, got {cfg['preset']!r}")
    if cfg["model.cell"] not in CELL_KINDS:
        raise ConfigError(f"model.cell must be one of {CELL_KINDS}")
    if cfg["model.widths"] is not None and any(w < 1 for w in cfg["model.widths"]):
        raise ConfigError("model.widths must be positive")


def _load_features(path: str):
    ds = read_dataset(path)
    return ds, preprocess_batch(ds.h)


def _load_checked(path: str, in_dim: int) -> Checkpoint:
    ck = load_checkpoint(path)
    if ck.encoder_spec.in_dim != in_dim:
        raise RunError(f"{path}: encoder expects {ck.encoder_spec.in_dim} input features, "
                       f"the dataset provides {in_dim} (B*M*W); the checkpoint was built for "
                       f"another environment")
    return ck


# --------------------------------------------------------------------------
# commands


def cmd_simulate(run: Run) -> None:
    c = run.cfg
    for key in ("sim.trajectories", "sim.steps", "sim.test_every", "sim.regions"):
        if c[key] < 1:
            raise ConfigError(f"{key} must be >= 1")
    try:
        spec = default_environment(seed=c["sim.env_seed"], n_scatterers=c["sim.scatterers"],
                                   antennas=c["sim.antennas"], subcarriers=c["sim.subcarriers"],
                                   snr_db=c["sim.snr_db"], speed_mean=c["sim.speed_mean"],
                                   heading_noise=c["sim.heading_noise"])
    except ValueError as exc:
        raise ConfigError(f"invalid environment: {exc}") from exc
    ds = simulate(spec, c["sim.trajectories"], c["sim.steps"], run.seed,
                  test_every=c["sim.test_every"], n_regions=c["sim.regions"])
    write_dataset(c["out"], ds, run.header())
    counts = np.bincount(ds.region, minlength=ds.n_regions)
    run.say(f"wrote {c['out']}: {len(ds)} samples, {len(ds.trajectories)} trajectories "
            f"({len(ds.test_trajectories)} held out), {ds.n_regions} regions")
    run.say("region histogram: " + " ".join(f"{r}:{n}" for r, n in enumerate(counts)))


def cmd_pretrain(run: Run) -> None:
    c = run.cfg
    _validate_model_keys(c)
    if c["mode"] not in ("adp", "geodesic"):
        raise ConfigError(f"mode must be adp or geodesic, got {c['mode']!r}")
    try:
        tcfg = _train_config(c, f"pretrain_{c['mode']}")
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    ds, x = _load_features(c["dataset"])
    enc_spec = _encoder_spec(c, x.shape[1])
    tlog = TrainLog()
    theta, idx = pretrain_encoder(ds, tcfg, x, enc_spec, log_out=tlog)
    report = chart_metrics(ds.p[idx], encode(theta, x[idx]), seed=run.seed)
    save_checkpoint(c["out"], Checkpoint(theta, theta, None, enc_spec, None, run.seed, 0),
                    {**run.header(), "stage": tcfg.stage})
    report_path = c["report"] or c["out"] + ".metrics.csv"
    run.write_csv(report_path, report.to_csv())
    run.say(f"wrote {c['out']} and {report_path}")
    run.say(f"pretraining subset n={report.n} k={report.k}: CT {report.ct:.4f}  TW {report.tw:.4f}  "
            f"KS {report.ks:.4f}  RD {report.rd:.4f}")


def cmd_train(run: Run) -> None:
    c = run.cfg
    _validate_model_keys(c)
    if c["init"] and c["from_scratch"]:
        raise ConfigError("init and from_scratch are mutually exclusive")
    if c["mode"] not in ("adp", "geodesic"):
        raise ConfigError(f"mode must be adp or geodesic, got {c['mode']!r}")
    stage = "jepa" if c["init"] else "none-pretrain" if c["from_scratch"] else f"pretrain_{c['mode']}"
    try:
        tcfg = _train_config(c, stage)
        pred_spec = _predictor_spec(c)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    ds, x = _load_features(c["dataset"])
    theta = None
    if c["init"]:
        ck = _load_checked(c["init"], x.shape[1])
        enc_spec, theta = ck.encoder_spec, ck.encoder
    else:
        enc_spec = _encoder_spec(c, x.shape[1])

    def progress(epoch, loss):
        if not run.quiet:
            print(f"epoch {epoch + 1}/{tcfg.epochs} loss {loss:.6g}", file=sys.stderr)

    res = train(ds, tcfg, x, enc_spec, pred_spec, theta=theta, progress=progress)
    save_checkpoint(c["out"], Checkpoint(res.theta, res.theta_bar, res.phi, enc_spec, pred_spec,
                                         run.seed, res.steps), {**run.header(), "stage": stage})
    log_path = c["log"] or c["out"] + ".log.csv"
    run.write_csv(log_path, res.log.to_csv())
    run.say(f"wrote {c['out']} and {log_path} ({res.steps} steps, stage {stage})")
    if res.log.epoch_loss:
        run.say(f"JEPA loss: first epoch {res.log.epoch_loss[0]:.6g}, "
                f"last epoch {res.log.epoch_loss[-1]:.6g}")


def cmd_evaluate(run: Run) -> None:
    c = run.cfg
    paths = c["checkpoint"]
    if not paths:
        raise ConfigError("no checkpoint given")
    labels = c["labels"] or tuple(os.path.splitext(os.path.basename(p))[0] for p in paths)
    if len(labels) != len(paths) or len(set(labels)) != len(labels):
        raise ConfigError("labels must be unique, one per checkpoint")
    if not c["horizons"] or min(c["horizons"]) < 1:
        raise ConfigError("horizons must be positive")
    if not 0 < c["fit_fraction"] <= 1:
        raise ConfigError("fit_fraction must lie in (0, 1]")
    if c["regions"] < 1:
        raise ConfigError("regions must be >= 1")
    bad = set(c["methods"]) - {"rollout", "greedy", "oracle", "encoder"}
    if bad:
        raise ConfigError(f"unknown methods {sorted(bad)}")
    ds, x = _load_features(c["dataset"])
    te = ds.test_indices
    multi = len(paths) > 1
    metrics_csv, down_rows = [], None
    summary = []
    for path, label in zip(paths, labels):
        ck = _load_checked(path, x.shape[1])
        methods = c["methods"]
        if ck.predictor is None:
            methods = tuple(m for m in methods if m != "rollout")
            log.warning("%s has no predictor; skipping rollout", path)
        z = encode(ck.encoder, x[te])
        rep = chart_metrics(ds.p[te], z, seed=run.seed)
        body = rep.to_csv(label if multi else None)
        metrics_csv.append(body if not metrics_csv else body.split("\n", 1)[1])
        gain = ck.predictor_spec.input_gain if ck.predictor_spec else 10.0
        down = downstream_accuracy(ck.encoder, ck.predictor, ds, x, c["regions"], c["horizons"],
                                   c["fit_fraction"], gain, c["biases"], methods, run.seed,
                                   label if multi else None)
        down_rows = down if down_rows is None else down_rows.extend(down)
        emb_path = f"{c['out']}.{label}.embedding.csv" if multi else f"{c['out']}.embedding.csv"
        run.write_csv(emb_path, embedding_csv(z, ds.region[te], ds.traj[te]))
        summary.append(f"{label}: CT {rep.ct:.4f}  TW {rep.tw:.4f}  KS {rep.ks:.4f}  RD {rep.rd:.4f}")
    run.write_csv(f"{c['out']}.metrics.csv", "".join(metrics_csv))
    run.write_csv(f"{c['out']}.downstream.csv", down_rows.to_csv())
    run.say(f"wrote {c['out']}.metrics.csv, {c['out']}.downstream.csv and embeddings")
    for line in summary:
        run.say(line)
    for m, h, b, acc in down_rows.rows:
        run.say(f"  {m:<16} H={h:<4} bias={b:.5f}  accuracy {acc:.3f}")


def cmd_predict(run: Run) -> None:
    c = run.cfg
    H, n = c["horizon"], c["start"]
    if H < 1:
        raise ConfigError("horizon must be >= 1")
    if len(c["bias"]) != 1:
        raise ConfigError("bias takes a single value")
    ds = read_dataset(c["dataset"])
    if not 0 <= n < len(ds) or n + H >= len(ds) or ds.traj[n] != ds.traj[n + H]:
        raise ConfigError(f"window [{n}, {n + H}] does not fit inside one trajectory")
    x = preprocess_batch(ds.h[n:n + 1])
    ck = _load_checked(c["checkpoint"], x.shape[1])
    if ck.predictor is None:
        raise RunError(f"{c['checkpoint']} has no predictor")
    dt = ds.spec.slot_duration
    z0 = encode(ck.encoder, x)
    v = perturb_velocity(ds.v[n:n + H][None], c["bias"][0], dt)
    zs = rollout(ck.predictor, z0, v, dt, ck.predictor_spec.input_gain)[0]
    buf = io.StringIO()
    buf.write("step,x,y\n")
    for t, (a, b) in enumerate(np.vstack([z0, zs])):
        buf.write(f"{t},{a:.6f},{b:.6f}\n")
    run.write_csv(c["out"], buf.getvalue())
    run.say(f"wrote {c['out']}: {H} predicted chart points from sample {n}")


HANDLERS = {
    "simulate": cmd_simulate,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
}

HELP = {
    "simulate": "synthesize a CSI dataset and its manifest",
    "pretrain": "stage 1: fit the encoder to a dissimilarity (adp or geodesic)",
    "train": "two-stage training; --init or --from-scratch skip stage 1",
    "evaluate": "chart metrics, downstream accuracy and embedding export",
    "predict": "roll one window forward and write the predicted chart path",
}


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="chartjepa", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=TOOL)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, keys in COMMANDS.items():
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--quiet", action="store_true", help="no summary on stdout")
        for key in keys:
            flags = [f"--{key.name}"]
            if "_" in key.name:
                flags.append(f"--{key.name.replace('_', '-')}")
            default = ",".join(map(str, key.default)) if isinstance(key.default, tuple) else key.default
            kw = dict(dest=key.name, default=None, metavar=key.kind.upper(),
                      help=f"{key.help} [{default}]")
            if key.kind == "bool":
                kw.update(nargs="?", const="true")
            p.add_argument(*flags, **kw)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        try:
            args = build_parser().parse_args(argv)
        except SystemExit as exc:  # --help / --version
            return int(exc.code or 0)
        flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "quiet")}
        cfg = resolve(args.command, flags, args.config)
        _check_paths(args.command, cfg)
        run = Run(args.command, cfg, config_hash(args.command, cfg), args.quiet)
        HANDLERS[args.command](run)
        return 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DisconnectedGraphError as exc:
        print(f"error: {exc}; raise train.knn or train.time_window", file=sys.stderr)
        return 2
    except (RunError, NumericError, EmptyRegionError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
