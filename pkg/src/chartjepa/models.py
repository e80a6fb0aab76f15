"""Chart encoder, velocity-conditioned recurrent predictor, EMA target, checkpoints.

Parameter sets are plain ``dict[str, ndarray]`` in declaration order.  Forward
passes take a :class:`~chartjepa.ndnum.Tape` plus a matching dict of leaf
nodes so the same code serves training and inference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ndnum as nd
from .ndnum import Node, Tape

__all__ = [
    "EncoderSpec",
    "PredictorSpec",
    "CELL_KINDS",
    "init_encoder",
    "init_predictor",
    "encoder_forward",
    "encode",
    "predictor_rollout",
    "rollout",
    "ema_update",
    "param_count",
    "on_tape",
    "save_checkpoint",
    "load_checkpoint",
    "Checkpoint",
]

CELL_KINDS = ("rnn", "gru", "lstm")
# gates of each cell kind; every gate owns an input, a recurrent and a bias tensor
_GATES = {"rnn": ("h",), "gru": ("r", "u", "c"), "lstm": ("i", "f", "o", "g")}

FULL_ENCODER_WIDTHS = (1024, 512, 256, 128, 64)
DESK_ENCODER_WIDTHS = (256, 128, 64)


@dataclass(frozen=True)
class EncoderSpec:
    in_dim: int
    widths: tuple[int, ...] = FULL_ENCODER_WIDTHS
    out_dim: int = 2

    @classmethod
    def desk(cls, in_dim: int, **kw) -> "EncoderSpec":
        """Reduced widths for laptop-scale runs."""
        return cls(in_dim, **{"widths": DESK_ENCODER_WIDTHS, **kw})

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.in_dim, *self.widths, self.out_dim]
        return list(zip(dims[:-1], dims[1:]))


@dataclass(frozen=True)
class PredictorSpec:
    cell: str = "gru"
    hidden: int = 256
    head_hidden: int = 64
    input_gain: float = 10.0  # multiplies the per-slot displacement fed to the cell
    head_out_scale: float = 0.01  # shrinks the initial output layer of the head

    def __post_init__(self):
        if self.cell not in CELL_KINDS:
            raise ValueError(f"cell must be one of {CELL_KINDS}, got {self.cell!r}")
        if self.hidden < 1 or self.head_hidden < 1:
            raise ValueError("hidden sizes must be >= 1")

    @classmethod
    def desk(cls, **kw) -> "PredictorSpec":
        return cls(**{"hidden": 64, **kw})


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def init_encoder(spec: EncoderSpec, seed) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for i, (fi, fo) in enumerate(spec.layer_dims):
        params[f"enc.{i}.W"] = _glorot(rng, fi, fo)
        params[f"enc.{i}.b"] = np.zeros((1, fo))
    return params


def init_predictor(spec: PredictorSpec, seed) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    H = spec.hidden
    params = {}
    for g in _GATES[spec.cell]:
        params[f"cell.{g}.Wx"] = _glorot(rng, 2, H)
        params[f"cell.{g}.Wh"] = _orthogonal(rng, H)
        bias = np.ones((1, H)) if (spec.cell == "lstm" and g == "f") else np.zeros((1, H))
        params[f"cell.{g}.b"] = bias
    params["head.0.W"] = _glorot(rng, H, spec.head_hidden)
    params["head.0.b"] = np.zeros((1, spec.head_hidden))
    params["head.1.W"] = spec.head_out_scale * _glorot(rng, spec.head_hidden, 2)
    params["head.1.b"] = np.zeros((1, 2))
    return params


def param_count(params: dict[str, np.ndarray]) -> int:
    return sum(p.size for p in params.values())


def on_tape(tape: Tape, params: dict[str, np.ndarray], trainable: bool = True) -> dict[str, Node]:
    make = tape.leaf if trainable else tape.const
    return {k: make(v) for k, v in params.items()}


def _n_layers(params) -> int:
    return sum(1 for k in params if k.startswith("enc.") and k.endswith(".W"))


def encoder_forward(leaves: dict[str, Node], x: Node) -> Node:
    """ReLU MLP with a linear output layer."""
    n = _n_layers(leaves)
    h = x
    for i in range(n):
        h = nd.add_bias(nd.matmul(h, leaves[f"enc.{i}.W"]), leaves[f"enc.{i}.b"])
        if i < n - 1:
            h = nd.relu(h)
    return h


def encode(params: dict[str, np.ndarray], x: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Chart points for feature rows ``x``; shape ``(N, 2)``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    expected = params["enc.0.W"].shape[0]
    if x.shape[1] != expected:
        raise nd.DimensionError(f"encoder expects {expected} features, got {x.shape[1]}")
    out = []
    for a in range(0, x.shape[0], chunk):
        # plain numpy path, identical arithmetic to encoder_forward
        h = x[a:a + chunk]
        n = _n_layers(params)
        for i in range(n):
            h = h @ params[f"enc.{i}.W"] + params[f"enc.{i}.b"]
            if i < n - 1:
                h = np.where(h > 0.0, h, 0.0)
        out.append(h)
    return np.concatenate(out) if out else np.zeros((0, params[f"enc.{_n_layers(params) - 1}.b"].shape[1]))


def _cell_kind(params) -> str:
    if "cell.h.Wx" in params:
        return "rnn"
    if "cell.r.Wx" in params:
        return "gru"
    if "cell.i.Wx" in params:
        return "lstm"
    raise ValueError("parameter set holds no recurrent cell")


def _gate(leaves, g, x, h):
    return nd.add_bias(nd.add(nd.matmul(x, leaves[f"cell.{g}.Wx"]),
                              nd.matmul(h, leaves[f"cell.{g}.Wh"])), leaves[f"cell.{g}.b"])


def cell_step(kind: str, leaves: dict[str, Node], x: Node, state: tuple) -> tuple:
    """One recurrent step; ``state`` is ``(h,)`` or ``(h, c)`` for LSTM."""
    h = state[0]
    if kind == "rnn":
        return (nd.tanh(_gate(leaves, "h", x, h)),)
    if kind == "gru":
        r = nd.sigmoid(_gate(leaves, "r", x, h))
        u = nd.sigmoid(_gate(leaves, "u", x, h))
        rh = nd.mul(r, h)
        cand = nd.tanh(nd.add_bias(nd.add(nd.matmul(x, leaves["cell.c.Wx"]),
                                          nd.matmul(rh, leaves["cell.c.Wh"])), leaves["cell.c.b"]))
        # h' = h + u * (cand - h)
        return (nd.add(h, nd.mul(u, nd.sub(cand, h))),)
    c = state[1]
    i = nd.sigmoid(_gate(leaves, "i", x, h))
    f = nd.sigmoid(_gate(leaves, "f", x, h))
    o = nd.sigmoid(_gate(leaves, "o", x, h))
    g = nd.tanh(_gate(leaves, "g", x, h))
    c_new = nd.add(nd.mul(f, c), nd.mul(i, g))
    return (nd.mul(o, nd.tanh(c_new)), c_new)


def head_forward(leaves: dict[str, Node], h: Node) -> Node:
    a = nd.relu(nd.add_bias(nd.matmul(h, leaves["head.0.W"]), leaves["head.0.b"]))
    return nd.add_bias(nd.matmul(a, leaves["head.1.W"]), leaves["head.1.b"])


def predictor_rollout(leaves: dict[str, Node], z0: Node, velocities: np.ndarray,
                      slot_duration: float, input_gain: float = 10.0,
                      horizon: Optional[int] = None) -> list[Node]:
    """Autoregressive chart prediction on a tape.

    ``velocities`` is ``(batch, T, 2)``; the first ``horizon`` (default ``T``)
    are consumed.  Returns ``horizon`` nodes of shape ``(batch, 2)`` with
    ``z_t = z_{t-1} + head(hidden_t)``.
    """
    v = np.asarray(velocities, dtype=np.float64)
    if v.ndim == 2:
        v = v[None]
    H = v.shape[1] if horizon is None else int(horizon)
    if H < 1 or v.shape[1] < H:
        raise ValueError(f"need at least {max(H, 1)} velocities, got {v.shape[1]}")
    kind = _cell_kind(leaves)
    tape = z0.tape
    batch = v.shape[0]
    hidden = leaves["cell.h.Wh" if kind == "rnn" else f"cell.{_GATES[kind][0]}.Wh"].shape[0]
    zero = tape.const(np.zeros((batch, hidden)))
    state = (zero, zero) if kind == "lstm" else (zero,)
    z = z0
    out = []
    step_scale = slot_duration * input_gain
    for t in range(H):
        x = tape.const(v[:, t, :] * step_scale)
        state = cell_step(kind, leaves, x, state)
        z = nd.add(z, head_forward(leaves, state[0]))
        out.append(z)
    return out


def rollout(phi: dict[str, np.ndarray], z0, velocities, slot_duration: float,
            input_gain: float = 10.0, horizon: Optional[int] = None) -> np.ndarray:
    """Predicted chart points ``(batch, H, 2)`` (or ``(H, 2)`` for a single window)."""
    z0 = np.asarray(z0, dtype=np.float64)
    single = z0.ndim == 1
    v = np.asarray(velocities, dtype=np.float64)
    if v.ndim == 2:
        v = v[None]
    if v.shape[1] == 0:
        raise ValueError("empty velocity sequence")
    tape = Tape()
    zs = predictor_rollout(on_tape(tape, phi, trainable=False), tape.const(np.atleast_2d(z0)),
                           v, slot_duration, input_gain, horizon)
    out = np.stack([z.value for z in zs], axis=1)
    return out[0] if single else out


def ema_update(target: dict[str, np.ndarray], online: dict[str, np.ndarray],
               tau: float) -> dict[str, np.ndarray]:
    """``target <- tau * target + (1 - tau) * online`` per tensor, as a new dict."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    if target.keys() != online.keys():
        raise nd.DimensionError("parameter sets differ in their tensors")
    out = {}
    for k, t in target.items():
        o = online[k]
        if t.shape != o.shape:
            raise nd.DimensionError(f"{k}: shape {t.shape} vs {o.shape}")
        out[k] = tau * t + (1.0 - tau) * o
    return out


# --------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = "CHARTJEPA-CKPT v1"


@dataclass
class Checkpoint:
    encoder: dict[str, np.ndarray]
    target: dict[str, np.ndarray]
    predictor: Optional[dict[str, np.ndarray]]
    encoder_spec: EncoderSpec
    predictor_spec: Optional[PredictorSpec]
    seed: int = 0
    step: int = 0
    meta: Optional[dict] = None


def save_checkpoint(path, ckpt: Checkpoint, header: Optional[dict] = None) -> None:
    """Text header, then each tensor as ``<u4 rows, <u4 cols`` + float32 data."""
    groups = [("encoder", ckpt.encoder), ("target", ckpt.target)]
    if ckpt.predictor is not None:
        groups.append(("predictor", ckpt.predictor))
    names = [f"{g}/{k}" for g, params in groups for k in params]
    ps = ckpt.predictor_spec
    lines = [CKPT_MAGIC]
    for key, val in (header or {}).items():
        lines.append(f"{key} = {val}")
    lines += [
        f"in_dim = {ckpt.encoder_spec.in_dim}",
        "widths = " + ",".join(str(w) for w in ckpt.encoder_spec.widths),
        f"out_dim = {ckpt.encoder_spec.out_dim}",
        f"cell = {ps.cell if ps else 'none'}",
        f"hidden = {ps.hidden if ps else 0}",
        f"head_hidden = {ps.head_hidden if ps else 0}",
        f"input_gain = {ps.input_gain!r}" if ps else "input_gain = 0.0",
        f"seed = {ckpt.seed}",
        f"step = {ckpt.step}",
        "tensors = " + ",".join(names),
        "end_header",
    ]
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        for _, params in groups:
            for arr in params.values():
                f.write(np.array(arr.shape, dtype="<u4").tobytes())
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        first = f.readline().decode("ascii").rstrip("\n")
        if first != CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        meta = {}
        while True:
            line = f.readline()
            if not line:
                raise ValueError("truncated checkpoint header")
            line = line.decode("ascii").rstrip("\n")
            if line == "end_header":
                break
            key, _, val = line.partition(" = ")
            meta[key] = val
        payload = f.read()
    groups: dict[str, dict[str, np.ndarray]] = {"encoder": {}, "target": {}, "predictor": {}}
    off = 0
    for name in meta["tensors"].split(","):
        rows, cols = np.frombuffer(payload, dtype="<u4", count=2, offset=off)
        off += 8
        n = int(rows) * int(cols)
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=off).astype(np.float64)
        off += 4 * n
        g, _, key = name.partition("/")
        groups[g][key] = arr.reshape(int(rows), int(cols))
    if off != len(payload):
        raise ValueError("checkpoint payload has trailing bytes")
    widths = tuple(int(w) for w in meta["widths"].split(",") if w)
    enc_spec = EncoderSpec(int(meta["in_dim"]), widths, int(meta["out_dim"]))
    pred_spec = None
    if meta["cell"] != "none":
        pred_spec = PredictorSpec(meta["cell"], int(meta["hidden"]), int(meta["head_hidden"]),
                                  float(meta["input_gain"]))
    return Checkpoint(groups["encoder"], groups["target"], groups["predictor"] or None,
                      enc_spec, pred_spec, int(meta["seed"]), int(meta["step"]), meta)
