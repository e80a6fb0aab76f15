"""Two-stage training: siamese stress pretraining, then joint JEPA optimisation."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import ndnum as nd
from .channelsim import Dataset
from .features import DissimilarityMatrix, d_adp_matrix, d_geodesic_fused
from .models import (EncoderSpec, PredictorSpec, encode, encoder_forward, ema_update,
                     init_encoder, init_predictor, on_tape, predictor_rollout)
from .ndnum import Tape

log = logging.getLogger(__name__)

STAGES = ("pretrain_adp", "pretrain_geodesic", "jepa", "none-pretrain")
DESK_OVERRIDES = {"horizon": 50, "lr": 0.001, "pretrain_pairs_per_point": 8}

__all__ = [
    "STAGES",
    "DESK_OVERRIDES",
    "TrainConfig",
    "TrainLog",
    "TrainResult",
    "TrainingDiverged",
    "window_starts",
    "jepa_loss",
    "jepa_step",
    "sgd_update",
    "Optimizer",
    "pretrain_siamese",
    "pretrain_encoder",
    "pretraining_subset",
    "pretraining_dissimilarity",
    "stress",
    "train",
    "JepaState",
]


class TrainingDiverged(nd.NumericError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.005
    batch: int = 200
    tau: float = 0.99
    weight_decay: float = 3e-4
    lr_decay_per_epoch: float = 0.97
    horizon: int = 300
    epochs: int = 30
    seed: int = 0
    stage: str = "pretrain_geodesic"
    optimizer: str = "adam"
    # stage 1
    pretrain_fraction: float = 0.2
    pretrain_epochs: int = 20
    pretrain_batch: int = 200
    pretrain_lr: float = 0.005
    pretrain_pairs_per_point: int = 32
    knn: int = 15
    time_window: int = 3
    speed_scale: float = 1.0
    landmarks: int = 3000
    stress_eps: float = 1e-3

    def __post_init__(self):
        if self.lr <= 0 or self.pretrain_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.batch < 1 or self.pretrain_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        """Laptop-scale preset: shorter horizon, gentler stage-2 step, fewer stage-1 pairs."""
        return cls(**{**DESK_OVERRIDES, **kw})


@dataclass
class TrainLog:
    steps: list[tuple[int, int, float, float, float]] = field(default_factory=list)
    epoch_loss: list[float] = field(default_factory=list)
    pretrain_stress: list[float] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def grad_norms(self) -> np.ndarray:
        return np.array([s[4] for s in self.steps])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "epoch", "loss", "lr", "grad_norm"])
        for step, epoch, loss, lr, gn in self.steps:
            w.writerow([step, epoch, repr(loss), repr(lr), repr(gn)])
        return buf.getvalue()


@dataclass
class JepaState:
    theta: dict[str, np.ndarray]
    theta_bar: dict[str, np.ndarray]
    phi: dict[str, np.ndarray]


@dataclass
class TrainResult:
    theta: dict[str, np.ndarray]
    theta_bar: dict[str, np.ndarray]
    phi: dict[str, np.ndarray]
    log: TrainLog
    encoder_spec: EncoderSpec
    predictor_spec: PredictorSpec
    steps: int = 0


def _copy(params):
    return {k: v.copy() for k, v in params.items()}


# --------------------------------------------------------------------------
# windows


def window_starts(trajectories, horizon: int) -> np.ndarray:
    """Every start ``n`` whose window ``[n, n + horizon]`` stays in one trajectory."""
    out = [np.arange(a, b - horizon) for a, b in trajectories if b - a > horizon]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def _check_windows(starts: np.ndarray, traj: np.ndarray, horizon: int) -> None:
    ends = starts + horizon
    if np.any(ends >= len(traj)) or np.any(traj[starts] != traj[ends]):
        raise ValueError("window crosses a trajectory boundary")


# --------------------------------------------------------------------------
# stage 2


def jepa_loss(tape: Tape, theta: dict, target: dict, phi: dict, x: np.ndarray, v: np.ndarray,
              starts: np.ndarray, horizon: int, slot_duration: float, input_gain: float,
              stop_gradient: bool = True) -> nd.Node:
    """``(1 / (batch * H)) * sum_t ||z_hat_{n+t} - z_{n+t}||^2`` on ``tape``.

    ``theta``, ``target`` and ``phi`` are dicts of tape nodes.  Passing the
    same dict for ``theta`` and ``target`` ties the two encoders.
    """
    starts = np.asarray(starts)
    batch = len(starts)
    steps = starts[:, None] + np.arange(1, horizon + 1)[None, :]
    z0 = encoder_forward(theta, tape.const(x[starts]))
    preds = predictor_rollout(phi, z0, v[starts[:, None] + np.arange(horizon)[None, :]],
                              slot_duration, input_gain)
    if stop_gradient:
        uniq, inv = np.unique(steps, return_inverse=True)
        inv = inv.reshape(steps.shape)
        z_all = nd.detach(encoder_forward(target, tape.const(x[uniq]))).value
        targets = [tape.const(z_all[inv[:, t]]) for t in range(horizon)]
    else:
        targets = [encoder_forward(target, tape.const(x[steps[:, t]])) for t in range(horizon)]
    acc = None
    for zh, zt in zip(preds, targets):
        d = nd.sub(zh, zt)
        term = nd.total(nd.mul(d, d))
        acc = term if acc is None else nd.add(acc, term)
    return nd.scale(acc, 1.0 / (batch * horizon))


def sgd_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float,
               weight_decay: float) -> dict[str, np.ndarray]:
    """Plain SGD with decoupled weight decay: ``p - lr * g - lr * wd * p``."""
    return {k: p - lr * grads[k] - lr * weight_decay * p for k, p in params.items()}


class Optimizer:
    """Gradient step with decoupled weight decay over a fixed set of tensors.

    ``kind='sgd'`` is plain SGD; ``kind='adam'`` rescales the step by bias-
    corrected first and second moment estimates.  The tensor names given at
    construction are the complete update set.
    """

    def __init__(self, names, kind: str = "adam", weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.names = tuple(names)
        self.kind = kind
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float) -> dict[str, np.ndarray]:
        if set(params) != set(self.names):
            raise KeyError("parameters outside the optimizer's update set")
        if self.kind == "sgd":
            return sgd_update(params, grads, lr, self.weight_decay)
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self.m[k] = b1 * self.m.get(k, 0.0) + (1.0 - b1) * g
            v = self.v[k] = b2 * self.v.get(k, 0.0) + (1.0 - b2) * g * g
            out[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps) - lr * self.weight_decay * p
        return out


def jepa_step(state: JepaState, starts: np.ndarray, x: np.ndarray, v: np.ndarray,
              traj: np.ndarray, cfg: TrainConfig, slot_duration: float, input_gain: float,
              lr: Optional[float] = None,
              optimizer: Optional[Optimizer] = None) -> tuple[JepaState, float, float]:
    """One optimisation step on a mini-batch of windows.

    Only ``theta`` and ``phi`` are handed to the optimiser; ``theta_bar``
    moves exclusively through :func:`ema_update`.  Returns the new state, the
    loss and the global gradient norm.
    """
    _check_windows(np.asarray(starts), traj, cfg.horizon)
    lr = cfg.lr if lr is None else lr
    tape = Tape(cfg.seed)
    th = on_tape(tape, state.theta)
    ph = on_tape(tape, state.phi)
    tb = on_tape(tape, state.theta_bar, trainable=False)
    loss = jepa_loss(tape, th, tb, ph, x, v, starts, cfg.horizon, slot_duration, input_gain)
    tape.backward(loss)
    g_theta = {k: n.grad for k, n in th.items()}
    g_phi = {k: n.grad for k, n in ph.items()}
    gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in (*g_theta.values(), *g_phi.values())))
    loss_value = float(loss.value[0, 0])
    if not (math.isfinite(loss_value) and math.isfinite(gnorm)):
        raise TrainingDiverged(f"non-finite loss {loss_value} at lr={lr}, grad_norm={gnorm}")
    if optimizer is None:
        optimizer = Optimizer([*state.theta, *state.phi], cfg.optimizer, cfg.weight_decay)
    updated = optimizer.step({**state.theta, **state.phi}, {**g_theta, **g_phi}, lr)
    theta = {k: updated[k] for k in state.theta}
    phi = {k: updated[k] for k in state.phi}
    theta_bar = ema_update(state.theta_bar, theta, cfg.tau)
    return JepaState(theta, theta_bar, phi), loss_value, gnorm


# --------------------------------------------------------------------------
# stage 1


def stress(z: np.ndarray, d: np.ndarray, eps: float = 1e-3) -> tuple[float, float]:
    """Least-squares scale ``s`` and relative weighted stress of chart ``z`` against ``d``.

    Relative stress is ``sum w (|z_i - z_j| - s d)^2 / sum w (s d)^2`` over
    pairs ``i < j`` with ``w = 1 / (d + eps)``.
    """
    iu = np.triu_indices(len(z), k=1)
    dz = np.linalg.norm(z[iu[0]] - z[iu[1]], axis=1)
    dd = d[iu]
    w = 1.0 / (dd + eps)
    den = np.sum(w * dd * dd)
    if den == 0:
        raise ValueError("all-zero dissimilarity")
    s = float(np.sum(w * dz * dd) / den)
    if s <= 0:
        return s, 1.0
    return s, float(np.sum(w * (dz - s * dd) ** 2) / (s * s * den))


def pretrain_siamese(theta: dict[str, np.ndarray], x: np.ndarray, dissim: DissimilarityMatrix,
                     cfg: TrainConfig, rng: Optional[np.random.Generator] = None,
                     epochs: Optional[int] = None, log_out: Optional[TrainLog] = None,
                     rescale: bool = True):
    """Fit the encoder so chart distances follow ``s * dissim`` (weighted stress).

    ``s`` is refit by least squares at the start of every epoch and held
    fixed within it.  Returns the new parameters and the per-epoch relative
    stress (measured after each epoch).
    """
    d = dissim.d
    n = d.shape[0]
    if x.shape[0] != n:
        raise ValueError("features and dissimilarity disagree on the sample count")
    if not np.any(d > 0):
        raise ValueError("all-zero dissimilarity matrix")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    steps = max(1, math.ceil(n * cfg.pretrain_pairs_per_point / cfg.pretrain_batch))
    theta = _copy(theta)
    opt = Optimizer(theta, cfg.optimizer, cfg.weight_decay)
    history = []
    for _ in range(epochs):
        s, _ = stress(encode(theta, x), d, cfg.stress_eps)
        if s <= 0:
            s = 1.0
        for _ in range(steps):
            i = rng.integers(0, n, cfg.pretrain_batch)
            j = (i + rng.integers(1, n, cfg.pretrain_batch)) % n
            dij = d[i, j][:, None]
            w = 1.0 / (dij + cfg.stress_eps)
            w = w / w.sum()
            tape = Tape(cfg.seed)
            th = on_tape(tape, theta)
            diff = nd.sub(encoder_forward(th, tape.const(x[i])), encoder_forward(th, tape.const(x[j])))
            dist = nd.sqrt(nd.row_sum(nd.mul(diff, diff)), eps=1e-12)
            resid = nd.sub(dist, tape.const(s * dij))
            loss = nd.total(nd.mul(tape.const(w), nd.mul(resid, resid)))
            tape.backward(loss)
            theta = opt.step(theta, {k: v.grad for k, v in th.items()}, cfg.pretrain_lr)
        history.append(stress(encode(theta, x), d, cfg.stress_eps)[1])
        if log_out is not None:
            log_out.pretrain_stress.append(history[-1])
        if not math.isfinite(history[-1]):
            raise TrainingDiverged("pretraining stress is not finite")
    if rescale and epochs > 0:
        theta = _rescale_output(theta, stress(encode(theta, x), d, cfg.stress_eps)[0])
    return theta, history


def _rescale_output(theta, s):
    """Divide the output layer by ``s`` so chart distances approximate ``d`` itself."""
    if s <= 0:
        return theta
    out = _copy(theta)
    last = max(int(k.split(".")[1]) for k in theta if k.startswith("enc."))
    out[f"enc.{last}.W"] /= s
    out[f"enc.{last}.b"] /= s
    return out


def pretraining_subset(dataset: Dataset, fraction: float, seed: int, limit: int) -> np.ndarray:
    """Uniform, sorted subsample of the training split."""
    train = dataset.train_indices
    count = min(max(2, int(round(fraction * len(train)))), limit, len(train))
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(train, size=count, replace=False))


def pretraining_dissimilarity(kind: str, x: np.ndarray, dataset: Dataset, idx: np.ndarray,
                              cfg: TrainConfig) -> DissimilarityMatrix:
    if kind == "adp":
        return DissimilarityMatrix(d_adp_matrix(x), "adp")
    if kind == "geodesic":
        return d_geodesic_fused(x, cfg.knn, dataset.slot[idx], dataset.traj[idx], cfg.time_window,
                                cfg.speed_scale, dataset.spec.slot_duration)
    raise ValueError(f"unknown dissimilarity {kind!r}")


def pretrain_encoder(dataset: Dataset, cfg: TrainConfig, x: np.ndarray,
                     encoder_spec: Optional[EncoderSpec] = None,
                     theta: Optional[dict] = None, log_out: Optional[TrainLog] = None):
    """Stage 1 on the pretraining subset, with the dissimilarity named by ``cfg.stage``.

    Uses the same seed streams as :func:`train`, so ``train`` with
    ``stage='jepa'`` and the returned parameters reproduces a full run.
    Returns ``(theta, subset_indices)``.
    """
    if cfg.stage not in ("pretrain_adp", "pretrain_geodesic"):
        raise ValueError(f"stage {cfg.stage!r} has no pretraining dissimilarity")
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    if theta is None:
        theta = init_encoder(encoder_spec or EncoderSpec(x.shape[1]), seeds[0])
    idx = pretraining_subset(dataset, cfg.pretrain_fraction, cfg.seed, cfg.landmarks)
    if cfg.pretrain_epochs == 0:
        return _copy(theta), idx
    dm = pretraining_dissimilarity(cfg.stage.split("_", 1)[1], x[idx], dataset, idx, cfg)
    theta, _ = pretrain_siamese(theta, x[idx], dm, cfg, np.random.default_rng(seeds[2]),
                                log_out=log_out)
    return theta, idx


# --------------------------------------------------------------------------
# full curriculum


def _collapse_check(theta, x, epoch):
    z = encode(theta, x)
    ev = np.linalg.eigvalsh(np.cov(z.T)) if len(z) > 2 else np.ones(2)
    if ev[-1] <= 0 or ev[0] < 1e-6 * ev[-1]:
        log.warning("epoch %d: chart variance collapsed (eigenvalues %s)", epoch, ev)
    return ev


def train(dataset: Dataset, cfg: TrainConfig, x: np.ndarray,
          encoder_spec: Optional[EncoderSpec] = None,
          predictor_spec: Optional[PredictorSpec] = None,
          theta: Optional[dict] = None, phi: Optional[dict] = None,
          theta_bar: Optional[dict] = None, progress=None) -> TrainResult:
    """Run stage 1 (per ``cfg.stage``) and ``cfg.epochs`` epochs of stage 2.

    ``x`` holds the preprocessed features of every sample of ``dataset``.
    Passing ``theta`` skips stage 1 initialisation but not stage 1 itself;
    use ``stage='jepa'`` or ``'none-pretrain'`` to skip it.
    """
    t0 = time.perf_counter()
    encoder_spec = encoder_spec or EncoderSpec(x.shape[1])
    predictor_spec = predictor_spec or PredictorSpec()
    if x.shape[0] != len(dataset):
        raise ValueError("one feature row per sample is required")
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    theta = _copy(theta) if theta is not None else init_encoder(encoder_spec, seeds[0])
    phi = _copy(phi) if phi is not None else init_predictor(predictor_spec, seeds[1])
    tlog = TrainLog()
    if cfg.stage in ("pretrain_adp", "pretrain_geodesic") and cfg.epochs > 0:
        theta, _ = pretrain_encoder(dataset, cfg, x, theta=theta, log_out=tlog)
    theta_bar = _copy(theta) if theta_bar is None else _copy(theta_bar)
    state = JepaState(theta, theta_bar, phi)
    starts = window_starts(dataset.split_trajectories(test=False), cfg.horizon)
    if cfg.epochs > 0 and len(starts) == 0:
        raise ValueError(f"no training window of horizon {cfg.horizon} fits the trajectories")
    rng = np.random.default_rng(seeds[3])
    v = dataset.v
    dt = dataset.spec.slot_duration
    lr = cfg.lr
    step = 0
    opt = Optimizer([*state.theta, *state.phi], cfg.optimizer, cfg.weight_decay)
    monitor = x[dataset.train_indices[:: max(1, len(dataset.train_indices) // 1000)]]
    for epoch in range(cfg.epochs):
        order = rng.permutation(starts)
        _check_windows(order, dataset.traj, cfg.horizon)
        losses = []
        for a in range(0, len(order), cfg.batch):
            try:
                state, loss, gn = jepa_step(state, order[a:a + cfg.batch], x, v, dataset.traj,
                                            cfg, dt, predictor_spec.input_gain, lr, opt)
            except nd.NumericError as exc:
                last = tlog.grad_norms[-5:].tolist() if tlog.steps else []
                raise TrainingDiverged(f"{exc}; epoch {epoch}, lr={lr}, recent grad norms {last}") from exc
            tlog.steps.append((step, epoch, loss, lr, gn))
            losses.append(loss)
            step += 1
        tlog.epoch_loss.append(float(np.mean(losses)))
        _collapse_check(state.theta, monitor, epoch)
        if progress is not None:
            progress(epoch, tlog.epoch_loss[-1])
        lr *= cfg.lr_decay_per_epoch
    tlog.wall_time = time.perf_counter() - t0
    return TrainResult(state.theta, state.theta_bar, state.phi, tlog, encoder_spec,
                       predictor_spec, step)
