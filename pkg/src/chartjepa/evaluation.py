"""Chart-quality metrics and the region-classification downstream task."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .channelsim import Dataset, assign_regions, perturb_velocity
from .models import encode, rollout
from .training import window_starts

__all__ = [
    "MetricsReport",
    "DownstreamReport",
    "default_k",
    "continuity_trustworthiness",
    "kruskal_stress",
    "rajski_distance",
    "rajski_from_histogram",
    "chart_metrics",
    "NearestNeighbor",
    "EmptyRegionError",
    "downstream_accuracy",
    "greedy_baseline",
    "noise_sweep",
    "embedding_csv",
]


@dataclass
class MetricsReport:
    ct: float
    tw: float
    ks: float
    rd: float
    k: int
    n: int

    def rows(self):
        return [(name, getattr(self, name)) for name in ("ct", "tw", "ks", "rd")]

    def to_csv(self, label: Optional[str] = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["metric", "value", "k", "n"]
        w.writerow(head if label is None else ["model", *head])
        for name, val in self.rows():
            row = [name, f"{val:.6f}", self.k, self.n]
            w.writerow(row if label is None else [label, *row])
        return buf.getvalue()


def default_k(n: int) -> int:
    """5 % of the point count, at least 5."""
    return max(5, int(0.05 * n))


def _rank_rows(d: np.ndarray, rows: np.ndarray):
    """Neighbour order (self first) and 1-based ranks for a block of rows."""
    d = d.copy()
    d[np.arange(len(rows)), rows] = -np.inf
    order = np.argsort(d, axis=1, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(d.shape[1])[None, :], axis=1)
    return order, ranks


def continuity_trustworthiness(P: np.ndarray, Z: np.ndarray, k: int,
                               block: int = 512) -> tuple[float, float]:
    """Rank-based continuity and trustworthiness, ties broken by index.

    Trustworthiness penalises chart neighbours that are not true neighbours
    by how far down the true ranking they sit; continuity is the mirror image.
    """
    P = np.asarray(P, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    n = len(P)
    if len(Z) != n:
        raise ValueError("P and Z must have the same number of points")
    if n <= 3 * k:
        raise ValueError(f"need n > 3k (n={n}, k={k})")
    tw_pen = ct_pen = 0
    for a in range(0, n, block):
        rows = np.arange(a, min(a + block, n))
        op, rp = _rank_rows(cdist(P[rows], P), rows)
        oz, rz = _rank_rows(cdist(Z[rows], Z), rows)
        knn_p, knn_z = op[:, 1:k + 1], oz[:, 1:k + 1]
        # ranks of the latent neighbours in true space and vice versa
        r_true = np.take_along_axis(rp, knn_z, axis=1)
        r_lat = np.take_along_axis(rz, knn_p, axis=1)
        tw_pen += int(np.sum(np.where(r_true > k, r_true - k, 0)))
        ct_pen += int(np.sum(np.where(r_lat > k, r_lat - k, 0)))
    norm = 2.0 / (n * k * (2 * n - 3 * k - 1))
    return 1.0 - norm * ct_pen, 1.0 - norm * tw_pen


def kruskal_stress(P: np.ndarray, Z: np.ndarray) -> float:
    """Normalised stress after the least-squares scaling of chart distances."""
    if len(P) < 2:
        raise ValueError("need at least two points")
    dp, dz = pdist(P), pdist(Z)
    zz = float(dz @ dz)
    if zz == 0.0:
        return 1.0
    beta = float(dp @ dz) / zz
    num = float(np.sum((dp - beta * dz) ** 2))
    return math.sqrt(num / float(dp @ dp))


def _equal_frequency_bins(values: np.ndarray, bins: int) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    labels = np.empty(len(values), dtype=np.int64)
    labels[order] = (np.arange(len(values)) * bins) // len(values)
    return labels


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def rajski_from_histogram(joint: np.ndarray) -> float:
    """``1 - I(X;Y) / H(X,Y)`` of a joint count table."""
    joint = np.asarray(joint, dtype=np.float64)
    hxy = _entropy(joint.ravel())
    if hxy == 0.0:
        return 0.0
    mi = _entropy(joint.sum(axis=1)) + _entropy(joint.sum(axis=0)) - hxy
    return float(min(max(1.0 - mi / hxy, 0.0), 1.0))


def rajski_distance(P: np.ndarray, Z: np.ndarray, bins: int = 16, max_pairs: int = 200_000,
                    seed: int = 0) -> float:
    """Rajski distance between equal-frequency binned true and chart pair distances."""
    if len(P) < 2 or bins < 2:
        raise ValueError("need n >= 2 and bins >= 2")
    dp, dz = pdist(P), pdist(Z)
    if len(dp) > max_pairs:
        pick = np.sort(np.random.default_rng(seed).choice(len(dp), max_pairs, replace=False))
        dp, dz = dp[pick], dz[pick]
    bx = _equal_frequency_bins(dp, bins)
    by = _equal_frequency_bins(dz, bins)
    joint = np.zeros((bins, bins))
    np.add.at(joint, (bx, by), 1.0)
    return rajski_from_histogram(joint)


def chart_metrics(P: np.ndarray, Z: np.ndarray, k: Optional[int] = None,
                  bins: int = 16, seed: int = 0) -> MetricsReport:
    n = len(P)
    k = default_k(n) if k is None else k
    ct, tw = continuity_trustworthiness(P, Z, k)
    return MetricsReport(ct, tw, kruskal_stress(P, Z), rajski_distance(P, Z, bins, seed=seed), k, n)


# --------------------------------------------------------------------------
# downstream task


class EmptyRegionError(ValueError):
    pass


class NearestNeighbor:
    """1-NN classifier; ties go to the lowest fit index."""

    def __init__(self, points: np.ndarray, labels: np.ndarray):
        self.points = np.asarray(points, dtype=np.float64)
        self.labels = np.asarray(labels)

    def predict(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        shape = z.shape[:-1]
        flat = z.reshape(-1, z.shape[-1])
        out = np.empty(len(flat), dtype=self.labels.dtype)
        for a in range(0, len(flat), 4096):
            out[a:a + 4096] = self.labels[np.argmin(cdist(flat[a:a + 4096], self.points), axis=1)]
        return out.reshape(shape)


@dataclass
class DownstreamReport:
    rows: list[tuple[str, int, float, float]] = field(default_factory=list)  # method, H, bias, acc
    region_counts: dict[int, int] = field(default_factory=dict)
    n_windows: int = 0

    def accuracy(self, method: str, horizon: int, bias: float = 0.0) -> float:
        for m, h, b, acc in self.rows:
            if m == method and h == horizon and b == bias:
                return acc
        raise KeyError((method, horizon, bias))

    def extend(self, other: "DownstreamReport") -> "DownstreamReport":
        self.rows.extend(other.rows)
        self.region_counts = self.region_counts or other.region_counts
        self.n_windows = self.n_windows or other.n_windows
        return self

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "horizon", "bias", "accuracy"])
        for m, h, b, acc in self.rows:
            w.writerow([m, h, repr(float(b)), f"{acc:.6f}"])
        return buf.getvalue()


@dataclass
class _Task:
    labels: np.ndarray           # region per sample
    clf: NearestNeighbor
    starts: np.ndarray           # window starts in the test split
    z0: np.ndarray               # chart point of every window start


def _prepare(theta, dataset: Dataset, x: np.ndarray, R: int, horizons: Sequence[int],
             fit_fraction: float, seed: int) -> _Task:
    if R == 1:
        labels = np.zeros(len(dataset), dtype=np.int64)
    elif R == dataset.n_regions:
        labels = dataset.region
    else:
        labels = assign_regions(dataset, R).region
    test = dataset.test_indices
    if len(test) == 0:
        raise ValueError("dataset has no test split")
    # systematic sample: every k-th test sample from a seeded offset, so every
    # region a trajectory lingers in gets fit points
    stride = max(1, int(round(1.0 / fit_fraction)))
    offset = int(np.random.default_rng(seed).integers(stride))
    fit = test[offset::stride] if offset < len(test) else test[:1]
    starts = window_starts(dataset.split_trajectories(test=True), max(horizons))
    if len(starts) == 0:
        raise ValueError(f"no test window of horizon {max(horizons)}")
    needed = np.unique(labels[np.concatenate([starts, starts + max(horizons)])])
    missing = sorted(set(needed.tolist()) - set(labels[fit].tolist()))
    if missing:
        raise EmptyRegionError(f"regions {missing} have no point in the 1-NN fit set")
    clf = NearestNeighbor(encode(theta, x[fit]), labels[fit])
    return _Task(labels, clf, starts, encode(theta, x[starts]))


def _score(task: _Task, pred_regions: np.ndarray, horizons) -> dict[int, float]:
    # pred_regions[:, t - 1] is the region predicted for slot start + t
    out = {}
    for H in horizons:
        truth = task.labels[task.starts + H]
        out[H] = float(np.mean(pred_regions[:, H - 1] == truth))
    return out


def downstream_accuracy(theta, phi, dataset: Dataset, x: np.ndarray, R: int = 10,
                        horizons: Sequence[int] = (10, 25, 50), fit_fraction: float = 0.1,
                        input_gain: float = 10.0, biases: Sequence[float] = (0.0,),
                        methods: Sequence[str] = ("rollout", "greedy"), seed: int = 0,
                        label: Optional[str] = None) -> DownstreamReport:
    """Region accuracy of predicted chart points ``H`` slots after a window start.

    Methods: ``rollout`` (encoder + predictor on the true or biased
    velocities), ``greedy`` (initial region kept), ``oracle`` (encoder applied
    to the true future channel), ``encoder`` (encoder on the window start,
    i.e. the horizon-0 accuracy).
    """
    horizons = sorted(set(int(h) for h in horizons))
    if horizons[0] < 1:
        raise ValueError("horizons must be >= 1")
    task = _prepare(theta, dataset, x, R, horizons, fit_fraction, seed)
    Hmax = horizons[-1]
    steps = task.starts[:, None] + np.arange(Hmax)[None, :]
    report = DownstreamReport(n_windows=len(task.starts))
    report.region_counts = {int(r): int(c) for r, c in
                            zip(*np.unique(task.labels[dataset.test_indices], return_counts=True))}
    dt = dataset.spec.slot_duration
    for method in methods:
        name = method if label is None else f"{label}:{method}"
        if method == "rollout":
            for bias in biases:
                v = perturb_velocity(dataset.v[steps], bias, dt)
                zs = rollout(phi, task.z0, v, dt, input_gain)
                acc = _score(task, task.clf.predict(zs), horizons)
                report.rows += [(name, H, float(bias), acc[H]) for H in horizons]
            continue
        if method == "greedy":
            first = task.clf.predict(task.z0)
            pred = np.repeat(first[:, None], Hmax, axis=1)
        elif method == "oracle":
            future = task.starts[:, None] + np.arange(1, Hmax + 1)[None, :]
            pred = task.clf.predict(encode(theta, x[future.ravel()]).reshape(len(task.starts), Hmax, -1))
        elif method == "encoder":
            pred = np.repeat(task.clf.predict(task.z0)[:, None], Hmax, axis=1)
            acc0 = float(np.mean(pred[:, 0] == task.labels[task.starts]))
            report.rows += [(name, 0, 0.0, acc0)]
            continue
        else:
            raise ValueError(f"unknown method {method!r}")
        acc = _score(task, pred, horizons)
        report.rows += [(name, H, 0.0, acc[H]) for H in horizons]
    return report


def greedy_baseline(theta, dataset: Dataset, x: np.ndarray, R: int = 10,
                    horizons: Sequence[int] = (10, 25, 50), fit_fraction: float = 0.1,
                    seed: int = 0) -> dict[int, float]:
    """Keep the region of the initial chart point for every later slot."""
    rep = downstream_accuracy(theta, None, dataset, x, R, horizons, fit_fraction,
                              methods=("greedy",), seed=seed)
    return {h: acc for _, h, _, acc in rep.rows}


def noise_sweep(theta, phi, dataset: Dataset, x: np.ndarray, biases: Sequence[float],
                horizons: Sequence[int] = (10, 25, 50), R: int = 10, fit_fraction: float = 0.1,
                input_gain: float = 10.0, seed: int = 0,
                label: Optional[str] = None) -> DownstreamReport:
    """Rollout accuracy with the velocity heading drifting at each angular bias (rad/s)."""
    return downstream_accuracy(theta, phi, dataset, x, R, horizons, fit_fraction, input_gain,
                               biases=biases, methods=("rollout",), seed=seed, label=label)


def embedding_csv(z: np.ndarray, region: np.ndarray, traj: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "region", "trajectory_id"])
    for (a, b), r, t in zip(z, region, traj):
        w.writerow([f"{a:.6f}", f"{b:.6f}", int(r), int(t)])
    return buf.getvalue()
