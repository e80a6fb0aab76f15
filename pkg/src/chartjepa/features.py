"""Angle-delay profile features and the two pretraining dissimilarities."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, shortest_path

__all__ = [
    "DisconnectedGraphError",
    "DissimilarityMatrix",
    "adp",
    "d_adp",
    "d_adp_matrix",
    "preprocess",
    "preprocess_batch",
    "fused_graph",
    "shortest_paths",
    "d_geodesic_fused",
    "write_dissimilarity",
    "read_dissimilarity",
]


class DisconnectedGraphError(RuntimeError):
    def __init__(self, component_sizes):
        self.component_sizes = sorted((int(s) for s in component_sizes), reverse=True)
        super().__init__(f"proximity graph is disconnected: {len(self.component_sizes)} "
                         f"components of sizes {self.component_sizes[:10]}")


@dataclass
class DissimilarityMatrix:
    d: np.ndarray
    kind: str = "adp"

    @property
    def n(self) -> int:
        return self.d.shape[0]


def adp(h: np.ndarray) -> np.ndarray:
    """Angle-delay profile magnitude of a ``[..., B, M, W]`` channel.

    DFT over antennas (angle), inverse DFT over subcarriers (delay).
    """
    h = np.asarray(h)
    return np.abs(np.fft.ifft(np.fft.fft(h, axis=-2), axis=-1))


def d_adp(h1: np.ndarray, h2: np.ndarray) -> float:
    """Cosine dissimilarity of two angle-delay profiles, in ``[0, 1]``."""
    h1, h2 = np.asarray(h1), np.asarray(h2)
    if h1.shape != h2.shape:
        raise ValueError(f"shape mismatch {h1.shape} vs {h2.shape}")
    a1, a2 = adp(h1).ravel(), adp(h2).ravel()
    n1, n2 = np.linalg.norm(a1), np.linalg.norm(a2)
    if n1 == 0 or n2 == 0:
        raise ValueError("zero-norm angle-delay profile")
    return float(min(max(1.0 - a1 @ a2 / (n1 * n2), 0.0), 1.0))


def preprocess(h: np.ndarray) -> np.ndarray:
    """Flattened angle-delay profile scaled to unit Euclidean norm."""
    a = adp(h).ravel()
    norm = np.linalg.norm(a)
    if norm == 0:
        raise ValueError("cannot normalize an all-zero channel")
    return a / norm


def preprocess_batch(h: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """:func:`preprocess` over the leading axis of ``(N, B, M, W)``."""
    N = h.shape[0]
    out = np.empty((N, int(np.prod(h.shape[1:]))))
    for a in range(0, N, chunk):
        block = adp(h[a:a + chunk]).reshape(min(chunk, N - a), -1)
        norms = np.linalg.norm(block, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("cannot normalize an all-zero channel")
        out[a:a + chunk] = block / norms
    return out


def d_adp_matrix(x: np.ndarray) -> np.ndarray:
    """Pairwise ADP dissimilarity from unit-norm features (rows of ``x``)."""
    d = 1.0 - x @ x.T
    np.clip(d, 0.0, 1.0, out=d)
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return d


def fused_graph(d_local: np.ndarray, k: int, slot: Optional[np.ndarray] = None,
                traj: Optional[np.ndarray] = None, time_window: int = 0,
                speed_scale: float = 1.0, slot_duration: float = 1.0):
    """Sparse symmetric proximity graph.

    Each node links to its ``k`` nearest neighbours under ``d_local``, and
    to every sample of the same trajectory at most ``time_window`` slots away.
    Temporal edges weigh ``min(d_local, speed_scale * slot_gap * slot_duration)``.
    """
    n = d_local.shape[0]
    rows, cols, vals = [], [], []
    if k > 0:
        if n < k + 1:
            raise ValueError(f"need at least k+1={k + 1} points, got {n}")
        dd = d_local.copy()
        np.fill_diagonal(dd, np.inf)
        nbr = np.argsort(dd, axis=1, kind="stable")[:, :k]
        r = np.repeat(np.arange(n), k)
        c = nbr.ravel()
        rows.append(r)
        cols.append(c)
        vals.append(d_local[r, c])
    if time_window > 0 and slot is not None and traj is not None:
        order = np.lexsort((slot, traj))
        for lag in range(1, time_window + 1):
            a, b = order[:-lag], order[lag:]
            gap = np.abs(slot[b] - slot[a])
            ok = (traj[a] == traj[b]) & (gap <= time_window) & (gap > 0)
            a, b, gap = a[ok], b[ok], gap[ok]
            rows.append(a)
            cols.append(b)
            vals.append(np.minimum(d_local[a, b], speed_scale * gap * slot_duration))
    if not rows:
        raise ValueError("graph has no edges")
    r = np.concatenate(rows + cols)
    c = np.concatenate(cols + rows)
    w = np.concatenate(vals + vals)
    # csgraph drops explicit zeros; keep coincident samples connected
    w = np.maximum(w, 1e-12)
    # duplicate edges keep their smallest weight
    key = r * n + c
    order = np.lexsort((w, key))
    key, w = key[order], w[order]
    first = np.ones(len(key), dtype=bool)
    first[1:] = key[1:] != key[:-1]
    key, w = key[first], w[first]
    return coo_matrix((w, (key // n, key % n)), shape=(n, n)).tocsr()


def shortest_paths(graph) -> np.ndarray:
    """All-pairs shortest path lengths of an undirected weighted graph."""
    n_comp, labels = connected_components(graph, directed=False)
    if n_comp > 1:
        raise DisconnectedGraphError(np.bincount(labels))
    return shortest_path(graph, method="D", directed=False)


def d_geodesic_fused(x: np.ndarray, k: int = 15, slot: Optional[np.ndarray] = None,
                     traj: Optional[np.ndarray] = None, time_window: int = 3,
                     speed_scale: float = 1.0, slot_duration: float = 0.04) -> DissimilarityMatrix:
    """Geodesic dissimilarity over the fused k-NN / temporal proximity graph.

    ``x`` holds unit-norm features of the (landmark) subset.
    """
    n = x.shape[0]
    if n < k + 1:
        raise ValueError(f"need at least k+1={k + 1} points, got {n}")
    g = fused_graph(d_adp_matrix(x), k, slot, traj, time_window, speed_scale, slot_duration)
    d = shortest_paths(g)
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return DissimilarityMatrix(d, "geodesic")


DM_MAGIC = "CHARTJEPA-DM v1"


def write_dissimilarity(path, dm: DissimilarityMatrix, header: Optional[dict] = None) -> None:
    """Text header then the strict upper triangle as little-endian float32."""
    lines = [DM_MAGIC]
    for key, val in (header or {}).items():
        lines.append(f"{key} = {val}")
    lines += [f"n = {dm.n}", f"kind = {dm.kind}", "end_header"]
    iu = np.triu_indices(dm.n, k=1)
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        f.write(dm.d[iu].astype("<f4").tobytes())


def read_dissimilarity(path) -> DissimilarityMatrix:
    with open(path, "rb") as f:
        if f.readline().decode("ascii").rstrip("\n") != DM_MAGIC:
            raise ValueError("not a dissimilarity matrix file")
        meta = {}
        for line in f:
            line = line.decode("ascii").rstrip("\n")
            if line == "end_header":
                break
            key, _, val = line.partition(" = ")
            meta[key] = val
        payload = f.read()
    n = int(meta["n"])
    tri = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    if tri.size != n * (n - 1) // 2:
        raise ValueError("payload size does not match n")
    d = np.zeros((n, n))
    iu = np.triu_indices(n, k=1)
    d[iu] = tri
    d = d + d.T
    return DissimilarityMatrix(d, meta.get("kind", "adp"))
