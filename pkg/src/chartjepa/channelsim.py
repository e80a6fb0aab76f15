"""Synthetic user trajectories and geometric multipath MIMO-OFDM channels.

The environment is a 2-D room watched by ``B`` uniform linear arrays of ``M``
half-wavelength spaced antennas.  Each channel snapshot is the sum of a
line-of-sight ray and one single-bounce ray per visible scatterer, evaluated
over ``W`` subcarriers.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0

__all__ = [
    "ArrayPose",
    "Scatterer",
    "EnvironmentSpec",
    "TrajectoryState",
    "CsiSample",
    "Dataset",
    "default_environment",
    "generate_trajectory",
    "synth_csi",
    "simulate",
    "assign_regions",
    "region_grid",
    "perturb_velocity",
    "write_dataset",
    "read_dataset",
]


@dataclass(frozen=True)
class ArrayPose:
    x: float
    y: float
    boresight: float  # radians, direction the array faces


@dataclass(frozen=True)
class Scatterer:
    x: float
    y: float
    gain: complex


@dataclass(frozen=True)
class EnvironmentSpec:
    arrays: tuple[ArrayPose, ...]
    antennas: int = 8
    subcarriers: int = 32
    bandwidth: float = 50e6
    carrier_freq: float = 1.272e9
    scatterers: tuple[Scatterer, ...] = ()
    bounds: tuple[float, float, float, float] = (0.0, 0.0, 20.0, 15.0)  # xmin, ymin, xmax, ymax
    slot_duration: float = 0.04
    snr_db: Optional[float] = 20.0
    speed_range: tuple[float, float] = (0.2, 1.5)
    speed_mean: float = 1.3
    speed_reversion: float = 0.05
    speed_noise: float = 0.03
    heading_noise: float = 0.08  # max heading increment per slot, radians

    def __post_init__(self):
        if len(self.arrays) < 1:
            raise ValueError("need at least one antenna array")
        if self.antennas < 2:
            raise ValueError("need at least two antennas per array")
        if self.subcarriers < 4:
            raise ValueError("need at least four subcarriers")
        if self.slot_duration <= 0:
            raise ValueError("slot_duration must be positive")
        xmin, ymin, xmax, ymax = self.bounds
        if not (xmax > xmin and ymax > ymin):
            raise ValueError(f"degenerate bounds {self.bounds}")
        lo, hi = self.speed_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad speed range {self.speed_range}")

    @property
    def n_arrays(self) -> int:
        return len(self.arrays)

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_freq

    @property
    def csi_shape(self) -> tuple[int, int, int]:
        return (self.n_arrays, self.antennas, self.subcarriers)

    def subcarrier_offsets(self) -> np.ndarray:
        spacing = self.bandwidth / self.subcarriers
        return (np.arange(self.subcarriers) - self.subcarriers // 2) * spacing


def default_environment(seed: int = 7, n_scatterers: int = 25, **overrides) -> EnvironmentSpec:
    """Four 8-antenna arrays just outside the walls of a 20 m x 15 m room."""
    bounds = overrides.pop("bounds", (0.0, 0.0, 20.0, 15.0))
    xmin, ymin, xmax, ymax = bounds
    cx, cy = (xmin + xmax) / 2, (ymin + ymax) / 2
    arrays = (
        ArrayPose(xmin - 0.5, cy, 0.0),
        ArrayPose(xmax + 0.5, cy, math.pi),
        ArrayPose(cx, ymin - 0.5, math.pi / 2),
        ArrayPose(cx, ymax + 0.5, -math.pi / 2),
    )
    rng = np.random.default_rng(seed)
    scatterers = []
    for _ in range(n_scatterers):
        x = rng.uniform(xmin - 1.0, xmax + 1.0)
        y = rng.uniform(ymin - 1.0, ymax + 1.0)
        amp = rng.uniform(0.2, 0.6)
        phase = rng.uniform(0, 2 * math.pi)
        scatterers.append(Scatterer(float(x), float(y), complex(amp * np.exp(1j * phase))))
    overrides.setdefault("arrays", arrays)
    return EnvironmentSpec(scatterers=tuple(scatterers), bounds=bounds, **overrides)


@dataclass(frozen=True)
class TrajectoryState:
    position: tuple[float, float]
    velocity: tuple[float, float]
    heading: float
    speed: float


def _reflect(value: float, lo: float, hi: float) -> tuple[float, bool]:
    flipped = False
    while value < lo or value > hi:
        value = 2 * lo - value if value < lo else 2 * hi - value
        flipped = not flipped
    return value, flipped


def generate_trajectory(spec: EnvironmentSpec, steps: int, seed,
                        start: Optional[Sequence[float]] = None,
                        heading: Optional[float] = None,
                        speed: Optional[float] = None) -> list[TrajectoryState]:
    """Smooth random walk with reflecting walls.

    The heading gets a uniform increment in ``[-heading_noise, heading_noise]``
    per slot; the speed mean-reverts towards ``speed_mean`` with Gaussian
    kicks and is clipped to ``speed_range``.  ``states[n+1].position`` equals
    ``states[n].position + slot_duration * states[n].velocity`` unless a wall
    was hit in between.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng(seed)
    xmin, ymin, xmax, ymax = spec.bounds
    lo, hi = spec.speed_range
    if start is None:
        x, y = rng.uniform(xmin, xmax), rng.uniform(ymin, ymax)
    else:
        x, y = float(start[0]), float(start[1])
    h = rng.uniform(-math.pi, math.pi) if heading is None else float(heading)
    s = spec.speed_mean if speed is None else float(speed)
    s = min(max(s, lo), hi)
    dt = spec.slot_duration
    states = []
    for _ in range(steps):
        vx, vy = s * math.cos(h), s * math.sin(h)
        states.append(TrajectoryState((x, y), (vx, vy), h, s))
        x, fx = _reflect(x + dt * vx, xmin, xmax)
        y, fy = _reflect(y + dt * vy, ymin, ymax)
        if fx:
            h = math.pi - h
        if fy:
            h = -h
        h = math.atan2(math.sin(h), math.cos(h))
        if spec.heading_noise > 0:
            h += rng.uniform(-spec.heading_noise, spec.heading_noise)
        if spec.speed_noise > 0 or spec.speed_reversion > 0:
            s += spec.speed_reversion * (spec.speed_mean - s)
            if spec.speed_noise > 0:
                s += spec.speed_noise * rng.standard_normal()
            s = min(max(s, lo), hi)
    return states


def synth_csi(spec: EnvironmentSpec, p, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Complex channel ``[B, M, W]`` seen from user position ``p``.

    Noise is added only when ``rng`` is given and ``spec.snr_db`` is set.
    """
    px, py = float(p[0]), float(p[1])
    if not (math.isfinite(px) and math.isfinite(py)):
        raise ValueError("position must be finite")
    lam = spec.wavelength
    freqs = spec.carrier_freq + spec.subcarrier_offsets()
    m = np.arange(spec.antennas)
    h = np.zeros(spec.csi_shape, dtype=np.complex128)
    for b, arr in enumerate(spec.arrays):
        d_los = math.hypot(px - arr.x, py - arr.y)
        if d_los < 0.01:
            raise ValueError(f"user position within 1 cm of array {b}")
        # rays: (arrival point direction, total length, complex gain)
        rays = [(px, py, d_los, 1.0 + 0j)]
        for sc in spec.scatterers:
            d_in = math.hypot(px - sc.x, py - sc.y)
            d_out = math.hypot(sc.x - arr.x, sc.y - arr.y)
            if d_in < 1e-3 or d_out < 1e-3:
                continue
            rays.append((sc.x, sc.y, d_in + d_out, sc.gain))
        for sx, sy, length, gain in rays:
            theta = math.atan2(sy - arr.y, sx - arr.x) - arr.boresight
            if math.cos(theta) <= 0:  # behind the array
                continue
            steering = np.exp(1j * math.pi * m * math.sin(theta))
            delay = length / SPEED_OF_LIGHT
            response = np.exp(-2j * math.pi * freqs * delay)
            h[b] += (gain * lam / (4 * math.pi * length)) * np.outer(steering, response)
    if rng is not None and spec.snr_db is not None:
        power = np.mean(np.abs(h) ** 2)
        sigma = math.sqrt(power / 10 ** (spec.snr_db / 10) / 2)
        h = h + sigma * (rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape))
    return h


@dataclass(frozen=True)
class CsiSample:
    slot: int
    h: np.ndarray
    v: np.ndarray
    p_true: np.ndarray
    region_true: int


@dataclass
class Dataset:
    """Time-ordered samples of several trajectories plus a trajectory-level split.

    Arrays are indexed by sample; ``trajectories`` holds ``(start, stop)``
    index ranges and ``test_trajectories`` the ids held out for testing.
    """

    spec: EnvironmentSpec
    h: np.ndarray          # (N, B, M, W) complex
    v: np.ndarray          # (N, 2)
    p: np.ndarray          # (N, 2)
    region: np.ndarray     # (N,) int
    slot: np.ndarray       # (N,) slot index within its trajectory
    traj: np.ndarray       # (N,) trajectory id
    trajectories: list[tuple[int, int]]
    test_trajectories: frozenset = frozenset()
    seed: int = 0
    n_regions: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.p)

    def sample(self, i: int) -> CsiSample:
        return CsiSample(int(self.slot[i]), self.h[i], self.v[i], self.p[i], int(self.region[i]))

    def _indices(self, test: bool) -> np.ndarray:
        parts = [np.arange(a, b) for k, (a, b) in enumerate(self.trajectories)
                 if (k in self.test_trajectories) == test]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    @property
    def train_indices(self) -> np.ndarray:
        return self._indices(False)

    @property
    def test_indices(self) -> np.ndarray:
        return self._indices(True)

    def split_trajectories(self, test: bool) -> list[tuple[int, int]]:
        return [t for k, t in enumerate(self.trajectories) if (k in self.test_trajectories) == test]


def _jittered_starts(spec: EnvironmentSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    """One start point per cell of a near-square grid with at least ``count`` cells."""
    xmin, ymin, xmax, ymax = spec.bounds
    if count <= 0:
        return np.zeros((0, 2))
    aspect = (xmax - xmin) / (ymax - ymin)
    gy = max(1, int(round(math.sqrt(count / aspect))))
    gx = int(math.ceil(count / gy))
    cells = rng.permutation(gx * gy)[:count]
    cw, ch = (xmax - xmin) / gx, (ymax - ymin) / gy
    ix, iy = cells % gx, cells // gx
    # keep starts away from the cell border so the first slots stay in the cell
    u = rng.uniform(0.25, 0.75, size=(count, 2))
    return np.column_stack([xmin + (ix + u[:, 0]) * cw, ymin + (iy + u[:, 1]) * ch])


def simulate(spec: EnvironmentSpec, n_trajectories: int, steps: int, seed: int,
             test_every: int = 5, n_regions: int = 10) -> Dataset:
    """Generate a full dataset.

    Trajectory ``k`` is held out for testing when ``k % test_every ==
    test_every - 1``.  Train and test trajectories start on separate jittered
    grids so both splits cover the room.
    """
    if n_trajectories < 1 or steps < 1:
        raise ValueError("need at least one trajectory of at least one step")
    root = np.random.SeedSequence(seed)
    start_seq, *traj_seqs = root.spawn(n_trajectories + 1)
    start_rng = np.random.default_rng(start_seq)
    is_test = [test_every > 0 and k % test_every == test_every - 1 for k in range(n_trajectories)]
    n_test = sum(is_test)
    test_starts = _jittered_starts(spec, n_test, start_rng)
    train_starts = _jittered_starts(spec, n_trajectories - n_test, start_rng)
    B, M, W = spec.csi_shape
    N = n_trajectories * steps
    h = np.zeros((N, B, M, W), dtype=np.complex128)
    v = np.zeros((N, 2))
    p = np.zeros((N, 2))
    slot = np.zeros(N, dtype=np.int64)
    traj = np.zeros(N, dtype=np.int64)
    bounds = []
    i_test = i_train = 0
    for k, seq in enumerate(traj_seqs):
        walk_seq, noise_seq = seq.spawn(2)
        if is_test[k]:
            start = test_starts[i_test]
            i_test += 1
        else:
            start = train_starts[i_train]
            i_train += 1
        states = generate_trajectory(spec, steps, walk_seq, start=start)
        noise_rng = np.random.default_rng(noise_seq)
        off = k * steps
        for n, st in enumerate(states):
            h[off + n] = synth_csi(spec, st.position, noise_rng)
            v[off + n] = st.velocity
            p[off + n] = st.position
        slot[off:off + steps] = np.arange(steps)
        traj[off:off + steps] = k
        bounds.append((off, off + steps))
    ds = Dataset(spec, h, v, p, np.zeros(N, dtype=np.int64), slot, traj, bounds,
                 frozenset(k for k in range(n_trajectories) if is_test[k]), seed=seed)
    return assign_regions(ds, n_regions) if n_regions >= 2 else ds


def region_grid(bounds, R: int, max_cell_aspect: float = 3.0) -> Optional[tuple[int, int]]:
    """Grid shape ``(gx, gy)`` with ``gx * gy == R`` closest to the bounds aspect.

    Returns ``None`` when every factor pair gives cells more elongated than
    ``max_cell_aspect``.
    """
    xmin, ymin, xmax, ymax = bounds
    width, height = xmax - xmin, ymax - ymin
    best = None
    for gx in range(1, R + 1):
        if R % gx:
            continue
        gy = R // gx
        cell_aspect = (width / gx) / (height / gy)
        if max(cell_aspect, 1 / cell_aspect) > max_cell_aspect:
            continue
        score = abs(math.log(cell_aspect))
        if best is None or score < best[0]:
            best = (score, gx, gy)
    return None if best is None else (best[1], best[2])


def assign_regions(dataset: Dataset, R: int, seed: int = 0) -> Dataset:
    """Label every sample with one of ``R`` regions of the room.

    Regions are cells of a ``gx x gy`` grid (row-major from the minimum
    corner); when no factor pair of ``R`` fits the room, k-means on the
    positions is used instead.
    """
    if R < 2:
        raise ValueError("need at least two regions")
    spec = dataset.spec
    grid = region_grid(spec.bounds, R)
    if grid is not None:
        labels = _grid_labels(dataset.p, spec.bounds, *grid)
        method = f"grid {grid[0]}x{grid[1]}"
    else:
        from scipy.cluster.vq import kmeans2

        _, labels = kmeans2(dataset.p, R, seed=np.random.default_rng(seed), minit="++")
        method = "kmeans"
    out = replace(dataset, region=labels.astype(np.int64), n_regions=R,
                  meta={**dataset.meta, "regions": method})
    return out


def _grid_labels(p: np.ndarray, bounds, gx: int, gy: int) -> np.ndarray:
    xmin, ymin, xmax, ymax = bounds
    ix = np.floor((p[:, 0] - xmin) / (xmax - xmin) * gx).astype(np.int64)
    iy = np.floor((p[:, 1] - ymin) / (ymax - ymin) * gy).astype(np.int64)
    ix = np.clip(ix, 0, gx - 1)
    iy = np.clip(iy, 0, gy - 1)
    return iy * gx + ix


def perturb_velocity(v: np.ndarray, angular_bias: float, slot_duration: float) -> np.ndarray:
    """Rotate velocity ``t`` (counting from 1) by ``angular_bias * slot_duration * t``.

    Works on ``(T, 2)`` sequences and on batches ``(..., T, 2)``.
    """
    v = np.asarray(v, dtype=np.float64)
    if angular_bias == 0:
        return v.copy()
    T = v.shape[-2]
    angle = angular_bias * slot_duration * np.arange(1, T + 1)
    c, s = np.cos(angle), np.sin(angle)
    out = np.empty_like(v)
    out[..., 0] = c * v[..., 0] - s * v[..., 1]
    out[..., 1] = s * v[..., 0] + c * v[..., 1]
    return out


# --------------------------------------------------------------------------
# file format

DS_MAGIC = "CHARTJEPA-DS v1"
MANIFEST_MAGIC = "CHARTJEPA-MANIFEST v1"


def _spec_lines(spec: EnvironmentSpec) -> list[str]:
    arrays = ";".join(f"{a.x!r},{a.y!r},{a.boresight!r}" for a in spec.arrays)
    scat = ";".join(f"{s.x!r},{s.y!r},{s.gain.real!r},{s.gain.imag!r}" for s in spec.scatterers)
    return [
        f"arrays = {arrays}",
        f"antennas = {spec.antennas}",
        f"subcarriers = {spec.subcarriers}",
        f"bandwidth = {spec.bandwidth!r}",
        f"carrier_freq = {spec.carrier_freq!r}",
        f"scatterers = {scat}",
        "bounds = " + ",".join(repr(float(b)) for b in spec.bounds),
        f"slot_duration = {spec.slot_duration!r}",
        f"snr_db = {spec.snr_db!r}",
        "speed_range = " + ",".join(repr(float(s)) for s in spec.speed_range),
        f"speed_mean = {spec.speed_mean!r}",
        f"speed_reversion = {spec.speed_reversion!r}",
        f"speed_noise = {spec.speed_noise!r}",
        f"heading_noise = {spec.heading_noise!r}",
    ]


def _parse_spec(meta: dict) -> EnvironmentSpec:
    def floats(s):
        return tuple(float(x) for x in s.split(",")) if s else ()

    arrays = tuple(ArrayPose(*floats(a)) for a in meta["arrays"].split(";") if a)
    scat = []
    for s in meta["scatterers"].split(";"):
        if s:
            x, y, re, im = floats(s)
            scat.append(Scatterer(x, y, complex(re, im)))
    snr = meta["snr_db"]
    return EnvironmentSpec(
        arrays=arrays,
        antennas=int(meta["antennas"]),
        subcarriers=int(meta["subcarriers"]),
        bandwidth=float(meta["bandwidth"]),
        carrier_freq=float(meta["carrier_freq"]),
        scatterers=tuple(scat),
        bounds=floats(meta["bounds"]),
        slot_duration=float(meta["slot_duration"]),
        snr_db=None if snr == "None" else float(snr),
        speed_range=floats(meta["speed_range"]),
        speed_mean=float(meta["speed_mean"]),
        speed_reversion=float(meta["speed_reversion"]),
        speed_noise=float(meta["speed_noise"]),
        heading_noise=float(meta["heading_noise"]),
    )


def _ranges(idx: np.ndarray) -> str:
    if len(idx) == 0:
        return ""
    out = []
    start = prev = int(idx[0])
    for i in idx[1:]:
        i = int(i)
        if i != prev + 1:
            out.append(f"{start}:{prev + 1}")
            start = i
        prev = i
    out.append(f"{start}:{prev + 1}")
    return ",".join(out)


def write_dataset(path, ds: Dataset, header: Optional[dict] = None) -> str:
    """Write ``path`` and ``path + '.manifest'``; returns the manifest path.

    Records are little-endian float32:
    ``[2*B*M*W interleaved re/im | vx vy | px py | region]``.
    """
    B, M, W = ds.spec.csi_shape
    lines = [DS_MAGIC]
    for k, val in (header or {}).items():
        lines.append(f"{k} = {val}")
    lines += _spec_lines(ds.spec)
    lines += [
        f"seed = {ds.seed}",
        f"n_samples = {len(ds)}",
        f"n_trajectories = {len(ds.trajectories)}",
        f"n_regions = {ds.n_regions}",
        f"record_floats = {2 * B * M * W + 5}",
        "end_header",
    ]
    N = len(ds)
    rec = np.empty((N, 2 * B * M * W + 5), dtype="<f4")
    hv = ds.h.reshape(N, -1)
    rec[:, 0:2 * B * M * W:2] = hv.real
    rec[:, 1:2 * B * M * W:2] = hv.imag
    rec[:, -5:-3] = ds.v
    rec[:, -3:-1] = ds.p
    rec[:, -1] = ds.region
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        f.write(rec.tobytes())

    mlines = [MANIFEST_MAGIC]
    for k, val in (header or {}).items():
        mlines.append(f"{k} = {val}")
    mlines.append(f"seed = {ds.seed}")
    for k, (a, b) in enumerate(ds.trajectories):
        split = "test" if k in ds.test_trajectories else "train"
        mlines.append(f"trajectory {k} {a} {b} {split}")
    mlines.append(f"train = {_ranges(ds.train_indices)}")
    mlines.append(f"test = {_ranges(ds.test_indices)}")
    manifest = str(path) + ".manifest"
    with open(manifest, "w", encoding="ascii", newline="\n") as f:
        f.write("\n".join(mlines) + "\n")
    return manifest


def _read_header(f, magic: str) -> dict:
    first = f.readline().decode("ascii").rstrip("\n")
    if first != magic:
        raise ValueError(f"not a {magic} file (header {first!r})")
    meta = {}
    while True:
        line = f.readline()
        if not line:
            raise ValueError("truncated header")
        line = line.decode("ascii").rstrip("\n")
        if line == "end_header":
            return meta
        key, _, val = line.partition(" = ")
        meta[key] = val


def read_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        meta = _read_header(f, DS_MAGIC)
        payload = f.read()
    spec = _parse_spec(meta)
    B, M, W = spec.csi_shape
    nf = int(meta["record_floats"])
    N = int(meta["n_samples"])
    if nf != 2 * B * M * W + 5:
        raise ValueError("record size does not match the environment")
    rec = np.frombuffer(payload, dtype="<f4")
    if rec.size != N * nf:
        raise ValueError(f"expected {N * nf} floats, found {rec.size}")
    rec = rec.reshape(N, nf).astype(np.float64)
    h = (rec[:, 0:2 * B * M * W:2] + 1j * rec[:, 1:2 * B * M * W:2]).reshape(N, B, M, W)
    trajectories, test = [], set()
    with open(str(path) + ".manifest", encoding="ascii") as f:
        if f.readline().rstrip("\n") != MANIFEST_MAGIC:
            raise ValueError("bad manifest")
        for line in f:
            parts = line.split()
            if parts and parts[0] == "trajectory":
                k, a, b, split = int(parts[1]), int(parts[2]), int(parts[3]), parts[4]
                trajectories.append((a, b))
                if split == "test":
                    test.add(k)
    slot = np.zeros(N, dtype=np.int64)
    traj = np.zeros(N, dtype=np.int64)
    for k, (a, b) in enumerate(trajectories):
        slot[a:b] = np.arange(b - a)
        traj[a:b] = k
    return Dataset(spec, h, rec[:, -5:-3].copy(), rec[:, -3:-1].copy(),
                   rec[:, -1].astype(np.int64), slot, traj, trajectories,
                   frozenset(test), seed=int(meta["seed"]), n_regions=int(meta["n_regions"]),
                   meta={k: v for k, v in meta.items()})


def file_digest(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()
