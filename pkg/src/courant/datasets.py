"""Analytic stand-in datasets and the JSON+CSV point-cloud snapshot format.

Two generators:

* ``gen_wake`` - a cylinder in a channel with an inviscid base flow plus a
  closed-form street of alternating Gaussian-core vortices shed at ``f_shed``.
* ``gen_channel`` - steady flow through a channel with a smooth constriction;
  the stream function is known, so the flux through every section is exact.

Snapshots are stored as a small JSON manifest next to a CSV with one point per
row and columns ``x, y[, z], f0.., u0..``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, FormatError

COORD_NAMES = ("x", "y", "z")


@dataclass
class PointCloud:
    coords: np.ndarray  # (N, d_c)
    features: np.ndarray  # (N, d_f); column 0 is the distance field
    targets: np.ndarray  # (N, d_out)
    globals: dict = field(default_factory=dict)
    time: float | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[0] < 1:
            raise ContractError("a point cloud needs at least one point")
        self.features = np.asarray(self.features, dtype=np.float64).reshape(self.coords.shape[0], -1)
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(self.coords.shape[0], -1)
        self.globals = {str(k): float(v) for k, v in self.globals.items()}
        self.validate()

    def validate(self) -> None:
        n = self.coords.shape[0]
        if self.coords.ndim != 2 or n < 1:
            raise ContractError("a point cloud needs at least one point")
        if self.features.shape[0] != n or self.targets.shape[0] != n:
            raise ContractError("coords, features and targets disagree on the point count")
        for name, arr in (("coords", self.coords), ("features", self.features), ("targets", self.targets)):
            if not np.all(np.isfinite(arr)):
                raise ContractError(f"{name} contain NaN or inf")
        if self.features.shape[1] and np.any(self.features[:, 0] < 0):
            raise ContractError("distance-field column must be nonnegative")

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    def global_vector(self) -> np.ndarray:
        return np.array(list(self.globals.values()), dtype=np.float64)


# -- snapshot IO ---------------------------------------------------------------


def _column_names(d_c: int, d_f: int, d_out: int) -> list[str]:
    coords = list(COORD_NAMES[:d_c]) if d_c <= 3 else [f"x{i}" for i in range(d_c)]
    return coords + [f"f{i}" for i in range(d_f)] + [f"u{i}" for i in range(d_out)]


def save_snapshot(pc: PointCloud, path) -> Path:
    """Write ``<stem>.json`` and ``<stem>.csv``; returns the manifest path."""
    path = Path(path).with_suffix(".json")
    path.parent.mkdir(parents=True, exist_ok=True)
    csv_path = path.with_suffix(".csv")
    d_c, d_f, d_out = pc.coords.shape[1], pc.features.shape[1], pc.targets.shape[1]
    manifest = {
        "n_points": pc.n,
        "d_c": d_c,
        "d_f": d_f,
        "d_out": d_out,
        "globals": pc.globals,
        "time": pc.time,
        "csv_path": csv_path.name,
    }
    rows = np.hstack([pc.coords, pc.features, pc.targets])
    with csv_path.open("w", newline="") as fh:
        fh.write(",".join(_column_names(d_c, d_f, d_out)) + "\n")
        for r in rows:
            fh.write(",".join(f"{v:.17g}" for v in r) + "\n")
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_snapshot(path) -> PointCloud:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable manifest ({exc})") from exc
    for key in ("n_points", "d_c", "d_f", "d_out", "csv_path"):
        if key not in manifest:
            raise FormatError(f"{path}: manifest lacks '{key}'")
    n, d_c, d_f, d_out = (int(manifest[k]) for k in ("n_points", "d_c", "d_f", "d_out"))
    expected = _column_names(d_c, d_f, d_out)
    csv_path = path.parent / manifest["csv_path"]
    try:
        fh = csv_path.open(newline="")
    except OSError as exc:
        raise FormatError(f"{csv_path}: cannot open ({exc})") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FormatError(f"{csv_path}: empty file")
        header = [h.strip() for h in header]
        for col in expected:
            if col not in header:
                raise FormatError(f"{csv_path}: missing column '{col}'")
        if len(header) != len(expected):
            extra = [h for h in header if h not in expected]
            raise FormatError(f"{csv_path}: unexpected columns {extra}")
        order = [header.index(c) for c in expected]
        data = np.empty((n, len(expected)))
        count = 0
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if count >= n:
                raise FormatError(f"{csv_path}: row {lineno}: more rows than n_points={n}")
            if len(row) != len(expected):
                raise FormatError(f"{csv_path}: row {lineno}: expected {len(expected)} fields, got {len(row)}")
            try:
                data[count] = [float(row[i]) for i in order]
            except ValueError as exc:
                raise FormatError(f"{csv_path}: row {lineno}: {exc}") from exc
            count += 1
    if count != n:
        raise FormatError(f"{csv_path}: row {count + 2}: file ends after {count} rows, manifest says {n}")
    try:
        return PointCloud(
            data[:, :d_c],
            data[:, d_c : d_c + d_f],
            data[:, d_c + d_f :],
            manifest.get("globals", {}),
            manifest.get("time"),
        )
    except ContractError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# -- sampling helpers ------------------------------------------------------------


def jittered_grid(lo, hi, n_target: int, rng: np.random.Generator, jitter: float = 0.35) -> np.ndarray:
    """Roughly ``n_target`` points on a randomly perturbed Cartesian grid."""
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    ext = hi - lo
    h = math.sqrt(ext.prod() / n_target)
    nx, ny = max(int(round(ext[0] / h)), 1), max(int(round(ext[1] / h)), 1)
    gx = lo[0] + (np.arange(nx) + 0.5) * ext[0] / nx
    gy = lo[1] + (np.arange(ny) + 0.5) * ext[1] / ny
    pts = np.stack(np.meshgrid(gx, gy, indexing="ij"), axis=-1).reshape(-1, 2)
    pts += rng.uniform(-jitter, jitter, pts.shape) * (ext / [nx, ny])
    return np.clip(pts, lo, hi)


# -- cylinder wake -----------------------------------------------------------------


@dataclass
class SyntheticWakeSpec:
    x_range: tuple = (-16.0, 64.0)
    y_range: tuple = (-16.0, 16.0)  # channel walls
    radius_range: tuple = (0.75, 4.0)
    cx_range: tuple = (-6.0, 6.0)
    cy_range: tuple = (-4.0, 4.0)
    inflow: float = 1.0
    f_shed: float = 0.0222
    advection: float = 0.8  # vortex speed as a fraction of the inflow
    strength: float = 2.0  # circulation per (inflow * diameter)
    core: float = 0.6  # Gaussian core radius per cylinder radius
    spread: float = 0.5  # lateral vortex offset per radius
    growth: float = 0.25  # core growth rate (radius per second of vortex age), diffusion-like
    decay: float = 300.0  # circulation e-folding time (s)
    birth: float = 10.0  # birth ramp time (s)
    dt: float = 10.0
    steps: int = 41
    n_points: int = 500
    jitter: float = 0.35
    spinup: float = 600.0  # the street is fully developed after this long

    def validate(self) -> None:
        if self.f_shed <= 0:
            raise ContractError("f_shed must be positive")
        if self.dt <= 0 or self.steps < 1 or self.n_points < 1:
            raise ContractError("dt, steps and n_points must be positive")
        r_max = self.radius_range[1]
        if not 0 < self.radius_range[0] <= r_max:
            raise ContractError("radius_range must be positive and ordered")
        for name, (lo, hi), (c_lo, c_hi) in (
            ("cx_range", self.x_range, self.cx_range),
            ("cy_range", self.y_range, self.cy_range),
        ):
            if c_lo - r_max <= lo or c_hi + r_max >= hi:
                raise ContractError(f"{name}: cylinder of radius up to {r_max} does not fit inside the domain")


@dataclass
class WakeGeometry:
    cx: float
    cy: float
    radius: float
    phase: float  # start time offset within one shedding period

    @property
    def diameter(self) -> float:
        return 2 * self.radius


def sample_wake_geometry(spec: SyntheticWakeSpec, rng: np.random.Generator) -> WakeGeometry:
    return WakeGeometry(
        cx=float(rng.uniform(*spec.cx_range)),
        cy=float(rng.uniform(*spec.cy_range)),
        radius=float(rng.uniform(*spec.radius_range)),
        phase=float(rng.uniform(0, 1.0 / spec.f_shed)),
    )


def wake_velocity(spec: SyntheticWakeSpec, geo: WakeGeometry, pts: np.ndarray, t: float) -> np.ndarray:
    """Closed-form velocity (N, 2) at absolute time ``t`` (seconds)."""
    x = pts[:, 0] - geo.cx
    y = pts[:, 1] - geo.cy
    r2 = x * x + y * y
    a2 = geo.radius**2
    u_inf = spec.inflow
    with np.errstate(divide="ignore", invalid="ignore"):
        u = u_inf * (1 - a2 * (x * x - y * y) / (r2 * r2))
        v = -u_inf * 2 * a2 * x * y / (r2 * r2)
    # vortex street: vortex n is born at t_n = n / (2 f) behind the cylinder and
    # advects downstream; even n sit above the axis with clockwise circulation
    speed = spec.advection * u_inf
    gamma0 = spec.strength * u_inf * geo.diameter
    half = 0.5 / spec.f_shed
    n_hi = math.floor(t / half)
    life = (spec.x_range[1] - spec.x_range[0] + 8 * geo.radius) / max(speed, 1e-12)
    n_lo = max(math.floor((t - life) / half), 0)
    for n in range(n_lo, n_hi + 1):
        age = t - n * half
        if age < 0:
            continue
        sign = 1.0 if n % 2 else -1.0
        xv = geo.radius * 1.5 + speed * age
        yv = -sign * spec.spread * geo.radius
        gamma = sign * gamma0 * (1 - math.exp(-age / spec.birth)) * math.exp(-age / spec.decay)
        rc2 = (spec.core * geo.radius) ** 2 + spec.growth * geo.radius * age
        dx, dy = x - xv, y - yv
        d2 = dx * dx + dy * dy
        with np.errstate(divide="ignore", invalid="ignore"):
            k = np.where(d2 > 0, gamma / (2 * np.pi * d2) * (1 - np.exp(-d2 / rc2)), 0.0)
        u += -k * dy
        v += k * dx
    inside = r2 < a2
    u[inside] = 0.0
    v[inside] = 0.0
    return np.stack([u, v], axis=1)


def wake_distance(spec: SyntheticWakeSpec, geo: WakeGeometry, pts: np.ndarray) -> np.ndarray:
    """Distance to the nearest wall: cylinder surface or the two channel walls."""
    d_cyl = np.sqrt((pts[:, 0] - geo.cx) ** 2 + (pts[:, 1] - geo.cy) ** 2) - geo.radius
    d_wall = np.minimum(pts[:, 1] - spec.y_range[0], spec.y_range[1] - pts[:, 1])
    return np.maximum(np.minimum(d_cyl, d_wall), 0.0)


def wake_points(spec: SyntheticWakeSpec, geo: WakeGeometry, rng: np.random.Generator) -> np.ndarray:
    lo = (spec.x_range[0], spec.y_range[0])
    hi = (spec.x_range[1], spec.y_range[1])
    pts = jittered_grid(lo, hi, spec.n_points, rng, spec.jitter)
    keep = (pts[:, 0] - geo.cx) ** 2 + (pts[:, 1] - geo.cy) ** 2 > geo.radius**2
    return pts[keep]


def wake_snapshot(spec: SyntheticWakeSpec, geo: WakeGeometry, pts: np.ndarray, step: int) -> PointCloud:
    t = step * spec.dt
    vel = wake_velocity(spec, geo, pts, spec.spinup + geo.phase + t)
    return PointCloud(
        pts,
        wake_distance(spec, geo, pts)[:, None],
        vel,
        {"radius": geo.radius, "cx": geo.cx, "cy": geo.cy},
        t,
    )


def gen_wake(spec: SyntheticWakeSpec, seed: int) -> list[PointCloud]:
    """One trajectory of ``spec.steps`` snapshots on a fixed point cloud."""
    spec.validate()
    rng = np.random.default_rng(seed)
    geo = sample_wake_geometry(spec, rng)
    pts = wake_points(spec, geo, rng)
    return [wake_snapshot(spec, geo, pts, j) for j in range(spec.steps)]


def wake_geometry_for_seed(spec: SyntheticWakeSpec, seed: int) -> WakeGeometry:
    return sample_wake_geometry(spec, np.random.default_rng(seed))


# -- constricted channel -------------------------------------------------------------


@dataclass
class ChannelSpec:
    length: float = 20.0
    width: float = 4.0  # full channel width W
    throat_range: tuple = (1.5, 4.0)  # constriction width range
    speed_range: tuple = (0.5, 2.0)  # inlet centreline speed range
    throat_x: float = 10.0
    throat_len: float = 4.0
    n_points: int = 500
    n_boundary: int = 200
    jitter: float = 0.35

    def validate(self) -> None:
        if not 0 < self.throat_range[0] <= self.throat_range[1] <= self.width:
            raise ContractError("constriction widths must lie in (0, width]")
        if self.length <= 0 or self.throat_len <= 0:
            raise ContractError("lengths must be positive")


@dataclass
class ChannelFlow:
    """Stream function psi = Q (3 eta - eta^3) / 4 with eta = y / h(x); Q is the total flux."""

    spec: ChannelSpec
    throat: float
    u_max: float

    @property
    def total_flux(self) -> float:
        # parabolic inlet profile with centreline speed u_max over width W
        return 2.0 / 3.0 * self.u_max * self.spec.width

    def half_width(self, x) -> tuple[np.ndarray, np.ndarray]:
        """h(x) and h'(x): a raised-cosine narrowing centred at the throat."""
        s = self.spec
        x = np.asarray(x, dtype=np.float64)
        h0, h1 = s.width / 2, self.throat / 2
        xi = (x - s.throat_x) / (s.throat_len / 2)
        inside = np.abs(xi) < 1
        bump = np.where(inside, 0.5 * (1 + np.cos(np.pi * xi)), 0.0)
        dbump = np.where(inside, -0.5 * np.pi * np.sin(np.pi * xi) / (s.throat_len / 2), 0.0)
        return h0 - (h0 - h1) * bump, -(h0 - h1) * dbump

    def velocity(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        h, dh = self.half_width(pts[:, 0])
        eta = pts[:, 1] / h
        u = 3 * self.total_flux / (4 * h) * (1 - eta**2)
        v = u * eta * dh
        return np.stack([u, v], axis=1)

    def flux(self, x: float) -> float:
        """Analytic volume flux through the section at ``x``; the same everywhere."""
        return self.total_flux


def _channel_distance(flow: ChannelFlow, pts: np.ndarray) -> np.ndarray:
    # vertical distance to the local wall, a cheap upper bound on the true distance
    h, _ = flow.half_width(pts[:, 0])
    return np.maximum(h - np.abs(pts[:, 1]), 0.0)


def gen_channel(spec: ChannelSpec, seed: int, boundary: bool = False):
    """Steady constricted-channel snapshot.

    With ``boundary=True`` returns ``(interior, boundary_cloud)``. The boundary
    cloud carries features ``[dist, is_wall, is_inlet, is_outlet]``.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    flow = ChannelFlow(spec, float(rng.uniform(*spec.throat_range)), float(rng.uniform(*spec.speed_range)))
    glob = {"throat": flow.throat, "inlet_speed": flow.u_max}
    pts = jittered_grid((0.0, -spec.width / 2), (spec.length, spec.width / 2), spec.n_points, rng, spec.jitter)
    h, _ = flow.half_width(pts[:, 0])
    pts = pts[np.abs(pts[:, 1]) < h]
    interior = PointCloud(pts, _channel_distance(flow, pts)[:, None], flow.velocity(pts), glob)
    if not boundary:
        return interior
    n_side = spec.n_boundary // 4
    xs = np.linspace(0, spec.length, n_side)
    hw, _ = flow.half_width(xs)
    walls = np.concatenate([np.stack([xs, hw], 1), np.stack([xs, -hw], 1)])
    ys = np.linspace(-spec.width / 2, spec.width / 2, n_side + 2)[1:-1]
    inlet = np.stack([np.zeros_like(ys), ys], 1)
    outlet = np.stack([np.full_like(ys, spec.length), ys], 1)
    bpts = np.concatenate([walls, inlet, outlet])
    kind = np.repeat([0, 0, 1, 2], [n_side, n_side, len(ys), len(ys)])
    feats = np.column_stack([_channel_distance(flow, bpts), kind == 0, kind == 1, kind == 2]).astype(np.float64)
    bcloud = PointCloud(bpts, feats, flow.velocity(bpts), glob)
    return interior, bcloud


# -- dataset directories ------------------------------------------------------------


SPLITS = ("train", "val", "test")


def split_indices(n: int, seed: int = 42, fractions=(0.7, 0.15, 0.15)) -> dict[str, list[int]]:
    """Trajectory-level split; sizes round down for val/test, remainder to train."""
    if abs(sum(fractions) - 1) > 1e-12:
        raise ContractError("split fractions must sum to 1")
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(math.floor(fractions[1] * n))
    n_test = int(math.floor(fractions[2] * n))
    n_train = n - n_val - n_test
    return {
        "train": sorted(int(i) for i in perm[:n_train]),
        "val": sorted(int(i) for i in perm[n_train : n_train + n_val]),
        "test": sorted(int(i) for i in perm[n_train + n_val :]),
    }


@dataclass
class Dataset:
    kind: str
    splits: dict  # split -> list of trajectories (each a list of PointCloud)
    meta: dict

    def trajectories(self, split: str) -> list[list[PointCloud]]:
        return self.splits[split]


def write_dataset(root, kind: str, trajectories: Sequence[Sequence[PointCloud]], meta: dict | None = None,
                  seed: int = 42, extra: dict | None = None) -> Path:
    """Lay out ``root/{train,val,test}/traj_k/step_j.json`` plus ``dataset.json``.

    ``extra`` maps trajectory index to an additional named PointCloud (the
    channel boundary cloud) stored as ``traj_k/<name>.json``.
    """
    root = Path(root)
    idx = split_indices(len(trajectories), seed)
    for split, members in idx.items():
        for k in members:
            d = root / split / f"traj_{k}"
            for j, pc in enumerate(trajectories[k]):
                save_snapshot(pc, d / f"step_{j}.json")
            for name, pc in (extra or {}).get(k, {}).items():
                save_snapshot(pc, d / f"{name}.json")
    (root / "dataset.json").write_text(
        json.dumps({"kind": kind, "n_trajectories": len(trajectories), "split_seed": seed,
                    "splits": idx, "meta": meta or {}}, indent=2)
    )
    return root


def _step_key(p: Path) -> int:
    return int(p.stem.split("_", 1)[1])


def read_dataset(root) -> Dataset:
    root = Path(root)
    try:
        info = json.loads((root / "dataset.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{root}: not a dataset directory ({exc})") from exc
    splits = {}
    for split in SPLITS:
        trajs = []
        for k in info["splits"].get(split, []):
            d = root / split / f"traj_{k}"
            files = sorted(d.glob("step_*.json"), key=_step_key)
            if not files:
                raise FormatError(f"{d}: no snapshots")
            trajs.append([load_snapshot(f) for f in files])
        splits[split] = trajs
    return Dataset(info["kind"], splits, info.get("meta", {}))


def read_extra(root, split: str, k: int, name: str) -> PointCloud:
    return load_snapshot(Path(root) / split / f"traj_{k}" / f"{name}.json")


def spec_to_dict(spec) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(spec).items()}
