"""Trajectory files and relative pose error.

Trajectories are stored one pose per line, `timestamp tx ty tz qx qy qz qw`,
camera-to-world. Error metrics compare pose increments over a fixed frame
delta so drift is reported independently of the starting pose; the
unobservable monocular scale is corrected by a closed-form least-squares
fit of zero-centered positions before errors are formed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InsufficientOverlap, TrajectoryParseError
from .geometry import Pose, rotation_angle


@dataclass
class Trajectory:
    times: np.ndarray
    poses: list

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if len(self.times) != len(self.poses):
            raise ValueError(f"{len(self.times)} timestamps for {len(self.poses)} poses")
        if len(self.times) > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses])


def write_trajectory(path, traj: Trajectory):
    """Write TUM-style lines with 9 significant digits."""
    with open(path, "w") as f:
        f.write("# timestamp tx ty tz qx qy qz qw\n")
        for t, pose in zip(traj.times, traj.poses):
            q = Rotation.from_matrix(pose.rotation).as_quat()  # x y z w
            vals = [t, *pose.translation, *q]
            f.write(" ".join(f"{v:.9g}" for v in vals) + "\n")


def read_trajectory(path) -> Trajectory:
    times = []
    poses = []
    with open(path) as f:
        for lineno, rawline in enumerate(f, start=1):
            line = rawline.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise TrajectoryParseError(
                    f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError as e:
                raise TrajectoryParseError(f"{path}:{lineno}: {e}") from None
            t = vals[0]
            trans = np.array(vals[1:4])
            q = np.array(vals[4:8])
            nq = np.linalg.norm(q)
            if not 0.9 < nq < 1.1:
                raise TrajectoryParseError(
                    f"{path}:{lineno}: quaternion norm {nq:.4f} far from 1")
            R = Rotation.from_quat(q / nq).as_matrix()
            times.append(t)
            poses.append(Pose(rotation=R, translation=trans))
    if not times:
        raise TrajectoryParseError(f"{path}: no pose lines")
    return Trajectory(times=np.array(times), poses=poses)


def associate(a: Trajectory, b: Trajectory, max_dt: float = 0.02):
    """Greedy nearest-timestamp pairing; each pose used at most once.

    Returns (i, j) index pairs into a and b, sorted by i.
    """
    cand = []
    for i, ta in enumerate(a.times):
        for j, tb in enumerate(b.times):
            dt = abs(ta - tb)
            if dt <= max_dt:
                cand.append((dt, i, j))
    cand.sort()
    used_a, used_b = set(), set()
    pairs = []
    for dt, i, j in cand:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    pairs.sort()
    return pairs


def estimate_scale(gt: Trajectory, est: Trajectory, max_dt: float = 0.02) -> float:
    """Scale s applied to estimated positions to best match the reference.

    Closed-form least squares on zero-centered associated positions:
    s = sum <q_i, b_i> / sum <b_i, b_i> with q from gt and b from est.
    """
    pairs = associate(gt, est, max_dt)
    if len(pairs) < 2:
        raise InsufficientOverlap(f"{len(pairs)} associated poses, need >= 2")
    q = np.array([gt.poses[i].translation for i, _ in pairs])
    b = np.array([est.poses[j].translation for _, j in pairs])
    qc = q - q.mean(axis=0)
    bc = b - b.mean(axis=0)
    den = float(np.sum(bc * bc))
    if den < 1e-18:
        return 1.0
    s = float(np.sum(qc * bc)) / den
    return s if s > 1e-12 else 1.0


@dataclass
class RPEReport:
    delta: int
    n_pairs: int
    scale: float
    trans_rmse: float        # per second of reference time
    trans_mean: float
    trans_median: float
    trans_max: float
    rot_rmse_deg: float      # per pair
    rot_mean_deg: float
    rot_max_deg: float
    trans_errors: np.ndarray = field(repr=False, default=None)
    rot_errors_deg: np.ndarray = field(repr=False, default=None)

    def as_dict(self):
        return {
            "delta": self.delta, "n_pairs": self.n_pairs, "scale": self.scale,
            "trans_rmse": self.trans_rmse, "trans_mean": self.trans_mean,
            "trans_median": self.trans_median, "trans_max": self.trans_max,
            "rot_rmse_deg": self.rot_rmse_deg, "rot_mean_deg": self.rot_mean_deg,
            "rot_max_deg": self.rot_max_deg,
        }


def rpe(gt: Trajectory, est: Trajectory, delta: int = 1, max_dt: float = 0.02,
        correct_scale: bool = True) -> RPEReport:
    """Relative pose error E_i = (Q_i^-1 Q_{i+d})^-1 (B_i^-1 B_{i+d}).

    Q are reference increments, B estimated increments after scale
    alignment. Translation errors are divided by the pair's reference
    time span (drift per second); rotations are degrees per pair.
    """
    if delta < 1:
        raise ValueError(f"delta must be >= 1, got {delta}")
    pairs = associate(gt, est, max_dt)
    if len(pairs) < delta + 1:
        raise InsufficientOverlap(
            f"{len(pairs)} associated poses cannot form a delta={delta} pair")

    s = estimate_scale(gt, est, max_dt) if correct_scale else 1.0

    terr = []
    rerr = []
    for k in range(len(pairs) - delta):
        i0, j0 = pairs[k]
        i1, j1 = pairs[k + delta]
        Q = gt.poses[i0].inverse() @ gt.poses[i1]
        B = est.poses[j0].inverse() @ est.poses[j1]
        B = Pose(rotation=B.rotation, translation=s * B.translation)
        E = Q.inverse() @ B
        span = gt.times[i1] - gt.times[i0]
        terr.append(np.linalg.norm(E.translation) / max(span, 1e-12))
        rerr.append(math.degrees(rotation_angle(E.rotation)))
    terr = np.array(terr)
    rerr = np.array(rerr)

    return RPEReport(
        delta=delta, n_pairs=len(terr), scale=s,
        trans_rmse=float(np.sqrt(np.mean(terr**2))),
        trans_mean=float(terr.mean()),
        trans_median=float(np.median(terr)),
        trans_max=float(terr.max()),
        rot_rmse_deg=float(np.sqrt(np.mean(rerr**2))),
        rot_mean_deg=float(rerr.mean()),
        rot_max_deg=float(rerr.max()),
        trans_errors=terr, rot_errors_deg=rerr)
