"""2D edge segments: pixel tracing, merging of broken detections, matching.

Segments live in pixel coordinates with centers at integers. Merging runs
to a fixpoint so it is idempotent, and an optional bucket grid prunes the
candidate pairs without changing the result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import line_from_endpoints

# merge defaults; synthetic fragmentation tests recover ground-truth lines
ANGLE_TOL = math.radians(5.0)
GAP_TOL = 3.0
OFFSET_TOL = 2.0
MIN_LENGTH = 10.0
BUCKET_CELL = 32.0
ANGLE_BINS = 12


@dataclass
class LineSegment2D:
    """Edge segment: endpoints, normalized line coefficients, traced pixels."""

    id: int
    p1: np.ndarray
    p2: np.ndarray
    line: np.ndarray = None
    pixels: list = field(default_factory=list)
    pyramid_level: int = 0

    def __post_init__(self):
        self.p1 = np.asarray(self.p1, dtype=float)
        self.p2 = np.asarray(self.p2, dtype=float)
        if self.line is None:
            self.line = line_from_endpoints(self.p1, self.p2)
        else:
            self.line = np.asarray(self.line, dtype=float)

    @property
    def length(self) -> float:
        return float(np.hypot(*(self.p2 - self.p1)))

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.p1 + self.p2)

    @property
    def direction(self) -> np.ndarray:
        d = self.p2 - self.p1
        n = np.hypot(*d)
        return d / n if n > 0 else np.array([1.0, 0.0])

    @property
    def angle(self) -> float:
        """Orientation in [0, pi)."""
        d = self.p2 - self.p1
        return math.atan2(d[1], d[0]) % math.pi


def trace_pixels(segment: LineSegment2D, expand: int = 0) -> list:
    """Raster pixels of a segment, optionally dilated across the minor axis.

    Walks the major axis one pixel at a time and rounds the minor
    coordinate, then (for expand >= 1) stacks +-expand rows/columns along
    the minor axis. Every pixel lands within expand + 0.71 px of the line.
    """
    p1, p2 = segment.p1, segment.p2
    d = p2 - p1
    x_major = abs(d[0]) >= abs(d[1])
    major, minor = (0, 1) if x_major else (1, 0)

    a0 = int(round(p1[major]))
    a1 = int(round(p2[major]))
    step = 1 if a1 >= a0 else -1
    out = []
    seen = set()
    denom = d[major] if d[major] != 0 else 1.0
    for a in range(a0, a1 + step, step):
        t = (a - p1[major]) / denom
        b = int(round(p1[minor] + t * d[minor]))
        for off in range(-expand, expand + 1):
            px = (a, b + off) if x_major else (b + off, a)
            if px not in seen:
                seen.add(px)
                out.append(px)
    return out


def angle_difference(a: float, b: float) -> float:
    """Undirected orientation gap in [0, pi/2]."""
    d = abs(a - b) % math.pi
    return min(d, math.pi - d)


def _mergeable(s1: LineSegment2D, s2: LineSegment2D, angle_tol, gap_tol, offset_tol):
    if angle_difference(s1.angle, s2.angle) > angle_tol:
        return False
    # perpendicular offset: each midpoint against the other's line
    m1, m2 = s1.midpoint, s2.midpoint
    off1 = abs(s2.line[0] * m1[0] + s2.line[1] * m1[1] + s2.line[2])
    off2 = abs(s1.line[0] * m2[0] + s1.line[1] * m2[1] + s1.line[2])
    if max(off1, off2) > offset_tol:
        return False
    # longitudinal gap along the mean direction
    u = s1.direction + s2.direction * (1 if s1.direction @ s2.direction >= 0 else -1)
    n = np.hypot(*u)
    u = u / n if n > 1e-12 else s1.direction
    ends1 = sorted((float(s1.p1 @ u), float(s1.p2 @ u)))
    ends2 = sorted((float(s2.p1 @ u), float(s2.p2 @ u)))
    gap = max(ends1[0], ends2[0]) - min(ends1[1], ends2[1])
    return gap <= gap_tol


def _refit_group(segments: list, new_id: int) -> LineSegment2D:
    """Total least squares line through all endpoints; extreme projections."""
    pts = np.array([p for s in segments for p in (s.p1, s.p2)])
    c = pts.mean(axis=0)
    centered = pts - c
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    u = vt[0]
    proj = centered @ u
    q1 = c + proj.min() * u
    q2 = c + proj.max() * u
    return LineSegment2D(id=new_id, p1=q1, p2=q2,
                         pyramid_level=segments[0].pyramid_level)


class BucketGrid:
    """Spatial + orientation index; each segment sits in exactly one cell."""

    def __init__(self, segments, cell_size: float = BUCKET_CELL,
                 angle_bins: int = ANGLE_BINS):
        self.cell_size = float(cell_size)
        self.angle_bins = int(angle_bins)
        self.cells = {}
        self._items = list(segments)
        for idx, s in enumerate(self._items):
            self.cells.setdefault(self._key(s), []).append(idx)

    def _key(self, s: LineSegment2D):
        m = s.midpoint
        ci = (int(math.floor(m[0] / self.cell_size)),
              int(math.floor(m[1] / self.cell_size)))
        bin_w = math.pi / self.angle_bins
        ab = int(s.angle / bin_w) % self.angle_bins
        return ci, ab

    def neighbors(self, s: LineSegment2D, radius_px: float, angle_tol: float):
        """Indices of segments in cells within radius_px and angle_tol."""
        (cx, cy), ab = self._key(s)
        reach = int(math.ceil(radius_px / self.cell_size)) + 1
        bin_w = math.pi / self.angle_bins
        bin_reach = int(math.ceil(angle_tol / bin_w)) + 1
        out = []
        for db in range(-bin_reach, bin_reach + 1):
            b = (ab + db) % self.angle_bins
            for dx in range(-reach, reach + 1):
                for dy in range(-reach, reach + 1):
                    out.extend(self.cells.get(((cx + dx, cy + dy), b), ()))
        return out


def merge_segments(segments, angle_tol: float = ANGLE_TOL, gap_tol: float = GAP_TOL,
                   offset_tol: float = OFFSET_TOL, use_buckets: bool = True):
    """Transitive closure of pairwise merges, iterated to a fixpoint.

    A merged segment is the total-least-squares refit of its group with
    endpoints at the extreme projections. Bucket pruning only skips pairs
    whose midpoints are provably too far apart to merge, so the result
    matches the all-pairs version.
    """
    current = list(segments)
    while True:
        n = len(current)
        if n <= 1:
            return current
        parent = list(range(n))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        max_half = max(s.length for s in current) / 2.0
        grid = BucketGrid(current) if use_buckets else None
        merged_any = False
        for i, s in enumerate(current):
            if use_buckets:
                # midpoints of mergeable pairs are within the summed half
                # lengths plus the longitudinal and perpendicular slack
                radius = s.length / 2.0 + max_half + gap_tol + 2.0 * offset_tol
                cands = grid.neighbors(s, radius, angle_tol)
            else:
                cands = range(n)
            for j in cands:
                if j <= i:
                    continue
                ri, rj = find(i), find(j)
                if ri == rj:
                    continue
                if _mergeable(s, current[j], angle_tol, gap_tol, offset_tol):
                    parent[max(ri, rj)] = min(ri, rj)
                    merged_any = True

        if not merged_any:
            return current
        groups = {}
        for i in range(n):
            groups.setdefault(find(i), []).append(current[i])
        out = []
        for root in sorted(groups):
            members = groups[root]
            if len(members) == 1:
                out.append(members[0])
            else:
                out.append(_refit_group(members, min(m.id for m in members)))
        current = out


@dataclass(frozen=True)
class EdgeMatch:
    ref_id: int
    cur_id: int
    score: float = 0.0


def match_edges(ref, cur, mode: str = "gt",
                max_angle: float = math.radians(15.0),
                max_midpoint: float = 40.0,
                max_length_ratio: float = 2.5):
    """One-to-one segment matching.

    gt mode joins renderer-assigned ids. geometric mode runs a mutual-best
    nearest neighbor on an (orientation, midpoint, length) descriptor with
    the gates above; ties break toward the lowest candidate id.
    """
    if mode == "gt":
        cur_by_id = {s.id: s for s in cur}
        return [EdgeMatch(s.id, s.id, 1.0) for s in sorted(ref, key=lambda s: s.id)
                if s.id in cur_by_id]
    if mode != "geometric":
        raise ValueError(f"unknown match mode {mode!r}")

    def descriptor_distance(a: LineSegment2D, b: LineSegment2D):
        dang = angle_difference(a.angle, b.angle)
        dmid = float(np.hypot(*(a.midpoint - b.midpoint)))
        ratio = max(a.length, b.length) / max(min(a.length, b.length), 1e-9)
        if dang > max_angle or dmid > max_midpoint or ratio > max_length_ratio:
            return None
        return dang / max_angle + dmid / max_midpoint + (ratio - 1.0)

    ref = sorted(ref, key=lambda s: s.id)
    cur = sorted(cur, key=lambda s: s.id)
    best_for_ref = {}
    best_for_cur = {}
    for a in ref:
        for b in cur:
            d = descriptor_distance(a, b)
            if d is None:
                continue
            if a.id not in best_for_ref or d < best_for_ref[a.id][0]:
                best_for_ref[a.id] = (d, b.id)
            if b.id not in best_for_cur or d < best_for_cur[b.id][0]:
                best_for_cur[b.id] = (d, a.id)
    out = []
    for a in ref:
        hit = best_for_ref.get(a.id)
        if hit and best_for_cur[hit[1]][1] == a.id:
            out.append(EdgeMatch(a.id, hit[1], hit[0]))
    return out


def save_segments(path, segments) -> None:
    """Text format: one `id x1 y1 x2 y2 level` record per line."""
    with open(path, "w") as f:
        for s in segments:
            f.write(f"{s.id} {s.p1[0]:.9g} {s.p1[1]:.9g} "
                    f"{s.p2[0]:.9g} {s.p2[1]:.9g} {s.pyramid_level}\n")


def load_segments(path):
    out = []
    with open(path) as f:
        for lineno, text in enumerate(f, start=1):
            text = text.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            sid, x1, y1, x2, y2, lvl = parts
            out.append(LineSegment2D(id=int(sid), p1=(float(x1), float(y1)),
                                     p2=(float(x2), float(y2)),
                                     pyramid_level=int(lvl)))
    return out


def scale_to_level(segment: LineSegment2D, level: int) -> LineSegment2D:
    """Map a level-0 segment into pyramid level `level` coordinates.

    Matches the intrinsics halving convention u_coarse = (u_fine - 0.5) / 2;
    pixels are re-traced at the target level.
    """
    if level == 0:
        return segment
    scale = 2.0**level
    s = replace(segment, p1=(segment.p1 - (scale - 1) / 2.0) / scale,
                p2=(segment.p2 - (scale - 1) / 2.0) / scale,
                line=None, pixels=[], pyramid_level=level)
    s.pixels = trace_pixels(s, expand=0)
    return s
