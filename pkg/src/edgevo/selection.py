"""Greedy selection of a non-conflicting edge subset maximizing column coverage.

The objective counts integer image columns under the selected edges'
horizontal extents (monotone submodular); conflicts are pairwise partition
matroids allowing at most one edge per overlapping pair. Greedy carries the
1/(k+1) approximation bound, k = number of conflict pairs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import InvalidElement, TooLarge

DEFAULT_OVERLAP = 0.5


@dataclass(frozen=True)
class ConflictPair:
    """Canonical (e1 < e2) pair of mutually exclusive edges."""

    e1: int
    e2: int
    overlap: float = 1.0

    def __post_init__(self):
        if self.e1 >= self.e2:
            raise ValueError(f"pair must be canonical e1 < e2, got ({self.e1}, {self.e2})")


class GroundSet:
    """Edge universe with precomputed per-edge column bitmasks."""

    def __init__(self, edges, image_width: int):
        self.edges = list(edges)
        self.image_width = int(image_width)
        ids = [e.id for e in self.edges]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate edge ids in ground set")
        self.masks = {e.id: self._column_mask(e) for e in self.edges}
        self.extents = {e.id: self._extent(e) for e in self.edges}

    @staticmethod
    def _extent(e):
        return (float(min(e.p1[0], e.p2[0])), float(max(e.p1[0], e.p2[0])))

    def _column_mask(self, e) -> int:
        lo, hi = self._extent(e)
        lo = max(int(math.ceil(lo)), 0)
        hi = min(int(math.floor(hi)), self.image_width - 1)
        if hi < lo:
            return 0
        return ((1 << (hi - lo + 1)) - 1) << lo

    def mask_of(self, eid: int) -> int:
        try:
            return self.masks[eid]
        except KeyError:
            raise InvalidElement(f"unknown edge id {eid}") from None


def coverage_score(S, ground: GroundSet) -> int:
    """Number of integer columns covered by the selected edges."""
    covered = 0
    for eid in S:
        covered |= ground.mask_of(eid)
    return covered.bit_count()


def marginal_gain(e: int, S, ground: GroundSet) -> int:
    """coverage(S + e) - coverage(S); requires e not already in S."""
    if e in S:
        raise ValueError(f"edge {e} already selected")
    covered = 0
    for eid in S:
        covered |= ground.mask_of(eid)
    return (ground.mask_of(e) & ~covered).bit_count()


def is_feasible(S, conflicts) -> bool:
    s = set(S)
    return not any(c.e1 in s and c.e2 in s for c in conflicts)


@dataclass
class SelectionResult:
    selected: set
    score: int
    gain_trace: list = field(default_factory=list)


def greedy_select(ground: GroundSet, conflicts, prefilter=None) -> SelectionResult:
    """Add the feasible edge of maximum marginal gain until gains hit zero.

    Ties break toward the lowest id. prefilter, when given, drops edges
    (e.g. ones far from an externally scored boundary) before the loop.
    """
    candidates = [e.id for e in ground.edges if prefilter is None or prefilter(e)]
    blocked_by = {}
    for c in conflicts:
        blocked_by.setdefault(c.e1, set()).add(c.e2)
        blocked_by.setdefault(c.e2, set()).add(c.e1)

    selected = set()
    covered = 0
    trace = []
    remaining = sorted(candidates)
    while remaining:
        best_id, best_gain = None, 0
        for eid in remaining:
            if blocked_by.get(eid, ()) & selected:
                continue
            gain = (ground.mask_of(eid) & ~covered).bit_count()
            if gain > best_gain:
                best_id, best_gain = eid, gain
        if best_id is None:
            break
        selected.add(best_id)
        covered |= ground.mask_of(best_id)
        trace.append(best_gain)
        remaining.remove(best_id)
    return SelectionResult(selected, covered.bit_count(), trace)


def brute_force_optimum(ground: GroundSet, conflicts) -> SelectionResult:
    """Exact maximizer by feasible-subset enumeration; |V| <= 20 only."""
    ids = sorted(e.id for e in ground.edges)
    n = len(ids)
    if n > 20:
        raise TooLarge(f"{n} edges exceed the brute-force limit of 20")
    id_bit = {eid: 1 << k for k, eid in enumerate(ids)}
    pair_masks = [id_bit[c.e1] | id_bit[c.e2] for c in conflicts
                  if c.e1 in id_bit and c.e2 in id_bit]
    col_masks = [ground.mask_of(eid) for eid in ids]

    best_sub, best_score = 0, 0
    for sub in range(1 << n):
        if any(sub & pm == pm for pm in pair_masks):
            continue
        covered = 0
        for k in range(n):
            if sub >> k & 1:
                covered |= col_masks[k]
        score = covered.bit_count()
        if score > best_score:
            best_sub, best_score = sub, score
    chosen = {ids[k] for k in range(n) if best_sub >> k & 1}
    return SelectionResult(chosen, best_score)


def conflicts_from_overlap(ground: GroundSet, delta: float = DEFAULT_OVERLAP):
    """Pairs whose horizontal extents overlap by >= delta.

    Overlap is intersection over the shorter extent; near-zero extents
    (vertical edges) count as fully overlapped when the intervals touch.
    """
    out = []
    ids = sorted(ground.extents)
    for i, a in enumerate(ids):
        lo1, hi1 = ground.extents[a]
        for b in ids[i + 1:]:
            lo2, hi2 = ground.extents[b]
            inter = min(hi1, hi2) - max(lo1, lo2)
            if inter < 0:
                continue
            shorter = min(hi1 - lo1, hi2 - lo2)
            ratio = 1.0 if shorter < 1e-9 else inter / shorter
            if ratio >= delta:
                out.append(ConflictPair(a, b, min(ratio, 1.0)))
    return out
