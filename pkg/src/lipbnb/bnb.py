"""Branch-and-bound minimization of a Lipschitz objective over a box.

Each partition is bounded from its center value: the center gives an upper
bound, and the Lipschitz constant turns it into a lower bound
``J(center) - L/2 * diam``. Optionally the lower bound is tightened by
splitting the box into ``refine_splits`` pieces and taking the worst of
their center bounds, and it never drops below the parent's lower bound.
"""
from __future__ import annotations

import enum
import heapq
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .lipschitz import LipschitzCertificate


class BnbStatus(str, enum.Enum):
    CONVERGED = "Converged"
    VERIFIED = "VerifiedNonnegative"
    COUNTEREXAMPLE = "CounterexampleFound"
    NODE_CAP = "NodeCapReached"


@dataclass(frozen=True, eq=False)
class Rectangle:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lower, dtype=float).reshape(-1)
        hi = np.array(self.upper, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise ValueError(f"bounds differ in size: {lo.size} vs {hi.size}")
        if np.any(lo > hi) or not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("rectangle needs finite bounds with lower <= upper")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def diam(self) -> float:
        return float(np.linalg.norm(self.widths))

    @property
    def volume(self) -> float:
        return float(np.prod(self.widths))

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.all((p >= self.lower - tol) & (p <= self.upper + tol), axis=1)

    def clamp(self, points) -> np.ndarray:
        return np.clip(points, self.lower, self.upper)

    def split(self, parts: int = 2) -> list["Rectangle"]:
        """Cut into ``parts`` equal slabs along the longest edge (lowest index on ties)."""
        lo, hi = _split_arrays(self.lower[None], self.upper[None], parts)
        return [Rectangle(a, b) for a, b in zip(lo, hi)]

    def __eq__(self, other):
        return (
            isinstance(other, Rectangle)
            and np.array_equal(self.lower, other.lower)
            and np.array_equal(self.upper, other.upper)
        )

    def __hash__(self):
        return hash((self.lower.tobytes(), self.upper.tobytes()))


@dataclass
class PartitionNode:
    rect: Rectangle
    lower_bound: float = math.nan
    upper_bound: float = math.nan
    parent_lower: float = -math.inf
    depth: int = 0


@dataclass(frozen=True)
class BnbConfig:
    epsilon: float = 0.01
    branch_batch: int = 512
    refine_splits: int = 4
    split_parts: int = 2
    node_cap: int = 5_000_000
    verify_mode: bool = False
    prune: bool = True

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.branch_batch < 1:
            raise ValueError("branch_batch must be >= 1")
        k = self.refine_splits
        if k < 1 or k & (k - 1):
            raise ValueError("refine_splits must be a power of two")
        if self.split_parts < 2:
            raise ValueError("split_parts must be >= 2")
        if self.node_cap < 1:
            raise ValueError("node_cap must be >= 1")


@dataclass
class BnbStats:
    nodes_created: int = 0
    nodes_pruned: int = 0
    bound_evals: int = 0
    branches: int = 0
    iterations: int = 0
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class BnbResult:
    blb: float
    bub: float
    status: BnbStatus
    witness: np.ndarray
    stats: BnbStats = field(default_factory=BnbStats)
    partitions: Optional[list] = None

    @property
    def gap(self) -> float:
        return self.bub - self.blb

    def to_dict(self) -> dict:
        doc = {
            "status": self.status.value,
            "BLB": self.blb,
            "BUB": self.bub,
            "witness": self.witness.tolist(),
            "stats": self.stats.to_dict(),
        }
        if self.partitions is not None:
            doc["partitions"] = [
                {"lower": n.rect.lower.tolist(), "upper": n.rect.upper.tolist(),
                 "lower_bound": n.lower_bound, "upper_bound": n.upper_bound}
                for n in self.partitions
            ]
        return doc


def _split_arrays(lo: np.ndarray, hi: np.ndarray, parts: int):
    """Split each row-box into ``parts`` slabs along its longest edge.

    Returns arrays of shape ``(n * parts, d)``; children of box ``i`` occupy
    rows ``i*parts .. i*parts + parts - 1``.
    """
    n = lo.shape[0]
    axis = np.argmax(hi - lo, axis=1)
    rows = np.arange(n)
    a, b = lo[rows, axis], hi[rows, axis]
    new_lo = np.repeat(lo, parts, axis=0)
    new_hi = np.repeat(hi, parts, axis=0)
    m = np.arange(parts)
    cuts_lo = a[:, None] + (b - a)[:, None] * m / parts
    cuts_hi = a[:, None] + (b - a)[:, None] * (m + 1) / parts
    cuts_hi[:, -1] = b
    cuts_lo[:, 0] = a
    ax = np.repeat(axis, parts)
    idx = np.arange(n * parts)
    new_lo[idx, ax] = cuts_lo.reshape(-1)
    new_hi[idx, ax] = cuts_hi.reshape(-1)
    return new_lo, new_hi


def _bound_arrays(lo, hi, parent_lower, objective, lipschitz: float, refine_splits: int):
    """Vectorized bounding. Returns ``(lower_bounds, upper_bounds, evaluations)``."""
    centers = 0.5 * (lo + hi)
    ub = np.asarray(objective(centers), dtype=float).reshape(-1)
    half_l = 0.5 * lipschitz
    lb = ub - half_l * np.linalg.norm(hi - lo, axis=1)
    evals = lo.shape[0]
    if refine_splits > 1:
        sub_lo, sub_hi = lo, hi
        for _ in range(int(round(math.log2(refine_splits)))):
            sub_lo, sub_hi = _split_arrays(sub_lo, sub_hi, 2)
        sub_val = np.asarray(objective(0.5 * (sub_lo + sub_hi)), dtype=float).reshape(-1)
        sub_lb = sub_val - half_l * np.linalg.norm(sub_hi - sub_lo, axis=1)
        lb = np.maximum(lb, sub_lb.reshape(-1, refine_splits).min(axis=1))
        evals += sub_lo.shape[0]
    lb = np.maximum(lb, parent_lower)
    return lb, ub, evals


def _lipschitz_value(L) -> float:
    value = L.bound if isinstance(L, LipschitzCertificate) else float(L)
    if not value >= 0:
        raise ValueError("Lipschitz bound must be nonnegative")
    return value


def bound(node: PartitionNode, obj, L, k_v: int = 1) -> PartitionNode:
    """Fill in ``node``'s bounds; returns a new node."""
    r = node.rect
    lb, ub, _ = _bound_arrays(
        r.lower[None], r.upper[None], np.array([node.parent_lower]), obj, _lipschitz_value(L), k_v
    )
    return PartitionNode(r, float(lb[0]), float(ub[0]), node.parent_lower, node.depth)


def branch(active: Sequence[PartitionNode], k_b: int, k_d: int = 2) -> list[PartitionNode]:
    """Replace the ``k_b`` lowest-bound nodes by their ``k_d`` children.

    Children are unbounded (NaN bounds) and inherit the parent's lower bound
    as ``parent_lower``. Earlier nodes win ties.
    """
    if not active:
        raise ValueError("cannot branch an empty partition")
    lbs = np.array([n.lower_bound for n in active])
    order = np.lexsort((np.arange(len(active)), lbs))
    chosen = set(order[:k_b].tolist())
    out = [n for i, n in enumerate(active) if i not in chosen]
    for i in sorted(chosen):
        parent = active[i]
        for child in parent.rect.split(k_d):
            out.append(PartitionNode(child, parent_lower=parent.lower_bound, depth=parent.depth + 1))
    return out


def prune(active: Sequence[PartitionNode], bub: float, stats: Optional[BnbStats] = None) -> list[PartitionNode]:
    """Drop nodes whose lower bound exceeds ``bub``."""
    kept = [n for n in active if not n.lower_bound > bub]
    if stats is not None:
        stats.nodes_pruned += len(active) - len(kept)
    return kept


class _NodeStore:
    """Append-only node arrays indexed by creation order."""

    def __init__(self, dim: int, capacity: int = 1024):
        self.size = 0
        self.lo = np.empty((capacity, dim))
        self.hi = np.empty((capacity, dim))
        self.lb = np.empty(capacity)
        self.ub = np.empty(capacity)
        self.depth = np.empty(capacity, dtype=np.int64)

    def append(self, lo, hi, lb, ub, depth) -> int:
        n = lb.size
        need = self.size + n
        if need > self.lb.size:
            cap = max(need, 2 * self.lb.size)
            for name in ("lo", "hi", "lb", "ub", "depth"):
                old = getattr(self, name)
                grown = np.empty((cap,) + old.shape[1:], dtype=old.dtype)
                grown[: self.size] = old[: self.size]
                setattr(self, name, grown)
        first = self.size
        sl = slice(first, need)
        self.lo[sl], self.hi[sl], self.lb[sl], self.ub[sl], self.depth[sl] = lo, hi, lb, ub, depth
        self.size = need
        return first

    def rows(self, idx):
        return self.lo[idx], self.hi[idx], self.lb[idx], self.ub[idx], self.depth[idx]


def minimize(
    obj,
    root: Rectangle,
    L,
    cfg: BnbConfig = BnbConfig(),
    warm_points=None,
    keep_partitions: bool = False,
    on_branch: Optional[Callable] = None,
) -> BnbResult:
    """Globally minimize ``obj`` over ``root`` to absolute accuracy ``cfg.epsilon``.

    ``obj`` maps an ``(n, d)`` array of points to ``n`` values. The true
    minimum always lies in ``[BLB, BUB]``. ``on_branch`` (for diagnostics)
    receives the lower/upper corners and bounds of every batch about to be
    split, followed by the current BLB and BUB.
    """
    t0 = time.perf_counter()
    lip = _lipschitz_value(L)
    eps = cfg.epsilon
    stats = BnbStats()

    starts = [root.center[None]]
    if warm_points is not None and len(warm_points):
        starts.insert(0, root.clamp(np.atleast_2d(np.asarray(warm_points, dtype=float))))
    starts = np.vstack(starts)
    vals = np.asarray(obj(starts), dtype=float).reshape(-1)
    stats.bound_evals += vals.size
    i = int(np.argmin(vals))
    bub, witness = float(vals[i]), starts[i].copy()
    blb = -math.inf

    store = _NodeStore(root.dim)
    heap = []  # (lower_bound, seq) of splittable nodes, lazily pruned
    side = []  # nodes too small or too tight to split; they only feed BLB
    side_min = math.inf

    new_lo, new_hi = root.lower[None].copy(), root.upper[None].copy()
    new_plb = np.array([-math.inf])
    new_depth = np.zeros(1, dtype=np.int64)
    stats.nodes_created = 1
    status = None
    branched = 0

    while True:
        stats.iterations += 1
        lb, ub, evals = _bound_arrays(new_lo, new_hi, new_plb, obj, lip, cfg.refine_splits)
        stats.bound_evals += evals
        j = int(np.argmin(ub))
        if ub[j] < bub:
            bub, witness = float(ub[j]), 0.5 * (new_lo[j] + new_hi[j])

        widths = new_hi - new_lo
        splittable = (ub - lb > eps) & (0.5 * lip * np.linalg.norm(widths, axis=1) > eps)
        splittable &= widths.max(axis=1) > 0
        first = store.append(new_lo, new_hi, lb, ub, new_depth)
        for k in np.flatnonzero(splittable).tolist():
            heapq.heappush(heap, (float(lb[k]), first + k))
        rest = np.flatnonzero(~splittable)
        if rest.size:
            side.extend((first + rest).tolist())
            side_min = min(side_min, float(lb[rest].min()))

        if cfg.prune:
            while heap and heap[0][0] > bub:
                heapq.heappop(heap)
        active_min = min(heap[0][0] if heap else math.inf, side_min)
        blb = max(blb, active_min)
        if cfg.prune and not active_min <= bub:
            # every region was shown to stay above BUB
            blb = bub
            heap.clear()

        if cfg.verify_mode and blb >= 0:
            status = BnbStatus.VERIFIED
        elif cfg.verify_mode and bub < 0:
            status = BnbStatus.COUNTEREXAMPLE
        elif bub - blb <= eps:
            status = BnbStatus.CONVERGED
        if status is not None:
            break

        picked = []
        while heap and len(picked) < cfg.branch_batch:
            entry = heapq.heappop(heap)
            if cfg.prune and entry[0] > bub:
                break  # everything below is pruned too
            picked.append(entry)
        if cfg.prune and heap and heap[0][0] > bub:
            heap.clear()
        if not picked:
            # only possible through round-off; nothing left to refine
            status = BnbStatus.CONVERGED if bub - blb <= eps else BnbStatus.NODE_CAP
            break
        pick = np.array([e[1] for e in picked], dtype=np.int64)
        if stats.nodes_created + pick.size * cfg.split_parts > cfg.node_cap:
            for e in picked:
                heapq.heappush(heap, e)
            status = BnbStatus.NODE_CAP
            break
        p_lo, p_hi, p_lb, p_ub, p_depth = store.rows(pick)
        if on_branch is not None:
            on_branch(p_lo, p_hi, p_lb, p_ub, blb, bub)

        new_lo, new_hi = _split_arrays(p_lo, p_hi, cfg.split_parts)
        new_plb = np.repeat(p_lb, cfg.split_parts)
        new_depth = np.repeat(p_depth + 1, cfg.split_parts)
        stats.branches += pick.size
        branched += pick.size
        stats.nodes_created += new_lo.shape[0]

    final = sorted([e[1] for e in heap] + side)
    final = np.array(final, dtype=np.int64)
    if final.size and cfg.prune:
        final = final[~(store.lb[final] > bub)]
    stats.nodes_pruned = stats.nodes_created - branched - int(final.size)
    stats.wall_time = time.perf_counter() - t0
    partitions = None
    if keep_partitions:
        partitions = [
            PartitionNode(Rectangle(store.lo[k], store.hi[k]), float(store.lb[k]), float(store.ub[k]),
                          depth=int(store.depth[k]))
            for k in final.tolist()
        ]
    return BnbResult(blb=float(blb), bub=float(bub), status=status, witness=witness, stats=stats, partitions=partitions)
