"""Reachable-set over-approximation for linear plants under network feedback.

The state sets are rotated rectangles ``{R y : lower <= y <= upper}``. At each
step the rotation of the next set comes from PCA of simulated trajectories,
and each of its ``2 n_x`` faces is placed by a branch-and-bound minimization
of ``+-r_i^T (A R y + B f(R y))`` over the current box.
"""
from __future__ import annotations

import itertools
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linprog

from .bnb import BnbConfig, BnbResult, BnbStatus, Rectangle, minimize
from .lipschitz import (
    LipschitzCertificate,
    lipschitz_naive,
    lipschitz_sdp,
    preactivation_intervals,
)
from .network import NeuralNetwork, ObjectiveFunction, forward

log = logging.getLogger(__name__)

ORTHONORMAL_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class LinearDynamics:
    """``x+ = A_t x + B_t u + c_t`` for ``t = 0 .. horizon - 1``."""

    A_seq: tuple
    B_seq: tuple
    c_seq: tuple
    horizon: int
    dt: float = 1.0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        a = tuple(np.array(m, dtype=float) for m in self.A_seq)
        b = tuple(np.array(m, dtype=float).reshape(len(m), -1) for m in self.B_seq)
        n = a[0].shape[0]
        c = tuple(np.zeros(n) for _ in a) if self.c_seq is None else tuple(
            np.array(v, dtype=float).reshape(-1) for v in self.c_seq
        )
        if min(len(a), len(b), len(c)) < self.horizon:
            raise ValueError("dynamics sequences are shorter than the horizon")
        for t, (at, bt, ct) in enumerate(zip(a, b, c)):
            if at.shape != (n, n) or bt.shape[0] != n or ct.shape != (n,):
                raise ValueError(f"inconsistent dynamics shapes at step {t}")
        object.__setattr__(self, "A_seq", a)
        object.__setattr__(self, "B_seq", b)
        object.__setattr__(self, "c_seq", c)

    @classmethod
    def time_invariant(cls, A, B, c=None, horizon: int = 1, dt: float = 1.0) -> "LinearDynamics":
        A = np.asarray(A, dtype=float)
        B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
        c = np.zeros(A.shape[0]) if c is None else np.asarray(c, dtype=float)
        return cls((A,) * horizon, (B,) * horizon, (c,) * horizon, horizon, dt)

    @property
    def state_dim(self) -> int:
        return self.A_seq[0].shape[0]

    @property
    def input_dim(self) -> int:
        return self.B_seq[0].shape[1]

    def check_controller(self, net: NeuralNetwork) -> None:
        if net.input_dim != self.state_dim or net.output_dim != self.input_dim:
            raise ValueError(
                f"controller maps {net.input_dim} -> {net.output_dim} but dynamics need "
                f"{self.state_dim} -> {self.input_dim}"
            )

    def step(self, t: int, x: np.ndarray, net: NeuralNetwork) -> np.ndarray:
        return x @ self.A_seq[t].T + forward(net, x) @ self.B_seq[t].T + self.c_seq[t]


@dataclass(frozen=True, eq=False)
class RotatedRectangle:
    rotation: np.ndarray
    bounds: Rectangle

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float)
        n = self.bounds.dim
        if r.shape != (n, n):
            raise ValueError(f"rotation must be {n}x{n}")
        if np.abs(r.T @ r - np.eye(n)).max() > ORTHONORMAL_TOL:
            raise ValueError("rotation is not orthonormal")
        r.setflags(write=False)
        object.__setattr__(self, "rotation", r)

    @classmethod
    def axis_aligned(cls, lower, upper) -> "RotatedRectangle":
        box = Rectangle(lower, upper)
        return cls(np.eye(box.dim), box)

    @property
    def dim(self) -> int:
        return self.bounds.dim

    @property
    def volume(self) -> float:
        return self.bounds.volume

    def to_local(self, points) -> np.ndarray:
        """``y = R^T x`` for each row ``x``."""
        return np.atleast_2d(points) @ self.rotation

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        return self.bounds.contains(self.to_local(points), tol)

    def vertices(self) -> np.ndarray:
        lo, hi = self.bounds.lower, self.bounds.upper
        corners = np.array(list(itertools.product(*zip(lo, hi))))
        return corners @ self.rotation.T

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        y = rng.uniform(self.bounds.lower, self.bounds.upper, size=(n, self.dim))
        return y @ self.rotation.T

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "lower": self.bounds.lower.tolist(),
            "upper": self.bounds.upper.tolist(),
        }


@dataclass
class DirectionSolve:
    """One face of a rotated rectangle: ``min sign * r_axis^T x`` over the previous set."""

    step: int
    axis: int
    sign: int
    direction: np.ndarray
    offset: float
    certificate: LipschitzCertificate
    result: BnbResult

    @property
    def flagged(self) -> bool:
        return self.result.status is BnbStatus.NODE_CAP

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "axis": self.axis,
            "sign": self.sign,
            "direction": self.direction.tolist(),
            "offset": self.offset,
            "lipschitz": self.certificate.to_dict(),
            "bnb": self.result.to_dict(),
        }


@dataclass
class ReachabilityResult:
    sets: list
    solves: list
    trajectories: np.ndarray
    flags: list = field(default_factory=list)

    @property
    def num_solves(self) -> int:
        return sum(len(s) for s in self.solves)

    @property
    def total_branches(self) -> int:
        return sum(d.result.stats.branches for s in self.solves for d in s)


def simulate(dyn: LinearDynamics, net: NeuralNetwork, init: RotatedRectangle, p: int, seed=0) -> np.ndarray:
    """Roll out ``p`` uniformly sampled initial states; shape ``(p, horizon + 1, n_x)``."""
    dyn.check_controller(net)
    rng = np.random.default_rng(seed)
    x = init.sample(p, rng)
    traj = np.empty((p, dyn.horizon + 1, dyn.state_dim))
    traj[:, 0] = x
    for t in range(dyn.horizon):
        x = dyn.step(t, x, net)
        traj[:, t + 1] = x
    return traj


def pca_directions(points) -> np.ndarray:
    """Orthonormal basis of principal directions, largest variance first.

    Each column's largest-magnitude entry is made positive. Directions with
    (numerically) zero variance are completed from the standard basis.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    p, n = pts.shape
    if p < 2:
        warnings.warn("PCA needs at least two points; using the identity", RuntimeWarning, stacklevel=2)
        return np.eye(n)
    cov = np.cov(pts, rowvar=False, ddof=1).reshape(n, n)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")
    evals, evecs = evals[order], evecs[:, order]
    scale = max(float(evals[0]), 0.0)
    keep = evals > scale * n * 1e-12 if scale > 0 else np.zeros(n, dtype=bool)
    cols = [evecs[:, i] for i in np.flatnonzero(keep)]
    # complete deficient directions with standard basis vectors
    for e in np.eye(n):
        if len(cols) == n:
            break
        v = e - sum((c @ e) * c for c in cols) if cols else e.copy()
        if np.linalg.norm(v) > 1e-6:
            cols.append(v / np.linalg.norm(v))
    q, r = np.linalg.qr(np.column_stack(cols))
    q = q * np.sign(np.diag(r))
    for j in range(n):
        mag = np.abs(q[:, j])
        # first index within rounding of the max, so exact ties do not flip on noise
        k = int(np.flatnonzero(mag >= mag.max() - 1e-12)[0])
        if q[k, j] < 0:
            q[:, j] = -q[:, j]
    return q


def step_objective(dyn: LinearDynamics, t: int, net: NeuralNetwork, rotation, direction) -> ObjectiveFunction:
    return ObjectiveFunction(net, direction, dyn.A_seq[t], dyn.B_seq[t], rotation)


def certify(obj: ObjectiveFunction, box: Rectangle, method: str = "sdp", localize: bool = True) -> LipschitzCertificate:
    if method == "naive":
        return lipschitz_naive(obj)
    bounds = preactivation_intervals(obj.network, box, obj.rotation) if localize else None
    return lipschitz_sdp(obj, bounds)


def _face_directions(r_next: np.ndarray):
    n = r_next.shape[0]
    return [(i, s, s * r_next[:, i]) for i in range(n) for s in (1, -1)]


def step_overapprox(
    dyn: LinearDynamics,
    t: int,
    net: NeuralNetwork,
    current: RotatedRectangle,
    r_next,
    cfg: BnbConfig,
    warm=None,
    certs: Optional[Sequence[LipschitzCertificate]] = None,
    lipschitz_method: str = "sdp",
    threads: int = 1,
):
    """Over-approximate the image of ``current`` under step ``t``.

    Returns the next rotated rectangle and the ``2 n_x`` direction solves.
    ``warm`` holds states known to lie in ``current`` (trajectory samples);
    they seed the upper bounds.
    """
    r_next = np.asarray(r_next, dtype=float)
    faces = _face_directions(r_next)
    objectives = [step_objective(dyn, t, net, current.rotation, d) for _, _, d in faces]
    if certs is None:
        certs = [certify(obj, current.bounds, lipschitz_method) for obj in objectives]
    if len(certs) != len(faces):
        raise ValueError(f"need {len(faces)} certificates, got {len(certs)}")
    warm_y = None if warm is None else current.to_local(warm)

    def solve(k):
        return minimize(objectives[k], current.bounds, certs[k], cfg, warm_points=warm_y)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(solve, range(len(faces))))
    else:
        results = [solve(k) for k in range(len(faces))]

    n = r_next.shape[0]
    lower, upper = np.empty(n), np.empty(n)
    solves = []
    for (i, s, d), cert, res in zip(faces, certs, results):
        offset = float(d @ dyn.c_seq[t])
        if s > 0:
            lower[i] = res.blb + offset
        else:
            upper[i] = -(res.blb + offset)
        solves.append(DirectionSolve(t, i, s, d, offset, cert, res))
        if res.status is BnbStatus.NODE_CAP:
            log.warning("step %d axis %d sign %+d hit the node cap; bound is sound but loose", t, i, s)
    return RotatedRectangle(r_next, Rectangle(lower, upper)), solves


def reach(
    dyn: LinearDynamics,
    net: NeuralNetwork,
    init: RotatedRectangle,
    cfg: BnbConfig,
    p: int = 100,
    seed=0,
    lipschitz_method: str = "sdp",
    identity_rotation: bool = False,
    threads: int = 1,
) -> ReachabilityResult:
    """Recursive over-approximation of the reachable sets for ``dyn.horizon`` steps."""
    dyn.check_controller(net)
    if p < dyn.state_dim + 1 and not identity_rotation:
        raise ValueError(f"need at least {dyn.state_dim + 1} trajectories for PCA, got {p}")
    traj = simulate(dyn, net, init, p, seed)
    sets, solves, flags = [init], [], []
    for t in range(dyn.horizon):
        r_next = np.eye(dyn.state_dim) if identity_rotation else pca_directions(traj[:, t + 1])
        nxt, step_solves = step_overapprox(
            dyn, t, net, sets[-1], r_next, cfg, warm=traj[:, t],
            lipschitz_method=lipschitz_method, threads=threads,
        )
        sets.append(nxt)
        solves.append(step_solves)
        flags.extend((t, s.axis, s.sign) for s in step_solves if s.flagged)
    return ReachabilityResult(sets, solves, traj, flags)


@dataclass(frozen=True, eq=False)
class HalfspaceSet:
    """Polyhedron ``{x : H x <= h}``."""

    H: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        h = np.asarray(self.h, dtype=float).reshape(-1)
        if H.shape[0] != h.size:
            raise ValueError("H and h disagree in the number of constraints")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "h", h)

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        return np.all(np.atleast_2d(points) @ self.H.T <= self.h + tol, axis=1)


def support(rect: RotatedRectangle, direction) -> float:
    """``max_{x in rect} direction^T x``."""
    w = np.asarray(direction, dtype=float) @ rect.rotation
    return float(np.sum(np.maximum(w * rect.bounds.lower, w * rect.bounds.upper)))


def within(rect: RotatedRectangle, region: HalfspaceSet) -> bool:
    return all(support(rect, a) <= b for a, b in zip(region.H, region.h))


def disjoint(rect: RotatedRectangle, region: HalfspaceSet) -> bool:
    """True when no point of ``rect`` satisfies ``H x <= h`` (LP feasibility)."""
    lo, hi = rect.bounds.lower, rect.bounds.upper
    res = linprog(
        np.zeros(rect.dim), A_ub=region.H @ rect.rotation, b_ub=region.h,
        bounds=list(zip(lo, hi)), method="highs",
    )
    return res.status == 2


def check_goal_avoid(result: ReachabilityResult, goal: Optional[HalfspaceSet] = None, avoid=()) -> dict:
    """Goal containment of the final set and avoid-set separation at every step."""
    report = {}
    if goal is not None:
        report["goal_reached"] = within(result.sets[-1], goal)
    if avoid:
        report["avoid_clear"] = [
            all(disjoint(s, a) for a in avoid) for s in result.sets
        ]
    return report


@dataclass
class OutputPolytope:
    """``{z : directions @ z <= offsets}`` with one BnB solve per row."""

    directions: np.ndarray
    offsets: np.ndarray
    results: list

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        return np.all(np.atleast_2d(points) @ self.directions.T <= self.offsets + tol, axis=1)


def uniform_directions(count: int) -> np.ndarray:
    """``count`` unit vectors evenly spaced in angle on [0, 2 pi)."""
    ang = 2.0 * np.pi * np.arange(count) / count
    return np.column_stack([np.cos(ang), np.sin(ang)])


def output_polytope(
    net: NeuralNetwork,
    box: Rectangle,
    directions,
    cfg: BnbConfig,
    lipschitz_method: str = "sdp",
    warm=None,
) -> OutputPolytope:
    """Polyhedral over-approximation of ``f(box)`` with the given facet normals."""
    dirs = np.atleast_2d(np.asarray(directions, dtype=float))
    offsets, results = [], []
    for c in dirs:
        obj = ObjectiveFunction(net, -c)
        cert = certify(obj, box, lipschitz_method)
        res = minimize(obj, box, cert, cfg, warm_points=warm, keep_partitions=box.dim == 2)
        offsets.append(-res.blb)
        results.append(res)
    return OutputPolytope(dirs, np.array(offsets), results)
