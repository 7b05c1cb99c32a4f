"""Problem files, weight fixtures and the three benchmark definitions.

Problem files are JSON documents next to their weight files. Three kinds
exist: ``closed_loop`` (reachability of a linear plant under a network
controller), ``open_loop`` (polyhedral bound on a network's output set) and
``minimize`` (one scalar objective, optionally in verify mode).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import jsonschema
import numpy as np

from ..bnb import BnbConfig, BnbStatus, Rectangle, minimize
from ..lipschitz import lipschitz_naive
from ..network import NeuralNetwork, ObjectiveFunction, forward, load_network
from ..reach import (
    HalfspaceSet,
    LinearDynamics,
    OutputPolytope,
    RotatedRectangle,
    check_goal_avoid,
    output_polytope,
    pca_directions,
    reach,
    simulate,
    uniform_directions,
)

DATA_DIR = Path(__file__).parent / "data"
CONTAINMENT_TOL = 1e-9
FRESH_SAMPLES = 10_000

_MATRIX = {"type": "array", "items": {"type": "array", "items": {"type": "number"}}}
_VECTOR = {"type": "array", "items": {"type": "number"}}
_BOX = {
    "type": "object",
    "required": ["lower", "upper"],
    "properties": {"lower": _VECTOR, "upper": _VECTOR},
}
_HALFSPACES = {
    "type": "object",
    "required": ["H", "h"],
    "properties": {"H": _MATRIX, "h": _VECTOR},
}

PROBLEM_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "kind", "network"],
    "properties": {
        "schema_version": {"const": 1},
        "kind": {"enum": ["closed_loop", "open_loop", "minimize"]},
        "name": {"type": "string"},
        "network": {"type": "string"},
        "epsilon": {"type": "number", "exclusiveMinimum": 0},
        "samples": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "dynamics": {
            "type": "object",
            "required": ["A", "B", "horizon"],
            "properties": {
                "A": _MATRIX, "B": _MATRIX, "c": _VECTOR,
                "dt": {"type": "number"}, "horizon": {"type": "integer", "minimum": 1},
            },
        },
        "initial_set": _BOX,
        "input_set": _BOX,
        "goal": _HALFSPACES,
        "avoid": {"type": "array", "items": _HALFSPACES},
        "directions": {
            "oneOf": [
                {
                    "type": "object",
                    "required": ["mode"],
                    "properties": {
                        "mode": {"enum": ["uniform", "pca"]},
                        "count": {"type": "integer", "minimum": 1},
                    },
                },
                _MATRIX,
            ]
        },
        "direction": _VECTOR,
        "verify": {"type": "boolean"},
    },
    "allOf": [
        {"if": {"properties": {"kind": {"const": "closed_loop"}}},
         "then": {"required": ["dynamics", "initial_set"]}},
        {"if": {"properties": {"kind": {"const": "open_loop"}}},
         "then": {"required": ["input_set"]}},
        {"if": {"properties": {"kind": {"const": "minimize"}}},
         "then": {"required": ["input_set", "direction"]}},
    ],
}


class ProblemError(ValueError):
    """Problem file is unreadable, fails the schema, or is inconsistent."""


@dataclass(frozen=True, eq=False)
class ClosedLoopProblem:
    name: str
    network: NeuralNetwork
    dynamics: LinearDynamics
    initial_set: RotatedRectangle
    epsilon: float = 0.01
    samples: int = 100
    seed: int = 0
    goal: Optional[HalfspaceSet] = None
    avoid: tuple = ()


@dataclass(frozen=True, eq=False)
class OpenLoopProblem:
    name: str
    network: NeuralNetwork
    input_set: Rectangle
    directions: object = field(default_factory=lambda: {"mode": "uniform", "count": 60})
    epsilon: float = 0.01
    samples: int = 10_000
    seed: int = 0

    def direction_matrix(self, mode=None) -> np.ndarray:
        """Facet normals for the requested mode (defaults to the file's)."""
        spec = self.directions if mode is None else mode
        if not isinstance(spec, dict):
            return np.atleast_2d(np.asarray(spec, dtype=float))
        if spec["mode"] == "uniform":
            if self.network.output_dim != 2:
                raise ProblemError("uniform directions need a 2-D output")
            return uniform_directions(spec.get("count", 60))
        rng = np.random.default_rng(self.seed)
        pts = rng.uniform(self.input_set.lower, self.input_set.upper, size=(self.samples, self.input_set.dim))
        r = pca_directions(forward(self.network, pts))
        return np.vstack([r.T, -r.T])


@dataclass(frozen=True, eq=False)
class MinimizeProblem:
    name: str
    network: NeuralNetwork
    input_set: Rectangle
    direction: np.ndarray
    epsilon: float = 0.01
    verify: bool = False

    @property
    def objective(self) -> ObjectiveFunction:
        return ObjectiveFunction(self.network, self.direction)


def _box(doc) -> Rectangle:
    return Rectangle(doc["lower"], doc["upper"])


def parse_problem(doc: dict, base_dir=".", network: Optional[NeuralNetwork] = None):
    """Build a problem object from a decoded problem document.

    ``network`` overrides the weight file named in the document.
    """
    try:
        jsonschema.validate(doc, PROBLEM_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ProblemError(f"problem file fails validation: {exc.message}") from exc
    if network is None:
        network = load_network(Path(base_dir) / doc["network"])
    name = doc.get("name", doc["kind"])
    common = {"name": name, "network": network, "epsilon": doc.get("epsilon", 0.01)}
    try:
        if doc["kind"] == "closed_loop":
            dd = doc["dynamics"]
            dyn = LinearDynamics.time_invariant(
                dd["A"], dd["B"], dd.get("c"), dd["horizon"], dd.get("dt", 1.0)
            )
            dyn.check_controller(network)
            init = _box(doc["initial_set"])
            if init.dim != dyn.state_dim:
                raise ProblemError("initial set dimension disagrees with the dynamics")
            goal = HalfspaceSet(doc["goal"]["H"], doc["goal"]["h"]) if "goal" in doc else None
            avoid = tuple(HalfspaceSet(a["H"], a["h"]) for a in doc.get("avoid", ()))
            return ClosedLoopProblem(
                dynamics=dyn, initial_set=RotatedRectangle(np.eye(init.dim), init),
                samples=doc.get("samples", 100), seed=doc.get("seed", 0),
                goal=goal, avoid=avoid, **common,
            )
        box = _box(doc["input_set"])
        if box.dim != network.input_dim:
            raise ProblemError(f"input set has dimension {box.dim}, network expects {network.input_dim}")
        if doc["kind"] == "open_loop":
            return OpenLoopProblem(
                input_set=box, directions=doc.get("directions", {"mode": "uniform", "count": 60}),
                samples=doc.get("samples", 10_000), seed=doc.get("seed", 0), **common,
            )
        return MinimizeProblem(
            input_set=box, direction=np.asarray(doc["direction"], dtype=float),
            verify=doc.get("verify", False), **common,
        )
    except ProblemError:
        raise
    except ValueError as exc:
        raise ProblemError(str(exc)) from exc


def load_problem(path, network: Optional[NeuralNetwork] = None):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ProblemError(f"{path}: {exc}") from exc
    return parse_problem(doc, path.parent, network)


@dataclass(frozen=True)
class PropertyCheck:
    name: str
    description: str
    check: Callable[["BenchmarkContext"], bool]
    expectation: bool = False  # reported but does not fail the run


@dataclass(frozen=True)
class BenchmarkSpec:
    name: str
    problem_file: Path
    weight_file: Path
    properties: tuple
    epsilons: tuple = ()

    def load(self):
        return load_problem(self.problem_file)


@dataclass
class BenchmarkContext:
    """Lazily computed runs shared by the property checks of one benchmark."""

    problem: object
    cfg: BnbConfig
    lipschitz_method: str = "sdp"
    threads: int = 1
    _cache: dict = field(default_factory=dict)

    def memo(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def reach(self, **overrides):
        cfg = BnbConfig(**{**self.cfg.__dict__, **overrides.pop("cfg", {})})
        key = ("reach", tuple(sorted(cfg.__dict__.items())), tuple(sorted(overrides.items())))
        pb = self.problem
        return self.memo(key, lambda: reach(
            pb.dynamics, pb.network, pb.initial_set, cfg, p=pb.samples, seed=pb.seed,
            lipschitz_method=self.lipschitz_method, threads=self.threads, **overrides,
        ))

    def polytope(self, mode=None) -> OutputPolytope:
        pb = self.problem
        key = ("poly", json.dumps(mode))
        return self.memo(key, lambda: output_polytope(
            pb.network, pb.input_set, pb.direction_matrix(mode), self.cfg, self.lipschitz_method,
        ))


def _fresh_containment(ctx: BenchmarkContext) -> bool:
    pb = ctx.problem
    res = ctx.reach()
    fresh = simulate(pb.dynamics, pb.network, pb.initial_set, FRESH_SAMPLES, pb.seed + 1)
    return all(s.contains(fresh[:, t], CONTAINMENT_TOL).all() for t, s in enumerate(res.sets))


def _gaps_within(res, eps) -> bool:
    return all(
        d.result.gap <= eps for step in res.solves for d in step
        if d.result.status is BnbStatus.CONVERGED
    )


def _branches_drop(ctx: BenchmarkContext) -> bool:
    one = ctx.reach(cfg={"refine_splits": 1}).total_branches
    four = ctx.reach(cfg={"refine_splits": 4}).total_branches
    return four < one


def _pca_area(ctx: BenchmarkContext) -> bool:
    return ctx.reach().sets[-1].volume <= ctx.reach(identity_rotation=True).sets[-1].volume


def _arm_samples_inside(ctx: BenchmarkContext) -> bool:
    pb = ctx.problem
    rng = np.random.default_rng(pb.seed + 1)
    pts = rng.uniform(pb.input_set.lower, pb.input_set.upper, size=(FRESH_SAMPLES, pb.input_set.dim))
    return bool(ctx.polytope().contains(forward(pb.network, pts), CONTAINMENT_TOL).all())


def _arm_dominance(ctx: BenchmarkContext) -> bool:
    # support of the 60-facet polytope along any 4 of its own normals never exceeds their offsets
    from scipy.optimize import linprog

    poly = ctx.polytope()
    picks = np.linspace(0, len(poly.offsets), 4, endpoint=False).astype(int)
    for k in picks:
        res = linprog(-poly.directions[k], A_ub=poly.directions, b_ub=poly.offsets,
                      bounds=[(None, None)] * poly.directions.shape[1], method="highs")
        if res.status != 0 or -res.fun > poly.offsets[k] + 1e-9:
            return False
    return True


def _goal_avoid(ctx: BenchmarkContext) -> bool:
    pb = ctx.problem
    report = check_goal_avoid(ctx.reach(), pb.goal, pb.avoid)
    return report.get("goal_reached", True) and all(report.get("avoid_clear", [True]))


def double_integrator_spec() -> BenchmarkSpec:
    props = (
        PropertyCheck("solve_count", "5 steps use exactly 20 BnB solves",
                      lambda c: c.reach().num_solves == 20),
        PropertyCheck("gap_contract", "every converged solve has gap <= epsilon",
                      lambda c: _gaps_within(c.reach(), c.cfg.epsilon)),
        PropertyCheck("containment", f"{FRESH_SAMPLES} fresh trajectories stay inside every set",
                      _fresh_containment),
        PropertyCheck("refinement_branches", "k_v = 4 branches less than k_v = 1", _branches_drop),
        PropertyCheck("goal_avoid", "final set inside the goal box and clear of the avoid region",
                      _goal_avoid),
        PropertyCheck("pca_area", "PCA step-5 area <= identity-rotation area", _pca_area,
                      expectation=True),
    )
    return BenchmarkSpec(
        "double_integrator", DATA_DIR / "double_integrator.problem.json",
        DATA_DIR / "double_integrator.json", props, (0.1, 0.01, 0.001),
    )


def quadrotor_spec() -> BenchmarkSpec:
    props = (
        PropertyCheck("solve_count", "12 steps use exactly 144 BnB solves",
                      lambda c: c.reach().num_solves == 144),
        PropertyCheck("horizon_seconds", "horizon * dt = 1.2 s",
                      lambda c: abs(c.problem.dynamics.horizon * c.problem.dynamics.dt - 1.2) < 1e-12),
        PropertyCheck("gap_contract", "every converged solve has gap <= epsilon",
                      lambda c: _gaps_within(c.reach(), c.cfg.epsilon)),
        PropertyCheck("sample_containment", "the sampled trajectories stay inside every set",
                      lambda c: all(s.contains(c.reach().trajectories[:, t], CONTAINMENT_TOL).all()
                                    for t, s in enumerate(c.reach().sets))),
        PropertyCheck("containment", f"{FRESH_SAMPLES} fresh trajectories stay inside every set",
                      _fresh_containment),
    )
    return BenchmarkSpec(
        "quadrotor", DATA_DIR / "quadrotor.problem.json", DATA_DIR / "quadrotor.json", props, (0.1,),
    )


def robotic_arm_spec() -> BenchmarkSpec:
    props = (
        PropertyCheck("uniform_solves", "60 directions, each converged",
                      lambda c: len(c.polytope().results) == 60 and all(
                          r.status is BnbStatus.CONVERGED for r in c.polytope().results)),
        PropertyCheck("containment", f"{FRESH_SAMPLES} sampled outputs inside the 60-facet polytope",
                      _arm_samples_inside),
        PropertyCheck("dominance", "60-facet polytope inside any 4 of its facets", _arm_dominance),
        PropertyCheck("pca_solves", "PCA mode uses 4 directions, each converged",
                      lambda c: len(c.polytope({"mode": "pca"}).results) == 4 and all(
                          r.status is BnbStatus.CONVERGED for r in c.polytope({"mode": "pca"}).results)),
    )
    return BenchmarkSpec(
        "robotic_arm", DATA_DIR / "robotic_arm.problem.json", DATA_DIR / "robotic_arm.json", props, (0.01,),
    )


BENCHMARKS = {
    "double_integrator": double_integrator_spec,
    "quadrotor": quadrotor_spec,
    "robotic_arm": robotic_arm_spec,
}


def fixture_sanity(spec: BenchmarkSpec) -> float:
    """Load ``spec``'s fixture and return its naive Lipschitz bound (finite)."""
    pb = spec.load()
    net = pb.network
    if isinstance(pb, ClosedLoopProblem):
        obj = ObjectiveFunction(net, np.ones(pb.dynamics.state_dim), pb.dynamics.A_seq[0], pb.dynamics.B_seq[0])
    else:
        obj = ObjectiveFunction(net, np.ones(net.output_dim))
    return lipschitz_naive(obj).bound


def run_benchmark(spec: BenchmarkSpec, epsilon=None, refine_splits=4, branch_batch=512,
                  lipschitz_method="sdp", threads=1):
    """Execute every property check of ``spec``; returns ``(context, outcomes)``."""
    pb = spec.load()
    cfg = BnbConfig(epsilon=epsilon or pb.epsilon, refine_splits=refine_splits, branch_batch=branch_batch)
    ctx = BenchmarkContext(pb, cfg, lipschitz_method, threads)
    outcomes = {}
    for prop in spec.properties:
        outcomes[prop.name] = {
            "passed": bool(prop.check(ctx)),
            "description": prop.description,
            "expectation": prop.expectation,
        }
    return ctx, outcomes
