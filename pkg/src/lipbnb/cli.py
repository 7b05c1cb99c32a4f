"""Command-line entry point.

Subcommands::

    lipbnb lipschitz  weight file + direction -> Lipschitz certificate
    lipbnb verify     minimize one objective over a box (optionally verify sign)
    lipbnb reach      closed-loop reachable sets or an open-loop output polytope
    lipbnb bench run  run a shipped benchmark and its property checks

Results go to ``--out`` as ``records.jsonl`` plus ``summary.json``; without
``--out`` the summary is printed to stdout.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from .bnb import BnbConfig, BnbStatus, Rectangle, minimize
from .lipschitz import lipschitz_naive, lipschitz_sdp, preactivation_intervals
from .network import NetworkError, ObjectiveFunction, forward, load_network
from .problems import (
    BENCHMARKS,
    ClosedLoopProblem,
    MinimizeProblem,
    OpenLoopProblem,
    ProblemError,
    load_problem,
    run_benchmark,
)
from .reach import check_goal_avoid, output_polytope, reach
from .render import polytope_vertices, render_svg

log = logging.getLogger("lipbnb")

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_COUNTEREXAMPLE = 3
EXIT_NODE_CAP = 4
EXIT_PROPERTY_FAILED = 5

STATUS_EXIT = {
    BnbStatus.CONVERGED: EXIT_OK,
    BnbStatus.VERIFIED: EXIT_OK,
    BnbStatus.COUNTEREXAMPLE: EXIT_COUNTEREXAMPLE,
    BnbStatus.NODE_CAP: EXIT_NODE_CAP,
}

_NUM = {"type": "number"}
_VEC = {"type": "array", "items": _NUM}
_CERT = {
    "type": "object",
    "required": ["bound", "method"],
    "properties": {"bound": _NUM, "method": {"enum": ["sdp", "naive"]}},
}
_BNB = {
    "type": "object",
    "required": ["status", "BLB", "BUB", "witness", "stats"],
    "properties": {
        "status": {"enum": [s.value for s in BnbStatus]},
        "BLB": _NUM,
        "BUB": _NUM,
        "witness": _VEC,
        "stats": {
            "type": "object",
            "required": ["nodes_created", "nodes_pruned", "bound_evals", "branches", "wall_time"],
        },
    },
}

RECORD_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "type"],
    "properties": {"schema_version": {"const": SCHEMA_VERSION}},
    "oneOf": [
        {"properties": {"type": {"const": "lipschitz"}, "certificate": _CERT},
         "required": ["certificate"]},
        {"properties": {"type": {"const": "bnb"}, "result": _BNB, "lipschitz": _CERT},
         "required": ["result", "lipschitz"]},
        {"properties": {"type": {"const": "solve"}, "step": {"type": "integer"},
                        "axis": {"type": "integer"}, "sign": {"enum": [1, -1]},
                        "direction": _VEC, "offset": _NUM, "lipschitz": _CERT, "bnb": _BNB},
         "required": ["step", "axis", "sign", "direction", "offset", "lipschitz", "bnb"]},
        {"properties": {"type": {"const": "set"}, "step": {"type": "integer"},
                        "rotation": {"type": "array", "items": _VEC},
                        "lower": _VEC, "upper": _VEC},
         "required": ["step", "rotation", "lower", "upper"]},
        {"properties": {"type": {"const": "facet"}, "direction": _VEC, "offset": _NUM, "bnb": _BNB},
         "required": ["direction", "offset", "bnb"]},
        {"properties": {"type": {"const": "property"}, "name": {"type": "string"},
                        "passed": {"type": "boolean"}, "expectation": {"type": "boolean"}},
         "required": ["name", "passed", "expectation"]},
    ],
}

SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "command", "status", "exit_code", "config"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "command": {"enum": ["lipschitz", "verify", "reach", "bench"]},
        "status": {"type": "string"},
        "exit_code": {"type": "integer"},
        "config": {"type": "object"},
    },
}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Validated command-line configuration."""

    command: str
    problem: Optional[Path] = None
    weights: Optional[Path] = None
    direction: Optional[list] = None
    lower: Optional[list] = None
    upper: Optional[list] = None
    epsilon: Optional[float] = None
    kb: int = 512
    kv: int = 4
    seed: Optional[int] = None
    samples: Optional[int] = None
    threads: int = 1
    out: Optional[Path] = None
    svg: Optional[Path] = None
    axes: tuple = (0, 1)
    verify_mode: bool = False
    identity_rotation: bool = False
    lipschitz_method: str = "sdp"
    node_cap: int = 5_000_000
    bench_name: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.epsilon is not None and not self.epsilon > 0:
            raise UsageError("--epsilon must be positive")
        if self.kb < 1:
            raise UsageError("--kb must be at least 1")
        if self.kv < 1 or self.kv & (self.kv - 1):
            raise UsageError("--kv must be a power of two (1 disables refinement)")
        if self.threads < 1:
            raise UsageError("--threads must be at least 1")
        if self.samples is not None and self.samples < 1:
            raise UsageError("--samples must be at least 1")
        if self.seed is not None and self.seed < 0:
            raise UsageError("--seed must be nonnegative")
        if self.node_cap < 1:
            raise UsageError("--node-cap must be at least 1")
        if len(self.axes) != 2 or self.axes[0] == self.axes[1] or min(self.axes) < 0:
            raise UsageError("--axes needs two distinct nonnegative indices, e.g. 0,1")
        if self.problem is not None and not self.problem.is_file():
            raise UsageError(f"problem file not found: {self.problem}")
        if self.weights is not None and not self.weights.is_file():
            raise UsageError(f"weight file not found: {self.weights}")
        if self.command in ("lipschitz", "verify") and self.problem is None:
            if self.weights is None:
                raise UsageError(f"{self.command} needs a problem file or --weights")
            if self.command == "verify" and (self.lower is None or self.upper is None):
                raise UsageError("verify with --weights needs --lower and --upper")
        if self.command == "reach" and self.problem is None:
            raise UsageError("reach needs a problem file")
        if self.command == "bench" and self.bench_name not in BENCHMARKS:
            raise UsageError(f"unknown benchmark {self.bench_name!r}; choose from {sorted(BENCHMARKS)}")

    def bnb(self, epsilon: float, verify: bool = False) -> BnbConfig:
        return BnbConfig(
            epsilon=self.epsilon if self.epsilon is not None else epsilon,
            branch_batch=self.kb, refine_splits=self.kv, node_cap=self.node_cap,
            verify_mode=self.verify_mode or verify,
        )

    def to_dict(self) -> dict:
        doc = {}
        for k, v in self.__dict__.items():
            if k == "extra":
                continue
            doc[k] = str(v) if isinstance(v, Path) else (list(v) if isinstance(v, tuple) else v)
        return doc


def _vector(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _axes(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected two comma-separated integers, got {text!r}") from exc


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--epsilon", type=float, help="absolute accuracy of each minimization")
    common.add_argument("--kb", type=int, default=512, help="partitions branched per iteration")
    common.add_argument("--kv", type=int, default=4, help="refinement sub-boxes (power of two, 1 = off)")
    common.add_argument("--seed", type=int, help="sampling seed (overrides the problem file)")
    common.add_argument("--samples", type=int, help="number of simulated trajectories / samples")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker threads for independent solves (1 = reference path)")
    common.add_argument("--out", type=Path, help="directory for records.jsonl and summary.json")
    common.add_argument("--svg", type=Path, help="write a 2-D projection plot here")
    common.add_argument("--axes", type=_axes, default=(0, 1), help="projection axes for --svg")
    common.add_argument("--verify-mode", action="store_true",
                        help="stop as soon as the sign of the minimum is decided")
    common.add_argument("--identity-rotation", action="store_true", help="disable PCA rotations")
    common.add_argument("--lipschitz-method", choices=("sdp", "naive"), default="sdp")
    common.add_argument("--node-cap", type=int, default=5_000_000)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="lipbnb", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("lipschitz", parents=[common], help="certify a Lipschitz bound")
    p.add_argument("problem", nargs="?", type=Path)
    p.add_argument("--weights", type=Path)
    p.add_argument("--direction", type=_vector)
    p.add_argument("--lower", type=_vector, help="box for localized bounds")
    p.add_argument("--upper", type=_vector)

    p = sub.add_parser("verify", parents=[common], help="minimize c^T f(x) over a box")
    p.add_argument("problem", nargs="?", type=Path)
    p.add_argument("--weights", type=Path)
    p.add_argument("--direction", type=_vector)
    p.add_argument("--lower", type=_vector)
    p.add_argument("--upper", type=_vector)

    p = sub.add_parser("reach", parents=[common], help="reachable-set over-approximation")
    p.add_argument("problem", type=Path)

    p = sub.add_parser("bench", help="shipped benchmarks")
    bsub = p.add_subparsers(dest="bench_command", required=True)
    b = bsub.add_parser("run", parents=[common], help="run one benchmark")
    b.add_argument("name")
    return parser


def parse_config(argv) -> RunConfig:
    ns = build_parser().parse_args(argv)
    cfg = RunConfig(
        command=ns.command,
        problem=getattr(ns, "problem", None),
        weights=getattr(ns, "weights", None),
        direction=getattr(ns, "direction", None),
        lower=getattr(ns, "lower", None),
        upper=getattr(ns, "upper", None),
        epsilon=ns.epsilon, kb=ns.kb, kv=ns.kv, seed=ns.seed, samples=ns.samples,
        threads=ns.threads, out=ns.out, svg=ns.svg, axes=ns.axes,
        verify_mode=ns.verify_mode, identity_rotation=ns.identity_rotation,
        lipschitz_method=ns.lipschitz_method, node_cap=ns.node_cap,
        bench_name=getattr(ns, "name", None),
    )
    cfg.extra["verbose"] = ns.verbose
    cfg.validate()
    return cfg


@dataclass
class Outcome:
    status: str
    exit_code: int
    records: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    svg: Optional[str] = None
    csv: Optional[str] = None


def _record(kind: str, **fields) -> dict:
    return {"schema_version": SCHEMA_VERSION, "type": kind, **fields}


def _box_from_flags(cfg: RunConfig, dim: int) -> Optional[Rectangle]:
    if cfg.lower is None and cfg.upper is None:
        return None
    if cfg.lower is None or cfg.upper is None:
        raise UsageError("--lower and --upper go together")
    if len(cfg.lower) != dim or len(cfg.upper) != dim:
        raise UsageError(f"box needs {dim} entries per bound")
    try:
        return Rectangle(cfg.lower, cfg.upper)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _flag_objective(cfg: RunConfig):
    net = load_network(cfg.weights)
    c = cfg.direction if cfg.direction is not None else [1.0] * net.output_dim
    if len(c) != net.output_dim:
        raise UsageError(f"--direction needs {net.output_dim} entries")
    return ObjectiveFunction(net, c), _box_from_flags(cfg, net.input_dim)


def _certificate(obj: ObjectiveFunction, box: Optional[Rectangle], method: str):
    if method == "naive":
        return lipschitz_naive(obj)
    bounds = preactivation_intervals(obj.network, box, obj.rotation) if box is not None else None
    return lipschitz_sdp(obj, bounds)


def cmd_lipschitz(cfg: RunConfig) -> Outcome:
    if cfg.problem is None:
        obj, box = _flag_objective(cfg)
    else:
        pb = load_problem(cfg.problem)
        if isinstance(pb, MinimizeProblem):
            obj, box = pb.objective, pb.input_set
        elif isinstance(pb, ClosedLoopProblem):
            # first-step objective over the initial set
            dyn = pb.dynamics
            c = cfg.direction if cfg.direction is not None else np.eye(dyn.state_dim)[0]
            if len(c) != dyn.state_dim:
                raise UsageError(f"--direction needs {dyn.state_dim} entries")
            obj = ObjectiveFunction(pb.network, c, dyn.A_seq[0], dyn.B_seq[0])
            box = pb.initial_set.bounds
        else:
            c = cfg.direction if cfg.direction is not None else [1.0] * pb.network.output_dim
            if len(c) != pb.network.output_dim:
                raise UsageError(f"--direction needs {pb.network.output_dim} entries")
            obj, box = ObjectiveFunction(pb.network, c), pb.input_set
    cert = _certificate(obj, box, cfg.lipschitz_method)
    rec = _record("lipschitz", certificate=cert.to_dict())
    return Outcome("Certified", EXIT_OK, [rec], {"certificate": cert.to_dict()})


def cmd_verify(cfg: RunConfig) -> Outcome:
    if cfg.problem is not None:
        pb = load_problem(cfg.problem)
        if not isinstance(pb, MinimizeProblem):
            raise UsageError("verify needs a 'minimize' problem file")
        obj, box, eps, verify = pb.objective, pb.input_set, pb.epsilon, pb.verify
    else:
        obj, box = _flag_objective(cfg)
        eps, verify = 0.01, False
    bnb_cfg = cfg.bnb(eps, verify)
    cert = _certificate(obj, box, cfg.lipschitz_method)
    res = minimize(obj, box, cert, bnb_cfg, keep_partitions=box.dim == 2)
    rec = _record("bnb", result=res.to_dict(), lipschitz=cert.to_dict())
    out = Outcome(res.status.value, STATUS_EXIT[res.status], [rec],
                  {"BLB": res.blb, "BUB": res.bub, "witness": res.witness.tolist(),
                   "lipschitz": cert.bound})
    if cfg.svg is not None:
        if box.dim != 2:
            raise UsageError("partition plots need a 2-D input box")
        out.svg = render_svg(partitions=[n.rect for n in res.partitions or []],
                             trajectories=res.witness[None], title="partitions")
    return out


def _trajectory_csv(traj: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n = traj.shape[-1]
    w.writerow(["sample", "step"] + [f"x{i}" for i in range(n)])
    for j in range(traj.shape[0]):
        for t in range(traj.shape[1]):
            w.writerow([j, t] + [repr(float(v)) for v in traj[j, t]])
    return buf.getvalue()


def _reach_closed(cfg: RunConfig, pb: ClosedLoopProblem) -> Outcome:
    samples = cfg.samples if cfg.samples is not None else pb.samples
    seed = cfg.seed if cfg.seed is not None else pb.seed
    if not cfg.identity_rotation and samples < pb.dynamics.state_dim + 1:
        raise UsageError(f"PCA needs at least {pb.dynamics.state_dim + 1} samples")
    if max(cfg.axes) >= pb.dynamics.state_dim:
        raise UsageError(f"--axes out of range for a {pb.dynamics.state_dim}-D state")
    res = reach(pb.dynamics, pb.network, pb.initial_set, cfg.bnb(pb.epsilon), p=samples, seed=seed,
                lipschitz_method=cfg.lipschitz_method, identity_rotation=cfg.identity_rotation,
                threads=cfg.threads)
    records = [_record("set", step=t, **s.to_dict()) for t, s in enumerate(res.sets)]
    statuses = []
    for step in res.solves:
        for d in step:
            records.append(_record("solve", **d.to_dict()))
            statuses.append(d.result.status)
    worst = BnbStatus.NODE_CAP if BnbStatus.NODE_CAP in statuses else BnbStatus.CONVERGED
    summary = {
        "name": pb.name,
        "steps": len(res.sets) - 1,
        "num_solves": res.num_solves,
        "total_branches": res.total_branches,
        "flagged": [list(f) for f in res.flags],
        "final_volume": res.sets[-1].volume,
    }
    if pb.goal is not None or pb.avoid:
        summary["goal_avoid"] = check_goal_avoid(res, pb.goal, pb.avoid)
    out = Outcome(worst.value, STATUS_EXIT[worst], records, summary, csv=_trajectory_csv(res.trajectories))
    if cfg.svg is not None:
        out.svg = render_svg(res.sets, res.trajectories, cfg.axes, title=pb.name)
    return out


def _reach_open(cfg: RunConfig, pb: OpenLoopProblem) -> Outcome:
    dirs = pb.direction_matrix()
    poly = output_polytope(pb.network, pb.input_set, dirs, cfg.bnb(pb.epsilon), cfg.lipschitz_method)
    records = [
        _record("facet", direction=c.tolist(), offset=float(b), bnb=r.to_dict())
        for c, b, r in zip(poly.directions, poly.offsets, poly.results)
    ]
    statuses = [r.status for r in poly.results]
    worst = BnbStatus.NODE_CAP if BnbStatus.NODE_CAP in statuses else BnbStatus.CONVERGED
    samples = cfg.samples if cfg.samples is not None else pb.samples
    seed = cfg.seed if cfg.seed is not None else pb.seed
    rng = np.random.default_rng(seed)
    pts = rng.uniform(pb.input_set.lower, pb.input_set.upper, size=(samples, pb.input_set.dim))
    outputs = forward(pb.network, pts)
    summary = {
        "name": pb.name,
        "num_solves": len(poly.results),
        "total_branches": sum(r.stats.branches for r in poly.results),
        "samples_inside": bool(poly.contains(outputs, 1e-9).all()),
    }
    out = Outcome(worst.value, STATUS_EXIT[worst], records, summary)
    if cfg.svg is not None:
        if pb.network.output_dim != 2:
            raise UsageError("polytope plots need a 2-D output")
        out.svg = render_svg(polygons=[polytope_vertices(poly.directions, poly.offsets)],
                             trajectories=outputs, title=pb.name, labels=["z0", "z1"])
    return out


def cmd_reach(cfg: RunConfig) -> Outcome:
    pb = load_problem(cfg.problem)
    if isinstance(pb, ClosedLoopProblem):
        return _reach_closed(cfg, pb)
    if isinstance(pb, OpenLoopProblem):
        return _reach_open(cfg, pb)
    raise UsageError("reach needs a 'closed_loop' or 'open_loop' problem file")


def cmd_bench(cfg: RunConfig) -> Outcome:
    spec = BENCHMARKS[cfg.bench_name]()
    ctx, outcomes = run_benchmark(spec, epsilon=cfg.epsilon, refine_splits=cfg.kv, branch_batch=cfg.kb,
                                  lipschitz_method=cfg.lipschitz_method, threads=cfg.threads)
    records = [
        _record("property", name=k, passed=v["passed"], expectation=v["expectation"],
                description=v["description"])
        for k, v in outcomes.items()
    ]
    failed = [k for k, v in outcomes.items() if not v["passed"] and not v["expectation"]]
    for k, v in outcomes.items():
        if not v["passed"] and v["expectation"]:
            log.warning("expectation %s not met: %s", k, v["description"])
    status = "PropertiesFailed" if failed else "PropertiesPassed"
    summary = {"name": spec.name, "epsilon": ctx.cfg.epsilon, "properties": outcomes, "failed": failed}
    return Outcome(status, EXIT_PROPERTY_FAILED if failed else EXIT_OK, records, summary)


COMMANDS = {"lipschitz": cmd_lipschitz, "verify": cmd_verify, "reach": cmd_reach, "bench": cmd_bench}


def _write(cfg: RunConfig, out: Outcome) -> dict:
    summary = {
        "schema_version": SCHEMA_VERSION,
        "command": cfg.command,
        "status": out.status,
        "exit_code": out.exit_code,
        "config": cfg.to_dict(),
        **out.summary,
    }
    for rec in out.records:
        jsonschema.validate(rec, RECORD_SCHEMA)
    jsonschema.validate(summary, SUMMARY_SCHEMA)
    if cfg.out is not None:
        cfg.out.mkdir(parents=True, exist_ok=True)
        with open(cfg.out / "records.jsonl", "w") as fh:
            for rec in out.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        (cfg.out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
        if out.csv is not None:
            (cfg.out / "trajectories.csv").write_text(out.csv)
    else:
        print(json.dumps(summary, indent=1, sort_keys=True))
    if cfg.svg is not None and out.svg is not None:
        cfg.svg.parent.mkdir(parents=True, exist_ok=True)
        cfg.svg.write_text(out.svg)
    return summary


def run(argv=None) -> int:
    """Parse ``argv``, execute the subcommand and return the exit status."""
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        cfg = parse_config(argv)
        logging.basicConfig(level=logging.INFO if cfg.extra.get("verbose") else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        outcome = COMMANDS[cfg.command](cfg)
    except (UsageError, ProblemError, NetworkError, FileNotFoundError) as exc:
        print(f"lipbnb: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _write(cfg, outcome)
    return outcome.exit_code


def main() -> None:
    raise SystemExit(run())


if __name__ == "__main__":
    main()
