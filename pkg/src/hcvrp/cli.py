"""Command-line front end: ``hcvrp generate|train|solve|eval``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import oracle
from .env import Solution
from .errors import ConfigurationError, DataError, HCVRPError
from .instances import (Instance, generate_dataset, load_instances, normalize_objective,
                        parse_cvrplib, save_instances)
from .report import RunReport, build_report, plot_report, plot_routes

DATA_DIR_ENV = "HCVRP_DATA_DIR"
EXIT_USAGE, EXIT_DATA, EXIT_CONTRACT = 2, 3, 4

log = logging.getLogger("hcvrp")


def data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def non_negative_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {value}")
    return value


# -- methods ------------------------------------------------------------------

@dataclass(frozen=True)
class Method:
    """A way of solving instances: an oracle solver or a checkpoint plus decode strategy."""

    kind: str  # exact | heuristic | random | greedy | sample
    checkpoint: str | None = None
    samples: int = 1
    exact_max_customers: int = oracle.OracleBudget().max_customers

    @property
    def label(self) -> str:
        if self.kind == "sample":
            return f"sample{self.samples}:{Path(self.checkpoint).stem}"
        if self.kind == "greedy":
            return f"greedy:{Path(self.checkpoint).stem}"
        return self.kind


def parse_method(text: str, samples: int, exact_cap: int) -> Method:
    kind, _, ckpt = text.partition(":")
    kind = kind.strip().lower()
    if kind in ("exact", "heuristic", "random"):
        if ckpt:
            raise ConfigurationError(f"method {kind!r} takes no checkpoint")
        return Method(kind, exact_max_customers=exact_cap)
    if kind.startswith("sample") and kind[6:].isdigit():
        samples, kind = int(kind[6:]), "sample"
    if kind in ("greedy", "sample"):
        if not ckpt:
            raise ConfigurationError(f"method {kind!r} needs a checkpoint, e.g. {kind}:run/latest.pt")
        if samples < 1:
            raise ConfigurationError("sample count must be >= 1")
        return Method(kind, ckpt, samples if kind == "sample" else 1)
    raise ConfigurationError(f"unknown method {text!r}; use exact, heuristic, random, "
                             "greedy:CKPT or sample[N]:CKPT")


_MODELS: dict[str, object] = {}


def _model(path: str, m: int):
    from .policy.checkpoint import load_policy
    key = f"{path}:{m}"
    if key not in _MODELS:
        _MODELS[key] = load_policy(path, expected_m=m)[0]
    return _MODELS[key]


def solve_one(method: Method, instance: Instance, index: int, seed: int) -> tuple[Solution, float]:
    """Solve one instance; randomness depends only on (seed, index)."""
    rng = np.random.default_rng([seed, index])
    start = time.perf_counter()
    if method.kind == "exact":
        sol = oracle.exact_solve(instance, oracle.OracleBudget(max_customers=method.exact_max_customers))
    elif method.kind == "heuristic":
        sol = oracle.greedy_heuristic(instance)
    elif method.kind == "random":
        sol = oracle.random_rollout(instance, rng)
    else:
        from .policy import GREEDY, rollout, sample_best
        model = _model(method.checkpoint, instance.m)
        if method.kind == "greedy":
            sol, _ = rollout(instance, model, GREEDY)
        else:
            sol = sample_best(instance, model, method.samples, rng)
    return sol, time.perf_counter() - start


def _solve_star(args):
    return solve_one(*args)


def _worker_init():
    import torch
    torch.set_num_threads(1)


def run_method(method: Method, instances: Sequence[Instance], seed: int,
               jobs: int = 1) -> list[tuple[Solution, float]]:
    tasks = [(method, inst, i, seed) for i, inst in enumerate(instances)]
    if jobs <= 1 or len(tasks) <= 1:
        return [solve_one(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init) as pool:
        # map keeps instance order whatever the completion order
        return list(pool.map(_solve_star, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))


# -- instance loading ---------------------------------------------------------

def resolve_input(path: str) -> Path:
    p = Path(path)
    if not p.exists() and not p.is_absolute() and (data_dir() / p).exists():
        p = data_dir() / p
    if not p.exists():
        raise DataError(f"instance file {path} not found")
    return p


def read_instances(path: str, fleet: str | None, objective: str | None) -> list[Instance]:
    p = resolve_input(path)
    if p.suffix.lower() in (".vrp", ".txt"):
        if not fleet or not objective:
            raise ConfigurationError("CVRPLib input needs --fleet and --objective")
        return [parse_cvrplib(p.read_text(), fleet.upper(), objective)]
    instances = load_instances(p)
    if not instances:
        raise DataError(f"{p} holds no instances")
    return instances


# -- commands -----------------------------------------------------------------

def cmd_generate(args) -> int:
    objective = normalize_objective(args.objective)
    fleet = args.fleet.upper()
    out = Path(args.out) if args.out else \
        data_dir() / f"{fleet.lower()}-c{args.n}-{objective}-s{args.seed}-x{args.count}.jsonl"
    if out.exists() and not args.force:
        raise ConfigurationError(f"{out} exists; pass --force to overwrite")
    instances = generate_dataset(args.n, fleet, objective, args.count, args.seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_instances(out, instances)
    print(f"wrote {len(instances)} instances to {out}")
    return 0


def _train_config(args):
    from .training import RunConfig, preset
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigurationError(f"config file {path} not found")
        try:
            cfg = RunConfig.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    elif args.preset:
        cfg = preset(args.preset)
    else:
        raise ConfigurationError("train needs --preset or --config")
    instances = {k: v for k, v in (("objective", args.objective), ("n", args.n),
                                   ("fleet", args.fleet and args.fleet.upper())) if v is not None}
    train = {k: v for k, v in (("seed", args.seed), ("iterations", args.iterations)) if v is not None}
    return cfg.with_overrides(train=train, instances=instances)


def cmd_train(args) -> int:
    from .training import TrainerState, train
    if args.resume and not (args.config or args.preset):
        cfg = TrainerState.load(args.resume).config
    else:
        cfg = _train_config(args)
    out = Path(args.out) if args.out else Path("runs") / cfg.digest()
    print(f"config {cfg.digest()} -> {out}")

    def report(summary):
        print(f"iteration {summary['iteration']:>3}  lr {summary['lr']:.3e}  "
              f"cost {summary['mean_cost']:.4f}  eval {summary['candidate_cost']:.4f} "
              f"vs {summary['baseline_eval_cost']:.4f}  p {summary['p_value']:.3g}  "
              f"{'replaced' if summary['baseline_replaced'] else 'kept'}", flush=True)

    trainer = train(cfg, out, resume=args.resume, on_iteration=report)
    print(f"done: {trainer.iteration} iterations, checkpoint {out / 'latest.pt'}")
    return 0


def _provenance(methods: Sequence[Method], args, instances_path: str) -> dict:
    from .policy.checkpoint import file_digest, read_checkpoint
    checkpoints = {}
    for m in methods:
        if m.checkpoint and m.checkpoint not in checkpoints:
            blob = read_checkpoint(m.checkpoint)
            checkpoints[m.checkpoint] = {"digest": file_digest(m.checkpoint),
                                         "config": blob.get("config_digest"),
                                         "iteration": blob.get("iteration")}
    return {"seed": args.seed, "instances": str(instances_path),
            "instances_digest": _digest(resolve_input(instances_path)),
            "checkpoints": checkpoints, "methods": [m.label for m in methods]}


def _digest(path: Path) -> str:
    from .policy.checkpoint import file_digest
    return file_digest(path)


def evaluate(methods: Sequence[Method], instances: Sequence[Instance], seed: int,
             jobs: int = 1) -> tuple[dict[str, list[tuple[Solution, float]]], RunReport]:
    if not methods:
        raise ConfigurationError("give at least one method")
    labels = [m.label for m in methods]
    if len(set(labels)) != len(labels):
        raise ConfigurationError(f"duplicate methods: {labels}")
    solved = {m.label: run_method(m, instances, seed, jobs) for m in methods}
    results = {k: [(s.objective_value, t) for s, t in v] for k, v in solved.items()}
    return solved, build_report(results)


def _emit(report: RunReport, solved, instances, args) -> None:
    print(report.table())
    if not args.out:
        if args.plot:
            raise ConfigurationError("--plot needs --out")
        return
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_jsonl(out / "report.jsonl")
    (out / "table.txt").write_text(report.table() + "\n")
    with open(out / "solutions.jsonl", "w") as fh:
        for label, items in solved.items():
            for i, (sol, secs) in enumerate(items):
                fh.write(json.dumps({"instance": i, "method": label, "time": secs,
                                     **sol.to_dict()}) + "\n")
    if args.plot:
        plot_report(report, out / "objective_vs_time.png")
        for label, items in solved.items():
            safe = label.replace(":", "_").replace("/", "_")
            plot_routes(instances[0], items[0][0], out / f"routes-{safe}-0.png", title=label)
    print(f"report written to {out}")


def cmd_solve(args) -> int:
    if args.solver:
        method = Method(args.solver, exact_max_customers=args.exact_max_customers)
    else:
        if not args.checkpoint:
            raise ConfigurationError("solve needs --checkpoint (or --solver exact|heuristic)")
        method = Method(args.decode, args.checkpoint, args.samples if args.decode == "sample" else 1)
    instances = read_instances(args.instances, args.fleet, args.objective)
    solved, report = evaluate([method], instances, args.seed, args.jobs)
    report.provenance = _provenance([method], args, args.instances)
    _emit(report, solved, instances, args)
    return 0


def cmd_eval(args) -> int:
    if not args.method:
        raise ConfigurationError("eval needs at least one --method")
    methods = [parse_method(t, args.samples, args.exact_max_customers) for t in args.method]
    instances = read_instances(args.instances, args.fleet, args.objective)
    solved, report = evaluate(methods, instances, args.seed, args.jobs)
    report.provenance = _provenance(methods, args, args.instances)
    _emit(report, solved, instances, args)
    return 0


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hcvrp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a seeded random instance set")
    g.add_argument("--n", type=positive_int, required=True, help="customers per instance")
    g.add_argument("--fleet", default="V3", help="fleet preset: V3 or V5")
    g.add_argument("--objective", default="min-max", help="min-max or min-sum")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=positive_int, default=1280)
    g.add_argument("--out", help=f"output file (default: ${DATA_DIR_ENV} or ./data)")
    g.add_argument("--force", action="store_true", help="overwrite an existing file")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a policy")
    t.add_argument("--preset", help="named configuration, e.g. desk")
    t.add_argument("--config", help="JSON file with train/arch/instances sections")
    t.add_argument("--seed", type=int)
    t.add_argument("--objective")
    t.add_argument("--fleet")
    t.add_argument("--n", type=positive_int)
    t.add_argument("--iterations", type=non_negative_int)
    t.add_argument("--out", help="run directory (default: runs/<config digest>)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    def common(p):
        p.add_argument("--instances", required=True, help="JSONL instance file or CVRPLib .vrp")
        p.add_argument("--fleet", help="fleet preset for CVRPLib input")
        p.add_argument("--objective", help="objective for CVRPLib input")
        p.add_argument("--samples", type=positive_int, default=1280)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--jobs", type=positive_int, default=1)
        p.add_argument("--exact-max-customers", type=positive_int,
                       default=oracle.OracleBudget().max_customers)
        p.add_argument("--out", help="directory for report.jsonl, solutions.jsonl and plots")
        p.add_argument("--plot", action="store_true", help="write PNG plots to --out")

    s = sub.add_parser("solve", help="solve an instance file with one method")
    common(s)
    s.add_argument("--checkpoint")
    s.add_argument("--decode", choices=("greedy", "sample"), default="greedy")
    s.add_argument("--solver", choices=("exact", "heuristic"))
    s.set_defaults(func=cmd_solve)

    e = sub.add_parser("eval", help="compare several methods on one instance file")
    common(e)
    e.add_argument("--method", action="append",
                   help="exact | heuristic | random | greedy:CKPT | sample[N]:CKPT (repeatable)")
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except HCVRPError as exc:
        print(f"hcvrp {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"hcvrp {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
