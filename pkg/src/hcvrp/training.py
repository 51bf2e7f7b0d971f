"""REINFORCE with a greedy-rollout baseline.

The baseline is a frozen copy of the policy decoded greedily. After every
iteration a one-sided paired t-test on a held-out evaluation set decides
whether the current policy replaces it.

All randomness is derived from ``(seed, purpose, counter)`` seed sequences,
so a run resumed from an iteration-boundary checkpoint replays exactly the
draws of an uninterrupted run.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from scipy import stats

from .errors import ConfigurationError, ContractViolation
from .instances import FleetSpec, normalize_objective, resolve_fleet, sample_arrays
from .policy.checkpoint import CHECKPOINT_VERSION, atomic_save, read_checkpoint
from .policy.decode import GREEDY, SAMPLE, Batch, decode
from .policy.model import ArchConfig, HCVRPPolicy

log = logging.getLogger(__name__)

# seed-sequence purposes
_INIT, _DATA, _SAMPLING, _EVAL = 0, 1, 2, 3


@dataclass(frozen=True)
class InstanceSpec:
    n: int = 10
    fleet: str = "V3"
    objective: str = "min-max"
    capacities: tuple[int, ...] | None = None
    speeds: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "objective", normalize_objective(self.objective))
        if self.capacities is not None:
            object.__setattr__(self, "capacities", tuple(self.capacities))
        if self.speeds is not None:
            object.__setattr__(self, "speeds", tuple(self.speeds))
        if self.n < 1:
            raise ConfigurationError("n must be positive")
        self.fleet_spec()

    def fleet_spec(self) -> FleetSpec:
        if self.capacities is not None:
            if self.speeds is None:
                raise ConfigurationError("explicit capacities need explicit speeds")
            return FleetSpec(self.capacities, self.speeds)
        return resolve_fleet(self.fleet, self.objective)

    def batch(self, rng: np.random.Generator, size: int) -> Batch:
        coords, demands = sample_arrays(rng, size, self.n)
        fleet = self.fleet_spec()
        return Batch.from_arrays(coords, demands, fleet.capacities, fleet.speeds, self.objective)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 50
    instances_per_iteration: int = 1_280_000
    batches_per_iteration: int = 2500
    lr0: float = 1e-4
    lr_decay: float = 0.995
    grad_clip_norm: float = 3.0
    alpha: float = 0.05
    ttest_eval_size: int = 1000
    seed: int = 1234

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")
        if min(self.instances_per_iteration, self.batches_per_iteration, self.ttest_eval_size) <= 0:
            raise ConfigurationError("sizes must be positive")
        if self.instances_per_iteration % self.batches_per_iteration:
            raise ConfigurationError("instances_per_iteration must split evenly into batches")
        if not (self.lr0 > 0 and self.lr_decay > 0 and self.grad_clip_norm > 0):
            raise ConfigurationError("lr0, lr_decay and grad_clip_norm must be positive")
        if not 0 < self.alpha < 1:
            raise ConfigurationError("alpha must lie in (0, 1)")

    @property
    def batch_size(self) -> int:
        return self.instances_per_iteration // self.batches_per_iteration

    def lr(self, iteration: int) -> float:
        return self.lr0 * self.lr_decay ** iteration


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    instances: InstanceSpec = field(default_factory=InstanceSpec)

    def to_dict(self) -> dict:
        return {"train": asdict(self.train), "arch": asdict(self.arch),
                "instances": asdict(self.instances)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"train", "arch", "instances"}
        if unknown:
            raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
        try:
            return cls(TrainConfig(**d.get("train", {})), ArchConfig.from_dict(d.get("arch", {})),
                       InstanceSpec(**d.get("instances", {})))
        except TypeError as exc:
            raise ConfigurationError(f"bad config: {exc}") from None

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, **sections) -> "RunConfig":
        out = self
        for name, changes in sections.items():
            if changes:
                out = replace(out, **{name: replace(getattr(out, name), **changes)})
        return out


PRESETS = {
    # laptop-sized run exercising every code path
    "desk": RunConfig(
        TrainConfig(iterations=10, instances_per_iteration=12_800, batches_per_iteration=100),
        ArchConfig(dim=64, n_layers=2),
        InstanceSpec(n=10, fleet="V3"),
    ),
    "full-v3-c40": RunConfig(TrainConfig(), ArchConfig(), InstanceSpec(n=40, fleet="V3")),
}


def preset(name: str, objective: str | None = None, seed: int | None = None) -> RunConfig:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[name]
    return cfg.with_overrides(
        train={"seed": seed} if seed is not None else None,
        instances={"objective": objective} if objective is not None else None)


def _rng(seed: int, purpose: int, counter: int) -> np.random.Generator:
    return np.random.default_rng([seed, purpose, counter])


@dataclass
class TrainerState:
    config: RunConfig
    policy: HCVRPPolicy
    baseline: HCVRPPolicy
    optimizer: torch.optim.Optimizer
    iteration: int = 0
    eval_round: int = 0
    metrics: list[dict] = field(default_factory=list)
    _eval_batch: Batch | None = field(default=None, repr=False)

    @classmethod
    def create(cls, config: RunConfig) -> "TrainerState":
        m = config.instances.fleet_spec().m
        policy = HCVRPPolicy(config.arch, m)
        gen = torch.Generator().manual_seed(int(_rng(config.train.seed, _INIT, 0).integers(2**62)))
        policy.reset_parameters(gen)
        baseline = copy.deepcopy(policy).eval()
        optimizer = torch.optim.Adam(policy.parameters(), lr=config.train.lr0)
        return cls(config, policy, baseline, optimizer)

    def eval_batch(self) -> Batch:
        if self._eval_batch is None:
            rng = _rng(self.config.train.seed, _EVAL, self.eval_round)
            self._eval_batch = self.config.instances.batch(rng, self.config.train.ttest_eval_size)
        return self._eval_batch

    # -- persistence --------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "arch": self.config.arch.to_dict(),
            "m": self.policy.m,
            "config": self.config.to_dict(),
            "config_digest": self.config.digest(),
            "policy": self.policy.state_dict(),
            "baseline": self.baseline.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "iteration": self.iteration,
            "eval_round": self.eval_round,
            "metrics": list(self.metrics),
            "metadata": {
                "init": "uniform(-1/sqrt(d), 1/sqrt(d)), d = last axis of each weight",
                "rng": {"seed": self.config.train.seed,
                        "scheme": "numpy default_rng([seed, purpose, counter])",
                        "next_iteration": self.iteration, "eval_round": self.eval_round},
                "instances": {**asdict(self.config.instances),
                              "fleet_spec": asdict(self.config.instances.fleet_spec())},
            },
        }

    def save(self, path: str | Path) -> None:
        atomic_save(self.state_dict(), path)

    @classmethod
    def load(cls, path: str | Path, config: RunConfig | None = None) -> "TrainerState":
        blob = read_checkpoint(path)
        stored = RunConfig.from_dict(blob["config"])
        if config is not None and config.digest() != stored.digest():
            raise ConfigurationError(
                f"{path} was written for config {stored.digest()}, refusing to resume "
                f"with config {config.digest()}")
        trainer = cls.create(stored)
        trainer.policy.load_state_dict(blob["policy"])
        trainer.baseline.load_state_dict(blob["baseline"])
        trainer.optimizer.load_state_dict(blob["optimizer"])
        trainer.iteration = blob["iteration"]
        trainer.eval_round = blob["eval_round"]
        trainer.metrics = list(blob["metrics"])
        return trainer


def _grad_norm(params) -> float:
    grads = [p.grad.detach().double().flatten() for p in params if p.grad is not None]
    return float(torch.linalg.vector_norm(torch.cat(grads))) if grads else 0.0


def clip_gradients(params, max_norm: float) -> tuple[float, float]:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norms before and after. Unlike ``clip_grad_norm_`` the bound
    holds exactly: float32 rounding of the rescaled entries is absorbed by a
    small safety margin and re-checked in double precision.
    """
    norm = _grad_norm(params)
    if not math.isfinite(norm) or norm <= max_norm:
        return norm, norm
    coef = max_norm / norm * (1 - 1e-6)
    for p in params:
        p.grad.mul_(coef)
    after = _grad_norm(params)
    while after > max_norm:  # margin is ~16x the float32 rounding error
        for p in params:
            p.grad.mul_(1 - 1e-6)
        after = _grad_norm(params)
    return norm, after


def reinforce_loss(cost: torch.Tensor, baseline_cost: torch.Tensor,
                   log_prob: torch.Tensor) -> torch.Tensor:
    """Surrogate whose gradient is mean((cost - baseline) * grad log p)."""
    # minimising it ascends the expected reward R = -cost
    return ((cost - baseline_cost).detach() * log_prob).mean()


def train_batch(trainer: TrainerState, batch: Batch, rng: np.random.Generator) -> dict:
    """One policy-gradient step on ``batch``; returns the batch metrics."""
    policy, baseline = trainer.policy, trainer.baseline
    cfg = trainer.config.train
    policy.train()
    result = decode(policy, batch, SAMPLE, rng)
    with torch.no_grad():
        baseline.eval()
        baseline_cost = decode(baseline, batch, GREEDY).cost
    loss = reinforce_loss(result.cost, baseline_cost, result.log_prob)
    if not torch.isfinite(loss.detach()):
        raise ContractViolation(f"non-finite loss {loss.item()} (costs: {result.cost.tolist()[:5]}...)")
    trainer.optimizer.zero_grad()
    loss.backward()
    params = [p for p in policy.parameters() if p.grad is not None]
    norm, clipped = clip_gradients(params, cfg.grad_clip_norm)
    if not math.isfinite(norm):
        raise ContractViolation("non-finite gradient norm")
    trainer.optimizer.step()
    return {
        "mean_cost": float(result.cost.mean()),
        "baseline_cost": float(baseline_cost.mean()),
        "loss": loss.item(),
        "grad_norm": norm,
        "grad_norm_clipped": clipped,
    }


def greedy_costs(model: HCVRPPolicy, batch: Batch, chunk: int = 1024) -> torch.Tensor:
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, batch.size, chunk):
            sl = slice(start, start + chunk)
            sub = Batch(batch.coords[sl], batch.demands[sl], batch.capacities, batch.speeds,
                        batch.objective)
            out.append(decode(model, sub, GREEDY).cost)
    return torch.cat(out)


def one_sided_paired_pvalue(candidate: np.ndarray, reference: np.ndarray) -> float:
    """p-value for H1: mean(candidate - reference) < 0.

    Zero-variance differences: all negative counts as certain improvement,
    anything else as none.
    """
    diff = np.asarray(candidate, dtype=np.float64) - np.asarray(reference, dtype=np.float64)
    # constant differences (up to rounding) leave the t statistic undefined
    if diff.size < 2 or np.ptp(diff) <= 1e-12 * max(1.0, float(np.abs(diff).max())):
        return 0.0 if diff.size and diff.mean() < 0 else 1.0
    return float(stats.ttest_rel(candidate, reference, alternative="less").pvalue)


def baseline_decision(candidate: np.ndarray, reference: np.ndarray,
                      alpha: float) -> tuple[float, bool]:
    """(p-value, replace?) for the candidate policy's costs against the baseline's."""
    p = one_sided_paired_pvalue(candidate, reference)
    return p, p < alpha


def maybe_update_baseline(trainer: TrainerState) -> dict:
    batch = trainer.eval_batch()
    cand = greedy_costs(trainer.policy, batch).double().numpy()
    ref = greedy_costs(trainer.baseline, batch).double().numpy()
    p, replaced = baseline_decision(cand, ref, trainer.config.train.alpha)
    if replaced:
        trainer.baseline = copy.deepcopy(trainer.policy).eval()
        trainer.eval_round += 1
        trainer._eval_batch = None
    return {"p_value": p, "candidate_cost": float(cand.mean()), "baseline_eval_cost": float(ref.mean()),
            "baseline_replaced": bool(replaced)}


def run_iteration(trainer: TrainerState, on_batch: Callable[[dict], None] | None = None) -> dict:
    cfg = trainer.config.train
    it = trainer.iteration
    lr = cfg.lr(it)
    for group in trainer.optimizer.param_groups:
        group["lr"] = lr
    data_rng = _rng(cfg.seed, _DATA, it)
    sample_rng = _rng(cfg.seed, _SAMPLING, it)
    costs = []
    for b in range(cfg.batches_per_iteration):
        batch = trainer.config.instances.batch(data_rng, cfg.batch_size)
        record = {"iteration": it, "batch": b, "lr": lr, **train_batch(trainer, batch, sample_rng)}
        trainer.metrics.append(record)
        costs.append(record["mean_cost"])
        if on_batch:
            on_batch(record)
    summary = {"iteration": it, "lr": lr, "mean_cost": float(np.mean(costs)),
               **maybe_update_baseline(trainer)}
    trainer.metrics.append(summary)
    trainer.iteration += 1
    return summary


def train(config: RunConfig, out_dir: str | Path | None = None, resume: str | Path | None = None,
          stop_after: int | None = None,
          on_iteration: Callable[[dict], None] | None = None) -> TrainerState:
    """Run (or continue) training; checkpoints and metrics go to ``out_dir``.

    ``stop_after`` ends the call after that many iterations so a later call
    with ``resume`` can finish the run.
    """
    trainer = TrainerState.load(resume, config) if resume else TrainerState.create(config)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        if trainer.iteration == 0 and not resume:
            trainer.save(out / "checkpoint-000.pt")
            trainer.save(out / "latest.pt")
    done = 0
    while trainer.iteration < config.train.iterations:
        if stop_after is not None and done >= stop_after:
            break
        first = len(trainer.metrics)
        summary = run_iteration(trainer)
        done += 1
        log.info("iteration %d: cost %.4f p=%.3g replaced=%s", summary["iteration"],
                 summary["mean_cost"], summary["p_value"], summary["baseline_replaced"])
        if out:
            trainer.save(out / f"checkpoint-{trainer.iteration:03d}.pt")
            trainer.save(out / "latest.pt")
            with open(out / "metrics.jsonl", "a") as fh:
                for record in trainer.metrics[first:]:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")
        if on_iteration:
            on_iteration(summary)
    return trainer
