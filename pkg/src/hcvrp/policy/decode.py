"""Solution construction with the policy network.

``decode`` runs many instances of identical shape in lockstep on tensors; it
mirrors the transition and mask rules of :mod:`hcvrp.env` so the resulting
action sequences can be replayed there. The per-state helpers
(``vehicle_distribution``, ``node_distribution``) work on a single
:class:`hcvrp.env.State` and are what the tests probe.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .. import env
from ..errors import ConfigurationError, ContractViolation
from ..instances import MIN_MAX, Instance
from .model import HCVRPPolicy

GREEDY = "greedy"
SAMPLE = "sample"


@dataclass
class Batch:
    coords: torch.Tensor  # (B, n+1, 2)
    demands: torch.Tensor  # (B, n+1)
    capacities: torch.Tensor  # (m,)
    speeds: torch.Tensor  # (m,)
    objective: str

    @property
    def size(self) -> int:
        return self.coords.size(0)

    @property
    def n(self) -> int:
        return self.coords.size(1) - 1

    @property
    def m(self) -> int:
        return self.capacities.numel()

    @classmethod
    def from_arrays(cls, coords, demands, capacities, speeds, objective,
                    dtype=torch.float32) -> "Batch":
        return cls(torch.as_tensor(np.asarray(coords), dtype=dtype),
                   torch.as_tensor(np.asarray(demands), dtype=dtype),
                   torch.as_tensor(np.asarray(capacities, dtype=np.float64), dtype=dtype),
                   torch.as_tensor(np.asarray(speeds, dtype=np.float64), dtype=dtype),
                   objective)

    @classmethod
    def from_instances(cls, instances: Sequence[Instance], dtype=torch.float32) -> "Batch":
        first = instances[0]
        for inst in instances[1:]:
            if (inst.n, inst.fleet, inst.objective) != (first.n, first.fleet, first.objective):
                raise ConfigurationError("instances in a batch must share n, fleet and objective")
        return cls.from_arrays(np.stack([i.coords for i in instances]),
                               np.stack([i.demands for i in instances]),
                               first.fleet.capacities, first.fleet.speeds, first.objective, dtype)

    def features(self) -> torch.Tensor:
        """Locations plus the demand divided by every vehicle's capacity: (B, n+1, 2+m)."""
        return torch.cat([self.coords, self.demands.unsqueeze(-1) / self.capacities], dim=-1)


def enhance_features(instance: Instance) -> np.ndarray:
    d = instance.demands.astype(np.float64)[:, None] / instance.capacities[None, :]
    return np.concatenate([instance.coords, d], axis=1)


@dataclass
class RolloutResult:
    cost: torch.Tensor  # (B,)
    log_prob: torch.Tensor  # (B,)
    times: torch.Tensor  # (B, m) per-vehicle time including the return leg
    vehicles: torch.Tensor  # (T, B)
    nodes: torch.Tensor  # (T, B)
    active: torch.Tensor  # (T, B) false once the instance was finished

    def actions(self, b: int) -> list[env.Action]:
        steps = int(self.active[:, b].sum())
        return [env.Action(int(self.vehicles[t, b]), int(self.nodes[t, b])) for t in range(steps)]


def _pick(log_p: torch.Tensor, strategy: str, u: torch.Tensor | None) -> torch.Tensor:
    if strategy == GREEDY:
        return log_p.argmax(dim=-1)  # first maximum wins ties
    # inverse-CDF draw, so each row's choice depends only on its own uniform
    p = log_p.detach().double().exp()
    cdf = p.cumsum(-1)
    idx = (cdf <= (u.double() * cdf[:, -1]).unsqueeze(-1)).sum(-1)
    last = p.size(-1) - 1 - (p > 0).flip(-1).long().argmax(-1)
    return torch.minimum(idx, last)


def node_mask(demands: torch.Tensor, load: torch.Tensor, position: torch.Tensor) -> torch.Tensor:
    """Feasible nodes (B, n+1) for vehicles with the given load and position."""
    customers = (demands[:, 1:] > 0) & (demands[:, 1:] <= load.unsqueeze(-1) + env.TOL)
    depot = (position != 0) | ~customers.any(-1)
    return torch.cat([depot.unsqueeze(-1), customers], dim=-1)


def decode(model: HCVRPPolicy, batch: Batch, strategy: str = GREEDY,
           rng: np.random.Generator | None = None,
           embeddings: tuple[torch.Tensor, torch.Tensor] | None = None,
           forced: Sequence[tuple[Sequence[int], Sequence[int]]] | None = None,
           max_steps: int | None = None) -> RolloutResult:
    """Construct complete solutions for every instance in ``batch``.

    Sampling consumes ``rng.random((B, 2n+2, 2))`` up front (more blocks only
    if a rollout runs longer), so row ``b`` sees the same uniforms whatever
    the batch size; that keeps best-of-N nested in N for a fixed seed.
    ``forced`` replays given (vehicles, nodes) per step instead of choosing.
    """
    if strategy not in (GREEDY, SAMPLE):
        raise ConfigurationError(f"unknown decode strategy {strategy!r}")
    if strategy == SAMPLE and rng is None and forced is None:
        raise ConfigurationError("sampling needs an rng")
    if batch.m != model.m:
        raise ConfigurationError(f"policy was built for {model.m} vehicles, batch has {batch.m}")
    B, n, m = batch.size, batch.n, batch.m
    max_steps = max_steps or 50 * (n + m)
    if embeddings is None:
        embeddings = model.encode(batch.features())
    h, graph = embeddings
    fixed = model.node_decoder.precompute(h)
    dtype = h.dtype
    coords = batch.coords.to(dtype)
    caps, speeds = batch.capacities.to(dtype), batch.speeds.to(dtype)
    dist = torch.cdist(coords, coords)

    rows = torch.arange(B)
    position = torch.zeros(B, m, dtype=torch.long)
    load = caps.expand(B, m).clone()
    times = torch.zeros(B, m, dtype=dtype)
    demands = batch.demands.to(dtype).clone()
    route_max = h[:, :1, :].expand(B, m, h.size(-1))
    log_prob = torch.zeros(B, dtype=dtype)
    done = ~(demands[:, 1:] > 0).any(-1)

    block = 2 * n + 2
    uniforms = None
    picked_v, picked_n, actives = [], [], []
    t = 0
    while not bool(done.all()):
        if t >= max_steps:
            raise ContractViolation(f"decoding did not finish within {max_steps} steps")
        if strategy == SAMPLE and forced is None and t % block == 0:
            uniforms = torch.from_numpy(rng.random((B, block, 2)))
        active = ~done
        u = uniforms[:, t % block] if uniforms is not None else None

        locations = coords.gather(1, position.unsqueeze(-1).expand(B, m, 2))
        veh_logp = torch.log_softmax(model.vehicle_decoder(locations, times, route_max), dim=-1)
        if forced is not None:
            veh = torch.as_tensor(forced[t][0], dtype=torch.long) if t < len(forced) else \
                torch.zeros(B, dtype=torch.long)
        else:
            veh = _pick(veh_logp, strategy, u[:, 0] if u is not None else None)

        sel_pos = position[rows, veh]
        sel_load = load[rows, veh]
        mask = node_mask(demands, sel_load, sel_pos)
        last = model.node_decoder.first_node.expand(B, -1) if t == 0 else h[rows, sel_pos]
        compat = model.node_decoder(graph, last, sel_load / caps[veh], fixed, mask)
        node_logp = torch.log_softmax(compat.masked_fill(~mask, float("-inf")), dim=-1)
        if forced is not None:
            node = torch.as_tensor(forced[t][1], dtype=torch.long) if t < len(forced) else \
                torch.zeros(B, dtype=torch.long)
            if not bool(mask[rows, node][active].all()):
                raise ContractViolation(f"forced action at step {t} is infeasible")
        else:
            node = _pick(node_logp, strategy, u[:, 1] if u is not None else None)

        step_logp = veh_logp[rows, veh] + node_logp[rows, node]
        log_prob = log_prob + torch.where(active, step_logp, torch.zeros_like(step_logp))

        moved = F.one_hot(veh, m).bool() & active.unsqueeze(-1)
        dt = dist[rows, sel_pos, node] / speeds[veh]
        times = times + moved * dt.unsqueeze(-1)
        new_load = torch.where(node == 0, caps[veh], sel_load - demands[rows, node])
        load = torch.where(moved, new_load.unsqueeze(-1), load)
        position = torch.where(moved, node.unsqueeze(-1), position)
        served = F.one_hot(node, n + 1).bool() & active.unsqueeze(-1)
        demands = demands.masked_fill(served, 0.0)
        visited = h[rows, node].unsqueeze(1)
        route_max = torch.where(moved.unsqueeze(-1), torch.maximum(route_max, visited), route_max)

        picked_v.append(veh)
        picked_n.append(node)
        actives.append(active)
        done = ~(demands[:, 1:] > 0).any(-1)
        t += 1

    back = dist[rows.unsqueeze(-1), position, 0] / speeds
    final = times + back
    cost = final.max(-1).values if batch.objective == MIN_MAX else final.sum(-1)
    empty = torch.zeros(0, B, dtype=torch.long)
    return RolloutResult(cost, log_prob, final,
                         torch.stack(picked_v) if picked_v else empty,
                         torch.stack(picked_n) if picked_n else empty,
                         torch.stack(actives) if actives else empty.bool())


# -- single-instance API ----------------------------------------------------

@dataclass
class Embeddings:
    nodes: torch.Tensor  # (n+1, dim)
    graph: torch.Tensor  # (dim,)


def _dtype(model: HCVRPPolicy) -> torch.dtype:
    return next(model.parameters()).dtype


def encode(instance: Instance, model: HCVRPPolicy) -> Embeddings:
    """Node and graph embeddings under the model's current train/eval mode."""
    feats = torch.as_tensor(enhance_features(instance), dtype=_dtype(model)).unsqueeze(0)
    h, graph = model.encode(feats)
    return Embeddings(h[0], graph[0])


def vehicle_distribution(state: env.State, emb: Embeddings, model: HCVRPPolicy,
                         instance: Instance) -> torch.Tensor:
    dtype = emb.nodes.dtype
    coords = torch.tensor(instance.coords, dtype=dtype)
    positions = [v.position for v in state.vehicles]
    times = torch.tensor([v.time for v in state.vehicles], dtype=dtype)
    # max over the embeddings of every node on the (padded) partial route
    route_max = torch.stack([emb.nodes[list(v.route)].max(dim=0).values for v in state.vehicles])
    logits = model.vehicle_decoder(coords[positions].unsqueeze(0), times.unsqueeze(0),
                                   route_max.unsqueeze(0))
    return torch.softmax(logits, dim=-1)[0]


def node_logits(state: env.State, vehicle: int, emb: Embeddings, model: HCVRPPolicy,
                instance: Instance) -> torch.Tensor:
    """Clipped compatibilities before the softmax mask, shape (n+1,)."""
    veh = state.vehicles[vehicle]
    h = emb.nodes.unsqueeze(0)
    fixed = model.node_decoder.precompute(h)
    last = model.node_decoder.first_node if state.step == 0 else emb.nodes[veh.position]
    load = torch.tensor([veh.load / instance.fleet.capacities[vehicle]], dtype=h.dtype)
    mask = torch.as_tensor(env.feasibility_mask(state, instance, vehicle)).unsqueeze(0)
    return model.node_decoder(emb.graph.unsqueeze(0), last.unsqueeze(0), load, fixed, mask)[0]


def node_distribution(state: env.State, vehicle: int, emb: Embeddings, model: HCVRPPolicy,
                      instance: Instance) -> torch.Tensor:
    u = node_logits(state, vehicle, emb, model, instance)
    mask = torch.as_tensor(env.feasibility_mask(state, instance, vehicle))
    return torch.softmax(u.masked_fill(~mask, float("-inf")), dim=-1)


def _solution_from(instance: Instance, actions: Sequence[env.Action]) -> env.Solution:
    state, _ = env.replay(instance, actions)
    return env.finalize(state, instance)


def rollout(instance: Instance, model: HCVRPPolicy, strategy: str = GREEDY,
            rng: np.random.Generator | None = None) -> tuple[env.Solution, float]:
    """Decode one instance; returns the solution and the summed log-probability."""
    batch = Batch.from_instances([instance], dtype=_dtype(model))
    with torch.no_grad():
        res = decode(model, batch, strategy, rng)
    return _solution_from(instance, res.actions(0)), float(res.log_prob[0])


def sample_costs(instance: Instance, model: HCVRPPolicy, samples: int,
                 rng: np.random.Generator, chunk: int = 1024) -> RolloutResult:
    """Draw ``samples`` sampled rollouts of one instance, encoding it only once."""
    if samples < 1:
        raise ConfigurationError(f"sample count must be >= 1, got {samples}")
    dtype = _dtype(model)
    batch = Batch.from_instances([instance], dtype=dtype)
    # draw each chunk's uniforms from its own child stream so chunking does not
    # change which sample sees which numbers
    seeds = rng.spawn(-(-samples // chunk))
    with torch.no_grad():
        h, graph = model.encode(batch.features())
        results = []
        for i, start in enumerate(range(0, samples, chunk)):
            size = min(chunk, samples - start)
            sub = Batch(batch.coords.expand(size, -1, -1), batch.demands.expand(size, -1),
                        batch.capacities, batch.speeds, batch.objective)
            emb = (h.expand(size, -1, -1), graph.expand(size, -1))
            results.append(decode(model, sub, SAMPLE, seeds[i], embeddings=emb))
    return _concat(results)


def _concat(results: list[RolloutResult]) -> RolloutResult:
    if len(results) == 1:
        return results[0]
    steps = max(r.vehicles.size(0) for r in results)

    def pad(x, value):
        return F.pad(x, (0, 0, 0, steps - x.size(0)), value=value)

    return RolloutResult(torch.cat([r.cost for r in results]),
                         torch.cat([r.log_prob for r in results]),
                         torch.cat([r.times for r in results]),
                         torch.cat([pad(r.vehicles, 0) for r in results], dim=1),
                         torch.cat([pad(r.nodes, 0) for r in results], dim=1),
                         torch.cat([pad(r.active, False) for r in results], dim=1))


def sample_best(instance: Instance, model: HCVRPPolicy, samples: int,
                rng: np.random.Generator) -> env.Solution:
    """Best of ``samples`` sampled solutions (lowest objective, first on ties)."""
    res = sample_costs(instance, model, samples, rng)
    best = int(torch.argmin(res.cost))
    return _solution_from(instance, res.actions(best))
