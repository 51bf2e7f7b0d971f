"""Reference solvers for small instances.

``exact_solve`` enumerates the MDP's own action sequences, so it shares the
transition and mask code with the learned policy. Routes are built one vehicle
at a time, which covers every solution while skipping interleavings that
only reorder the same routes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import env
from .errors import BudgetExceeded, ConfigurationError
from .instances import MIN_MAX, Instance, distance_table


@dataclass(frozen=True)
class OracleBudget:
    max_customers: int = 8
    max_vehicles: int = 3
    node_limit: int = 20_000_000

    def __post_init__(self):
        if min(self.max_customers, self.max_vehicles, self.node_limit) <= 0:
            raise ConfigurationError("oracle budget caps must be positive")


class _Search:
    def __init__(self, instance: Instance, budget: OracleBudget, incumbent: float):
        self.inst = instance
        self.budget = budget
        self.dist = distance_table(instance)
        self.speeds = instance.speeds
        self.m = instance.m
        self.minmax = instance.objective == MIN_MAX
        # max speed among vehicles k..m-1
        self.fastest_from = np.maximum.accumulate(self.speeds[::-1])[::-1]
        # cheapest out-and-back time to each node among vehicles k+1..m-1
        self.later_round_trip = np.full((self.m + 1, instance.n + 1), np.inf)
        for k in range(self.m - 1, -1, -1):
            self.later_round_trip[k] = np.minimum(self.later_round_trip[k + 1],
                                                  2 * self.dist[0] / self.speeds[k])
        self.same_as_prev = [k > 0 and instance.fleet.capacities[k] == instance.fleet.capacities[k - 1]
                             and instance.fleet.speeds[k] == instance.fleet.speeds[k - 1]
                             for k in range(self.m)]
        self.best = incumbent
        self.best_actions: list[env.Action] | None = None
        self.nodes = 0
        # (vehicle, position, load, unserved, first customer) -> costs reached so far
        self.seen: dict[tuple, list[tuple[float, float]]] = {}

    def dominated(self, state: env.State, k: int, closed: float, first: list) -> bool:
        veh = state.vehicles[k]
        key = (k, veh.position, veh.load, state.demands, first[k], first[k - 1] if k else None)
        entries = self.seen.setdefault(key, [])
        if self.minmax:
            point = (closed, veh.time)
            if any(c <= point[0] + 1e-12 and t <= point[1] + 1e-12 for c, t in entries):
                return True
            entries[:] = [e for e in entries if not (point[0] <= e[0] and point[1] <= e[1])]
            entries.append(point)
            return False
        total = closed + veh.time
        if entries and entries[0][0] <= total + 1e-12:
            return True
        entries[:] = [(total, 0.0)]
        return False

    def bound(self, state: env.State, k: int, closed: float) -> float:
        veh = state.vehicles[k]
        pos = veh.position
        back = self.dist[pos, 0] / self.speeds[k]
        open_nodes = [j for j in range(1, len(state.demands)) if state.demands[j]]
        if self.minmax:
            lb = max(closed, veh.time + back)
            for j in open_nodes:
                own = veh.time + (self.dist[pos, j] + self.dist[j, 0]) / self.speeds[k]
                lb = max(lb, min(own, self.later_round_trip[k + 1, j]))
            return lb
        if not open_nodes:
            return closed + veh.time + back
        # every open customer keeps one arc in and one arc out; charge each half
        # of its two cheapest admissible neighbours (the depot may be used twice)
        sub = self.dist[np.ix_(open_nodes, open_nodes + [0, 0] + ([pos] if pos else []))].copy()
        np.fill_diagonal(sub, np.inf)
        two = np.partition(sub, 1, axis=1)[:, :2]
        arcs = 0.5 * two.sum()
        if pos:
            arcs += 0.5 * min(self.dist[pos, open_nodes].min(), self.dist[pos, 0])
        return closed + veh.time + max(back, arcs / self.fastest_from[k])

    def run(self, state: env.State, k: int, closed: float, first: list, actions: list):
        self.nodes += 1
        if self.nodes > self.budget.node_limit:
            raise BudgetExceeded(f"exact search exceeded {self.budget.node_limit} nodes")
        if self.bound(state, k, closed) >= self.best - 1e-12:
            return
        if self.dominated(state, k, closed, first):
            return
        if env.is_terminal(state):
            times = env.closing_rewards(state, self.inst)
            veh = state.vehicles[k]
            value = (max(closed, veh.time + times[k]) if self.minmax
                     else closed + veh.time + times[k])
            if value < self.best - 1e-12:
                self.best = value
                self.best_actions = list(actions)
            return

        veh = state.vehicles[k]
        mask = env.feasibility_mask(state, self.inst, k)
        remaining = sum(state.demands)
        candidates = []
        for j in np.flatnonzero(mask):
            j = int(j)
            if j == 0:
                # a refill is pointless at the depot or when the load covers everything left
                if veh.position == 0 or veh.load >= remaining:
                    continue
            elif first[k] is None and self.same_as_prev[k]:
                # identical vehicles are ordered by their first customer
                if first[k - 1] is None or j <= first[k - 1]:
                    continue
            candidates.append(j)
        candidates.sort(key=lambda j: self.dist[veh.position, j])
        for j in candidates:
            nxt, _ = env.step(state, env.Action(k, j), self.inst)
            new_first = first
            if j != 0 and first[k] is None:
                new_first = first.copy()
                new_first[k] = j
            actions.append(env.Action(k, j))
            self.run(nxt, k, closed, new_first, actions)
            actions.pop()

        if k + 1 < self.m:
            t = veh.time + self.dist[veh.position, 0] / self.speeds[k]
            self.run(state, k + 1, max(closed, t) if self.minmax else closed + t, first, actions)


def exact_solve(instance: Instance, budget: OracleBudget | None = None) -> env.Solution:
    """Optimal solution by exhaustive search; only for tiny instances."""
    budget = budget or OracleBudget()
    if instance.n > budget.max_customers or instance.m > budget.max_vehicles:
        raise ConfigurationError(
            f"instance with n={instance.n}, m={instance.m} exceeds the exact-search caps "
            f"({budget.max_customers} customers, {budget.max_vehicles} vehicles)")
    start = greedy_heuristic(instance)
    search = _Search(instance, budget, start.objective_value)
    search.run(env.init_state(instance), 0, 0.0, [None] * instance.m, [])
    if search.best_actions is None:
        return start
    state, _ = env.replay(instance, search.best_actions)
    return env.finalize(state, instance)


def greedy_heuristic(instance: Instance) -> env.Solution:
    """Nearest-feasible-neighbour construction.

    The least-loaded vehicle moves next: smallest accumulated time for
    min-max, smallest time per unit of capacity for min-sum.
    """
    dist = distance_table(instance)
    caps = instance.capacities
    state = env.init_state(instance)
    stuck: set[int] = set()
    while not env.is_terminal(state):
        times = np.array([v.time for v in state.vehicles])
        key = times if instance.objective == MIN_MAX else times / caps
        order = [k for k in np.argsort(key, kind="stable") if k not in stuck]
        k = int(order[0])
        mask = env.feasibility_mask(state, instance, k)
        mask[0] = False
        pos = state.vehicles[k].position
        if mask.any():
            options = np.flatnonzero(mask)
            j = int(options[np.argmin(dist[pos, options])])
        elif pos != 0:
            j = 0
        else:
            # full vehicle at the depot that cannot serve anything left
            stuck.add(k)
            continue
        state, _ = env.step(state, env.Action(k, j), instance)
        stuck.clear()
    return env.finalize(state, instance)


def random_rollout(instance: Instance, rng: np.random.Generator,
                   max_steps: int | None = None) -> env.Solution:
    """Uniformly random feasible policy: random vehicle, then random allowed node."""
    max_steps = max_steps or 1000 * (instance.n + instance.m)
    state = env.init_state(instance)
    while not env.is_terminal(state):
        if state.step >= max_steps:
            raise BudgetExceeded("random rollout did not terminate")
        k = int(rng.integers(instance.m))
        options = np.flatnonzero(env.feasibility_mask(state, instance, k))
        state, _ = env.step(state, env.Action(k, int(rng.choice(options))), instance)
    return env.finalize(state, instance)

