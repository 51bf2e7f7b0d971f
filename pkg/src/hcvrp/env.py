"""Construction MDP for HCVRP.

A state holds every vehicle's remaining capacity, accumulated travel time and
partial route, plus the remaining demand of every node. An action picks one
vehicle and one node; the other vehicles repeat their last node so that all
routes grow in lockstep. Visiting the depot refills the vehicle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ContractViolation, SchemaError
from .instances import MIN_MAX, Instance, normalize_objective

TOL = 1e-9


@dataclass(frozen=True)
class VehicleState:
    load: float  # remaining capacity
    time: float  # accumulated travel time
    route: tuple[int, ...]

    @property
    def position(self) -> int:
        return self.route[-1]


@dataclass(frozen=True)
class State:
    step: int
    vehicles: tuple[VehicleState, ...]
    demands: tuple[int, ...]


class Action(NamedTuple):
    vehicle: int  # 0-based
    node: int


@dataclass(frozen=True)
class Solution:
    routes: tuple[tuple[int, ...], ...]
    per_vehicle_time: tuple[float, ...]
    objective_value: float
    objective: str

    def to_dict(self) -> dict:
        return {
            "routes": [list(r) for r in self.routes],
            "per_vehicle_time": list(self.per_vehicle_time),
            "objective": self.objective_value,
            "objective_tag": self.objective,
        }

    @classmethod
    def from_dict(cls, record: dict) -> "Solution":
        try:
            return cls(tuple(tuple(int(v) for v in r) for r in record["routes"]),
                       tuple(float(t) for t in record["per_vehicle_time"]),
                       float(record["objective"]),
                       normalize_objective(record["objective_tag"]))
        except KeyError as exc:
            raise SchemaError(f"solution record is missing field {exc.args[0]!r}") from None


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    objective: float
    per_vehicle_time: tuple[float, ...]
    violation: str | None = None  # short code of the first violated rule
    message: str = ""


def combine(times: Sequence[float], objective: str) -> float:
    """Fleet objective from per-vehicle times."""
    return float(max(times)) if objective == MIN_MAX else float(math.fsum(times))


def _dist(instance: Instance, i: int, j: int) -> float:
    a, b = instance.coords[i], instance.coords[j]
    return math.hypot(a[0] - b[0], a[1] - b[1])


def init_state(instance: Instance) -> State:
    vehicles = tuple(VehicleState(float(q), 0.0, (0,)) for q in instance.fleet.capacities)
    return State(0, vehicles, tuple(int(d) for d in instance.demands))


def is_terminal(state: State) -> bool:
    return not any(state.demands[1:])


def feasibility_mask(state: State, instance: Instance, vehicle: int) -> np.ndarray:
    """Nodes the given vehicle may visit next.

    Customers need unserved demand that fits the remaining load. The depot is
    open when the vehicle is away from it, or when no customer is reachable.
    """
    veh = state.vehicles[vehicle]
    demands = np.asarray(state.demands)
    mask = (demands > 0) & (demands <= veh.load + TOL)
    mask[0] = False
    if veh.position != 0 or not mask.any():
        mask[0] = True
    return mask


def step(state: State, action: Action, instance: Instance) -> tuple[State, tuple[float, ...]]:
    k, j = int(action[0]), int(action[1])
    if not 0 <= k < len(state.vehicles) or not 0 <= j < len(state.demands):
        raise ContractViolation(f"action {action} out of range")
    if is_terminal(state):
        raise ContractViolation("step called on a terminal state")
    if not feasibility_mask(state, instance, k)[j]:
        raise ContractViolation(f"infeasible action: vehicle {k} cannot visit node {j}")
    reward = [0.0] * len(state.vehicles)
    vehicles = []
    for i, veh in enumerate(state.vehicles):
        if i != k:
            vehicles.append(VehicleState(veh.load, veh.time, veh.route + (veh.position,)))
            continue
        dt = _dist(instance, veh.position, j) / instance.fleet.speeds[k]
        load = float(instance.fleet.capacities[k]) if j == 0 else veh.load - state.demands[j]
        vehicles.append(VehicleState(load, veh.time + dt, veh.route + (j,)))
        reward[k] = dt
    demands = list(state.demands)
    demands[j] = 0
    return State(state.step + 1, tuple(vehicles), tuple(demands)), tuple(reward)


def closing_rewards(state: State, instance: Instance) -> tuple[float, ...]:
    """Time each vehicle needs to drive back to the depot from where it stands."""
    return tuple(_dist(instance, v.position, 0) / instance.fleet.speeds[i]
                 for i, v in enumerate(state.vehicles))


def _compress(route: Sequence[int]) -> tuple[int, ...]:
    out = [route[0]]
    for node in route[1:]:
        if node != out[-1]:
            out.append(node)
    if out[-1] != 0 or len(out) == 1:
        out.append(0)
    return tuple(out)


def finalize(state: State, instance: Instance) -> Solution:
    if not is_terminal(state):
        raise ContractViolation("finalize called before all customers are served")
    back = closing_rewards(state, instance)
    times = tuple(v.time + back[i] for i, v in enumerate(state.vehicles))
    routes = tuple(_compress(v.route) for v in state.vehicles)
    return Solution(routes, times, combine(times, instance.objective), instance.objective)


def replay(instance: Instance, actions: Sequence[Action]) -> tuple[State, list[tuple[float, ...]]]:
    state = init_state(instance)
    rewards = []
    for action in actions:
        state, r = step(state, action, instance)
        rewards.append(r)
    return state, rewards


def route_time(instance: Instance, route: Sequence[int], vehicle: int) -> float:
    speed = instance.fleet.speeds[vehicle]
    return math.fsum(_dist(instance, a, b) for a, b in zip(route, route[1:])) / speed


def validate(solution: Solution, instance: Instance) -> ValidationReport:
    """Check a finished solution from scratch and recompute its objective."""
    times = []

    def fail(code: str, message: str) -> ValidationReport:
        return ValidationReport(False, math.nan, tuple(times), code, message)

    if len(solution.routes) != instance.m:
        return fail("route-count", f"expected {instance.m} routes, got {len(solution.routes)}")
    visits = np.zeros(instance.n + 1, dtype=np.int64)
    for v, route in enumerate(solution.routes):
        if len(route) == 0 or route[0] != 0 or route[-1] != 0:
            return fail("endpoints", f"route of vehicle {v} must start and end at the depot")
        if any(not 0 <= node <= instance.n for node in route):
            return fail("unknown-node", f"route of vehicle {v} references a missing node")
        cap = instance.fleet.capacities[v]
        load = 0
        for node in route[1:]:
            if node == 0:
                load = 0
                continue
            visits[node] += 1
            load += int(instance.demands[node])
            if load > cap:
                return fail("capacity", f"vehicle {v} carries {load} > capacity {cap} on one trip")
        times.append(route_time(instance, route, v))
    for node in range(1, instance.n + 1):
        if visits[node] != 1:
            return fail("visit-once", f"customer {node} visited {visits[node]} times")
    objective = combine(times, instance.objective)
    if abs(objective - solution.objective_value) > TOL * max(1.0, abs(objective)):
        return ValidationReport(False, objective, tuple(times), "objective-mismatch",
                                f"claimed {solution.objective_value}, recomputed {objective}")
    return ValidationReport(True, objective, tuple(times))
