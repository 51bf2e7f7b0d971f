import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hcvrp import env
from hcvrp.env import Action, Solution, VehicleState
from hcvrp.errors import ContractViolation, SchemaError
from hcvrp.instances import FleetSpec, Instance, fleet_preset, generate_instance
from hcvrp.oracle import random_rollout


def make(coords, demands, capacities=(20,), speeds=(1.0,), objective="min-max"):
    return Instance(coords, demands, FleetSpec(capacities, speeds), objective)


def test_init_state_v3():
    inst = generate_instance(5, "V3", "min-max", 0)
    s = env.init_state(inst)
    assert [v.load for v in s.vehicles] == [20, 25, 30]
    assert [v.time for v in s.vehicles] == [0, 0, 0]
    assert all(v.route == (0,) for v in s.vehicles)
    assert s.step == 0 and s.demands[0] == 0
    assert not env.is_terminal(s)


def test_single_customer_has_one_demand():
    s = env.init_state(generate_instance(1, "V5", "min-sum", 3))
    assert sum(d > 0 for d in s.demands) == 1


def test_terminal_detection():
    inst = make([[0, 0], [0.1, 0], [0.2, 0]], [0, 2, 3])
    s = env.init_state(inst)
    s, _ = env.step(s, Action(0, 1), inst)
    assert not env.is_terminal(s)
    s, _ = env.step(s, Action(0, 2), inst)
    assert env.is_terminal(s)


def test_mask_only_depot_when_all_served():
    inst = make([[0, 0], [0.5, 0]], [0, 4])
    s, _ = env.step(env.init_state(inst), Action(0, 1), inst)
    assert env.feasibility_mask(s, inst, 0).tolist() == [True, False]


def test_mask_capacity_exclusion():
    inst = make([[0, 0], [0.1, 0], [0.2, 0], [0.3, 0]], [0, 17, 5, 7])
    s, _ = env.step(env.init_state(inst), Action(0, 1), inst)  # load 3 left
    assert s.vehicles[0].load == 3
    assert env.feasibility_mask(s, inst, 0).tolist() == [True, False, False, False]


def test_mask_fresh_v3_instance():
    inst = generate_instance(10, "V3", "min-max", 2)
    mask = env.feasibility_mask(env.init_state(inst), inst, 0)
    expected = [False] + [1 <= d <= 20 for d in inst.demands[1:]]
    assert mask.tolist() == expected


def test_mask_idle_vehicle_at_depot_may_stay():
    # vehicle 2 cannot carry the demand of 9, it may only wait at the depot
    inst = make([[0, 0], [0.5, 0]], [0, 9], capacities=(20, 5), speeds=(1.0, 1.0))
    assert env.feasibility_mask(env.init_state(inst), inst, 1).tolist() == [True, False]


def test_step_load_and_reward():
    inst = make([[0, 0], [0.3, 0.4], [0.9, 0.9]], [0, 5, 1], capacities=(20, 25),
                speeds=(1.0, 1.0))
    s, r = env.step(env.init_state(inst), Action(0, 1), inst)
    assert s.vehicles[0].load == 15
    assert r == pytest.approx((0.5, 0.0), abs=1e-15)
    assert s.vehicles[0].time == pytest.approx(0.5, abs=1e-15)
    # the idle vehicle keeps load and time but its route grows
    assert s.vehicles[1] == VehicleState(25.0, 0.0, (0, 0))
    assert s.demands == (0, 0, 1)


def test_step_depot_reloads():
    inst = make([[0, 0], [0.3, 0.4], [0.9, 0.9]], [0, 5, 1])
    s, _ = env.step(env.init_state(inst), Action(0, 1), inst)
    s, r = env.step(s, Action(0, 0), inst)
    assert s.vehicles[0].load == 20 and r[0] == pytest.approx(0.5)


def test_step_speed_divides_distance():
    inst = make([[0, 0], [1.0, 0]], [0, 1], speeds=(0.25,), objective="min-sum")
    _, r = env.step(env.init_state(inst), Action(0, 1), inst)
    assert r[0] == pytest.approx(4.0, abs=1e-12)


@pytest.mark.parametrize("action", [Action(0, 0), Action(0, 5), Action(3, 1)])
def test_step_rejects_bad_actions(action):
    inst = make([[0, 0], [0.1, 0]], [0, 1])
    with pytest.raises(ContractViolation):
        env.step(env.init_state(inst), action, inst)


def test_step_rejects_capacity_overflow():
    inst = make([[0, 0], [0.1, 0], [0.2, 0]], [0, 15, 9])
    s, _ = env.step(env.init_state(inst), Action(0, 1), inst)
    with pytest.raises(ContractViolation):
        env.step(s, Action(0, 2), inst)


def test_step_on_terminal_state():
    inst = make([[0, 0], [0.1, 0]], [0, 1])
    s, _ = env.step(env.init_state(inst), Action(0, 1), inst)
    with pytest.raises(ContractViolation):
        env.step(s, Action(0, 0), inst)


def test_finalize_single_round_trip():
    for objective in ("min-max", "min-sum"):
        inst = make([[0, 0], [0.5, 0]], [0, 3], objective=objective)
        s, _ = env.step(env.init_state(inst), Action(0, 1), inst)
        sol = env.finalize(s, inst)
        assert sol.routes == ((0, 1, 0),)
        assert sol.objective_value == pytest.approx(1.0, abs=1e-15)


def test_finalize_compresses_padding():
    inst = make([[0, 0], [0.5, 0], [0, 0.5]], [0, 3, 4], capacities=(20, 20), speeds=(1.0, 1.0))
    state, _ = env.replay(inst, [Action(0, 1), Action(1, 2)])
    assert state.vehicles[0].route == (0, 1, 1)
    sol = env.finalize(state, inst)
    assert sol.routes == ((0, 1, 0), (0, 2, 0))
    assert sol.per_vehicle_time == pytest.approx((1.0, 1.0))


def test_finalize_before_terminal():
    inst = make([[0, 0], [0.5, 0]], [0, 3])
    with pytest.raises(ContractViolation):
        env.finalize(env.init_state(inst), inst)


def test_combine_objectives():
    assert env.combine((2.0, 3.0), "min-max") == 3.0
    assert env.combine((2.0, 3.0), "min-sum") == 5.0


def test_unused_vehicle_has_zero_time():
    inst = make([[0, 0], [0.5, 0]], [0, 3], capacities=(20, 20), speeds=(1.0, 1.0),
                objective="min-sum")
    state, _ = env.replay(inst, [Action(0, 1)])
    sol = env.finalize(state, inst)
    assert sol.routes[1] == (0, 0) and sol.per_vehicle_time[1] == 0.0


def _v3_line():
    coords = [[0, 0]] + [[0.1 * i, 0] for i in range(1, 5)]
    return Instance(coords, [0, 9, 9, 3, 2], fleet_preset("V3", "min-max"), "min-max")


def test_validate_visited_twice():
    inst = _v3_line()
    sol = Solution(((0, 1, 2, 0), (0, 3, 4, 1, 0), (0, 0)), (0, 0, 0), 0.0, "min-max")
    rep = env.validate(sol, inst)
    # node 1 both breaks the trip load (22 > 25 is fine) and is visited twice
    assert not rep.ok and rep.violation == "visit-once"


def test_validate_capacity_trip_of_21():
    inst = _v3_line()
    # first trip of vehicle 1 (capacity 20): 9 + 9 + 3 = 21
    sol = Solution(((0, 1, 2, 3, 0, 4, 0), (0, 0), (0, 0)), (0, 0, 0), 0.0, "min-max")
    assert sum(inst.demands[[1, 2, 3]]) == 21
    rep = env.validate(sol, inst)
    assert not rep.ok and rep.violation == "capacity"


def test_validate_capacity_resets_at_depot():
    inst = _v3_line()
    routes = ((0, 1, 2, 0, 3, 4, 0), (0, 0), (0, 0))
    times = tuple(env.route_time(inst, r, v) for v, r in enumerate(routes))
    rep = env.validate(Solution(routes, times, max(times), "min-max"), inst)
    assert rep.ok and rep.objective == pytest.approx(max(times))


@pytest.mark.parametrize("routes,code", [
    (((0, 1, 2, 3, 4, 0), (0, 0)), "route-count"),
    (((1, 2, 0), (0, 3, 4, 0), (0, 0)), "endpoints"),
    (((0, 1, 2, 7, 0), (0, 3, 4, 0), (0, 0)), "unknown-node"),
    (((0, 1, 2, 0), (0, 3, 0), (0, 0)), "visit-once"),
])
def test_validate_structural_violations(routes, code):
    rep = env.validate(Solution(routes, (), 0.0, "min-max"), _v3_line())
    assert not rep.ok and rep.violation == code


def test_validate_objective_mismatch():
    inst = _v3_line()
    routes = ((0, 1, 2, 0), (0, 3, 4, 0), (0, 0))
    rep = env.validate(Solution(routes, (0, 0, 0), 0.123, "min-max"), inst)
    assert not rep.ok and rep.violation == "objective-mismatch"


def test_solution_record_round_trip():
    sol = Solution(((0, 1, 0), (0, 0)), (1.0, 0.0), 1.0, "min-max")
    record = sol.to_dict()
    assert set(record) == {"routes", "per_vehicle_time", "objective", "objective_tag"}
    assert Solution.from_dict(record) == sol
    with pytest.raises(SchemaError):
        Solution.from_dict({"routes": []})


# -- properties over random rollouts -----------------------------------------

rollout_cases = st.tuples(st.integers(1, 12), st.sampled_from(["V3", "V5"]),
                          st.sampled_from(["min-max", "min-sum"]), st.integers(0, 10**6))


def _random_trajectory(n, fleet, objective, seed):
    inst = generate_instance(n, fleet, objective, seed)
    rng = np.random.default_rng(seed)
    state = env.init_state(inst)
    states, actions, rewards = [state], [], []
    while not env.is_terminal(state):
        k = int(rng.integers(inst.m))
        choices = np.flatnonzero(env.feasibility_mask(state, inst, k))
        action = Action(k, int(rng.choice(choices)))
        state, r = env.step(state, action, inst)
        states.append(state)
        actions.append(action)
        rewards.append(r)
    return inst, states, actions, rewards


@settings(max_examples=60, deadline=None)
@given(rollout_cases)
def test_lockstep_and_conservation(case):
    inst, states, actions, _ = _random_trajectory(*case)
    original = inst.demands.tolist()
    for t, (s, nxt, a) in enumerate(zip(states, states[1:], actions)):
        assert all(len(v.route) == t + 1 for v in s.vehicles)
        for j in range(inst.n + 1):
            expected = 0 if j == a.node else s.demands[j]
            assert nxt.demands[j] == expected
            assert nxt.demands[j] in (0, original[j])
        served = sum(original) - sum(nxt.demands)
        delivered = sum(original[j] for j in set(act.node for act in actions[:t + 1]))
        assert served == delivered


@settings(max_examples=60, deadline=None)
@given(rollout_cases)
def test_capacity_monotone_except_reload(case):
    inst, states, actions, _ = _random_trajectory(*case)
    for s, nxt, a in zip(states, states[1:], actions):
        for i, (before, after) in enumerate(zip(s.vehicles, nxt.vehicles)):
            assert 0 <= after.load <= inst.capacities[i]
            assert after.time >= before.time
            if i == a.vehicle and a.node == 0:
                assert after.load == inst.capacities[i]
            else:
                assert after.load <= before.load


@settings(max_examples=60, deadline=None)
@given(rollout_cases)
def test_rewards_match_validated_objective(case):
    inst, states, _, rewards = _random_trajectory(*case)
    back = env.closing_rewards(states[-1], inst)
    per_vehicle = [math.fsum(r[i] for r in rewards) + back[i] for i in range(inst.m)]
    sol = env.finalize(states[-1], inst)
    rep = env.validate(sol, inst)
    assert rep.ok
    assert abs(env.combine(per_vehicle, inst.objective) - rep.objective) <= 1e-9
    assert abs(sol.objective_value - rep.objective) <= 1e-9


def test_mask_safety_random_states():
    """Mask-true actions always step; mask-false actions are genuinely infeasible."""
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 10_000:
        inst = generate_instance(int(rng.integers(1, 10)), "V3", "min-max", int(rng.integers(1e9)))
        state = env.init_state(inst)
        while not env.is_terminal(state):
            k = int(rng.integers(inst.m))
            mask = env.feasibility_mask(state, inst, k)
            veh = state.vehicles[k]
            assert mask.any()
            for j in range(inst.n + 1):
                if j == 0:
                    rule = veh.position != 0 or not any(
                        0 < d <= veh.load for d in state.demands[1:])
                else:
                    rule = 0 < state.demands[j] <= veh.load
                assert bool(mask[j]) == rule
                if not mask[j]:
                    with pytest.raises(ContractViolation):
                        env.step(state, Action(k, j), inst)
            checked += 1
            state, _ = env.step(state, Action(k, int(rng.choice(np.flatnonzero(mask)))), inst)


def test_random_rollout_is_valid():
    inst = generate_instance(9, "V5", "min-sum", 4)
    sol = random_rollout(inst, np.random.default_rng(1))
    assert env.validate(sol, inst).ok
