import math

import numpy as np
import pytest
import torch

from hcvrp import env
from hcvrp.errors import ConfigurationError
from hcvrp.instances import FleetSpec, Instance, generate_dataset, generate_instance
from hcvrp.policy import (GREEDY, SAMPLE, ArchConfig, Batch, HCVRPPolicy, decode, encode,
                          enhance_features, node_distribution, node_logits, rollout, sample_best,
                          sample_costs, vehicle_distribution)
from hcvrp.policy.model import MultiHeadAttention

TOY = ArchConfig(dim=8, heads=2, n_layers=1, ff_encoder=16, ff_decoder=16)


def toy_model(m=3, seed=0, cfg=TOY):
    model = HCVRPPolicy(cfg, m).double()
    model.reset_parameters(torch.Generator().manual_seed(seed))
    return model.eval()


def walk(instance, rng, steps=None):
    """States along a random feasible trajectory, each with the vehicle that moves next."""
    state = env.init_state(instance)
    while not env.is_terminal(state) and (steps is None or state.step < steps):
        k = int(rng.integers(instance.m))
        yield state, k
        j = int(rng.choice(np.flatnonzero(env.feasibility_mask(state, instance, k))))
        state, _ = env.step(state, env.Action(k, j), instance)


def test_enhanced_features_v3():
    inst = Instance([[0.5, 0.5], [0.1, 0.2]], [0, 6], FleetSpec((20, 25, 30), (1, 1, 1)), "min-max")
    x = enhance_features(inst)
    assert x[1].tolist() == pytest.approx([0.1, 0.2, 0.3, 0.24, 0.2], abs=1e-15)
    assert x[0].tolist() == [0.5, 0.5, 0, 0, 0]
    assert enhance_features(generate_instance(4, "V5", "min-sum", 0)).shape == (5, 7)
    assert np.array_equal(Batch.from_instances([inst], torch.float64).features()[0].numpy(), x)


def test_hand_computed_attention():
    mha = MultiHeadAttention(2, 2, 1).double()
    with torch.no_grad():
        for lin in (mha.w_q, mha.w_k, mha.w_v, mha.w_o):
            lin.weight.copy_(torch.eye(2))
    h = torch.tensor([[[1.0, 0.0], [0.0, 1.0]]], dtype=torch.float64)
    a = math.exp(1 / math.sqrt(2)) / (math.exp(1 / math.sqrt(2)) + 1)
    expected = [[a, 1 - a], [1 - a, a]]
    assert mha(h)[0].detach().numpy() == pytest.approx(np.array(expected), abs=1e-12)


def test_identical_rows_identical_embeddings():
    model = toy_model()
    inst = Instance([[0.5, 0.5], [0.2, 0.3], [0.2, 0.3]], [0, 4, 4],
                    FleetSpec((20, 25, 30), (1, 1, 1)), "min-max")
    emb = encode(inst, model)
    assert torch.allclose(emb.nodes[1], emb.nodes[2], atol=1e-12)
    assert torch.allclose(emb.graph, emb.nodes.mean(0), atol=1e-12)


def test_encoder_rejects_wrong_width():
    model = toy_model(m=3)
    with pytest.raises(ConfigurationError):
        model.encode(torch.zeros(1, 4, 7, dtype=torch.float64))
    with pytest.raises(ConfigurationError):
        decode(model, Batch.from_instances([generate_instance(3, "V5", "min-max", 0)]))


def test_permutation_equivariance():
    model = toy_model(seed=3)
    rng = np.random.default_rng(0)
    for inst in generate_dataset(7, "V3", "min-max", 10, 1):
        order = rng.permutation(np.arange(1, 8))
        perm = inst.permuted(order)
        a, b = encode(inst, model), encode(perm, model)
        assert torch.allclose(a.nodes[np.r_[0, order]], b.nodes, atol=1e-5)
        assert torch.allclose(a.graph, b.graph, atol=1e-5)
        ga, _ = rollout(inst, model, GREEDY)
        gb, _ = rollout(perm, model, GREEDY)
        assert ga.objective_value == pytest.approx(gb.objective_value, abs=1e-5)


def test_uniform_vehicles_when_output_layer_is_zero():
    model = toy_model()
    with torch.no_grad():
        model.vehicle_decoder.out.weight.zero_()
        model.vehicle_decoder.out.bias.zero_()
    inst = generate_instance(5, "V3", "min-max", 2)
    emb = encode(inst, model)
    for state, _ in walk(inst, np.random.default_rng(0), steps=4):
        p = vehicle_distribution(state, emb, model, inst)
        assert p.tolist() == pytest.approx([1 / 3] * 3, abs=1e-15)


def _vehicle_probs_by_hand(model, inst, state, nodes):
    """Recompute the vehicle distribution directly from the weight arrays."""
    W = {k: v.detach().numpy() for k, v in model.vehicle_decoder.state_dict().items()}

    def lin(x, name):
        return W[name + ".weight"] @ x + W[name + ".bias"]

    def ff(x, name):
        return lin(np.maximum(lin(x, name + ".0"), 0), name + ".2")

    ctx = np.concatenate([[*inst.coords[v.position], v.time] for v in state.vehicles])
    hv = ff(lin(ctx, "vehicle_in"), "vehicle_ff")
    pooled = np.concatenate([nodes[list(v.route)].max(axis=0) for v in state.vehicles])
    hr = ff(lin(pooled, "route_in"), "route_ff")
    logits = lin(np.concatenate([hv, hr]), "out")
    e = np.exp(logits - logits.max())
    return e / e.sum()


@torch.no_grad()
def test_vehicle_distribution_matches_hand_recomputation():
    model = toy_model(m=2, seed=4)
    inst = generate_instance(5, FleetSpec((20, 25), (1.0, 1.0)), "min-max", 8)
    emb = encode(inst, model)
    nodes = emb.nodes.detach().numpy()
    for state, _ in walk(inst, np.random.default_rng(3), steps=6):
        p = vehicle_distribution(state, emb, model, inst).detach().numpy()
        assert p == pytest.approx(_vehicle_probs_by_hand(model, inst, state, nodes), abs=1e-12)


def test_vehicle_context_follows_the_mover():
    inst = generate_instance(4, "V3", "min-max", 0)
    s1, _ = env.step(env.init_state(inst), env.Action(0, 2), inst)
    assert [v.position for v in s1.vehicles] == [2, 0, 0]


@torch.no_grad()
def test_zero_compatibility_gives_uniform_over_feasible():
    model = toy_model()
    with torch.no_grad():
        model.node_decoder.w_q.weight.zero_()
    inst = generate_instance(6, "V3", "min-max", 5)
    emb = encode(inst, model)
    for state, k in walk(inst, np.random.default_rng(1)):
        mask = env.feasibility_mask(state, inst, k)
        p = node_distribution(state, k, emb, model, inst).detach().numpy()
        assert np.all(p[~mask] == 0)
        assert p[mask] == pytest.approx(np.full(mask.sum(), 1 / mask.sum()), abs=1e-12)


def test_single_feasible_node_gets_probability_one():
    model = toy_model()
    inst = Instance([[0, 0], [0.5, 0]], [0, 4], FleetSpec((20, 25, 30), (1, 1, 1)), "min-max")
    s, _ = env.step(env.init_state(inst), env.Action(1, 1), inst)
    p = node_distribution(s, 1, encode(inst, model), model, inst)
    assert p.tolist() == [1.0, 0.0]


@torch.no_grad()
def test_distributions_valid_and_clipped():
    rng = np.random.default_rng(7)
    model = toy_model(seed=9, cfg=ArchConfig(dim=16, heads=4, n_layers=2, ff_encoder=32,
                                             ff_decoder=32))
    # scale the compatibility query up so the clip is actually exercised
    with torch.no_grad():
        model.node_decoder.w_q.weight.mul_(1000)
    saturated = 0
    for inst in generate_dataset(8, "V3", "min-sum", 10, 2):
        emb = encode(inst, model)
        for state, k in walk(inst, rng):
            p = vehicle_distribution(state, emb, model, inst)
            assert abs(float(p.sum()) - 1) <= 1e-6 and bool((p > 0).all())
            u = node_logits(state, k, emb, model, inst)
            assert float(u.abs().max()) <= 10.0
            saturated += int((u.abs() > 9.9).sum())
            q = node_distribution(state, k, emb, model, inst)
            assert abs(float(q.sum()) - 1) <= 1e-6
    assert saturated > 0


@torch.no_grad()
def test_batched_log_prob_matches_stepwise_product():
    model = toy_model(seed=2)
    ds = generate_dataset(6, "V3", "min-sum", 5, 3)
    res = decode(model, Batch.from_instances(ds, torch.float64), SAMPLE, np.random.default_rng(0))
    for b, inst in enumerate(ds):
        emb = encode(inst, model)
        state, prob = env.init_state(inst), 1.0
        for a in res.actions(b):
            prob *= float(vehicle_distribution(state, emb, model, inst)[a.vehicle])
            prob *= float(node_distribution(state, a.vehicle, emb, model, inst)[a.node])
            state, _ = env.step(state, a, inst)
        assert env.is_terminal(state)
        assert math.exp(float(res.log_prob[b])) == pytest.approx(prob, rel=1e-6)
        assert float(res.cost[b]) == pytest.approx(env.finalize(state, inst).objective_value,
                                                   abs=1e-9)


@torch.no_grad()
def test_greedy_picks_argmax_each_step():
    inst = generate_instance(6, "V5", "min-max", 1)
    sol, _ = rollout(inst, toy_model(m=5, seed=5), GREEDY)
    model = toy_model(m=5, seed=5)
    emb = encode(inst, model)
    res = decode(model, Batch.from_instances([inst], torch.float64), GREEDY)
    state = env.init_state(inst)
    for a in res.actions(0):
        assert a.vehicle == int(torch.argmax(vehicle_distribution(state, emb, model, inst)))
        assert a.node == int(torch.argmax(node_distribution(state, a.vehicle, emb, model, inst)))
        state, _ = env.step(state, a, inst)
    assert env.finalize(state, inst) == sol


def test_rollout_determinism_and_validity():
    model = toy_model(seed=1)
    inst = generate_instance(8, "V3", "min-max", 4)
    g1, g2 = rollout(inst, model, GREEDY), rollout(inst, model, GREEDY)
    assert g1 == g2
    s1 = rollout(inst, model, SAMPLE, np.random.default_rng(3))
    s2 = rollout(inst, model, SAMPLE, np.random.default_rng(3))
    assert s1 == s2
    for sol, _ in (g1, s1):
        assert env.validate(sol, inst).ok
    with pytest.raises(ConfigurationError):
        rollout(inst, model, SAMPLE, None)
    with pytest.raises(ConfigurationError):
        rollout(inst, model, "beam", None)


def test_sample_best_nested_in_n():
    model = toy_model(seed=6)
    inst = generate_instance(8, "V3", "min-max", 6)
    costs = sample_costs(inst, model, 64, np.random.default_rng(11)).cost
    prefix = sample_costs(inst, model, 16, np.random.default_rng(11)).cost
    assert torch.equal(costs[:16], prefix)
    chunked = sample_costs(inst, model, 64, np.random.default_rng(11), chunk=16).cost
    # chunks come from child streams, so only the first chunk coincides with the unchunked draw
    assert torch.equal(chunked[:16], prefix)
    best = [sample_best(inst, model, n, np.random.default_rng(11)).objective_value
            for n in (1, 4, 16, 64)]
    assert all(a >= b - 1e-12 for a, b in zip(best, best[1:]))
    assert best[-1] == pytest.approx(float(costs.min()), abs=1e-9)


def test_sample_best_one_sample_equals_sampled_rollout():
    model = toy_model(seed=6)
    inst = generate_instance(5, "V3", "min-sum", 2)
    one = sample_best(inst, model, 1, np.random.default_rng(4))
    assert env.validate(one, inst).ok
    with pytest.raises(ConfigurationError):
        sample_best(inst, model, 0, np.random.default_rng(4))


def test_mask_safety_under_random_parameters():
    rng = np.random.default_rng(1)
    steps = 0
    for seed in range(12):
        model = toy_model(seed=seed)
        batch_instances = generate_dataset(9, "V3", "min-max", 16, seed)
        res = decode(model, Batch.from_instances(batch_instances, torch.float64), SAMPLE, rng)
        for b, inst in enumerate(batch_instances):
            state, _ = env.replay(inst, res.actions(b))  # raises on any infeasible action
            assert env.is_terminal(state)
            steps += len(res.actions(b))
    assert steps > 1000


def test_gradient_matches_finite_differences():
    torch.manual_seed(0)
    model = toy_model(m=2, seed=13)
    model.train()
    fleet = FleetSpec((20, 25), (1.0, 1.0))
    ds = generate_dataset(4, fleet, "min-max", 3, 4)
    batch = Batch.from_instances(ds, torch.float64)
    with torch.no_grad():
        ref = decode(model, batch, SAMPLE, np.random.default_rng(0))
    forced = [(ref.vehicles[t].tolist(), ref.nodes[t].tolist()) for t in range(ref.vehicles.size(0))]

    def total():
        return decode(model, batch, SAMPLE, forced=forced).log_prob.sum()

    model.zero_grad()
    total().backward()
    worst = 0.0
    eps = 1e-4
    with torch.no_grad():
        for p in model.parameters():
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = float(flat[i])
                flat[i] = old + eps
                up = float(total())
                flat[i] = old - eps
                down = float(total())
                flat[i] = old
                fd = (up - down) / (2 * eps)
                g = float(p.grad.view(-1)[i])
                worst = max(worst, abs(g - fd) / max(abs(g), abs(fd), 1e-6))
    assert worst <= 1e-3
