import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from epose import env
from epose.env import BatchState, InfeasibleAction, TerminalStateError
from epose.routing import Kind, ProblemInstance, generate_instance, tour_length, validate_solution


def random_policy(rng):
    def choose(state, mask):
        return int(rng.choice(np.flatnonzero(mask)))

    return choose


def test_reset_tsp():
    s = env.reset(generate_instance("tsp", 5, 0))
    assert s.t == 0 and not s.terminal and s.sequence == ()
    assert env.feasible_mask(s).tolist() == [True] * 5


def test_reset_vrp():
    inst = generate_instance("cvrp", 5, 0)
    s = env.reset(inst)
    assert s.remaining_capacity == 1.0 and s.current == 0
    assert not env.feasible_mask(s)[0]
    sd = env.reset(generate_instance("sdvrp", 5, 0))
    assert np.array_equal(sd.remaining_demand[1:], sd.instance.demands)


def test_cvrp_capacity_mask():
    inst = ProblemInstance(Kind.CVRP, np.full((3, 2), 0.5), demands=[0.9, 0.2], capacity_raw=10)
    s, _ = env.step(env.reset(inst), 1)
    assert math.isclose(s.remaining_capacity, 0.1)
    mask = env.feasible_mask(s)
    assert not mask[2] and mask[0]
    with pytest.raises(InfeasibleAction, match="exceeds remaining capacity"):
        env.step(s, 2)


def test_depot_masked_after_depot_visit():
    inst = ProblemInstance(Kind.CVRP, np.full((3, 2), 0.5), demands=[0.5, 0.5], capacity_raw=10)
    s, _ = env.step(env.reset(inst), 1)
    s, _ = env.step(s, 0)
    assert not env.feasible_mask(s)[0]
    with pytest.raises(InfeasibleAction, match="two consecutive"):
        env.step(s, 0)


def test_tsp_two_nodes_forced():
    inst = ProblemInstance(Kind.TSP, [[0.0, 0.0], [1.0, 1.0]])
    s, r1 = env.step(env.reset(inst), 0)
    s, r2 = env.step(s, 1)
    assert s.terminal
    assert r1 + r2 == pytest.approx(-2 * math.sqrt(2), abs=1e-12)


def test_sdvrp_min_rule():
    inst = ProblemInstance(Kind.SDVRP, np.full((3, 2), 0.5), demands=[0.6, 0.6], capacity_raw=10)
    s, _ = env.step(env.reset(inst), 2)  # capacity 0.4 remaining
    assert s.remaining_capacity == pytest.approx(0.4)
    s, _ = env.step(s, 1)
    assert s.deliveries[-1] == pytest.approx(0.4)
    assert s.remaining_demand[1] == pytest.approx(0.2)
    assert s.remaining_capacity == 0.0
    assert env.feasible_mask(s).tolist() == [True, False, False]


def test_terminal_state_has_no_mask():
    inst = ProblemInstance(Kind.TSP, [[0.0, 0.0], [1.0, 1.0]])
    s, _ = env.step(env.reset(inst), 0)
    s, _ = env.step(s, 1)
    with pytest.raises(TerminalStateError):
        env.feasible_mask(s)


def test_repeat_rejected():
    s, _ = env.step(env.reset(generate_instance("tsp", 4, 0)), 2)
    with pytest.raises(InfeasibleAction, match="node 2 already visited"):
        env.step(s, 2)


@pytest.mark.parametrize("kind", list(Kind))
def test_random_rollouts_valid_and_return_matches_length(kind):
    rng = np.random.default_rng(0)
    for i in range(300):
        inst = generate_instance(kind, 2 + i % 12, seed=i)
        final, ret = env.rollout(inst, random_policy(rng))
        sol = final.to_solution()
        assert validate_solution(inst, sol).ok
        length = tour_length(inst, sol)
        assert abs(ret + length) <= 1e-9 * max(1.0, length)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**9), kind=st.sampled_from(list(Kind)))
def test_mask_never_empty_and_step_deterministic(seed, kind):
    rng = np.random.default_rng(seed)
    s = env.reset(generate_instance(kind, 8, seed))
    while not s.terminal:
        mask = env.feasible_mask(s)
        assert mask.any()
        a = int(rng.choice(np.flatnonzero(mask)))
        s1, r1 = env.step(s, a)
        s2, r2 = env.step(s, a)
        assert r1 == r2 and s1.sequence == s2.sequence
        assert np.array_equal(s1.remaining_demand, s2.remaining_demand)
        assert s1.remaining_capacity == s2.remaining_capacity
        assert 0.0 <= s1.remaining_capacity <= 1.0
        assert np.all(s1.remaining_demand >= 0) and np.all(s1.remaining_demand <= s.instance.node_demands())
        s = s1


@pytest.mark.parametrize("kind", list(Kind))
def test_batch_env_matches_reference(kind):
    """The tensor environment agrees with the reference step by step."""
    rng = np.random.default_rng(1)
    insts = [generate_instance(kind, 7, seed=s) for s in range(16)]
    states = [env.reset(i) for i in insts]
    batch = BatchState.from_instances(insts)
    while not batch.all_done():
        mask = batch.mask()
        actions = []
        for b, s in enumerate(states):
            if s.terminal:
                assert mask[b].tolist() == [True] + [False] * (mask.shape[1] - 1)
                actions.append(0)
                continue
            ref_mask = env.feasible_mask(s)
            assert mask[b].tolist() == ref_mask.tolist()
            actions.append(int(rng.choice(np.flatnonzero(ref_mask))))
        batch, reward, delivered = batch.step(torch.tensor(actions))
        for b, s in enumerate(states):
            if s.terminal:
                assert reward[b] == 0.0
                continue
            nxt, r = env.step(s, actions[b])
            assert reward[b].item() == pytest.approx(r, abs=1e-12)
            if kind.is_vrp:
                assert batch.remaining_capacity[b].item() == pytest.approx(nxt.remaining_capacity, abs=1e-12)
            assert bool(batch.done[b]) == nxt.terminal
            states[b] = nxt
    assert all(s.terminal for s in states)


def test_replay_prefix_rebuilds_states():
    insts = [generate_instance("cvrp", 6, seed=s) for s in range(4)]
    rng = np.random.default_rng(2)
    finals = [env.rollout(i, random_policy(rng))[0] for i in insts]
    T = max(len(f.sequence) for f in finals)
    actions = torch.zeros(4, T, dtype=torch.long)
    for b, f in enumerate(finals):
        actions[b, : len(f.sequence)] = torch.tensor(f.sequence)
    prefix = torch.tensor([0, 1, 3, len(finals[3].sequence) - 1])
    batch = BatchState.from_instances(insts)
    rebuilt = env.replay_prefix(Kind.CVRP, batch.coords, batch.demand, actions, prefix)
    for b in range(4):
        s = env.reset(insts[b])
        for a in finals[b].sequence[: int(prefix[b])]:
            s, _ = env.step(s, a)
        assert rebuilt.mask()[b].tolist() == env.feasible_mask(s).tolist()
        assert int(rebuilt.t[b]) == s.t
