import math

import numpy as np
import pytest
import torch

from epose.evaluation import (
    brute_force_tsp,
    evaluate,
    exact_tsp,
    greedy_decode,
    greedy_decode_batch,
    heuristic_baseline,
    make_generator,
    optimality_gap,
    reference_solution,
    run_policy,
    sample_decode,
    sample_solutions,
    two_opt,
)
from epose.nets import Agent, NetConfig, decode_step
from epose import env
from epose.routing import Kind, ProblemInstance, Solution, generate_instance, tour_length, validate_solution

SMALL = NetConfig(embed_dim=16, encoder_layers=1, heads=2, ff_dim=32, critic_layers=1, critic_hidden=16)


def agent_for(kind, seed=0):
    return Agent(kind, SMALL, seed=seed).double().eval()


def test_gap_arithmetic():
    assert optimality_gap(8.15, 7.77) == pytest.approx(4.89, abs=0.01)
    assert optimality_gap(10.73, 10.39) == pytest.approx(3.27, abs=0.01)
    assert optimality_gap(5.80, 5.70) == pytest.approx(1.75, abs=0.01)
    assert optimality_gap(3.0, 3.0) == 0.0
    with pytest.raises(ValueError):
        optimality_gap(1.0, 0.0)


def test_exact_unit_square():
    inst = ProblemInstance(Kind.TSP, [[0, 0], [1, 1], [1, 0], [0, 1]])
    sol = exact_tsp(inst)
    assert sol.length == pytest.approx(4.0, abs=1e-12)
    assert validate_solution(inst, sol).ok


@pytest.mark.parametrize("seed", range(6))
def test_exact_matches_brute_force(seed):
    inst = generate_instance("tsp", 8, seed)
    sol = exact_tsp(inst)
    assert validate_solution(inst, sol).ok
    assert sol.length == pytest.approx(brute_force_tsp(inst), abs=1e-12)
    assert sol.length == pytest.approx(tour_length(inst, sol), abs=1e-12)


def test_exact_tiny_and_limit():
    assert exact_tsp(generate_instance("tsp", 2, 0)).length > 0
    assert exact_tsp(generate_instance("tsp", 3, 0)).length == pytest.approx(brute_force_tsp(generate_instance("tsp", 3, 0)))
    with pytest.raises(ValueError, match="unsupported size"):
        exact_tsp(generate_instance("tsp", 17, 0))


def test_two_opt_never_worse_and_not_below_optimum():
    for seed in range(10):
        inst = generate_instance("tsp", 9, seed)
        nn = heuristic_baseline(inst, "nearest_neighbor")
        improved = two_opt(inst, nn)
        assert validate_solution(inst, improved).ok
        assert improved.length <= nn.length + 1e-12
        assert improved.length >= exact_tsp(inst).length - 1e-12


def test_two_opt_fixes_crossing():
    inst = ProblemInstance(Kind.TSP, [[0, 0], [1, 1], [1, 0], [0, 1]])
    assert two_opt(inst, Solution([0, 1, 2, 3])).length == pytest.approx(4.0)


@pytest.mark.parametrize("kind", list(Kind))
def test_nearest_neighbour_valid(kind):
    for seed in range(20):
        inst = generate_instance(kind, 15, seed)
        sol = heuristic_baseline(inst)
        assert validate_solution(inst, sol).ok
        ref, label = reference_solution(inst)
        assert validate_solution(inst, ref).ok and label


def test_reference_labels():
    assert reference_solution(generate_instance("tsp", 10, 0))[1] == "exact"
    assert reference_solution(generate_instance("tsp", 20, 0))[1] == "two_opt"
    assert reference_solution(generate_instance("sdvrp", 10, 0))[1] == "cvrp_nearest_neighbor_upper_bound"


@pytest.mark.parametrize("kind", list(Kind))
def test_greedy_is_argmax_of_reference_path(kind):
    agent = agent_for(kind)
    inst = generate_instance(kind, 7, 1)
    sol = greedy_decode(agent, inst)
    s = env.reset(inst)
    for a in sol.visits[1:] if kind.is_vrp else sol.visits:
        logp = decode_step(agent, inst, s)
        assert a == int(logp.argmax())
        s, _ = env.step(s, a)
    assert s.terminal


@pytest.mark.parametrize("kind", list(Kind))
def test_batch_greedy_matches_single(kind):
    agent = agent_for(kind)
    insts = [generate_instance(kind, 8, s) for s in range(5)]
    batch = greedy_decode_batch(agent, insts)
    for inst, sol in zip(insts, batch):
        single = greedy_decode(agent, inst)
        assert single.visits == sol.visits
        assert sol.length == pytest.approx(tour_length(inst, sol), abs=1e-12)


def test_sampling_reproducible_and_best_of():
    agent = agent_for("cvrp")
    inst = generate_instance("cvrp", 8, 2)
    a = sample_solutions(agent, inst, 32, make_generator(4))
    b = sample_solutions(agent, inst, 32, make_generator(4))
    assert [s.visits for s in a] == [s.visits for s in b]
    assert all(validate_solution(inst, s).ok for s in a)
    best = sample_decode(agent, inst, 32, make_generator(4))
    assert best.length == min(s.length for s in a)
    with pytest.raises(ValueError):
        sample_solutions(agent, inst, 0, make_generator(0))


def test_forced_actions_rescore():
    agent = agent_for("tsp")
    coords = torch.rand(3, 6, 2, dtype=torch.float64)
    ro = run_policy(agent, Kind.TSP, coords, generator=make_generator(1))
    again = run_policy(agent, Kind.TSP, coords, actions=ro.actions)
    assert torch.equal(again.actions, ro.actions)
    assert torch.allclose(again.log_probs, ro.log_probs)


def test_rollout_returns_match_lengths():
    agent = agent_for("sdvrp")
    insts = [generate_instance("sdvrp", 6, s) for s in range(8)]
    from epose.nets import instance_tensors

    coords, demand = instance_tensors(insts, torch.float64)
    ro = run_policy(agent, Kind.SDVRP, coords, demand, generator=make_generator(0))
    for inst, sol, ret in zip(insts, ro.solutions(Kind.SDVRP), ro.returns.tolist()):
        assert validate_solution(inst, sol).ok
        assert -ret == pytest.approx(tour_length(inst, sol), rel=1e-9)


def test_report(tmp_path):
    agent = agent_for("tsp")
    insts = [generate_instance("tsp", 6, s) for s in range(4)]
    report = evaluate(agent, insts)
    opt = [exact_tsp(i).length for i in insts]
    assert report.reference == "exact"
    assert all(r.gap_pct >= -1e-9 for r in report.rows)
    assert report.mean_length == pytest.approx(np.mean([r.pred_len for r in report.rows]))
    assert report.mean_gap == pytest.approx(np.mean([100 * (r.pred_len / o - 1) for r, o in zip(report.rows, opt)]))
    path = tmp_path / "r.csv"
    report.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "instance_id,kind,n,pred_len,ref_len,gap_pct,decode_mode,samples"
    assert len(lines) == 5
    sampled = evaluate(agent, insts, decode="sample", k=16, references=opt)
    assert sampled.samples == 16 and sampled.reference == "given"
    assert "mean_gap" in sampled.summary()
    with pytest.raises(ValueError):
        evaluate(agent, insts, decode="beam")
