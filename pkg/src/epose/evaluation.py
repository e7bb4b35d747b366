"""Decoding, reference solvers and evaluation reports."""

from __future__ import annotations

import csv
import itertools
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import env
from .env import BatchState
from .nets import Agent, DecoderCache, instance_tensors
from .routing import Kind, ProblemInstance, Solution, tour_length, walk_length

HELD_KARP_MAX_N = 16


@dataclass
class Rollout:
    """Per-step records of a batch of episodes, padded to the longest one."""

    actions: torch.Tensor  # (B, T) long
    rewards: torch.Tensor  # (B, T) float64
    log_probs: torch.Tensor  # (B, T) log-prob of the chosen action
    entropies: torch.Tensor  # (B, T)
    num_feasible: torch.Tensor  # (B, T) long
    delivered: torch.Tensor  # (B, T) float64
    live: torch.Tensor  # (B, T) bool
    cache: DecoderCache
    start: BatchState

    @property
    def lengths(self) -> torch.Tensor:
        return self.live.sum(dim=1)

    @property
    def returns(self) -> torch.Tensor:
        return self.rewards.sum(dim=1)

    def solutions(self, kind: Kind) -> list[Solution]:
        return env.solutions_from_actions(
            kind, self.actions.numpy(), self.lengths.numpy(), self.delivered.numpy()
        )


def masked_entropy(logp: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Shannon entropy over feasible entries; infeasible entries contribute nothing."""
    safe = logp.masked_fill(~mask, 0.0)
    return -(safe.exp() * safe).masked_fill(~mask, 0.0).sum(-1)


def run_policy(
    agent: Agent,
    kind: Kind,
    coords: torch.Tensor,
    demand: Optional[torch.Tensor] = None,
    greedy: bool = False,
    generator: Optional[torch.Generator] = None,
    cache: Optional[DecoderCache] = None,
    actions: Optional[torch.Tensor] = None,
) -> Rollout:
    """Roll out the policy on a batch. Gradients flow if enabled by the caller.

    With ``actions`` (B, T) the given action sequences are replayed and scored
    instead of choosing new ones; pad finished rows with 0.
    """
    dtype = agent.log_alpha.dtype
    if cache is None:
        cache = agent.policy.encode(coords.to(dtype), None if demand is None else demand.to(dtype))
    state = BatchState.reset(kind, coords, demand)
    start = state
    limit = env.max_steps(kind, state.num_nodes)
    records = {k: [] for k in ("actions", "rewards", "log_probs", "entropies", "num_feasible", "delivered", "live")}
    for t in range(limit):
        if state.all_done():
            break
        mask = state.mask()
        logp = agent.policy.log_probs(cache, state, mask)
        if actions is not None:
            action = actions[:, t]
        elif greedy:
            action = logp.argmax(dim=-1)
        else:
            action = torch.multinomial(logp.detach().exp(), 1, generator=generator).squeeze(-1)
        live = ~state.done
        records["live"].append(live)
        records["actions"].append(action)
        records["log_probs"].append(logp.gather(1, action[:, None]).squeeze(1).masked_fill(~live, 0.0))
        records["entropies"].append(masked_entropy(logp, mask).masked_fill(~live, 0.0))
        records["num_feasible"].append(mask.sum(dim=1).masked_fill(~live, 0))
        state, reward, delivered = state.step(action)
        records["rewards"].append(reward)
        records["delivered"].append(delivered)
    if not state.all_done():
        raise RuntimeError("episode did not terminate within the step limit")
    stacked = {k: torch.stack(v, dim=1) for k, v in records.items()}
    return Rollout(cache=cache, start=start, **stacked)


def _single(instance: ProblemInstance) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
    return instance_tensors([instance], torch.float64)


@torch.no_grad()
def greedy_decode(agent: Agent, instance: ProblemInstance) -> Solution:
    return greedy_decode_batch(agent, [instance])[0]


@torch.no_grad()
def greedy_decode_batch(agent: Agent, instances: list[ProblemInstance], chunk: int = 1024) -> list[Solution]:
    """Greedy decoding of many instances of one kind (ties go to the lowest index)."""
    out: list[Solution] = []
    kind = instances[0].kind
    for i in range(0, len(instances), chunk):
        part = instances[i : i + chunk]
        coords, demand = instance_tensors(part, torch.float64)
        ro = run_policy(agent, kind, coords, demand, greedy=True)
        out.extend(s.with_length(inst) for s, inst in zip(ro.solutions(kind), part))
    return out


@torch.no_grad()
def sample_solutions(agent: Agent, instance: ProblemInstance, k: int, generator: torch.Generator) -> list[Solution]:
    """``k`` independent stochastic rollouts, in draw order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    coords, demand = _single(instance)
    dtype = agent.log_alpha.dtype
    cache = agent.policy.encode(coords.to(dtype), None if demand is None else demand.to(dtype))
    rows = torch.zeros(k, dtype=torch.long)
    ro = run_policy(
        agent,
        instance.kind,
        coords.expand(k, -1, -1),
        None if demand is None else demand.expand(k, -1),
        generator=generator,
        cache=cache.index(rows),
    )
    return [s.with_length(instance) for s in ro.solutions(instance.kind)]


def sample_decode(agent: Agent, instance: ProblemInstance, k: int, generator: torch.Generator) -> Solution:
    """Best (shortest) of ``k`` sampled solutions."""
    return min(sample_solutions(agent, instance, k, generator), key=lambda s: s.length)


def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed)
    return g


# --- reference solvers -------------------------------------------------------


def exact_tsp(instance: ProblemInstance) -> Solution:
    """Held-Karp dynamic program over subsets of nodes 1..m-1, starting at node 0."""
    if instance.kind is not Kind.TSP:
        raise ValueError("exact_tsp needs a TSP instance")
    m = instance.num_nodes
    if m > HELD_KARP_MAX_N:
        raise ValueError(f"unsupported size {m} > {HELD_KARP_MAX_N} for Held-Karp")
    d = instance.distance_matrix()
    if m <= 3:
        sol = Solution(range(m))
        return sol.with_length(instance)
    k = m - 1  # nodes 1..k mapped to bits 0..k-1
    full = 1 << k
    cost = np.full((full, k), np.inf)
    parent = np.full((full, k), -1, dtype=np.int64)
    dk = d[1:, 1:]
    for j in range(k):
        cost[1 << j, j] = d[0, j + 1]
    for subset in range(1, full):
        members = [j for j in range(k) if subset >> j & 1]
        if len(members) < 2:
            continue
        members = np.array(members)
        prev = subset ^ (1 << members)  # subsets without each end node
        cand = cost[prev] + dk[:, members].T  # (len, k): end at member via each predecessor
        best = cand.argmin(axis=1)
        cost[subset, members] = cand[np.arange(len(members)), best]
        parent[subset, members] = best
    closing = cost[full - 1] + d[1:, 0]
    last = int(closing.argmin())
    tour = []
    subset = full - 1
    while last != -1:
        tour.append(last + 1)
        prev = int(parent[subset, last])
        subset ^= 1 << last
        last = prev
    return Solution([0] + tour[::-1]).with_length(instance)


def brute_force_tsp(instance: ProblemInstance) -> float:
    """Shortest cycle by enumerating every permutation with node 0 fixed."""
    best = math.inf
    rest = range(1, instance.num_nodes)
    for perm in itertools.permutations(rest):
        best = min(best, walk_length(instance.coords, (0,) + perm, closed=True))
    return best


def _nearest_policy(instance: ProblemInstance):
    d = instance.distance_matrix()

    def choose(state: env.ConstructionState, mask: np.ndarray) -> int:
        cand = mask.copy()
        if instance.kind.is_vrp:
            cand[0] = False
            if not cand.any():
                return 0
        here = 0 if state.current is None else state.current
        dist = np.where(cand, d[here], np.inf)
        return int(dist.argmin())

    return choose


def two_opt(instance: ProblemInstance, tour: Solution) -> Solution:
    """Improve a TSP tour by 2-edge exchanges until no exchange shortens it."""
    d = instance.distance_matrix()
    order = list(tour.visits)
    m = len(order)
    improved = True
    while improved:
        improved = False
        for i in range(m - 1):
            a, b = order[i], order[i + 1]
            js = np.arange(i + 2, m if i > 0 else m - 1)
            if js.size == 0:
                continue
            c = np.array([order[j] for j in js])
            e = np.array([order[(j + 1) % m] for j in js])
            delta = d[a, c] + d[b, e] - d[a, b] - d[c, e]
            j_best = int(delta.argmin())
            if delta[j_best] < -1e-12:
                j = int(js[j_best])
                order[i + 1 : j + 1] = reversed(order[i + 1 : j + 1])
                improved = True
    return Solution(order).with_length(instance)


def heuristic_baseline(instance: ProblemInstance, method: str = "nearest_neighbor") -> Solution:
    """Nearest-neighbour construction (capacity-aware for VRP) or 2-opt from it (TSP)."""
    if method == "nearest_neighbor":
        final, _ = env.rollout(instance, _nearest_policy(instance))
        return final.to_solution().with_length(instance)
    if method == "two_opt":
        if instance.kind is not Kind.TSP:
            raise ValueError("two_opt supports TSP only")
        return two_opt(instance, heuristic_baseline(instance, "nearest_neighbor"))
    raise ValueError(f"unknown method {method!r}")


def reference_solution(instance: ProblemInstance) -> tuple[Solution, str]:
    """Best available reference and its label."""
    if instance.kind is Kind.TSP:
        if instance.num_nodes <= HELD_KARP_MAX_N:
            return exact_tsp(instance), "exact"
        return heuristic_baseline(instance, "two_opt"), "two_opt"
    if instance.kind is Kind.SDVRP:
        # a CVRP walk is always SDVRP-feasible: an upper bound on the optimum
        as_cvrp = ProblemInstance(Kind.CVRP, instance.coords, instance.demands, instance.capacity_raw, instance.seed)
        walk = heuristic_baseline(as_cvrp, "nearest_neighbor")
        demand = instance.node_demands()
        sol = Solution(walk.visits, tuple(float(demand[v]) for v in walk.visits))
        return sol.with_length(instance), "cvrp_nearest_neighbor_upper_bound"
    return heuristic_baseline(instance, "nearest_neighbor"), "nearest_neighbor"


def optimality_gap(pred_len: float, ref_len: float) -> float:
    """Percentage excess of ``pred_len`` over ``ref_len``."""
    if not ref_len > 0 or not math.isfinite(ref_len):
        raise ValueError(f"reference length must be positive, got {ref_len}")
    return 100.0 * (pred_len / ref_len - 1.0)


# --- reports -----------------------------------------------------------------

REPORT_HEADER = ("instance_id", "kind", "n", "pred_len", "ref_len", "gap_pct", "decode_mode", "samples")


@dataclass(frozen=True)
class ReportRow:
    instance_id: int
    kind: str
    n: int
    pred_len: float
    ref_len: float
    gap_pct: float
    decode_mode: str
    samples: int


@dataclass
class EvalReport:
    rows: list[ReportRow]
    decode_mode: str
    samples: int
    seconds: float
    reference: str = ""
    mean_length: float = field(init=False)
    mean_gap: float = field(init=False)

    def __post_init__(self) -> None:
        self.mean_length = float(np.mean([r.pred_len for r in self.rows])) if self.rows else math.nan
        self.mean_gap = float(np.mean([r.gap_pct for r in self.rows])) if self.rows else math.nan

    def summary(self) -> str:
        return (
            f"decode={self.decode_mode} samples={self.samples} instances={len(self.rows)} "
            f"mean_length={self.mean_length:.4f} mean_gap={self.mean_gap:.2f}% "
            f"reference={self.reference} seconds={self.seconds:.2f}"
        )

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_HEADER)
            for r in self.rows:
                w.writerow([r.instance_id, r.kind, r.n, repr(r.pred_len), repr(r.ref_len), repr(r.gap_pct), r.decode_mode, r.samples])


def evaluate(
    agent: Agent,
    instances: list[ProblemInstance],
    decode: str = "greedy",
    k: int = 1280,
    seed: int = 0,
    references: Optional[list[float]] = None,
) -> EvalReport:
    """Decode every instance and compare with a reference length."""
    if decode not in ("greedy", "sample"):
        raise ValueError(f"unknown decode mode {decode!r}")
    agent.eval()
    labels = set()
    if references is None:
        references = []
        for inst in instances:
            sol, label = reference_solution(inst)
            references.append(sol.length)
            labels.add(label)
    tic = time.perf_counter()
    if decode == "greedy":
        preds = greedy_decode_batch(agent, instances)
        samples = 1
    else:
        g = make_generator(seed)
        preds = [sample_decode(agent, inst, k, g) for inst in instances]
        samples = k
    seconds = time.perf_counter() - tic
    rows = [
        ReportRow(i, inst.kind.value, inst.n, sol.length, ref, optimality_gap(sol.length, ref), decode, samples)
        for i, (inst, sol, ref) in enumerate(zip(instances, preds, references))
    ]
    return EvalReport(rows, decode, samples, seconds, ",".join(sorted(labels)) or "given")


__all__ = [
    "Rollout",
    "run_policy",
    "greedy_decode",
    "greedy_decode_batch",
    "sample_decode",
    "sample_solutions",
    "exact_tsp",
    "brute_force_tsp",
    "two_opt",
    "heuristic_baseline",
    "reference_solution",
    "optimality_gap",
    "EvalReport",
    "evaluate",
    "tour_length",
]
