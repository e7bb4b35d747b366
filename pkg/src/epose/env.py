"""Sequential construction MDP for TSP, CVRP and SDVRP.

Two implementations share the same semantics:

* ``reset`` / ``feasible_mask`` / ``step`` operate on one immutable
  :class:`ConstructionState` and are the reference implementation.
* :class:`BatchState` runs B episodes at once on torch tensors and is what
  training and decoding use.

Rewards are negative incremental distances, so the undiscounted episode
return equals minus the solution length. For TSP the closing edge back to
the first node is folded into the final step's reward.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import torch

from .routing import Kind, ProblemInstance, Solution

CAPACITY_TOL = 1e-12


class TerminalStateError(ValueError):
    """Raised when asking for actions in a finished episode."""


class InfeasibleAction(ValueError):
    """Raised by ``step`` for an action the mask forbids."""


@dataclass(frozen=True)
class ConstructionState:
    instance: ProblemInstance
    sequence: tuple[int, ...]
    visited: np.ndarray
    current: Optional[int]
    remaining_capacity: float
    remaining_demand: np.ndarray
    deliveries: tuple[float, ...]
    t: int
    terminal: bool

    @property
    def first(self) -> Optional[int]:
        return self.sequence[0] if self.sequence else None

    def to_solution(self) -> Solution:
        if not self.terminal:
            raise ValueError("episode has not finished")
        if self.instance.kind is Kind.TSP:
            return Solution(self.sequence)
        visits = (0,) + self.sequence
        if self.instance.kind is Kind.SDVRP:
            return Solution(visits, (0.0,) + self.deliveries)
        return Solution(visits)


def _ro(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def reset(instance: ProblemInstance) -> ConstructionState:
    m = instance.num_nodes
    is_vrp = instance.kind.is_vrp
    return ConstructionState(
        instance=instance,
        sequence=(),
        visited=_ro(np.zeros(m, dtype=bool)),
        current=0 if is_vrp else None,
        remaining_capacity=1.0 if is_vrp else 0.0,
        remaining_demand=_ro(instance.node_demands().copy()),
        deliveries=(),
        t=0,
        terminal=False,
    )


def feasible_mask(state: ConstructionState) -> np.ndarray:
    if state.terminal:
        raise TerminalStateError("no feasible actions in a terminal state")
    kind = state.instance.kind
    if kind is Kind.TSP:
        return ~state.visited
    if kind is Kind.CVRP:
        demand = state.instance.node_demands()
        mask = ~state.visited & (demand <= state.remaining_capacity + CAPACITY_TOL)
    else:
        mask = (state.remaining_demand > 0.0) & (state.remaining_capacity > 0.0)
    mask[0] = state.current != 0
    return mask


def _explain(state: ConstructionState, action: int) -> str:
    kind = state.instance.kind
    if kind.is_vrp and action == 0:
        if state.t == 0:
            return "depot cannot be the first action"
        return "depot visited at two consecutive steps"
    if kind is Kind.SDVRP:
        if state.remaining_demand[action] <= 0.0:
            return f"node {action} has no remaining demand"
        return "vehicle has no remaining capacity"
    if state.visited[action]:
        return f"node {action} already visited"
    return (
        f"demand {state.instance.node_demands()[action]:.6g} of node {action} exceeds "
        f"remaining capacity {state.remaining_capacity:.6g}"
    )


def step(state: ConstructionState, action: int) -> tuple[ConstructionState, float]:
    """Apply ``action``; returns the successor state and the step reward."""
    action = int(action)
    mask = feasible_mask(state)
    if not 0 <= action < mask.size:
        raise InfeasibleAction(f"node {action} out of range")
    if not mask[action]:
        raise InfeasibleAction(_explain(state, action))

    inst = state.instance
    coords = inst.coords
    if state.current is None:
        reward = 0.0
    else:
        reward = -float(np.linalg.norm(coords[action] - coords[state.current]))

    visited = state.visited.copy()
    remaining = state.remaining_demand.copy()
    capacity = state.remaining_capacity
    deliveries = state.deliveries

    if inst.kind is Kind.TSP:
        visited[action] = True
        terminal = bool(visited.all())
        if terminal:
            first = state.sequence[0] if state.sequence else action
            reward -= float(np.linalg.norm(coords[first] - coords[action]))
    else:
        if action == 0:
            capacity = 1.0
            delivered = 0.0
        elif inst.kind is Kind.CVRP:
            visited[action] = True
            delivered = remaining[action]
            remaining[action] = 0.0
            capacity = max(capacity - delivered, 0.0)
        else:
            delivered = min(remaining[action], capacity)
            remaining[action] -= delivered
            capacity -= delivered
            visited[action] = remaining[action] == 0.0
        if inst.kind is Kind.SDVRP:
            deliveries = deliveries + (float(delivered),)
        terminal = action == 0 and not np.any(remaining[1:] > 0.0)

    nxt = replace(
        state,
        sequence=state.sequence + (action,),
        visited=_ro(visited),
        current=action,
        remaining_capacity=float(capacity),
        remaining_demand=_ro(remaining),
        deliveries=deliveries,
        t=state.t + 1,
        terminal=bool(terminal),
    )
    return nxt, reward


def rollout(instance: ProblemInstance, policy) -> tuple[ConstructionState, float]:
    """Run ``policy(state, mask) -> action`` to termination; returns (final state, return)."""
    state = reset(instance)
    total = 0.0
    while not state.terminal:
        state, r = step(state, policy(state, feasible_mask(state)))
        total += r
    return state, total


def max_steps(kind: Kind, num_nodes: int) -> int:
    """Upper bound on episode length."""
    if kind is Kind.TSP:
        return num_nodes
    n = num_nodes - 1
    # each visit ends a route or fully serves a customer; CVRP needs at most 2n steps
    if kind is Kind.CVRP:
        return 2 * n
    # SDVRP: every customer visit either finishes the customer or empties the vehicle
    return 4 * n


# --- batched tensor implementation -----------------------------------------


@dataclass
class BatchState:
    """B episodes on tensors. Environment quantities are kept in float64."""

    kind: Kind
    coords: torch.Tensor  # (B, m, 2)
    demand: torch.Tensor  # (B, m), depot 0
    visited: torch.Tensor  # (B, m) bool
    remaining_demand: torch.Tensor  # (B, m)
    remaining_capacity: torch.Tensor  # (B,)
    first: torch.Tensor  # (B,) long
    current: torch.Tensor  # (B,) long
    t: torch.Tensor  # (B,) long
    done: torch.Tensor  # (B,) bool

    @classmethod
    def reset(cls, kind: Kind | str, coords: torch.Tensor, demand: Optional[torch.Tensor] = None) -> "BatchState":
        kind = Kind.parse(kind)
        coords = coords.to(torch.float64)
        B, m, _ = coords.shape
        if demand is None:
            demand = torch.zeros(B, m, dtype=torch.float64, device=coords.device)
        demand = demand.to(torch.float64)
        zeros = torch.zeros(B, dtype=torch.long, device=coords.device)
        return cls(
            kind=kind,
            coords=coords,
            demand=demand,
            visited=torch.zeros(B, m, dtype=torch.bool, device=coords.device),
            remaining_demand=demand.clone(),
            remaining_capacity=torch.ones(B, dtype=torch.float64, device=coords.device),
            first=zeros,
            current=zeros,
            t=zeros,
            done=torch.zeros(B, dtype=torch.bool, device=coords.device),
        )

    @classmethod
    def from_instances(cls, instances: list[ProblemInstance]) -> "BatchState":
        kind = instances[0].kind
        coords = torch.from_numpy(np.stack([i.coords for i in instances]))
        demand = torch.from_numpy(np.stack([i.node_demands() for i in instances]))
        return cls.reset(kind, coords, demand if kind.is_vrp else None)

    @property
    def batch_size(self) -> int:
        return self.coords.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.coords.shape[1]

    def all_done(self) -> bool:
        return bool(self.done.all())

    def mask(self) -> torch.Tensor:
        """Feasible actions (B, m). Finished rows allow only the dummy action 0."""
        if self.kind is Kind.TSP:
            mask = ~self.visited
        else:
            if self.kind is Kind.CVRP:
                mask = ~self.visited & (self.demand <= self.remaining_capacity[:, None] + CAPACITY_TOL)
            else:
                mask = (self.remaining_demand > 0.0) & (self.remaining_capacity[:, None] > 0.0)
            mask[:, 0] = self.current != 0
        if self.done.any():
            dummy = torch.zeros_like(mask)
            dummy[:, 0] = True
            mask = torch.where(self.done[:, None], dummy, mask)
        return mask

    def step(self, action: torch.Tensor) -> tuple["BatchState", torch.Tensor, torch.Tensor]:
        """Returns (next state, reward (B,), delivered amount (B,)). Finished rows are frozen."""
        B = self.batch_size
        rows = torch.arange(B, device=action.device)
        live = ~self.done
        here = self.coords[rows, self.current]
        there = self.coords[rows, action]
        dist = (there - here).norm(dim=-1)

        visited = self.visited.clone()
        remaining = self.remaining_demand.clone()
        capacity = self.remaining_capacity.clone()
        delivered = torch.zeros(B, dtype=torch.float64, device=action.device)
        first = self.first

        if self.kind is Kind.TSP:
            dist = torch.where(self.t == 0, torch.zeros_like(dist), dist)
            first = torch.where(self.t == 0, action, self.first)
            visited[rows, action] = visited[rows, action] | live
            done = visited.all(dim=1)
            closing = (self.coords[rows, first] - there).norm(dim=-1)
            dist = dist + torch.where(done & live, closing, torch.zeros_like(closing))
        else:
            at_depot = action == 0
            rem_here = remaining[rows, action]
            if self.kind is Kind.CVRP:
                delivered = torch.where(at_depot, delivered, rem_here)
                capacity = torch.where(at_depot, torch.ones_like(capacity), (capacity - delivered).clamp_min(0.0))
            else:
                delivered = torch.where(at_depot, delivered, torch.minimum(rem_here, capacity))
                capacity = torch.where(at_depot, torch.ones_like(capacity), capacity - delivered)
            delivered = torch.where(live, delivered, torch.zeros_like(delivered))
            capacity = torch.where(live, capacity, self.remaining_capacity)
            remaining[rows, action] = rem_here - delivered
            visited[rows, action] = visited[rows, action] | (live & ~at_depot & (remaining[rows, action] == 0.0))
            done = at_depot & ~(remaining[:, 1:] > 0.0).any(dim=1)

        reward = torch.where(live, -dist, torch.zeros_like(dist))
        nxt = BatchState(
            kind=self.kind,
            coords=self.coords,
            demand=self.demand,
            visited=visited,
            remaining_demand=remaining,
            remaining_capacity=capacity,
            first=torch.where(live, first, self.first),
            current=torch.where(live, action, self.current),
            t=self.t + live.long(),
            done=self.done | (live & done),
        )
        return nxt, reward, delivered

    def index(self, rows: torch.Tensor) -> "BatchState":
        return BatchState(
            kind=self.kind,
            coords=self.coords[rows],
            demand=self.demand[rows],
            visited=self.visited[rows],
            remaining_demand=self.remaining_demand[rows],
            remaining_capacity=self.remaining_capacity[rows],
            first=self.first[rows],
            current=self.current[rows],
            t=self.t[rows],
            done=self.done[rows],
        )


def replay_prefix(
    kind: Kind, coords: torch.Tensor, demand: Optional[torch.Tensor], actions: torch.Tensor, prefix: torch.Tensor
) -> BatchState:
    """Rebuild states by replaying the first ``prefix[b]`` actions of each row of ``actions``."""
    state = BatchState.reset(kind, coords, demand)
    steps = int(prefix.max()) if prefix.numel() else 0
    for t in range(steps):
        active = prefix > t
        if not bool(active.any()):
            break
        nxt, _, _ = state.step(actions[:, t])
        state = _select(active, nxt, state)
    return state


def _select(cond: torch.Tensor, a: BatchState, b: BatchState) -> BatchState:
    c1 = cond[:, None]
    return BatchState(
        kind=a.kind,
        coords=a.coords,
        demand=a.demand,
        visited=torch.where(c1, a.visited, b.visited),
        remaining_demand=torch.where(c1, a.remaining_demand, b.remaining_demand),
        remaining_capacity=torch.where(cond, a.remaining_capacity, b.remaining_capacity),
        first=torch.where(cond, a.first, b.first),
        current=torch.where(cond, a.current, b.current),
        t=torch.where(cond, a.t, b.t),
        done=torch.where(cond, a.done, b.done),
    )


def solutions_from_actions(
    kind: Kind, actions: np.ndarray, lengths: np.ndarray, delivered: Optional[np.ndarray] = None
) -> list[Solution]:
    """Convert padded per-row action records into Solutions."""
    out = []
    for b in range(actions.shape[0]):
        seq = actions[b, : lengths[b]].tolist()
        if kind is Kind.TSP:
            out.append(Solution(seq))
        elif kind is Kind.CVRP:
            out.append(Solution([0] + seq))
        else:
            out.append(Solution([0] + seq, [0.0] + delivered[b, : lengths[b]].tolist()))
    return out
