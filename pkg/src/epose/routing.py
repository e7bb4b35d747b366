"""Routing problem instances, solutions and their evaluation.

Node layout convention: for CVRP/SDVRP the depot is node 0 and customers are
nodes 1..n; for TSP all m nodes are cities.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

# Table of vehicle capacities per problem size (n = number of customers).
CAPACITY_THRESHOLDS = ((20, 30), (50, 40))
CAPACITY_LARGE = 50
MAX_RAW_DEMAND = 9

DEMAND_TOL = 1e-9


class Kind(str, enum.Enum):
    TSP = "tsp"
    CVRP = "cvrp"
    SDVRP = "sdvrp"

    @property
    def is_vrp(self) -> bool:
        return self is not Kind.TSP

    @classmethod
    def parse(cls, value: "Kind | str") -> "Kind":
        if isinstance(value, Kind):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown problem kind {value!r}") from None


def capacity_for(n: int) -> int:
    """Raw vehicle capacity for an instance with ``n`` customers."""
    for limit, cap in CAPACITY_THRESHOLDS:
        if n <= limit:
            return cap
    return CAPACITY_LARGE


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    """A routing instance.

    ``coords`` holds every node, depot first for the VRP kinds. ``demands``
    holds the normalised customer demands only (length ``m - 1``); the depot
    has no demand entry.
    """

    kind: Kind
    coords: np.ndarray
    demands: Optional[np.ndarray] = None
    capacity_raw: Optional[int] = None
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", Kind.parse(self.kind))
        coords = _frozen(self.coords)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ValueError(f"coords must have shape (m, 2), got {coords.shape}")
        if not np.all((coords >= 0.0) & (coords <= 1.0)):
            raise ValueError("coordinates must lie in [0, 1]^2")
        object.__setattr__(self, "coords", coords)
        if self.kind.is_vrp:
            if self.demands is None or self.capacity_raw is None:
                raise ValueError(f"{self.kind.value} instance needs demands and capacity")
            demands = _frozen(self.demands)
            if demands.shape != (coords.shape[0] - 1,):
                raise ValueError("need one demand per customer")
            if coords.shape[0] < 2:
                raise ValueError("VRP instance needs a depot and at least one customer")
            if not np.all((demands > 0.0) & (demands <= 1.0)):
                raise ValueError("normalised demands must lie in (0, 1]")
            object.__setattr__(self, "demands", demands)
            object.__setattr__(self, "capacity_raw", int(self.capacity_raw))
        else:
            if self.demands is not None or self.capacity_raw is not None:
                raise ValueError("TSP instances carry no demands or capacity")
            if coords.shape[0] < 2:
                raise ValueError("TSP instance needs at least 2 nodes")

    @property
    def num_nodes(self) -> int:
        return self.coords.shape[0]

    @property
    def n(self) -> int:
        """Problem size: cities for TSP, customers for the VRP kinds."""
        return self.num_nodes - 1 if self.kind.is_vrp else self.num_nodes

    @property
    def capacity(self) -> Optional[float]:
        return 1.0 if self.kind.is_vrp else None

    @property
    def depot(self) -> Optional[int]:
        return 0 if self.kind.is_vrp else None

    def node_demands(self) -> np.ndarray:
        """Demand per node with a zero for the depot (zeros for TSP)."""
        if not self.kind.is_vrp:
            return np.zeros(self.num_nodes)
        return np.concatenate([[0.0], self.demands])

    def distance_matrix(self) -> np.ndarray:
        diff = self.coords[:, None, :] - self.coords[None, :, :]
        return np.sqrt((diff**2).sum(-1))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ProblemInstance):
            return NotImplemented
        same_demands = (self.demands is None and other.demands is None) or (
            self.demands is not None
            and other.demands is not None
            and np.array_equal(self.demands, other.demands)
        )
        return (
            self.kind is other.kind
            and self.seed == other.seed
            and self.capacity_raw == other.capacity_raw
            and np.array_equal(self.coords, other.coords)
            and same_demands
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class Solution:
    """An ordered visit sequence.

    VRP walks start and end at the depot (node 0). ``deliveries`` is only
    set for SDVRP and has one entry per visit (0 for depot visits).
    """

    visits: tuple[int, ...]
    deliveries: Optional[tuple[float, ...]] = None
    length: Optional[float] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "visits", tuple(int(v) for v in self.visits))
        if self.deliveries is not None:
            object.__setattr__(self, "deliveries", tuple(float(d) for d in self.deliveries))

    def with_length(self, instance: ProblemInstance) -> "Solution":
        return Solution(self.visits, self.deliveries, tour_length(instance, self))


@dataclass(frozen=True)
class Validation:
    ok: bool
    message: str = ""
    position: Optional[int] = None

    def __bool__(self) -> bool:
        return self.ok


class InvalidSolution(ValueError):
    def __init__(self, report: Validation):
        where = "" if report.position is None else f" (at position {report.position})"
        super().__init__(f"{report.message}{where}")
        self.report = report


def _fail(message: str, position: Optional[int] = None) -> Validation:
    return Validation(False, message, position)


def validate_solution(instance: ProblemInstance, solution: Solution) -> Validation:
    """Check every solution invariant; report the first violation."""
    visits = solution.visits
    m = instance.num_nodes
    for pos, v in enumerate(visits):
        if not 0 <= v < m:
            return _fail(f"node {v} out of range", pos)

    if instance.kind is Kind.TSP:
        if solution.deliveries is not None:
            return _fail("TSP solutions carry no deliveries")
        seen: set[int] = set()
        for pos, v in enumerate(visits):
            if v in seen:
                return _fail(f"node {v} repeated", pos)
            seen.add(v)
        if len(seen) != m:
            missing = min(set(range(m)) - seen)
            return _fail(f"node {missing} not visited")
        return Validation(True)

    if len(visits) < 3 or visits[0] != 0 or visits[-1] != 0:
        return _fail("walk must start and end at the depot", 0 if not visits or visits[0] != 0 else len(visits) - 1)
    for pos in range(1, len(visits)):
        if visits[pos] == 0 and visits[pos - 1] == 0:
            return _fail("consecutive depot visits", pos)

    demands = instance.node_demands()
    if instance.kind is Kind.CVRP:
        if solution.deliveries is not None:
            return _fail("CVRP solutions carry no deliveries")
        seen = set()
        load, segment = 0.0, 0
        for pos, v in enumerate(visits[1:], start=1):
            if v == 0:
                segment += 1
                load = 0.0
                continue
            if v in seen:
                return _fail(f"node {v} repeated", pos)
            seen.add(v)
            load += demands[v]
            if load > 1.0 + DEMAND_TOL:
                return _fail(f"capacity exceeded in segment {segment}", pos)
        if len(seen) != m - 1:
            missing = min(set(range(1, m)) - seen)
            return _fail(f"node {missing} not visited")
        return Validation(True)

    # SDVRP
    deliveries = solution.deliveries
    if deliveries is None or len(deliveries) != len(visits):
        return _fail("SDVRP solutions need one delivery per visit")
    served = np.zeros(m)
    load, segment = 0.0, 0
    for pos, (v, amount) in enumerate(zip(visits, deliveries)):
        if v == 0:
            if amount != 0.0:
                return _fail("depot visits deliver nothing", pos)
            if pos > 0:
                segment += 1
                load = 0.0
            continue
        if not amount > 0.0:
            return _fail(f"non-positive delivery to node {v}", pos)
        served[v] += amount
        if served[v] > demands[v] + DEMAND_TOL:
            return _fail(f"node {v} over-served", pos)
        load += amount
        if load > 1.0 + DEMAND_TOL:
            return _fail(f"capacity exceeded in segment {segment}", pos)
    short = np.flatnonzero(np.abs(served[1:] - demands[1:]) > DEMAND_TOL)
    if short.size:
        return _fail(f"demand of node {int(short[0]) + 1} not met")
    return Validation(True)


def walk_length(coords: np.ndarray, visits: Sequence[int], closed: bool) -> float:
    """Sum of Euclidean edge lengths along ``visits`` (plus the closing edge)."""
    pts = coords[np.asarray(visits, dtype=np.int64)]
    if closed:
        pts = np.concatenate([pts, pts[:1]])
    seg = np.diff(pts, axis=0)
    return float(np.sqrt((seg**2).sum(-1)).sum())


def tour_length(instance: ProblemInstance, solution: Solution) -> float:
    """Length of a TSP cycle or a depot-anchored VRP walk.

    Raises InvalidSolution naming the first violated constraint.
    """
    report = validate_solution(instance, solution)
    if not report:
        raise InvalidSolution(report)
    return walk_length(instance.coords, solution.visits, closed=instance.kind is Kind.TSP)


def _child_seed(seed: int, index: int) -> int:
    state = np.random.SeedSequence([seed & (2**64 - 1), index]).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def generate_instance(kind: Kind | str, n: int, seed: int) -> ProblemInstance:
    """Sample an instance: uniform coordinates, integer demands in 1..9."""
    kind = Kind.parse(kind)
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    rng = np.random.default_rng(seed)
    if kind is Kind.TSP:
        return ProblemInstance(kind, rng.random((n, 2)), seed=seed)
    cap = capacity_for(n)
    depot = rng.random((1, 2))
    coords = rng.random((n, 2))
    raw = rng.integers(1, MAX_RAW_DEMAND + 1, size=n)
    return ProblemInstance(
        kind, np.concatenate([depot, coords]), demands=raw / cap, capacity_raw=cap, seed=seed
    )


def generate_dataset(kind: Kind | str, n: int, count: int, seed: int) -> list[ProblemInstance]:
    """``count`` instances with per-instance seeds derived from ``seed``."""
    return [generate_instance(kind, n, _child_seed(seed, i)) for i in range(count)]


# --- line-delimited instance files -----------------------------------------


class InstanceFileError(ValueError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


def instance_to_record(inst: ProblemInstance) -> dict:
    record: dict = {"kind": inst.kind.value, "n": inst.n, "seed": inst.seed}
    if inst.kind.is_vrp:
        record["coords"] = inst.coords[1:].ravel().tolist()
        record["depot_coord"] = inst.coords[0].tolist()
        record["demands"] = inst.demands.tolist()
        record["capacity_raw"] = inst.capacity_raw
    else:
        record["coords"] = inst.coords.ravel().tolist()
    return record


def instance_from_record(record: dict) -> ProblemInstance:
    kind = Kind.parse(record["kind"])
    n = int(record["n"])
    coords = np.asarray(record["coords"], dtype=np.float64)
    if coords.size != 2 * n:
        raise ValueError(f"expected {2 * n} coordinate values, got {coords.size}")
    coords = coords.reshape(n, 2)
    if kind.is_vrp:
        depot = np.asarray(record["depot_coord"], dtype=np.float64).reshape(1, 2)
        demands = np.asarray(record["demands"], dtype=np.float64)
        return ProblemInstance(
            kind,
            np.concatenate([depot, coords]),
            demands=demands,
            capacity_raw=int(record["capacity_raw"]),
            seed=int(record["seed"]),
        )
    return ProblemInstance(kind, coords, seed=int(record["seed"]))


def write_instances(path: str | Path, instances: Iterable[ProblemInstance]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            # repr-based float output round-trips exactly (17 significant digits max)
            fh.write(json.dumps(instance_to_record(inst), separators=(",", ":")))
            fh.write("\n")


def read_instances(path: str | Path) -> list[ProblemInstance]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                if not isinstance(record, dict):
                    raise ValueError("expected a JSON object")
                out.append(instance_from_record(record))
            except (ValueError, KeyError, TypeError) as exc:
                raise InstanceFileError(line_no, str(exc)) from exc
    return out

