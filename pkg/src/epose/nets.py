"""Graph-attention policy, value critic and twin Q critics.

The policy follows the encoder-decoder attention model: node embeddings from a
stack of multi-head attention layers (skip connection + batch norm around each
sublayer), and a decoder that attends from a context node to the nodes and
emits clipped, masked logits.

Q critics have their own encoders of the same shape as the policy encoder and
score every candidate node from a glimpse of the decoding context.
"""

from __future__ import annotations

import copy
import io
import json
import math
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .env import BatchState, ConstructionState
from .routing import Kind, ProblemInstance

CHECKPOINT_MAGIC = b"EPOSECKP"
Q_GROUPS = ("q1", "q2", "q1_target", "q2_target")


@dataclass(frozen=True)
class NetConfig:
    embed_dim: int = 128
    encoder_layers: int = 3
    heads: int = 8
    ff_dim: int = 512
    clip_c: float = 10.0
    critic_layers: int = 3
    critic_hidden: int = 128

    def __post_init__(self) -> None:
        for name in ("embed_dim", "encoder_layers", "heads", "ff_dim", "critic_layers", "critic_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if not self.clip_c > 0:
            raise ValueError("clip_c must be positive")


def _init_uniform(module: nn.Module) -> None:
    for sub in module.modules():
        if isinstance(sub, nn.Linear):
            bound = 1.0 / math.sqrt(sub.in_features)
            nn.init.uniform_(sub.weight, -bound, bound)
            if sub.bias is not None:
                nn.init.uniform_(sub.bias, -bound, bound)


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim, bias=False)
        self.out = nn.Linear(dim, dim, bias=False)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        B, m, d = h.shape
        q, k, v = self.qkv(h).view(B, m, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d // self.heads), dim=-1)
        return self.out((attn @ v).transpose(1, 2).reshape(B, m, d))


class BatchNorm(nn.Module):
    """Batch norm over every node of every instance in the batch."""

    def __init__(self, dim: int):
        super().__init__()
        self.bn = nn.BatchNorm1d(dim, affine=True, momentum=0.1)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.bn(h.reshape(-1, h.shape[-1])).view(h.shape)


class AttentionLayer(nn.Module):
    def __init__(self, dim: int, heads: int, ff_dim: int):
        super().__init__()
        self.mha = MultiHeadAttention(dim, heads)
        self.norm1 = BatchNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_dim), nn.ReLU(), nn.Linear(ff_dim, dim))
        self.norm2 = BatchNorm(dim)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        h = self.norm1(h + self.mha(h))
        return self.norm2(h + self.ff(h))


class GraphEncoder(nn.Module):
    """Initial projections plus ``layers`` attention layers.

    VRP kinds embed the depot with its own projection and feed the demand as a
    third customer feature.
    """

    def __init__(self, kind: Kind, cfg: NetConfig, layers: Optional[int] = None):
        super().__init__()
        self.kind = kind
        d = cfg.embed_dim
        if kind.is_vrp:
            self.init_depot = nn.Linear(2, d)
            self.init_node = nn.Linear(3, d)
        else:
            self.init_node = nn.Linear(2, d)
        n_layers = cfg.encoder_layers if layers is None else layers
        self.layers = nn.ModuleList(AttentionLayer(d, cfg.heads, cfg.ff_dim) for _ in range(n_layers))

    def forward(self, coords: torch.Tensor, demand: Optional[torch.Tensor] = None) -> tuple[torch.Tensor, torch.Tensor]:
        if self.kind.is_vrp:
            depot = self.init_depot(coords[:, :1])
            feats = torch.cat([coords[:, 1:], demand[:, 1:, None]], dim=-1)
            h = torch.cat([depot, self.init_node(feats)], dim=1)
        else:
            h = self.init_node(coords)
        for layer in self.layers:
            h = layer(h)
        return h, h.mean(dim=1)


@dataclass
class DecoderCache:
    embeddings: torch.Tensor  # (B, m, d)
    graph: torch.Tensor  # (B, d)
    fixed: torch.Tensor  # (B, d)
    glimpse_k: torch.Tensor
    glimpse_v: torch.Tensor
    logit_k: torch.Tensor

    def index(self, rows: torch.Tensor) -> "DecoderCache":
        return DecoderCache(*(getattr(self, f)[rows] for f in self.__dataclass_fields__))


class ContextAttention(nn.Module):
    """Context query for the decoder and Q heads, followed by one glimpse."""

    def __init__(self, kind: Kind, cfg: NetConfig):
        super().__init__()
        d = cfg.embed_dim
        self.kind = kind
        self.heads = cfg.heads
        self.project_fixed = nn.Linear(d, d, bias=False)
        self.project_node = nn.Linear(d, 3 * d, bias=False)
        if kind.is_vrp:
            self.project_step = nn.Linear(d + 1, d, bias=False)
        else:
            self.project_step = nn.Linear(2 * d, d, bias=False)
            self.placeholder = nn.Parameter(torch.empty(2 * d).uniform_(-1, 1))
        self.project_out = nn.Linear(d, d, bias=False)

    def precompute(self, h: torch.Tensor, graph: torch.Tensor) -> DecoderCache:
        gk, gv, lk = self.project_node(h).chunk(3, dim=-1)
        return DecoderCache(h, graph, self.project_fixed(graph), gk, gv, lk)

    def step_context(self, cache: DecoderCache, state: BatchState) -> torch.Tensor:
        h = cache.embeddings
        rows = torch.arange(h.shape[0], device=h.device)
        if self.kind.is_vrp:
            cap = state.remaining_capacity.to(h.dtype)[:, None]
            return torch.cat([h[rows, state.current], cap], dim=-1)
        ctx = torch.cat([h[rows, state.first], h[rows, state.current]], dim=-1)
        start = (state.t == 0)[:, None]
        return torch.where(start, self.placeholder.expand_as(ctx), ctx)

    def glimpse(self, cache: DecoderCache, state: BatchState, mask: torch.Tensor) -> torch.Tensor:
        B, m, d = cache.embeddings.shape
        dk = d // self.heads
        q = cache.fixed + self.project_step(self.step_context(cache, state))
        qh = q.view(B, self.heads, 1, dk)
        kh = cache.glimpse_k.view(B, m, self.heads, dk).transpose(1, 2)
        vh = cache.glimpse_v.view(B, m, self.heads, dk).transpose(1, 2)
        compat = (qh @ kh.transpose(-1, -2)) / math.sqrt(dk)
        compat = compat.masked_fill(~mask[:, None, None, :], float("-inf"))
        heads = torch.softmax(compat, dim=-1) @ vh
        return self.project_out(heads.reshape(B, d))


class PolicyNet(nn.Module):
    def __init__(self, kind: Kind, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = GraphEncoder(kind, cfg)
        self.decoder = ContextAttention(kind, cfg)

    def encode(self, coords: torch.Tensor, demand: Optional[torch.Tensor] = None) -> DecoderCache:
        h, graph = self.encoder(coords, demand)
        return self.decoder.precompute(h, graph)

    def logits(self, cache: DecoderCache, state: BatchState, mask: torch.Tensor) -> torch.Tensor:
        """Clipped compatibilities ``C * tanh(q.k / sqrt(d))`` before masking."""
        g = self.decoder.glimpse(cache, state, mask)
        u = (g[:, None, :] * cache.logit_k).sum(-1) / math.sqrt(g.shape[-1])
        return self.cfg.clip_c * torch.tanh(u)

    def log_probs(self, cache: DecoderCache, state: BatchState, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        if mask is None:
            mask = state.mask()
        if not bool(mask.any(dim=1).all()):
            raise ValueError("every row needs at least one feasible action")
        u = self.logits(cache, state, mask).masked_fill(~mask, float("-inf"))
        return torch.log_softmax(u, dim=-1)


class ValueCritic(nn.Module):
    """State value from critic attention layers over the policy's node embeddings."""

    def __init__(self, kind: Kind, cfg: NetConfig):
        super().__init__()
        d = cfg.embed_dim
        self.kind = kind
        self.visited_embed = nn.Parameter(torch.empty(d).uniform_(-1 / math.sqrt(d), 1 / math.sqrt(d)))
        self.capacity_embed = nn.Parameter(torch.empty(d).uniform_(-1 / math.sqrt(d), 1 / math.sqrt(d)))
        self.layers = nn.ModuleList(AttentionLayer(d, cfg.heads, cfg.ff_dim) for _ in range(cfg.critic_layers))
        self.head = nn.Sequential(nn.Linear(d, cfg.critic_hidden), nn.ReLU(), nn.Linear(cfg.critic_hidden, 1))

    def forward(self, embeddings: torch.Tensor, state: BatchState) -> torch.Tensor:
        h = embeddings + state.visited.to(embeddings.dtype)[..., None] * self.visited_embed
        for layer in self.layers:
            h = layer(h)
        pooled = h.mean(dim=1)
        if self.kind.is_vrp:
            pooled = pooled + state.remaining_capacity.to(h.dtype)[:, None] * self.capacity_embed
        return self.head(pooled).squeeze(-1)


class QCritic(nn.Module):
    """Q(s, a) for every node a, from an independent encoder and a context glimpse."""

    def __init__(self, kind: Kind, cfg: NetConfig):
        super().__init__()
        d = cfg.embed_dim
        self.encoder = GraphEncoder(kind, cfg)
        self.context = ContextAttention(kind, cfg)
        self.project_context = nn.Linear(d, cfg.critic_hidden)
        self.project_candidate = nn.Linear(d, cfg.critic_hidden, bias=False)
        self.score = nn.Linear(cfg.critic_hidden, 1)

    def encode(self, coords: torch.Tensor, demand: Optional[torch.Tensor] = None) -> DecoderCache:
        h, graph = self.encoder(coords, demand)
        return self.context.precompute(h, graph)

    def forward(self, cache: DecoderCache, state: BatchState, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """(B, m) Q values; entries where ``mask`` is false are meaningless."""
        if mask is None:
            mask = state.mask()
        g = self.context.glimpse(cache, state, mask)
        hidden = torch.relu(self.project_context(g)[:, None, :] + self.project_candidate(cache.embeddings))
        return self.score(hidden).squeeze(-1)


class Agent(nn.Module):
    """Every trainable parameter group: policy, value critic, twin Q critics, their targets, log-temperature."""

    def __init__(self, kind: Kind | str, cfg: NetConfig = NetConfig(), log_alpha: float = 0.0, seed: Optional[int] = None):
        super().__init__()
        self.kind = Kind.parse(kind)
        self.cfg = cfg
        if seed is not None:
            torch.manual_seed(seed)
        self.policy = PolicyNet(self.kind, cfg)
        self.critic = ValueCritic(self.kind, cfg)
        self.q1 = QCritic(self.kind, cfg)
        self.q2 = QCritic(self.kind, cfg)
        _init_uniform(self)
        self.q1_target = copy.deepcopy(self.q1)
        self.q2_target = copy.deepcopy(self.q2)
        for p in list(self.q1_target.parameters()) + list(self.q2_target.parameters()):
            p.requires_grad_(False)
        self.log_alpha = nn.Parameter(torch.tensor(float(log_alpha)))

    @property
    def alpha(self) -> torch.Tensor:
        return self.log_alpha.exp()

    def q_group(self, which: str) -> QCritic:
        if which not in Q_GROUPS:
            raise ValueError(f"unknown Q group {which!r}; expected one of {Q_GROUPS}")
        return getattr(self, which)

    def hard_copy_targets(self) -> None:
        self.q1_target.load_state_dict(self.q1.state_dict())
        self.q2_target.load_state_dict(self.q2.state_dict())


def instance_tensors(instances: list[ProblemInstance], dtype=torch.float32) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
    coords = torch.from_numpy(np.stack([i.coords for i in instances])).to(dtype)
    if not instances[0].kind.is_vrp:
        return coords, None
    demand = torch.from_numpy(np.stack([i.node_demands() for i in instances])).to(dtype)
    return coords, demand


def batch_from_state(state: ConstructionState) -> BatchState:
    """Lift one reference state into a batch of size 1."""
    inst = state.instance
    coords, demand = instance_tensors([inst], torch.float64)
    first = state.first if state.first is not None else 0
    current = state.current if state.current is not None else 0
    return BatchState(
        kind=inst.kind,
        coords=coords,
        demand=demand if demand is not None else torch.zeros(1, inst.num_nodes, dtype=torch.float64),
        visited=torch.from_numpy(state.visited.copy())[None],
        remaining_demand=torch.from_numpy(state.remaining_demand.copy())[None],
        remaining_capacity=torch.tensor([state.remaining_capacity], dtype=torch.float64),
        first=torch.tensor([first]),
        current=torch.tensor([current]),
        t=torch.tensor([state.t]),
        done=torch.tensor([state.terminal]),
    )


def _dtype(agent: Agent) -> torch.dtype:
    return agent.log_alpha.dtype


# --- single-instance conveniences -------------------------------------------


def encode(agent: Agent, instance: ProblemInstance) -> tuple[torch.Tensor, torch.Tensor]:
    """Node embeddings (m, d) and graph embedding (d,) of one instance."""
    coords, demand = instance_tensors([instance], _dtype(agent))
    h, graph = agent.policy.encoder(coords, demand)
    return h[0], graph[0]


def decode_step(agent: Agent, instance: ProblemInstance, state: ConstructionState) -> torch.Tensor:
    """Log-probabilities over all nodes for one state (masked nodes are -inf)."""
    if state.terminal:
        raise ValueError("cannot decode from a terminal state")
    coords, demand = instance_tensors([instance], _dtype(agent))
    cache = agent.policy.encode(coords, demand)
    return agent.policy.log_probs(cache, batch_from_state(state))[0]


def critic_value(agent: Agent, instance: ProblemInstance, state: ConstructionState) -> torch.Tensor:
    coords, demand = instance_tensors([instance], _dtype(agent))
    cache = agent.policy.encode(coords, demand)
    return agent.critic(cache.embeddings.detach(), batch_from_state(state))[0]


def q_values(agent: Agent, instance: ProblemInstance, state: ConstructionState, which: str) -> torch.Tensor:
    """Q(s, a) for the feasible actions of ``state``, in node order."""
    if state.terminal:
        raise ValueError("no Q values in a terminal state")
    group = agent.q_group(which)
    coords, demand = instance_tensors([instance], _dtype(agent))
    bstate = batch_from_state(state)
    mask = bstate.mask()
    q = group(group.encode(coords, demand), bstate, mask)
    return q[0][mask[0]]


# --- checkpoint container ---------------------------------------------------


def _entries(agent: Agent) -> list[tuple[str, torch.Tensor]]:
    return [(k, v) for k, v in agent.state_dict().items() if not k.endswith("num_batches_tracked")]


def save_checkpoint(agent: Agent, path: str | Path, meta: Optional[dict] = None) -> None:
    """Header of (name, rank, dims) followed by little-endian float32 payload; atomic replace."""
    entries = _entries(agent)
    header = {
        "format": "epose-checkpoint",
        "version": 1,
        "kind": agent.kind.value,
        "config": asdict(agent.cfg),
        "log_alpha": float(agent.log_alpha.detach()),
        "meta": meta or {},
        "entries": [{"name": k, "rank": v.dim(), "dims": list(v.shape)} for k, v in entries],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    for _, v in entries:
        buf.write(v.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str | Path) -> tuple[Agent, dict]:
    """Returns (agent in eval mode, header)."""
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off : off + hlen].decode("utf-8"))
    off += hlen
    agent = Agent(header["kind"], NetConfig(**header["config"]))
    state = agent.state_dict()
    for entry in header["entries"]:
        dims = entry["dims"]
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(dims)
        off += 4 * count
        if entry["name"] not in state:
            raise CheckpointError(f"unexpected entry {entry['name']}")
        state[entry["name"]] = torch.from_numpy(arr.copy())
    if off != len(data):
        raise CheckpointError(f"{path}: trailing or missing payload bytes")
    agent.load_state_dict(state)
    agent.eval()
    return agent, header
