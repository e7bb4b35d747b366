"""Off-policy maximum-entropy training with automatic temperature tuning.

One iteration:

1. sample B fresh instances and roll out the stochastic policy;
2. push every transition to the replay buffer;
3. one gradient step on each twin Q critic from a replay batch;
4. one gradient step on the policy / value critic from the fresh rollouts;
5. one gradient step on the log-temperature (EPOSE mode only);
6. Polyak-average both target critics.

``OFFPOLICY_FIXED_ALPHA`` skips step 5 and uses the fixed temperature;
``ONPOLICY_FIXED_ENTROPY`` skips steps 2, 3 and 6 as well.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch

from .env import BatchState, replay_prefix
from .evaluation import Rollout, greedy_decode_batch, make_generator, masked_entropy, run_policy
from .nets import Agent, NetConfig, QCritic, save_checkpoint
from .replay import ReplayBuffer, Transition
from .routing import Kind, ProblemInstance, capacity_for, generate_dataset, MAX_RAW_DEMAND

log = logging.getLogger(__name__)

METRICS_HEADER = (
    "step", "epoch", "trajectories", "train_return", "val_greedy_len",
    "entropy", "alpha", "loss_q1", "loss_q2", "loss_pi",
)


class Mode(str, enum.Enum):
    EPOSE = "epose"
    OFFPOLICY_FIXED_ALPHA = "offpolicy-fixed"
    ONPOLICY_FIXED_ENTROPY = "onpolicy-fixed"

    @classmethod
    def parse(cls, value: "Mode | str") -> "Mode":
        if isinstance(value, Mode):
            return value
        for mode in cls:
            if str(value).lower() in (mode.value, mode.name.lower()):
                return mode
        raise ValueError(f"unknown mode {value!r}")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    kind: Kind = Kind.TSP
    n: int = 20
    epochs: int = 100
    steps_per_epoch: int = 2500
    batch_size: int = 512
    lr: float = 1e-4
    alpha_lr: Optional[float] = None  # defaults to lr
    eta: float = 0.005
    entropy_target_coef: float = 0.98
    fixed_alpha: float = 0.03
    init_log_alpha: Optional[float] = None  # defaults to log(fixed_alpha)
    mode: Mode = Mode.EPOSE
    seed: int = 0
    val_size: int = 10_000
    val_seed: int = 1_000_003
    replay_capacity: int = 1_000_000

    def __post_init__(self) -> None:
        self.kind = Kind.parse(self.kind)
        self.mode = Mode.parse(self.mode)
        if not 0.0 < self.eta < 1.0:
            raise ValueError("eta must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.n < 2:
            raise ValueError("n must be >= 2")
        if self.epochs < 1 or self.steps_per_epoch < 1:
            raise ValueError("epochs and steps_per_epoch must be >= 1")
        if self.val_size < 0:
            raise ValueError("val_size must be >= 0")

    @classmethod
    def for_problem(cls, kind: Kind | str, n: int, **kw) -> "TrainConfig":
        """Published batch sizes: 512, or 256 for CVRP with 100 nodes."""
        kind = Kind.parse(kind)
        kw.setdefault("batch_size", 256 if kind is Kind.CVRP and n >= 100 else 512)
        return cls(kind=kind, n=n, **kw)

    @property
    def alpha_learning_rate(self) -> float:
        return self.lr if self.alpha_lr is None else self.alpha_lr

    @property
    def start_log_alpha(self) -> float:
        return math.log(self.fixed_alpha) if self.init_log_alpha is None else self.init_log_alpha


# --- losses --------------------------------------------------------------------


@dataclass
class ReplayBatch:
    """Tensors for a batch of replayed transitions."""

    kind: Kind
    coords: torch.Tensor
    demand: Optional[torch.Tensor]
    state: BatchState
    next_state: BatchState
    action: torch.Tensor
    reward: torch.Tensor
    terminal: torch.Tensor

    @classmethod
    def from_transitions(cls, transitions: list[Transition]) -> "ReplayBatch":
        kind = transitions[0].episode.instance.kind
        instances = [t.episode.instance for t in transitions]
        coords = torch.from_numpy(np.stack([i.coords for i in instances]))
        demand = torch.from_numpy(np.stack([i.node_demands() for i in instances])) if kind.is_vrp else None
        T = max(len(t.episode.actions) for t in transitions)
        actions = torch.zeros(len(transitions), T, dtype=torch.long)
        for b, t in enumerate(transitions):
            actions[b, : len(t.episode.actions)] = torch.from_numpy(t.episode.actions.astype(np.int64))
        prefix = torch.tensor([t.step for t in transitions])
        action = torch.tensor([t.action for t in transitions])
        state = replay_prefix(kind, coords, demand, actions, prefix)
        nxt, _, _ = state.step(action)
        return cls(
            kind=kind,
            coords=coords,
            demand=demand,
            state=state,
            next_state=nxt,
            action=action,
            reward=torch.tensor([t.reward for t in transitions], dtype=torch.float64),
            terminal=torch.tensor([t.terminal for t in transitions]),
        )


def _features(agent: Agent, batch: ReplayBatch) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
    dtype = agent.log_alpha.dtype
    return batch.coords.to(dtype), None if batch.demand is None else batch.demand.to(dtype)


@torch.no_grad()
def soft_value(agent: Agent, batch: ReplayBatch, alpha: torch.Tensor) -> torch.Tensor:
    """Exact feasible-set expectation of min target Q minus alpha * log pi at the next state."""
    coords, demand = _features(agent, batch)
    nxt = batch.next_state
    mask = nxt.mask()
    logp = agent.policy.log_probs(agent.policy.encode(coords, demand), nxt, mask)
    q1 = agent.q1_target(agent.q1_target.encode(coords, demand), nxt, mask)
    q2 = agent.q2_target(agent.q2_target.encode(coords, demand), nxt, mask)
    inner = torch.minimum(q1, q2) - alpha * logp.masked_fill(~mask, 0.0)
    v = (logp.exp() * inner.masked_fill(~mask, 0.0)).sum(-1)
    return torch.where(batch.terminal, torch.zeros_like(v), v)


def q_targets(agent: Agent, batch: ReplayBatch, alpha: torch.Tensor) -> torch.Tensor:
    dtype = agent.log_alpha.dtype
    return batch.reward.to(dtype) + soft_value(agent, batch, alpha)


def q_prediction(critic: QCritic, agent: Agent, batch: ReplayBatch) -> torch.Tensor:
    coords, demand = _features(agent, batch)
    q = critic(critic.encode(coords, demand), batch.state)
    return q.gather(1, batch.action[:, None]).squeeze(1)


def compute_q_loss(critic: QCritic, agent: Agent, batch: ReplayBatch, targets: torch.Tensor) -> torch.Tensor:
    """Mean of 1/2 (Q(s_t, a_t) - q_t)^2; ``targets`` are treated as constants."""
    pred = q_prediction(critic, agent, batch)
    return 0.5 * ((pred - targets.detach()) ** 2).mean()


@dataclass
class PolicyLosses:
    policy: torch.Tensor  # entropy-regularised policy-gradient surrogate
    critic: torch.Tensor  # squared error of the baseline against the return
    baseline: torch.Tensor  # (N,) critic estimates at the start state


def compute_policy_loss(
    agent: Agent, rollout: Rollout, alpha: torch.Tensor | float, baseline: Optional[torch.Tensor] = None
) -> PolicyLosses:
    """-mean[(R - baseline) * log p(pi) + alpha * sum_t H_t], baseline detached.

    The value critic reads detached policy embeddings, so the critic
    regression only trains the critic's own layers. Passing ``baseline``
    skips the critic (useful to hold it fixed).
    """
    dtype = agent.log_alpha.dtype
    returns = rollout.returns.to(dtype)
    if baseline is None:
        baseline = agent.critic(rollout.cache.embeddings.detach(), rollout.start)
    advantage = returns - baseline.detach()
    seq_logp = rollout.log_probs.sum(dim=1)
    entropy = rollout.entropies.sum(dim=1)
    policy = -(advantage * seq_logp + alpha * entropy).mean()
    critic = ((baseline - returns) ** 2).mean()
    return PolicyLosses(policy, critic, baseline)


def target_entropy(num_feasible: torch.Tensor, coef: float = 0.98) -> torch.Tensor:
    """coef * ln|A| per step; zero where no choice exists."""
    return coef * torch.log(num_feasible.clamp_min(1).to(torch.float64))


def compute_alpha_loss(
    log_alpha: torch.Tensor, entropies: torch.Tensor, targets: torch.Tensor, live: torch.Tensor
) -> torch.Tensor:
    """alpha * mean over visited steps of (H_t - target_t).

    ``entropies`` are exact per-step policy entropies, i.e. the expectation
    of -log pi(a_t|s_t) over the feasible set.
    """
    gap = (entropies.detach().to(targets.dtype) - targets).masked_select(live)
    return (log_alpha.exp() * gap.to(log_alpha.dtype)).mean()


@torch.no_grad()
def soft_update(online: torch.nn.Module, target: torch.nn.Module, eta: float) -> None:
    """target <- eta * online + (1 - eta) * target, parameters and norm statistics alike."""
    online_state = online.state_dict()
    target_state = target.state_dict()
    if online_state.keys() != target_state.keys():
        raise ValueError("online and target groups differ in structure")
    for name, t in target_state.items():
        o = online_state[name]
        if o.shape != t.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(o.shape)} vs {tuple(t.shape)}")
        if t.is_floating_point():
            t.mul_(1.0 - eta).add_(o, alpha=eta)
        else:
            t.copy_(o)


# --- training loop --------------------------------------------------------------


@dataclass
class StepMetrics:
    step: int
    epoch: int
    trajectories: int
    train_return: float
    val_greedy_len: Optional[float]
    entropy: float
    alpha: float
    loss_q1: Optional[float]
    loss_q2: Optional[float]
    loss_pi: float
    entropy_target: float = math.nan

    def csv_row(self) -> list[str]:
        def fmt(x):
            return "" if x is None else repr(float(x))

        return [
            str(self.step), str(self.epoch), str(self.trajectories), fmt(self.train_return),
            fmt(self.val_greedy_len), fmt(self.entropy), fmt(self.alpha),
            fmt(self.loss_q1), fmt(self.loss_q2), fmt(self.loss_pi),
        ]


@dataclass
class TrainResult:
    agent: Agent
    history: list[StepMetrics]
    initial_val_len: Optional[float]
    replay: Optional[ReplayBuffer] = None
    validation: list[ProblemInstance] = field(default_factory=list)


def sample_batch(kind: Kind, n: int, batch_size: int, rng: np.random.Generator) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
    """B fresh instances as tensors, same distribution as ``generate_instance``."""
    if kind is Kind.TSP:
        return torch.from_numpy(rng.random((batch_size, n, 2))), None
    coords = torch.from_numpy(rng.random((batch_size, n + 1, 2)))
    raw = rng.integers(1, MAX_RAW_DEMAND + 1, size=(batch_size, n))
    demand = np.concatenate([np.zeros((batch_size, 1)), raw / capacity_for(n)], axis=1)
    return coords, torch.from_numpy(demand)


def _instances_from_tensors(kind: Kind, coords: torch.Tensor, demand: Optional[torch.Tensor]) -> list[ProblemInstance]:
    c = coords.numpy()
    if kind is Kind.TSP:
        return [ProblemInstance(kind, c[b]) for b in range(c.shape[0])]
    d = demand.numpy()
    cap = capacity_for(c.shape[1] - 1)
    return [ProblemInstance(kind, c[b], demands=d[b, 1:], capacity_raw=cap) for b in range(c.shape[0])]


def _finite(name: str, value: torch.Tensor, step: int) -> float:
    v = float(value.detach())
    if not math.isfinite(v):
        raise TrainingDiverged(f"non-finite {name} ({v}) at step {step}")
    return v


@torch.no_grad()
def validation_length(agent: Agent, instances: list[ProblemInstance]) -> float:
    was_training = agent.training
    agent.eval()
    try:
        sols = greedy_decode_batch(agent, instances)
    finally:
        agent.train(was_training)
    return float(np.mean([s.length for s in sols]))


class Trainer:
    def __init__(self, config: TrainConfig, net_config: NetConfig = NetConfig(), dtype: torch.dtype = torch.float32):
        self.config = config
        self.net_config = net_config
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            self.agent = Agent(config.kind, net_config, log_alpha=config.start_log_alpha)
        self.agent.to(dtype)
        self.agent.train()
        agent = self.agent
        self.opt_policy = torch.optim.Adam(
            list(agent.policy.parameters()) + list(agent.critic.parameters()), lr=config.lr, betas=(0.9, 0.999), eps=1e-8
        )
        self.opt_q1 = torch.optim.Adam(agent.q1.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8)
        self.opt_q2 = torch.optim.Adam(agent.q2.parameters(), lr=config.lr, betas=(0.9, 0.999), eps=1e-8)
        self.opt_alpha = torch.optim.Adam([agent.log_alpha], lr=config.alpha_learning_rate, betas=(0.9, 0.999), eps=1e-8)
        self.instance_rng = np.random.default_rng([config.seed, 1])
        self.replay_rng = np.random.default_rng([config.seed, 2])
        self.action_gen = make_generator(config.seed * 7919 + 3)
        self.replay = None if config.mode is Mode.ONPOLICY_FIXED_ENTROPY else ReplayBuffer(config.replay_capacity)
        self.trajectories = 0
        self.step_count = 0

    def alpha_value(self) -> torch.Tensor:
        if self.config.mode is Mode.EPOSE:
            return self.agent.alpha.detach()
        return torch.tensor(self.config.fixed_alpha, dtype=self.agent.log_alpha.dtype)

    def _push(self, rollout: Rollout, coords: torch.Tensor, demand: Optional[torch.Tensor]) -> None:
        instances = _instances_from_tensors(self.config.kind, coords, demand)
        actions = rollout.actions.numpy()
        rewards = rollout.rewards.numpy()
        lengths = rollout.lengths.numpy()
        for b, inst in enumerate(instances):
            T = int(lengths[b])
            ep = self.replay.new_episode(inst, actions[b, :T])
            self.replay.push_episode(ep, rewards[b, :T])

    def _q_step(self) -> tuple[float, float]:
        cfg = self.config
        transitions = self.replay.sample(cfg.batch_size, self.replay_rng)
        batch = ReplayBatch.from_transitions(transitions)
        targets = q_targets(self.agent, batch, self.alpha_value())
        losses = []
        for name, critic, opt in (("loss_q1", self.agent.q1, self.opt_q1), ("loss_q2", self.agent.q2, self.opt_q2)):
            loss = compute_q_loss(critic, self.agent, batch, targets)
            value = _finite(name, loss, self.step_count)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(value)
        return losses[0], losses[1]

    def train_step(self) -> StepMetrics:
        cfg = self.config
        agent = self.agent
        coords, demand = sample_batch(cfg.kind, cfg.n, cfg.batch_size, self.instance_rng)
        rollout = run_policy(agent, cfg.kind, coords, demand, generator=self.action_gen)
        self.trajectories += cfg.batch_size

        loss_q1 = loss_q2 = None
        if self.replay is not None:
            self._push(rollout, coords, demand)
            if len(self.replay) >= cfg.batch_size:
                loss_q1, loss_q2 = self._q_step()

        alpha = self.alpha_value()
        losses = compute_policy_loss(agent, rollout, alpha)
        loss_pi = _finite("loss_pi", losses.policy, self.step_count)
        _finite("loss_critic", losses.critic, self.step_count)
        self.opt_policy.zero_grad(set_to_none=True)
        (losses.policy + losses.critic).backward()
        self.opt_policy.step()

        targets = target_entropy(rollout.num_feasible, cfg.entropy_target_coef)
        if cfg.mode is Mode.EPOSE:
            loss_alpha = compute_alpha_loss(agent.log_alpha, rollout.entropies, targets, rollout.live)
            _finite("loss_alpha", loss_alpha, self.step_count)
            self.opt_alpha.zero_grad(set_to_none=True)
            loss_alpha.backward()
            self.opt_alpha.step()

        if self.replay is not None:
            soft_update(agent.q1, agent.q1_target, cfg.eta)
            soft_update(agent.q2, agent.q2_target, cfg.eta)

        live = rollout.live
        self.step_count += 1
        return StepMetrics(
            step=self.step_count,
            epoch=(self.step_count - 1) // cfg.steps_per_epoch + 1,
            trajectories=self.trajectories,
            train_return=float(rollout.returns.mean()),
            val_greedy_len=None,
            entropy=float(rollout.entropies.detach().masked_select(live).mean()),
            alpha=float(self.agent.alpha.detach()) if cfg.mode is Mode.EPOSE else cfg.fixed_alpha,
            loss_q1=loss_q1,
            loss_q2=loss_q2,
            loss_pi=loss_pi,
            entropy_target=float(targets.masked_select(live).mean()),
        )


def train(
    config: TrainConfig,
    net_config: NetConfig = NetConfig(),
    metrics_path: Optional[str | Path] = None,
    checkpoint_path: Optional[str | Path] = None,
    validation: Optional[list[ProblemInstance]] = None,
    dtype: torch.dtype = torch.float32,
) -> TrainResult:
    """Run ``epochs * steps_per_epoch`` iterations; validate and checkpoint after each epoch."""
    trainer = Trainer(config, net_config, dtype)
    if validation is None:
        validation = generate_dataset(config.kind, config.n, config.val_size, config.val_seed) if config.val_size else []
    initial = validation_length(trainer.agent, validation) if validation else None
    history: list[StepMetrics] = []
    fh = open(metrics_path, "w", newline="", encoding="utf-8") if metrics_path else None
    try:
        writer = csv.writer(fh) if fh else None
        if writer:
            writer.writerow(METRICS_HEADER)
        for epoch in range(1, config.epochs + 1):
            for s in range(config.steps_per_epoch):
                metrics = trainer.train_step()
                if s == config.steps_per_epoch - 1 and validation:
                    metrics.val_greedy_len = validation_length(trainer.agent, validation)
                history.append(metrics)
                if writer:
                    writer.writerow(metrics.csv_row())
            if fh:
                fh.flush()
            if checkpoint_path:
                save_checkpoint(trainer.agent, checkpoint_path, {"epoch": epoch, "step": trainer.step_count, "mode": config.mode.value})
            log.info(
                "epoch %d: return %.4f val %s alpha %.4f",
                epoch, history[-1].train_return, history[-1].val_greedy_len, history[-1].alpha,
            )
    finally:
        if fh:
            fh.close()
    trainer.agent.eval()
    return TrainResult(trainer.agent, history, initial, trainer.replay, validation)
