"""
C-GRPO Trainer Module

Curriculum-guided group relative policy optimization for the executor:
1. Phase 1: estimate per-sample error rates with the current policy and
   assign samples to replay pools
2. Each step: draw a balanced batch, inject demonstration prefixes, sample
   G candidates per context, score them, normalize rewards within the group
   and apply the clipped surrogate update with a KL penalty
3. Pools are re-estimated every `refresh_interval` steps

A supervised baseline (train_sft) shares batch construction and budget.
"""

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from .curriculum import (
    CurriculumConfig,
    ErrorRates,
    ReplayPools,
    ScheduleConfig,
    assign_pools,
    batch_quotas,
    build_context,
    estimate_error_rates,
    injection_length,
    sample_batch,
)
from .policy import ActionTokens, Context, ExecutorPolicy, PolicyParams, save_checkpoint
from .reward import RewardConfig, total_reward
from .tasks import Demonstration, TrainingSample

logger = logging.getLogger(__name__)

ADVANTAGE_DELTA = 1e-6

METRIC_COLUMNS = [
    "step", "mean_reward", "mean_abs_advantage", "clip_fraction", "kl_estimate",
    "mean_prefix_len", "pool_con", "pool_type", "pool_param", "wall_ms",
]


class RolloutMismatchError(ValueError):
    """Token and log-probability snapshots disagree in length."""


class TrainConfig(BaseModel):
    """Optimizer settings."""
    model_config = ConfigDict(frozen=True)

    learning_rate: float = Field(default=1e-6, gt=0.0)
    epochs: int = Field(default=2, ge=1)
    per_device_batch: int = Field(default=2, ge=1)
    grad_accum: int = Field(default=2, ge=1)
    G: int = Field(default=8, ge=2)
    kl_weight: float = Field(default=0.04, ge=0.0)
    clip_eps: float = Field(default=0.2, gt=0.0, lt=1.0)
    max_steps: int = Field(default=1000, ge=1)
    seed: int = 0
    inner_updates: int = Field(default=1, ge=1)
    schedule: Literal["steps", "epochs"] = "steps"
    record_wall_time: bool = False

    @property
    def batch_size(self) -> int:
        return self.per_device_batch * self.grad_accum

    def total_steps(self, dataset_size: int) -> int:
        if self.schedule == "epochs":
            return max(1, math.ceil(self.epochs * dataset_size / self.batch_size))
        return self.max_steps


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass(frozen=True)
class Candidate:
    tokens: ActionTokens
    old_logprobs: tuple[float, ...]
    reward: float


@dataclass(frozen=True)
class GroupRollout:
    """G candidates for one context, scored under one reward config."""
    context: Context
    candidates: tuple[Candidate, ...]

    @property
    def group_size(self) -> int:
        return len(self.candidates)

    @property
    def rewards(self) -> list[float]:
        return [c.reward for c in self.candidates]


@dataclass(frozen=True)
class Advantages:
    per_candidate: tuple[float, ...]


@dataclass
class SurrogateMetrics:
    objective: float
    clip_fraction: float
    kl_estimate: float
    n_tokens: int


@dataclass(frozen=True)
class StepMetrics:
    step: int
    mean_reward: float
    mean_abs_advantage: float
    clip_fraction: float
    kl_estimate: float
    mean_prefix_len: float
    pool_con: int
    pool_type: int
    pool_param: int
    wall_ms: float

    def to_dict(self) -> dict:
        return asdict(self)


def group_advantages(rewards: list[float]) -> Advantages:
    """(r - mean) / (population std + delta)."""
    if len(rewards) < 2:
        raise ValueError("Group advantages need at least two rewards")
    r = np.asarray(rewards, dtype=np.float64)
    adv = (r - r.mean()) / (r.std() + ADVANTAGE_DELTA)
    return Advantages(tuple(float(a) for a in adv))


def k3_divergence(logp, ref_logp):
    """
    Per-token KL(pi || pi_ref) estimate rho - log rho - 1, rho = pi_ref / pi.

    Non-negative and unbiased for samples drawn from pi. Works elementwise
    on arrays.
    """
    log_rho = np.subtract(ref_logp, logp)
    return np.exp(log_rho) - log_rho - 1.0


def surrogate_loss(
    policy: ExecutorPolicy,
    params: PolicyParams,
    ref_params: PolicyParams,
    rollout: GroupRollout,
    adv: Advantages,
    cfg: TrainConfig,
) -> tuple[float, np.ndarray, SurrogateMetrics]:
    """
    Negated clipped surrogate objective with per-token KL penalty.

    J = 1/G sum_i 1/|o_i| sum_t [min(r A, clip(r) A) - beta * (rho - log rho - 1)]
    with r = pi/pi_old and rho = pi_ref/pi per token.

    Returns:
        (loss = -J, gradient of loss, metrics)

    Raises:
        RolloutMismatchError: If snapshots and tokens disagree
    """
    G = rollout.group_size
    if len(adv.per_candidate) != G:
        raise RolloutMismatchError(f"{len(adv.per_candidate)} advantages for {G} candidates")

    eps = cfg.clip_eps
    beta = cfg.kl_weight
    grad_j = np.zeros(params.size)
    objective = 0.0
    clipped = 0
    kl_total = 0.0
    n_tokens = 0

    for candidate, advantage in zip(rollout.candidates, adv.per_candidate):
        tokens = candidate.tokens.tokens
        if len(candidate.old_logprobs) != len(tokens):
            raise RolloutMismatchError(
                f"{len(candidate.old_logprobs)} old log-probs for {len(tokens)} tokens"
            )
        _, current = policy.logprob(params, rollout.context, tokens)
        _, reference = policy.logprob(ref_params, rollout.context, tokens)
        scale = 1.0 / (G * len(tokens))

        weights = []
        for cur, old, ref in zip(current, candidate.old_logprobs, reference):
            ratio = math.exp(cur - old)
            rho = math.exp(ref - cur)
            clipped_ratio = min(max(ratio, 1.0 - eps), 1.0 + eps)
            is_clipped = (advantage > 0 and ratio > 1.0 + eps) or (advantage < 0 and ratio < 1.0 - eps)
            kl = float(k3_divergence(cur, ref))

            objective += scale * (min(ratio * advantage, clipped_ratio * advantage) - beta * kl)
            coeff = (0.0 if is_clipped else advantage * ratio) - beta * (1.0 - rho)
            weights.append(scale * coeff)

            clipped += int(is_clipped)
            kl_total += kl
            n_tokens += 1

        policy.add_token_grads(params, rollout.context, tokens, weights, grad_j)

    metrics = SurrogateMetrics(
        objective=objective,
        clip_fraction=clipped / n_tokens if n_tokens else 0.0,
        kl_estimate=kl_total / n_tokens if n_tokens else 0.0,
        n_tokens=n_tokens,
    )
    return -objective, -grad_j, metrics


@dataclass(frozen=True)
class TrainerState:
    """Everything train_step needs; replaced, not mutated, each step."""
    params: PolicyParams
    ref_params: PolicyParams
    pools: ReplayPools
    k: int = 0
    steps_done: int = 0


@dataclass
class TrainingReport:
    """Outcome of one training run."""
    params: PolicyParams
    metrics: list[StepMetrics] = field(default_factory=list)
    final_k: int = 0
    mode: str = "cgrpo"

    def metrics_frame(self) -> pd.DataFrame:
        return pd.DataFrame([m.to_dict() for m in self.metrics], columns=METRIC_COLUMNS)

    @property
    def rewards(self) -> list[float]:
        return [m.mean_reward for m in self.metrics]

    def terminal_reward(self, fraction: float = 0.2) -> float:
        """Mean reward over the last `fraction` of steps."""
        rewards = self.rewards
        if not rewards:
            return 0.0
        window = max(1, int(len(rewards) * fraction))
        return float(np.mean(rewards[-window:]))

    def save(self, output_dir: str | Path, prefix: str = "") -> dict[str, Path]:
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = output_dir / f"{prefix}metrics.csv"
        self.metrics_frame().to_csv(metrics_path, index=False)
        checkpoint_path = save_checkpoint(self.params, output_dir / f"{prefix}policy.ckpt")
        return {"metrics": metrics_path, "checkpoint": checkpoint_path}


def smoothed_rewards(rewards: list[float], window: int = 100) -> pd.Series:
    """Non-overlapping window means of a reward curve."""
    series = pd.Series(rewards, dtype=float)
    if series.empty:
        return series
    return series.groupby(np.arange(len(series)) // window).mean()


def regressing_windows(rewards: list[float], window: int = 100) -> int:
    """Number of smoothed windows whose mean is below the previous window's."""
    curve = smoothed_rewards(rewards, window).to_numpy()
    return int(np.sum(curve[1:] < curve[:-1]))


class CGRPOTrainer:
    """
    Curriculum-guided GRPO over a fixed dataset of training samples.

    Example:
        trainer = CGRPOTrainer(policy, demos, reward_cfg, train_cfg, schedule, curriculum)
        report = trainer.train(dataset)
    """

    def __init__(
        self,
        policy: ExecutorPolicy,
        demos: dict[str, Demonstration],
        reward_cfg: Optional[RewardConfig] = None,
        train_cfg: Optional[TrainConfig] = None,
        schedule: Optional[ScheduleConfig] = None,
        curriculum: Optional[CurriculumConfig] = None,
    ):
        self.policy = policy
        self.demos = demos
        self.reward_cfg = reward_cfg or RewardConfig()
        self.cfg = train_cfg or TrainConfig()
        self.schedule = schedule or ScheduleConfig()
        self.curriculum = curriculum or CurriculumConfig()

    def rollout(self, params: PolicyParams, ctx: Context, expert, seed: int) -> GroupRollout:
        samples = self.policy.sample_group(params, ctx, self.cfg.G, seed)
        candidates = tuple(
            Candidate(s, s.per_token_logprobs, total_reward(s, expert, self.reward_cfg))
            for s in samples
        )
        return GroupRollout(ctx, candidates)

    def estimate_rates(
        self, params: PolicyParams, dataset: list[TrainingSample], seed: int
    ) -> list[tuple[TrainingSample, ErrorRates]]:
        """Error rates of every sample under the current policy (no injection)."""
        entries = []
        for j, sample in enumerate(dataset):
            demo = self.demos[sample.demo_ref[0]]
            ctx = build_context(sample, 0, demo)
            group = self.policy.sample_group(params, ctx, self.cfg.G, derive_seed(seed, j))
            entries.append((sample, estimate_error_rates(group, sample.expert_action, self.reward_cfg)))
        return entries

    def initial_state(
        self,
        dataset: list[TrainingSample],
        params: Optional[PolicyParams] = None,
        ref_params: Optional[PolicyParams] = None,
        k: int = 0,
    ) -> TrainerState:
        """Phase 1: initialize the replay pools with the starting policy."""
        if not dataset:
            raise ValueError("Training dataset is empty")
        params = params or self.policy.init_params()
        self.policy.check_params(params)
        entries = self.estimate_rates(params, dataset, derive_seed(self.cfg.seed, k, 7919))
        pools = assign_pools(entries, self.curriculum)
        return TrainerState(params=params, ref_params=ref_params or params, pools=pools, k=k)

    def _refresh_due(self, state: TrainerState) -> bool:
        interval = self.curriculum.refresh_interval
        return interval > 0 and state.steps_done > 0 and state.steps_done % interval == 0

    def train_step(self, state: TrainerState, dataset: Optional[list[TrainingSample]] = None) -> tuple[TrainerState, StepMetrics]:
        """
        One C-GRPO update on a balanced, demonstration-augmented batch.

        Args:
            state: Current trainer state
            dataset: Needed only when a pool refresh is due

        Returns:
            (next state, step metrics)
        """
        started = time.perf_counter()
        cfg = self.cfg

        if dataset is not None and self._refresh_due(state):
            entries = self.estimate_rates(state.params, dataset, derive_seed(cfg.seed, state.k, 7919))
            state = replace(state, pools=assign_pools(entries, self.curriculum))

        batch = sample_batch(state.pools, cfg.batch_size, derive_seed(cfg.seed, state.k, 0))
        quotas = batch_quotas(state.pools.counts, state.pools.ratios, cfg.batch_size)

        rollouts = []
        prefixes = []
        for j, (sample, rates) in enumerate(batch):
            demo = self.demos[sample.demo_ref[0]]
            _, prefix = injection_length(len(demo), state.k, rates.difficulty, self.schedule)
            prefix = min(prefix, sample.demo_ref[1])
            prefixes.append(prefix)
            ctx = build_context(sample, prefix, demo)
            rollouts.append(self.rollout(state.params, ctx, sample.expert_action, derive_seed(cfg.seed, state.k, j + 1)))

        advantages = [group_advantages(r.rewards) for r in rollouts]

        params = state.params
        clip_fractions = []
        kl_estimates = []
        for _ in range(cfg.inner_updates):
            grad = np.zeros(params.size)
            # Gradient accumulation over micro-batches of per_device_batch rollouts
            for m in range(cfg.grad_accum):
                micro = range(m * cfg.per_device_batch, (m + 1) * cfg.per_device_batch)
                for i in micro:
                    _, g, metrics = surrogate_loss(
                        self.policy, params, state.ref_params, rollouts[i], advantages[i], cfg,
                    )
                    grad += g / cfg.batch_size
                    clip_fractions.append(metrics.clip_fraction)
                    kl_estimates.append(metrics.kl_estimate)
            params = params.updated(params.theta - cfg.learning_rate * grad)

        metrics = StepMetrics(
            step=state.steps_done,
            mean_reward=float(np.mean([r for ro in rollouts for r in ro.rewards])),
            mean_abs_advantage=float(np.mean([abs(a) for adv in advantages for a in adv.per_candidate])),
            clip_fraction=float(np.mean(clip_fractions)),
            kl_estimate=float(np.mean(kl_estimates)),
            mean_prefix_len=float(np.mean(prefixes)),
            pool_con=quotas[0],
            pool_type=quotas[1],
            pool_param=quotas[2],
            wall_ms=(time.perf_counter() - started) * 1000.0 if cfg.record_wall_time else 0.0,
        )
        next_state = replace(state, params=params, k=state.k + 1, steps_done=state.steps_done + 1)
        return next_state, metrics

    def train(
        self,
        dataset: list[TrainingSample],
        params: Optional[PolicyParams] = None,
        ref_params: Optional[PolicyParams] = None,
        steps: Optional[int] = None,
        k_offset: int = 0,
    ) -> TrainingReport:
        """
        Full run: pool initialization then a fixed number of steps.

        Args:
            dataset: Non-empty list of training samples
            params: Starting parameters (theta = 0 if None)
            ref_params: KL anchor (defaults to the starting parameters)
            steps: Step budget (defaults to the configured schedule)
            k_offset: Global annealing step to start from

        Returns:
            TrainingReport with final parameters and per-step metrics
        """
        total = steps if steps is not None else self.cfg.total_steps(len(dataset))
        state = self.initial_state(dataset, params, ref_params, k_offset)
        logger.info("C-GRPO: %d steps on %d samples (k from %d)", total, len(dataset), k_offset)

        metrics = []
        for _ in range(total):
            state, step_metrics = self.train_step(state, dataset)
            metrics.append(step_metrics)
            if step_metrics.step % 50 == 0:
                logger.debug(
                    "step %d reward %.3f kl %.4f prefix %.2f",
                    step_metrics.step, step_metrics.mean_reward,
                    step_metrics.kl_estimate, step_metrics.mean_prefix_len,
                )

        logger.info("C-GRPO done: terminal reward %.3f", np.mean([m.mean_reward for m in metrics[-20:]]))
        return TrainingReport(params=state.params, metrics=metrics, final_k=state.k, mode="cgrpo")


def train_sft(
    policy: ExecutorPolicy,
    dataset: list[TrainingSample],
    reward_cfg: Optional[RewardConfig] = None,
    train_cfg: Optional[TrainConfig] = None,
    params: Optional[PolicyParams] = None,
    steps: Optional[int] = None,
) -> TrainingReport:
    """
    Supervised baseline: per-token cross-entropy on expert actions.

    Same batch size, seeds, learning rate and step budget as C-GRPO; batches
    are drawn uniformly from the dataset without injection. mean_reward in
    the metrics is the greedy action's reward on the batch.
    """
    if not dataset:
        raise ValueError("Training dataset is empty")
    cfg = train_cfg or TrainConfig()
    reward_cfg = reward_cfg or RewardConfig()
    params = params or policy.init_params()
    total = steps if steps is not None else cfg.total_steps(len(dataset))
    pools = ReplayPools(con=[(s, None) for s in dataset], ratios=(1.0, 0.0, 0.0))

    logger.info("SFT: %d steps on %d samples", total, len(dataset))
    metrics = []
    for step in range(total):
        started = time.perf_counter()
        batch = sample_batch(pools, cfg.batch_size, derive_seed(cfg.seed, step, 0))
        grad = np.zeros(params.size)
        rewards = []
        for sample, _ in batch:
            ctx = Context(sample.observation, sample.task_goal, sample.instruction)
            tokens = policy.codec.encode(sample.expert_action)
            scale = 1.0 / (cfg.batch_size * len(tokens))
            # Descent on negative log-likelihood
            policy.add_token_grads(params, ctx, tokens, [-scale] * len(tokens), grad)
            rewards.append(total_reward(policy.greedy(params, ctx), sample.expert_action, reward_cfg))
        params = params.updated(params.theta - cfg.learning_rate * grad)
        metrics.append(StepMetrics(
            step=step,
            mean_reward=float(np.mean(rewards)),
            mean_abs_advantage=0.0,
            clip_fraction=0.0,
            kl_estimate=0.0,
            mean_prefix_len=0.0,
            pool_con=cfg.batch_size,
            pool_type=0,
            pool_param=0,
            wall_ms=(time.perf_counter() - started) * 1000.0 if cfg.record_wall_time else 0.0,
        ))
    return TrainingReport(params=params, metrics=metrics, final_k=total, mode="sft")
