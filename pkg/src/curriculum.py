"""
Curriculum Module

The two curriculum mechanisms of curriculum-guided GRPO:
- Error-decoupled replay balancing: samples are routed into consolidation,
  type-error and parameter-error pools, then drawn at fixed ratios
- Dynamic demonstration injection: an annealed, difficulty-gated number of
  expert steps is prepended to the executor context
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .environment import Action
from .policy import Context
from .reward import ErrorClass, RawOutput, RewardConfig, classify_output
from .tasks import Demonstration, TrainingSample

logger = logging.getLogger(__name__)


class PoolId(Enum):
    CON = "con"
    TYPE = "type"
    PARAM = "param"


POOL_ORDER = (PoolId.CON, PoolId.TYPE, PoolId.PARAM)


@dataclass(frozen=True)
class ErrorRates:
    """Per-sample error rates estimated from a candidate group."""
    eta_type: float
    eta_param: float

    def __post_init__(self):
        if not (0.0 <= self.eta_type <= 1.0 and 0.0 <= self.eta_param <= 1.0):
            raise ValueError("Error rates must lie in [0, 1]")
        if self.eta_type + self.eta_param > 1.0 + 1e-12:
            raise ValueError("eta_type + eta_param must not exceed 1")

    @property
    def difficulty(self) -> float:
        return self.eta_type + self.eta_param


class CurriculumConfig(BaseModel):
    """Replay balancing settings."""
    model_config = ConfigDict(frozen=True)

    beta_con: float = Field(default=0.5, ge=0.0, le=1.0)
    beta_type: float = Field(default=0.25, ge=0.0, le=1.0)
    beta_param: float = Field(default=0.25, ge=0.0, le=1.0)
    tau: float = Field(default=0.25, gt=0.0, lt=1.0)
    refresh_interval: int = Field(default=100, ge=0)
    balancing: bool = True

    @model_validator(mode="after")
    def _ratios_sum_to_one(self) -> "CurriculumConfig":
        total = self.beta_con + self.beta_type + self.beta_param
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"Replay ratios must sum to 1, got {total}")
        return self

    @property
    def ratios(self) -> tuple[float, float, float]:
        return (self.beta_con, self.beta_type, self.beta_param)

    def with_beta_con(self, beta_con: float) -> "CurriculumConfig":
        """Same config with beta_con set and the remainder split evenly."""
        rest = (1.0 - beta_con) / 2.0
        return self.model_copy(update={"beta_con": beta_con, "beta_type": rest, "beta_param": 1.0 - beta_con - rest})


class ScheduleConfig(BaseModel):
    """Demonstration injection schedule."""
    model_config = ConfigDict(frozen=True)

    k_max: int = Field(default=1000, ge=1)
    temperature: float = Field(default=0.5, gt=0.0)


@dataclass
class ReplayPools:
    """The three replay pools with their sampling ratios."""
    con: list = field(default_factory=list)
    type_pool: list = field(default_factory=list)
    param_pool: list = field(default_factory=list)
    ratios: tuple[float, float, float] = (0.5, 0.25, 0.25)

    def __post_init__(self):
        if abs(sum(self.ratios) - 1.0) > 1e-12:
            raise ValueError("Pool ratios must sum to 1")

    def pool(self, pool_id: PoolId) -> list:
        return {PoolId.CON: self.con, PoolId.TYPE: self.type_pool, PoolId.PARAM: self.param_pool}[pool_id]

    def add(self, pool_id: PoolId, sample: TrainingSample, rates: ErrorRates) -> None:
        self.pool(pool_id).append((sample, rates))

    @property
    def counts(self) -> tuple[int, int, int]:
        return (len(self.con), len(self.type_pool), len(self.param_pool))

    def __len__(self) -> int:
        return sum(self.counts)


def estimate_error_rates(candidates: list[RawOutput], expert: Action, cfg: RewardConfig) -> ErrorRates:
    """
    Fractions of type and parameter errors in a candidate group.

    Malformed candidates (None or undecodable tokens) count as type errors.
    """
    if not candidates:
        raise ValueError("estimate_error_rates needs at least one candidate")
    classes = [classify_output(c, expert, cfg) for c in candidates]
    n = len(classes)
    return ErrorRates(
        eta_type=sum(c == ErrorClass.TYPE_ERROR for c in classes) / n,
        eta_param=sum(c == ErrorClass.PARAM_ERROR for c in classes) / n,
    )


def assign_pool(rates: ErrorRates, tau: float) -> PoolId:
    """Route a sample by its dominant error mode; ties favour the type pool."""
    if rates.eta_type >= tau and rates.eta_type >= rates.eta_param:
        return PoolId.TYPE
    if rates.eta_param >= tau and rates.eta_param > rates.eta_type:
        return PoolId.PARAM
    return PoolId.CON


def batch_quotas(counts: tuple[int, int, int], ratios: tuple[float, float, float], batch_size: int) -> tuple[int, int, int]:
    """
    Per-pool draw counts via largest-remainder rounding.

    Quotas of empty pools move to con, or to the first non-empty pool when
    con is empty too.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    if sum(counts) == 0:
        raise ValueError("All replay pools are empty")

    exact = [r * batch_size for r in ratios]
    quotas = [math.floor(x) for x in exact]
    remainders = [x - q for x, q in zip(exact, quotas)]
    # Stable sort keeps pool order on equal remainders
    order = sorted(range(3), key=lambda i: -remainders[i])
    for i in order[: batch_size - sum(quotas)]:
        quotas[i] += 1

    receiver = 0 if counts[0] > 0 else next(i for i in range(3) if counts[i] > 0)
    for i in range(3):
        if counts[i] == 0 and quotas[i] > 0:
            quotas[receiver] += quotas[i]
            quotas[i] = 0
    return tuple(quotas)


def sample_batch(pools: ReplayPools, batch_size: int, seed: int) -> list[tuple[TrainingSample, ErrorRates]]:
    """
    Draw a balanced batch: uniform with replacement inside each pool.

    Raises:
        ValueError: If every pool is empty
    """
    quotas = batch_quotas(pools.counts, pools.ratios, batch_size)
    rng = np.random.default_rng(seed)
    batch = []
    for pool_id, quota in zip(POOL_ORDER, quotas):
        entries = pools.pool(pool_id)
        for _ in range(quota):
            batch.append(entries[int(rng.integers(len(entries)))])
    return batch


def injection_length(L: int, k: int, d: float, sched: ScheduleConfig) -> tuple[float, int]:
    """
    Annealed, difficulty-gated prefix length.

    l = L * max(0, 1 - k / K_max) * tanh(d / T); prefix = floor(l).
    """
    sigma = max(0.0, 1.0 - k / sched.k_max)
    gate = math.tanh(d / sched.temperature)
    length = L * sigma * gate
    return length, int(math.floor(length))


def build_context(sample: TrainingSample, prefix_steps: int, demo: Demonstration) -> Context:
    """
    Executor context for a sample with the demo's first prefix_steps steps injected.

    Raises:
        ValueError: If prefix_steps exceeds the sample's step index
    """
    step_index = sample.demo_ref[1]
    if prefix_steps < 0 or prefix_steps > step_index:
        raise ValueError(f"prefix_steps {prefix_steps} exceeds available prefix {step_index}")
    prefix = tuple((s.instruction, s.action) for s in demo.steps[:prefix_steps])
    return Context(
        observation=sample.observation,
        task_goal=sample.task_goal,
        sub_goal=sample.instruction,
        injected_prefix=prefix,
    )


def assign_pools(
    entries: list[tuple[TrainingSample, ErrorRates]],
    cfg: CurriculumConfig,
) -> ReplayPools:
    """
    Partition samples into pools. With balancing off everything goes to con
    and only con is sampled.
    """
    if not cfg.balancing:
        pools = ReplayPools(ratios=(1.0, 0.0, 0.0))
        for sample, rates in entries:
            pools.add(PoolId.CON, sample, rates)
        return pools

    pools = ReplayPools(ratios=cfg.ratios)
    for sample, rates in entries:
        pools.add(assign_pool(rates, cfg.tau), sample, rates)
    logger.info("Pool assignment: con=%d type=%d param=%d", *pools.counts)
    return pools
