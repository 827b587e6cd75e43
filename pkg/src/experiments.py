"""
Experiments Module

Batch experiment harnesses over the built-in task suite:
- evaluate: success rates per template, mean and std over seed groups
- train_executor: one C-GRPO (or SFT) run on the decomposed demonstrations
- evolve: SRLR on a single template, optionally from a corrupted plan
- coevolve: alternating SRLR planner phases and C-GRPO executor phases
- ablate: the five hierarchy / training arms, step- and seed-matched
- sweep: reward curves across beta_con or temperature values

Every harness is a pure function of its RunConfig.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from .agent import EpisodeMode, HierarchicalAgent, PolicyExecutor, RuleExecutor
from .config import RunConfig
from .environment import FaultyEnvironment, MiniDroidEnvironment
from .planner import KnowledgeBase, LoopConfig, LoopReport, srlr_loop, summarize
from .policy import ExecutorPolicy, PolicyParams
from .tasks import (
    CorruptionKind,
    Demonstration,
    TaskSuite,
    TrainingSample,
    corrupt_knowledge,
)
from .trainer import CGRPOTrainer, TrainingReport, train_sft

logger = logging.getLogger(__name__)

EVAL_SEED_BASE = 20000
EVAL_SEED_STRIDE = 1000

ARMS = ("no_hierarchy", "no_hierarchy_kb", "sft", "vanilla_grpo", "full")
SWEEP_PARAMS = ("beta_con", "temperature")
VANILLA_TEMPERATURE = 5.0


@dataclass
class Runtime:
    """Environment, suite, policy and recorded data shared by a run."""
    env: MiniDroidEnvironment
    suite: TaskSuite
    policy: ExecutorPolicy
    demos: list[Demonstration]
    dataset: list[TrainingSample]
    templates: list[str]

    @property
    def demo_index(self) -> dict[str, Demonstration]:
        return {d.demo_id: d for d in self.demos}

    def first_demo(self, template_id: str) -> Demonstration:
        for demo in self.demos:
            if demo.task.template_id == template_id:
                return demo
        raise ValueError(f"No demonstration recorded for {template_id}")


def build_runtime(cfg: RunConfig) -> Runtime:
    """Load the environment and record demonstrations for the configured templates."""
    env = MiniDroidEnvironment(config=cfg.env)
    suite = TaskSuite(env)
    templates = list(cfg.templates or suite.template_ids)
    for template_id in templates:
        suite.template(template_id)
    demos = suite.demonstrations(templates, per_template=cfg.demos_per_template)
    dataset = suite.build_dataset(demos)
    policy = ExecutorPolicy.from_definition(env.definition, cfg.policy)
    logger.info("Runtime: %d templates, %d demos, %d samples", len(templates), len(demos), len(dataset))
    return Runtime(env, suite, policy, demos, dataset, templates)


def summarize_all(runtime: Runtime) -> dict[str, KnowledgeBase]:
    """Initial knowledge base per template from its first demonstration."""
    return {t: summarize(runtime.first_demo(t)) for t in runtime.templates}


# =============================================================================
# Evaluation
# =============================================================================

@dataclass
class SuccessStats:
    """Success rates per template and in aggregate over seed groups."""
    per_template: pd.DataFrame          # template, mean, std
    per_seed: list[float] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_seed)) if self.per_seed else 0.0

    @property
    def std(self) -> float:
        return float(np.std(self.per_seed)) if self.per_seed else 0.0

    @property
    def empty(self) -> bool:
        return self.per_template.empty

    def format(self) -> str:
        return f"{100 * self.mean:.1f} ± {100 * self.std:.1f}"


def eval_seed(seed_group: int, template_index: int, episode: int) -> int:
    return EVAL_SEED_BASE + EVAL_SEED_STRIDE * seed_group + 50 * template_index + episode


def evaluate(
    agent: HierarchicalAgent,
    templates: list[str],
    seeds: list[int],
    episodes: int = 1,
    suite: Optional[TaskSuite] = None,
) -> SuccessStats:
    """
    Success rates of an agent on fresh task instances.

    Args:
        agent: Agent to evaluate
        templates: Templates to run (empty gives empty stats)
        seeds: Seed groups; each yields one aggregate success rate
        episodes: Episodes per template and seed group
        suite: Task suite (built on the agent's environment if None)

    Returns:
        SuccessStats with per-template mean/std and per-seed aggregates
    """
    if not templates or not seeds:
        return SuccessStats(pd.DataFrame(columns=["template", "mean", "std"]), [])

    suite = suite or TaskSuite(agent.env)
    rates = np.zeros((len(seeds), len(templates)))
    for s, seed_group in enumerate(seeds):
        for t, template_id in enumerate(templates):
            wins = 0
            for e in range(episodes):
                seed = eval_seed(seed_group, t, e)
                task = suite.instantiate_task(template_id, seed)
                wins += int(agent.run_episode(task, seed).success)
            rates[s, t] = wins / episodes

    per_template = pd.DataFrame({
        "template": templates,
        "mean": rates.mean(axis=0),
        "std": rates.std(axis=0),
    })
    return SuccessStats(per_template, [float(x) for x in rates.mean(axis=1)])


# =============================================================================
# Training and SRLR
# =============================================================================

def train_executor(
    cfg: RunConfig,
    runtime: Runtime,
    params: Optional[PolicyParams] = None,
    steps: Optional[int] = None,
    sft: bool = False,
    k_offset: int = 0,
) -> TrainingReport:
    """One executor training run with the configured trainer."""
    if sft:
        return train_sft(runtime.policy, runtime.dataset, cfg.reward, cfg.train, params, steps)
    trainer = CGRPOTrainer(
        runtime.policy, runtime.demo_index, cfg.reward, cfg.train, cfg.schedule, cfg.curriculum,
    )
    return trainer.train(runtime.dataset, params, steps=steps, k_offset=k_offset)


def evolve(
    cfg: RunConfig,
    runtime: Runtime,
    template_id: str,
    corruption: Optional[CorruptionKind] = None,
    params: Optional[PolicyParams] = None,
    faulty: bool = False,
) -> tuple[KnowledgeBase, LoopReport]:
    """
    Run the SRLR loop on one template.

    Args:
        cfg: Run configuration (loop limits)
        runtime: Shared runtime
        template_id: Template to evolve
        corruption: Plant this defect in the summarized plan first
        params: Executor parameters; the rule executor is used if None
        faulty: Run episodes in an environment that drops inputs

    Raises:
        ValueError: If the corruption kind does not apply to the template
    """
    demo = runtime.first_demo(template_id)
    kb = summarize(demo)
    if corruption is not None:
        scenarios = [s for s in runtime.suite.default_scenarios(kb, demo) if s.kind == corruption]
        if not scenarios:
            raise ValueError(f"Corruption {corruption.value} does not apply to {template_id}")
        kb = corrupt_knowledge(kb, scenarios[0])
        logger.info("Planted %s", scenarios[0].scenario_id)

    executor = RuleExecutor() if params is None else PolicyExecutor(runtime.policy, params)
    env = FaultyEnvironment(runtime.env.definition, runtime.env.config) if faulty else runtime.env
    agent = HierarchicalAgent(env, executor)
    return srlr_loop(template_id, demo, env, agent, cfg.loop, initial_kb=kb)


# =============================================================================
# Co-evolution
# =============================================================================

@dataclass
class CoevolutionReport:
    """Per-round outcome of the alternating schedule."""
    rounds: pd.DataFrame                # round, success_mean, success_std, kb_revisions, terminal_reward
    kb_store: dict[str, KnowledgeBase]
    params: PolicyParams
    loop_reports: list[LoopReport] = field(default_factory=list)
    training: list[TrainingReport] = field(default_factory=list)

    @property
    def success_curve(self) -> list[float]:
        return [float(x) for x in self.rounds["success_mean"]]

    def metrics_frame(self) -> pd.DataFrame:
        frames = []
        for i, report in enumerate(self.training, start=1):
            frame = report.metrics_frame()
            frame.insert(0, "round", i)
            frames.append(frame)
        return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()


def coevolve(cfg: RunConfig, runtime: Optional[Runtime] = None) -> CoevolutionReport:
    """
    Alternate n_srlr SRLR iterations per template with one C-GRPO phase.

    Round 0 is the untrained executor with the summarized plans. Each SRLR
    phase starts a fresh success streak. Each C-GRPO phase anchors its KL
    term on the parameters it starts from and continues the global
    annealing step of the previous phase.
    """
    runtime = runtime or build_runtime(cfg)
    kb_store = summarize_all(runtime)
    params = runtime.policy.init_params()
    phase_loop = LoopConfig(
        max_iter=cfg.n_srlr, success_thresh=cfg.loop.success_thresh, seed_offset=cfg.loop.seed_offset,
    )

    def measure() -> SuccessStats:
        agent = HierarchicalAgent(runtime.env, PolicyExecutor(runtime.policy, params), dict(kb_store))
        return evaluate(agent, runtime.templates, cfg.seeds, cfg.episodes_per_eval, runtime.suite)

    stats = measure()
    rows = [{
        "round": 0, "success_mean": stats.mean, "success_std": stats.std,
        "kb_revisions": 0, "terminal_reward": float("nan"),
    }]
    loop_reports: list[LoopReport] = []
    training: list[TrainingReport] = []
    logger.info("Round 0: success %s", stats.format())

    for round_index in range(1, cfg.rounds + 1):
        agent = HierarchicalAgent(runtime.env, PolicyExecutor(runtime.policy, params))
        for template_id in runtime.templates:
            demo = runtime.first_demo(template_id)
            kb, report = srlr_loop(
                template_id, demo, runtime.env, agent, phase_loop, initial_kb=kb_store[template_id],
            )
            kb_store[template_id] = kb
            loop_reports.append(report)

        report = train_executor(
            cfg, runtime, params, steps=cfg.phase_steps, k_offset=(round_index - 1) * cfg.phase_steps,
        )
        params = report.params
        training.append(report)

        stats = measure()
        rows.append({
            "round": round_index,
            "success_mean": stats.mean,
            "success_std": stats.std,
            "kb_revisions": sum(kb.revision for kb in kb_store.values()),
            "terminal_reward": report.terminal_reward(),
        })
        logger.info("Round %d: success %s", round_index, stats.format())

    return CoevolutionReport(pd.DataFrame(rows), kb_store, params, loop_reports, training)


# =============================================================================
# Ablation and sensitivity
# =============================================================================

@dataclass
class AblationTable:
    """Success rate and terminal reward per arm and seed."""
    frame: pd.DataFrame                 # arm, seed, success, terminal_reward
    curves: dict[tuple[str, int], list[float]] = field(default_factory=dict)

    def summary(self) -> pd.DataFrame:
        grouped = self.frame.groupby("arm", sort=False)
        table = pd.DataFrame({
            "success_median": grouped["success"].median(),
            "success_mean": grouped["success"].mean(),
            "success_std": grouped["success"].std(ddof=0),
            "terminal_reward": grouped["terminal_reward"].median(),
        })
        return table.reindex([a for a in ARMS if a in table.index]).reset_index()

    def median(self, arm: str) -> float:
        return float(self.frame.loc[self.frame["arm"] == arm, "success"].median())


def evolved_knowledge(cfg: RunConfig, runtime: Runtime) -> dict[str, KnowledgeBase]:
    """Knowledge bases refined by SRLR with the rule executor."""
    agent = HierarchicalAgent(runtime.env, RuleExecutor())
    store = {}
    for template_id in runtime.templates:
        kb, _ = srlr_loop(template_id, runtime.first_demo(template_id), runtime.env, agent, cfg.loop)
        store[template_id] = kb
    return store


def vanilla_config(cfg: RunConfig) -> RunConfig:
    """C-GRPO with injection and replay balancing disabled."""
    return cfg.model_copy(update={
        "schedule": cfg.schedule.model_copy(update={"temperature": VANILLA_TEMPERATURE}),
        "curriculum": cfg.curriculum.model_copy(update={"balancing": False}),
    })


def ablate(cfg: RunConfig, runtime: Optional[Runtime] = None, steps: Optional[int] = None) -> AblationTable:
    """
    Five arms per seed, all trained for the same number of steps and
    evaluated on the same task instances.

    no_hierarchy and no_hierarchy_kb reuse the full arm's executor without
    the planner (goal only, goal plus whole plan).
    """
    runtime = runtime or build_runtime(cfg)
    steps = steps or cfg.phase_steps * cfg.rounds
    kb_store = evolved_knowledge(cfg, runtime)
    rows = []
    curves: dict[tuple[str, int], list[float]] = {}

    for seed in cfg.seeds:
        seeded = cfg.with_seed(seed)
        reports = {
            "full": train_executor(seeded, runtime, steps=steps),
            "vanilla_grpo": train_executor(vanilla_config(seeded), runtime, steps=steps),
            "sft": train_executor(seeded, runtime, steps=steps, sft=True),
        }
        arm_params = {
            "no_hierarchy": (reports["full"], EpisodeMode.NO_HIERARCHY),
            "no_hierarchy_kb": (reports["full"], EpisodeMode.NO_HIERARCHY_KB),
            "sft": (reports["sft"], EpisodeMode.HIERARCHY),
            "vanilla_grpo": (reports["vanilla_grpo"], EpisodeMode.HIERARCHY),
            "full": (reports["full"], EpisodeMode.HIERARCHY),
        }
        for arm in ARMS:
            report, mode = arm_params[arm]
            agent = HierarchicalAgent(
                runtime.env, PolicyExecutor(runtime.policy, report.params), dict(kb_store), mode,
            )
            stats = evaluate(agent, runtime.templates, [seed], cfg.episodes_per_eval, runtime.suite)
            rows.append({
                "arm": arm, "seed": seed, "success": stats.mean, "terminal_reward": report.terminal_reward(),
            })
            curves[(arm, seed)] = report.rewards
            logger.info("Ablation seed %d %s: %s", seed, arm, stats.format())

    return AblationTable(pd.DataFrame(rows, columns=["arm", "seed", "success", "terminal_reward"]), curves)


@dataclass
class SweepReport:
    """Reward curves per swept value and seed."""
    param: str
    frame: pd.DataFrame                 # param, value, seed, terminal_reward
    curves: dict[tuple[float, int], list[float]] = field(default_factory=dict)

    def summary(self) -> pd.DataFrame:
        return (
            self.frame.groupby("value", sort=False)["terminal_reward"]
            .agg(["median", "mean", "std"])
            .reset_index()
        )

    def terminal(self, value: float) -> float:
        return float(self.frame.loc[self.frame["value"] == value, "terminal_reward"].median())


def swept_config(cfg: RunConfig, param: str, value: float) -> RunConfig:
    if param == "beta_con":
        return cfg.model_copy(update={"curriculum": cfg.curriculum.with_beta_con(value)})
    if param == "temperature":
        return cfg.model_copy(update={"schedule": cfg.schedule.model_copy(update={"temperature": value})})
    raise ValueError(f"Unknown sweep parameter: {param} (expected one of {', '.join(SWEEP_PARAMS)})")


def sweep(
    cfg: RunConfig,
    param: str,
    values: list[float],
    runtime: Optional[Runtime] = None,
    steps: Optional[int] = None,
) -> SweepReport:
    """
    Train one executor per (value, seed), step-matched.

    Raises:
        ValueError: If values is empty or param is unknown
    """
    if not values:
        raise ValueError("Sweep needs at least one value")
    configs = [(float(v), swept_config(cfg, param, float(v))) for v in values]
    runtime = runtime or build_runtime(cfg)
    steps = steps or cfg.phase_steps * cfg.rounds

    rows = []
    curves: dict[tuple[float, int], list[float]] = {}
    for value, value_cfg in configs:
        for seed in cfg.seeds:
            report = train_executor(value_cfg.with_seed(seed), runtime, steps=steps)
            rows.append({"param": param, "value": value, "seed": seed, "terminal_reward": report.terminal_reward()})
            curves[(value, seed)] = report.rewards
            logger.info("Sweep %s=%g seed %d: terminal reward %.3f", param, value, seed, report.terminal_reward())

    return SweepReport(param, pd.DataFrame(rows, columns=["param", "value", "seed", "terminal_reward"]), curves)
