"""
Hierarchical Agent Module

Composition of the planner and an executor into an acting agent:
- PolicyExecutor: greedy decoding of the learned executor policy
- RuleExecutor: deterministic grounding of instruction text on the screen
- run_episode: planner sub-goal -> executor action -> environment step
- Trajectory recording and replay

Three episode modes cover the hierarchy ablations: the full hierarchy,
a flat executor fed the goal text, and a flat executor fed the goal plus
the whole knowledge base.
"""

import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Protocol

from .environment import (
    SWIPE_ANCHORS,
    Action,
    ActionKind,
    ActionValidationError,
    MiniDroidEnvironment,
    Screen,
)
from .planner import Done, KnowledgeBase, next_subgoal, render_plan
from .policy import Context, ExecutorPolicy, PolicyParams
from .tasks import TaskSpec

logger = logging.getLogger(__name__)

DONE_SUBGOAL = "All plan steps are complete."
QUOTED = re.compile(r"'([^']+)'")
DIRECTIONS = ("up", "down", "left", "right")


class EpisodeMode(Enum):
    HIERARCHY = "hierarchy"
    NO_HIERARCHY = "no_hierarchy"
    NO_HIERARCHY_KB = "no_hierarchy_kb"


class Executor(Protocol):
    def act(self, ctx: Context) -> Optional[Action]:
        ...


class PolicyExecutor:
    """Learned executor: argmax per head under fixed parameters."""

    def __init__(self, policy: ExecutorPolicy, params: PolicyParams):
        policy.check_params(params)
        self.policy = policy
        self.params = params

    def act(self, ctx: Context) -> Optional[Action]:
        return self.policy.act(self.params, ctx)


class RuleExecutor:
    """
    Instruction-grounding executor.

    Reads the quoted value in a sub-goal and finds the element with that
    label on the current screen. Returns None when the instruction cannot
    be grounded.
    """

    def act(self, ctx: Context) -> Optional[Action]:
        text = ctx.sub_goal
        lowered = text.lower()
        quoted = QUOTED.findall(text)

        if "answer with" in lowered and quoted:
            return Action.answer(quoted[-1])
        if "type the text" in lowered and quoted:
            return Action.type_text(quoted[-1])
        if "home button" in lowered:
            return Action.system_button("home")
        if "back button" in lowered:
            return Action.system_button("back")
        if "swipe" in lowered:
            for direction in DIRECTIONS:
                if re.search(rf"\b{direction}\b", lowered):
                    start, end = SWIPE_ANCHORS[direction]
                    return Action.swipe(start, end)
            return None
        if not quoted:
            return None

        element = _find_by_label(ctx.observation, quoted[0])
        if element is None:
            return None
        x, y = element.tap_point
        if "long press" in lowered:
            return Action.long_press(x, y)
        if "tap" in lowered:
            return Action.click(x, y)
        return None


def _find_by_label(screen: Screen, label: str):
    for element in screen.elements:
        if element.label == label:
            return element
    lowered = label.lower()
    for element in screen.elements:
        if element.label.lower() == lowered:
            return element
    return None


def tap_target(screen: Screen, action: Optional[Action]) -> Optional[str]:
    """Element id hit by a click or long press."""
    if action is None or action.kind not in (ActionKind.CLICK, ActionKind.LONG_PRESS):
        return None
    element = screen.element_at(*action.coordinate)
    return element.element_id if element is not None else None


@dataclass(frozen=True)
class TrajectoryStep:
    index: int
    observation: Screen
    sub_goal: str
    plan_index: Optional[int]
    action: Optional[Action]            # None when the executor output was malformed
    post_observation: Screen
    transitioned: bool
    target: Optional[str] = None

    @property
    def well_formed(self) -> bool:
        return self.action is not None


@dataclass(frozen=True)
class Trajectory:
    """One recorded episode."""
    task: TaskSpec
    steps: tuple[TrajectoryStep, ...]
    success: bool
    seed: int
    mode: EpisodeMode = EpisodeMode.HIERARCHY
    kb_revision: Optional[int] = None

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def actions(self) -> list[Optional[Action]]:
        return [s.action for s in self.steps]


@dataclass
class HierarchicalAgent:
    """Planner knowledge bases plus one executor acting in an environment."""
    env: MiniDroidEnvironment
    executor: Executor
    kb_store: dict[str, KnowledgeBase] = field(default_factory=dict)
    mode: EpisodeMode = EpisodeMode.HIERARCHY
    max_repeats: int = 3

    def with_executor(self, executor: Executor) -> "HierarchicalAgent":
        return HierarchicalAgent(self.env, executor, dict(self.kb_store), self.mode, self.max_repeats)

    def with_mode(self, mode: EpisodeMode) -> "HierarchicalAgent":
        return HierarchicalAgent(self.env, self.executor, dict(self.kb_store), mode, self.max_repeats)

    def run_episode(
        self,
        task: TaskSpec,
        seed: int,
        env: Optional[MiniDroidEnvironment] = None,
        kb: Optional[KnowledgeBase] = None,
    ) -> Trajectory:
        return run_episode(self, task, seed, env=env, kb=kb)


def run_episode(
    agent: HierarchicalAgent,
    task: TaskSpec,
    seed: int,
    env: Optional[MiniDroidEnvironment] = None,
    kb: Optional[KnowledgeBase] = None,
) -> Trajectory:
    """
    Run one episode to termination.

    The planner issues terminate(success) once every plan step is satisfied
    and terminate(failure) when the same step has been issued more than
    max_repeats times in a row.

    Args:
        agent: The acting agent
        task: Task instance
        seed: Episode seed
        env: Environment override (e.g. a faulty one)
        kb: Knowledge base override (defaults to agent.kb_store)

    Returns:
        Trajectory with per-step records and the success flag

    Raises:
        ValueError: If a knowledge base is required but missing
    """
    env = env or agent.env
    mode = agent.mode
    if mode != EpisodeMode.NO_HIERARCHY:
        kb = kb or agent.kb_store.get(task.template_id)
        if kb is None:
            raise ValueError(f"No knowledge base for template {task.template_id}")

    state = env.reset(task, seed)
    history: list[tuple[Screen, Optional[Action], Screen]] = []
    steps = []
    last_index = None
    repeats = 0

    while not state.done:
        obs = env.observe(state)
        plan_index = None

        if mode == EpisodeMode.HIERARCHY:
            proposal = next_subgoal(kb, obs, history, task)
            if isinstance(proposal, Done):
                sub_goal = DONE_SUBGOAL
                plan_index = proposal.plan_index
                action = Action.terminate("success")
            else:
                repeats = repeats + 1 if proposal.plan_index == last_index else 1
                last_index = proposal.plan_index
                sub_goal, plan_index = proposal.text, proposal.plan_index
                if repeats > agent.max_repeats:
                    action = Action.terminate("failure")
                else:
                    action = agent.executor.act(Context(obs, task.goal_text, sub_goal))
        else:
            sub_goal = task.goal_text
            if mode == EpisodeMode.NO_HIERARCHY_KB:
                sub_goal = f"{task.goal_text} {render_plan(kb, task, obs)}"
            action = agent.executor.act(Context(obs, task.goal_text, sub_goal))

        if action is not None:
            try:
                state, outcome = env.step(state, action)
            except ActionValidationError as e:
                logger.debug("Invalid executor action %s: %s", action, e)
                action = None
        if action is None:
            state, outcome = env.skip(state)

        steps.append(TrajectoryStep(
            index=len(steps),
            observation=obs,
            sub_goal=sub_goal,
            plan_index=plan_index,
            action=action,
            post_observation=outcome.observation,
            transitioned=outcome.transitioned,
            target=tap_target(obs, action),
        ))
        history.append((obs, action, outcome.observation))

    success = env.check_success(state, task)
    return Trajectory(
        task=task,
        steps=tuple(steps),
        success=success,
        seed=seed,
        mode=mode,
        kb_revision=kb.revision if kb is not None else None,
    )


@dataclass(frozen=True)
class ReplayResult:
    matches: bool
    success: bool
    first_mismatch: Optional[int] = None


def replay_trajectory(traj: Trajectory, env: Optional[MiniDroidEnvironment] = None) -> ReplayResult:
    """Re-execute recorded actions from the recorded seed and compare outcomes."""
    env = env or MiniDroidEnvironment()
    state = env.reset(traj.task, traj.seed)
    first_mismatch = None
    for step in traj.steps:
        if state.done:
            first_mismatch = step.index if first_mismatch is None else first_mismatch
            break
        if step.action is None:
            state, outcome = env.skip(state)
        else:
            state, outcome = env.step(state, step.action)
        if first_mismatch is None and outcome.observation != step.post_observation:
            first_mismatch = step.index
    success = env.check_success(state, traj.task) if state.done else False
    if first_mismatch is None and (not state.done or success != traj.success):
        first_mismatch = len(traj.steps)
    return ReplayResult(matches=first_mismatch is None, success=success, first_mismatch=first_mismatch)
