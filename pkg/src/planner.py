"""
Planner Module

The high-level planner and its self-evolving knowledge base:
- Summarize: distill a demonstration into a parameterized plan
- Next sub-goal: emit the first plan step whose outcome is not yet met
- Verify / Locate: find the first transition that broke the plan
- Reflect: classify the root cause of a failed episode
- Revise: repair the plan with one atomic operator (Add, Delete, Update, Highlight)
- srlr_loop: iterate execute -> reflect -> locate -> revise until the plan
  succeeds on consecutive fresh-seed episodes

All engines are deterministic rules over structured screens.
"""

import json
import logging
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Optional, Union

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from .environment import (
    Action,
    ActionKind,
    ElementKind,
    MiniDroidEnvironment,
    Screen,
    UiElement,
)
from .tasks import Demonstration, DemoStep, TaskSpec, TaskSuite

logger = logging.getLogger(__name__)

KB_FORMAT = "minidroid-knowledge"
KB_VERSION = 1

# [FILENAME] -> goal parameter "filename"
PARAM_PLACEHOLDER = re.compile(r"\[([A-Z_]+)\]")
# [SCREEN:element_id] -> value displayed by that element at plan time
SCREEN_PLACEHOLDER = re.compile(r"\[SCREEN:([a-z0-9_]+)\]")

TAP_KINDS = (ActionKind.CLICK, ActionKind.LONG_PRESS)
TEXT_KINDS = (ActionKind.TYPE, ActionKind.ANSWER)


class PlannerError(ValueError):
    """Unresolvable placeholder or plan index out of range."""


class RevisionRefused(ValueError):
    """Revise was asked to repair a failure it cannot explain."""


class Emphasis(Enum):
    """Markers that make a step mandatory when rendered."""
    IMPORTANT = "IMPORTANT"
    CRITICAL = "CRITICAL"
    NOTE = "NOTE"
    PAY_ATTENTION = "PAY ATTENTION"


class OutcomeKind(Enum):
    SCREEN_BECOMES = "screen_becomes"
    ELEMENT_EXISTS = "element_exists"
    ELEMENT_TEXT_EQUALS = "element_text_equals"
    ELEMENT_TEXT_CONTAINS = "element_text_contains"
    STATE_FLAG = "state_flag"


class FailureCategory(Enum):
    MISSING_STEP = "missing_step"
    WRONG_ORDER = "wrong_order"
    WRONG_ELEMENT = "wrong_element"
    WRONG_LITERAL = "wrong_literal"
    MISSING_PRECONDITION = "missing_precondition"
    UNEXPLAINED = "unexplained"


class RevisionOperator(Enum):
    ADD = "Add"
    DELETE = "Delete"
    UPDATE = "Update"
    HIGHLIGHT = "Highlight"


def display_value(element: UiElement) -> str:
    """What an element shows: typed text for fields, the label otherwise."""
    if element.kind == ElementKind.TEXT_FIELD:
        return element.text or ""
    return element.label


def generalize(text: Optional[str], params: dict[str, str]) -> Optional[str]:
    """Replace parameter literals with [NAME] placeholders, longest value first."""
    if text is None:
        return None
    for name, value in sorted(params.items(), key=lambda kv: (-len(kv[1]), kv[0])):
        if value:
            text = text.replace(value, f"[{name.upper()}]")
    return text


def resolve_text(text: Optional[str], values: dict[str, str], screen: Optional[Screen] = None) -> Optional[str]:
    """
    Fill placeholders from goal values and, for [SCREEN:...], from a screen.

    Raises:
        PlannerError: If a parameter placeholder has no value
    """
    if text is None:
        return None

    def param(match: re.Match) -> str:
        name = match.group(1).lower()
        if name not in values:
            raise PlannerError(f"No value for placeholder {match.group(0)}")
        return values[name]

    text = PARAM_PLACEHOLDER.sub(param, text)
    if screen is not None:
        def on_screen(match: re.Match) -> str:
            element = screen.find(match.group(1))
            return display_value(element) if element is not None else match.group(0)
        text = SCREEN_PLACEHOLDER.sub(on_screen, text)
    return text


def _direction(start: tuple[int, int], end: tuple[int, int]) -> str:
    dx, dy = end[0] - start[0], end[1] - start[1]
    if abs(dy) >= abs(dx):
        return "up" if dy < 0 else "down"
    return "left" if dx < 0 else "right"


@dataclass(frozen=True)
class OutcomePredicate:
    """A checkable expectation about the screen after a step."""
    kind: OutcomeKind
    args: tuple[str, ...]

    def holds(self, screen: Screen, values: dict[str, str]) -> bool:
        args = [resolve_text(a, values, screen) for a in self.args]
        if self.kind == OutcomeKind.SCREEN_BECOMES:
            return screen.screen_id == args[0]

        element = screen.find(args[0])
        if self.kind == OutcomeKind.ELEMENT_EXISTS:
            expected = len(args) < 2 or args[1] == "true"
            return (element is not None) == expected
        if element is None:
            return False
        if self.kind == OutcomeKind.ELEMENT_TEXT_EQUALS:
            return display_value(element) == args[1]
        if self.kind == OutcomeKind.ELEMENT_TEXT_CONTAINS:
            return args[1] in display_value(element)
        return element.get(args[1]) == args[2]

    def __str__(self) -> str:
        return f"{self.kind.value}({', '.join(self.args)})"

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "args": list(self.args)}

    @classmethod
    def from_dict(cls, data: dict) -> "OutcomePredicate":
        return cls(OutcomeKind(data["kind"]), tuple(data["args"]))


@dataclass(frozen=True)
class ActionTemplate:
    """An action with a symbolic element target and placeholder-bearing text."""
    kind: ActionKind
    target: Optional[str] = None        # Element id
    target_label: Optional[str] = None
    coordinate: Optional[tuple[int, int]] = None
    coordinate2: Optional[tuple[int, int]] = None
    text: Optional[str] = None
    button: Optional[str] = None
    status: Optional[str] = None

    @property
    def key(self) -> tuple[ActionKind, Optional[str]]:
        return (self.kind, self.target)

    def matches(self, action: Optional[Action], target: Optional[str], values: dict[str, str], screen: Optional[Screen] = None) -> bool:
        """Whether an executed action (and the element it hit) is this template."""
        if action is None or action.kind != self.kind:
            return False
        if self.kind in TAP_KINDS:
            return target == self.target
        if self.kind in TEXT_KINDS:
            try:
                return action.text == resolve_text(self.text, values, screen)
            except PlannerError:
                return False
        if self.kind == ActionKind.SWIPE:
            if self.coordinate is None or self.coordinate2 is None:
                return True
            return _direction(action.coordinate, action.coordinate2) == _direction(self.coordinate, self.coordinate2)
        if self.kind == ActionKind.SYSTEM_BUTTON:
            return action.button == self.button
        return action.status == self.status

    def to_dict(self) -> dict:
        data = {"kind": self.kind.value}
        for name in ("target", "target_label", "text", "button", "status"):
            value = getattr(self, name)
            if value is not None:
                data[name] = value
        if self.coordinate is not None:
            data["coordinate"] = list(self.coordinate)
        if self.coordinate2 is not None:
            data["coordinate2"] = list(self.coordinate2)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ActionTemplate":
        return cls(
            kind=ActionKind(data["kind"]),
            target=data.get("target"),
            target_label=data.get("target_label"),
            coordinate=tuple(data["coordinate"]) if "coordinate" in data else None,
            coordinate2=tuple(data["coordinate2"]) if "coordinate2" in data else None,
            text=data.get("text"),
            button=data.get("button"),
            status=data.get("status"),
        )


@dataclass(frozen=True)
class PlanStep:
    """One step of the declarative plan."""
    instruction: str
    action_template: ActionTemplate
    expected_outcome: Optional[OutcomePredicate] = None
    emphasis: Optional[Emphasis] = None
    mandatory: bool = False

    def render(self) -> str:
        """Instruction with its emphasis marker, if any."""
        if self.emphasis is None:
            return self.instruction
        body = self.instruction[:1].lower() + self.instruction[1:]
        return f"{self.emphasis.value}: You MUST {body}"

    def to_dict(self) -> dict:
        return {
            "instruction": self.instruction,
            "action_template": self.action_template.to_dict(),
            "expected_outcome": self.expected_outcome.to_dict() if self.expected_outcome else None,
            "emphasis": self.emphasis.value if self.emphasis else None,
            "mandatory": self.mandatory,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PlanStep":
        outcome = data.get("expected_outcome")
        emphasis = data.get("emphasis")
        return cls(
            instruction=data["instruction"],
            action_template=ActionTemplate.from_dict(data["action_template"]),
            expected_outcome=OutcomePredicate.from_dict(outcome) if outcome else None,
            emphasis=Emphasis(emphasis) if emphasis else None,
            mandatory=bool(data.get("mandatory", False)),
        )


@dataclass(frozen=True)
class RevisionRecord:
    """Provenance entry for one applied revision."""
    revision: int
    operator: RevisionOperator
    category: FailureCategory
    step_index: int
    detail: str = ""

    def to_dict(self) -> dict:
        return {
            "revision": self.revision,
            "operator": self.operator.value,
            "category": self.category.value,
            "step_index": self.step_index,
            "detail": self.detail,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RevisionRecord":
        return cls(
            revision=data["revision"],
            operator=RevisionOperator(data["operator"]),
            category=FailureCategory(data["category"]),
            step_index=data["step_index"],
            detail=data.get("detail", ""),
        )


@dataclass(frozen=True)
class KnowledgeBase:
    """Per-template declarative plan plus its revision history."""
    task_template: str
    steps: tuple[PlanStep, ...]
    revision: int = 0
    provenance: tuple[RevisionRecord, ...] = ()
    source_params: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.steps:
            raise ValueError("Knowledge base must have at least one step")
        if len(self.provenance) != self.revision:
            raise ValueError(f"Provenance has {len(self.provenance)} records for revision {self.revision}")

    def __len__(self) -> int:
        return len(self.steps)

    def to_dict(self) -> dict:
        return {
            "format": KB_FORMAT,
            "version": KB_VERSION,
            "task_template": self.task_template,
            "revision": self.revision,
            "source_params": dict(sorted(self.source_params.items())),
            "steps": [s.to_dict() for s in self.steps],
            "provenance": [r.to_dict() for r in self.provenance],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "KnowledgeBase":
        if data.get("format") != KB_FORMAT:
            raise ValueError(f"Not a knowledge base file (format {data.get('format')!r})")
        return cls(
            task_template=data["task_template"],
            steps=tuple(PlanStep.from_dict(s) for s in data["steps"]),
            revision=data["revision"],
            provenance=tuple(RevisionRecord.from_dict(r) for r in data.get("provenance", [])),
            source_params=dict(data.get("source_params", {})),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "KnowledgeBase":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class FailureCase:
    """Root-cause explanation of a failed episode."""
    category: FailureCategory
    t_star: Optional[int]
    plan_index: Optional[int]
    observed: str
    expected: str
    message: str
    demo_index: Optional[int] = None    # Demonstration step to rebuild from
    swap_index: Optional[int] = None    # Plan step out of order with its successor

    def __post_init__(self):
        if self.category != FailureCategory.UNEXPLAINED and (self.t_star is None or self.plan_index is None):
            raise ValueError(f"{self.category.value} failure needs a located step")

    def to_dict(self) -> dict:
        return {
            "category": self.category.value,
            "t_star": self.t_star,
            "plan_index": self.plan_index,
            "observed": self.observed,
            "expected": self.expected,
            "message": self.message,
            "demo_index": self.demo_index,
            "swap_index": self.swap_index,
        }


class LoopConfig(BaseModel):
    """SRLR loop limits."""
    model_config = ConfigDict(frozen=True)

    max_iter: int = Field(default=10, ge=1)
    success_thresh: int = Field(default=3, ge=1)
    seed_offset: int = Field(default=10000, ge=0)


@dataclass(frozen=True)
class SubGoal:
    text: str
    plan_index: int


@dataclass(frozen=True)
class Done:
    """Every plan step is satisfied; the agent should terminate."""
    plan_index: int


# =============================================================================
# Summarize
# =============================================================================

def _answer_source(step: DemoStep) -> Optional[UiElement]:
    for element in step.pre_obs.elements:
        if display_value(element) == step.action.text:
            return element
    return None


def _derive_outcome(step: DemoStep, params: dict[str, str], source: Optional[UiElement]) -> Optional[OutcomePredicate]:
    """Expected outcome from the observed (pre, post) difference."""
    pre, post = step.pre_obs, step.post_obs
    if step.action.kind == ActionKind.ANSWER:
        if source is None:
            return None
        return OutcomePredicate(OutcomeKind.ELEMENT_EXISTS, (source.element_id, "true"))
    if pre.screen_id != post.screen_id:
        return OutcomePredicate(OutcomeKind.SCREEN_BECOMES, (post.screen_id,))

    before = {e.element_id: e for e in pre.elements}
    after = {e.element_id: e for e in post.elements}
    changes = []
    for element in post.elements:
        old = before.get(element.element_id)
        if old is None:
            continue
        old_state, new_state = old.state_dict, element.state_dict
        for key in sorted(set(old_state) | set(new_state)):
            if old_state.get(key) != new_state.get(key):
                changes.append((element.element_id, key, new_state.get(key, "")))

    for element_id, key, value in changes:
        if key == "text":
            return OutcomePredicate(OutcomeKind.ELEMENT_TEXT_EQUALS, (element_id, generalize(value, params)))
    for element_id, key, value in changes:
        if key != "focused":
            return OutcomePredicate(OutcomeKind.STATE_FLAG, (element_id, key, generalize(value, params)))

    for element_id in after:
        if element_id not in before:
            return OutcomePredicate(OutcomeKind.ELEMENT_EXISTS, (element_id, "true"))
    for element_id in before:
        if element_id not in after:
            return OutcomePredicate(OutcomeKind.ELEMENT_EXISTS, (element_id, "false"))

    for element_id, key, value in changes:
        if value == "true":
            return OutcomePredicate(OutcomeKind.STATE_FLAG, (element_id, key, value))
    return None


def step_from_demo(step: DemoStep, params: dict[str, str]) -> PlanStep:
    """Generalize one demonstration step into a plan step."""
    action = step.action
    instruction = generalize(step.instruction, params)
    text = generalize(action.text, params)

    source = None
    if action.kind == ActionKind.ANSWER and text == action.text:
        source = _answer_source(step)
        if source is not None:
            placeholder = f"[SCREEN:{source.element_id}]"
            instruction = instruction.replace(action.text, placeholder)
            text = placeholder

    target_label = None
    if step.target is not None:
        element = step.pre_obs.find(step.target)
        if element is not None:
            target_label = generalize(element.label, params)

    template = ActionTemplate(
        kind=action.kind,
        target=step.target,
        target_label=target_label,
        coordinate=action.coordinate,
        coordinate2=action.coordinate2,
        text=text,
        button=action.button,
        status=action.status,
    )
    return PlanStep(
        instruction=instruction,
        action_template=template,
        expected_outcome=_derive_outcome(step, params, source),
    )


def summarize(demo: Demonstration, goal: Optional[TaskSpec] = None) -> KnowledgeBase:
    """
    One-pass distillation of a demonstration into a knowledge base.

    Args:
        demo: Expert demonstration
        goal: Task whose params are generalized (defaults to the demo's task)

    Returns:
        KnowledgeBase with one plan step per demonstration step
    """
    goal = goal or demo.task
    params = dict(goal.params)
    steps = tuple(step_from_demo(s, params) for s in demo.steps)
    logger.debug("Summarized %s into %d steps", demo.demo_id, len(steps))
    return KnowledgeBase(task_template=goal.template_id, steps=steps, source_params=params)


# =============================================================================
# Sub-goal emission and verification
# =============================================================================

def _holds(step: PlanStep, screen: Screen, values: dict[str, str]) -> bool:
    return step.expected_outcome is None or step.expected_outcome.holds(screen, values)


def _skip_satisfied(kb: KnowledgeBase, index: int, screen: Screen, values: dict[str, str]) -> int:
    """Advance past optional steps whose outcome already holds."""
    while index < len(kb.steps):
        step = kb.steps[index]
        if step.mandatory or step.expected_outcome is None or step.action_template.kind in TEXT_KINDS:
            break
        if not step.expected_outcome.holds(screen, values):
            break
        index += 1
    return index


def plan_cursor(kb: KnowledgeBase, history: list[tuple[Screen, Optional[Action], Screen]], obs: Screen, values: dict[str, str]) -> int:
    """Index of the active plan step given (pre, action, post) history."""
    index = 0
    for pre, _, post in history:
        index = _skip_satisfied(kb, index, pre, values)
        if index < len(kb.steps) and _holds(kb.steps[index], post, values):
            index += 1
    return _skip_satisfied(kb, index, obs, values)


def next_subgoal(
    kb: KnowledgeBase,
    obs: Screen,
    history: list[tuple[Screen, Optional[Action], Screen]],
    goal: TaskSpec,
) -> Union[SubGoal, Done]:
    """
    Instruction of the first plan step not yet satisfied, or Done.

    Raises:
        PlannerError: If the instruction needs a parameter the goal lacks
    """
    values = dict(goal.params)
    index = plan_cursor(kb, history, obs, values)
    if index >= len(kb.steps):
        return Done(index)
    return SubGoal(resolve_text(kb.steps[index].render(), values, obs), index)


def render_plan(kb: KnowledgeBase, goal: TaskSpec, obs: Screen) -> str:
    """Whole plan as one text (flat execution with the knowledge base)."""
    values = dict(goal.params)
    return " ".join(resolve_text(s.render(), values, obs) for s in kb.steps)


def verify(
    transition: tuple[Screen, Optional[Action], Screen],
    kb: KnowledgeBase,
    plan_index: int,
    goal: Optional[TaskSpec] = None,
) -> bool:
    """
    Check a transition's post screen against a plan step's expected outcome.

    Raises:
        PlannerError: If plan_index is out of range
    """
    if not 0 <= plan_index < len(kb.steps):
        raise PlannerError(f"Plan index {plan_index} outside plan of length {len(kb.steps)}")
    values = dict(goal.params) if goal is not None else dict(kb.source_params)
    _, _, post = transition
    return _holds(kb.steps[plan_index], post, values)


# =============================================================================
# Locate
# =============================================================================

def _lcs_table(a: list, b: list) -> list[list[int]]:
    """Suffix LCS lengths: table[i][j] = LCS(a[i:], b[j:])."""
    n, m = len(a), len(b)
    table = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n - 1, -1, -1):
        for j in range(m - 1, -1, -1):
            if a[i] == b[j]:
                table[i][j] = table[i + 1][j + 1] + 1
            else:
                table[i][j] = max(table[i + 1][j], table[i][j + 1])
    return table


def lcs_pairs(a: list, b: list) -> list[tuple[int, int]]:
    """Matched index pairs of one longest common subsequence (leftmost)."""
    table = _lcs_table(a, b)
    pairs = []
    i = j = 0
    while i < len(a) and j < len(b):
        if a[i] == b[j] and table[i][j] == table[i + 1][j + 1] + 1:
            pairs.append((i, j))
            i += 1
            j += 1
        elif table[i + 1][j] >= table[i][j + 1]:
            i += 1
        else:
            j += 1
    return pairs


def first_divergence(executed: list, reference: list) -> Optional[int]:
    """
    First position in `executed` where it departs from `reference`.

    Returns len(executed) when only trailing reference items are missing,
    None when both sequences are fully aligned.
    """
    table = _lcs_table(executed, reference)
    i = j = 0
    while i < len(executed) and j < len(reference):
        if executed[i] == reference[j] and table[i][j] == table[i + 1][j + 1] + 1:
            i += 1
            j += 1
        else:
            return i
    if i < len(executed) or j < len(reference):
        return i
    return None


def _executed(traj) -> list[tuple[int, object]]:
    return [
        (t, s) for t, s in enumerate(traj.steps)
        if s.action is not None and s.action.kind != ActionKind.TERMINATE
    ]


def locate(traj, kb: KnowledgeBase, demo: Optional[Demonstration] = None, goal: Optional[TaskSpec] = None) -> Optional[int]:
    """
    First trajectory step whose plan step fails verification.

    When every verification passes on a failed episode, the trajectory is
    aligned against the plan (by action kind) and then against the
    demonstration (by kind and target) with a longest common subsequence;
    the first divergence is returned.

    Args:
        traj: Trajectory with steps carrying observation, action,
            post_observation and plan_index
        kb: Knowledge base the episode ran with
        demo: Optional demonstration for the second fallback
        goal: Task whose params resolve placeholders (defaults to traj.task)

    Returns:
        Step index t*, or None for a successful or unexplainable episode
    """
    if not traj.steps or traj.success:
        return None
    goal = goal or traj.task

    for t, step in enumerate(traj.steps):
        index = step.plan_index
        if index is None or index >= len(kb.steps):
            continue
        if not verify((step.observation, step.action, step.post_observation), kb, index, goal):
            return t

    executed = _executed(traj)
    position = first_divergence(
        [s.action.kind for _, s in executed],
        [p.action_template.kind for p in kb.steps],
    )
    if position is None and demo is not None:
        position = first_divergence(
            [(s.action.kind, s.target) for _, s in executed],
            [(d.action.kind, d.target) for d in demo.steps],
        )
    if position is None:
        return None
    if position < len(executed):
        return executed[position][0]
    after_last = executed[-1][0] + 1 if executed else 0
    return min(after_last, len(traj.steps) - 1)


# =============================================================================
# Reflect
# =============================================================================

def _keys(kb: KnowledgeBase) -> list:
    return [s.action_template.key for s in kb.steps]


def _demo_keys(demo: Demonstration) -> list:
    return [(s.action.kind, s.target) for s in demo.steps]


def _order_violation(kb: KnowledgeBase, demo: Demonstration) -> Optional[int]:
    """First adjacent pair whose swap brings the plan closer to the demonstration."""
    keys = _keys(kb)
    reference = _demo_keys(demo)
    base = len(lcs_pairs(keys, reference))
    for i in range(len(keys) - 1):
        if keys[i] == keys[i + 1]:
            continue
        swapped = keys[:i] + [keys[i + 1], keys[i]] + keys[i + 2:]
        if len(lcs_pairs(swapped, reference)) > base:
            return i
    return None


@dataclass
class _Gap:
    """Unaligned plan and demo steps between two aligned pairs."""
    kb_start: int
    kb_end: int                 # Next aligned plan index (or len)
    kb_unmatched: list[int]
    demo_unmatched: list[int]


def _gaps(kb: KnowledgeBase, demo: Demonstration) -> tuple[list[tuple[int, int]], list[_Gap]]:
    pairs = lcs_pairs(_keys(kb), _demo_keys(demo))
    bounds = [(-1, -1)] + pairs + [(len(kb.steps), len(demo.steps))]
    gaps = []
    for (i1, j1), (i2, j2) in zip(bounds, bounds[1:]):
        kb_unmatched = list(range(i1 + 1, i2))
        demo_unmatched = list(range(j1 + 1, j2))
        if kb_unmatched or demo_unmatched:
            gaps.append(_Gap(i1 + 1, i2, kb_unmatched, demo_unmatched))
    return pairs, gaps


def _counterpart(kb: KnowledgeBase, demo: Demonstration, plan_index: int) -> Optional[int]:
    """Demonstration step corresponding to a plan step."""
    pairs, gaps = _gaps(kb, demo)
    for i, j in pairs:
        if i == plan_index:
            return j
    for gap in gaps:
        if plan_index in gap.kb_unmatched:
            position = gap.kb_unmatched.index(plan_index)
            if position < len(gap.demo_unmatched):
                return gap.demo_unmatched[position]
    return None


def _hardcoded_literal(template: ActionTemplate, params: dict[str, str]) -> Optional[str]:
    """Parameter name whose source value appears literally in the template text."""
    if not template.text:
        return None
    for name, value in sorted(params.items()):
        if value and value in template.text:
            return name
    return None


def _describe(step) -> str:
    return str(step.action) if step.action is not None else "no action"


def reflect(
    traj,
    kb: KnowledgeBase,
    goal: TaskSpec,
    t_star: Optional[int],
    demo: Optional[Demonstration] = None,
) -> FailureCase:
    """
    Classify the root cause of a failed episode.

    Rules are tried in order: no located step; plan order contradicting the
    demonstration; a demonstration step missing before the active step; an
    input that matched the plan but changed nothing (unexplained); a wrong
    literal; a wrong element; a matching action with an unmet outcome.
    """
    if t_star is None:
        return FailureCase(FailureCategory.UNEXPLAINED, None, None, "", "", "No divergence located")

    step = traj.steps[t_star]
    plan_index = step.plan_index if step.plan_index is not None else len(kb.steps)
    active = kb.steps[plan_index] if plan_index < len(kb.steps) else None
    values = dict(goal.params)
    expected = str(active.expected_outcome) if active and active.expected_outcome else "episode success"
    observed = f"{_describe(step)} -> {step.post_observation.screen_id}"

    def case(category: FailureCategory, message: str, **extra) -> FailureCase:
        return FailureCase(category, t_star, plan_index, observed, expected, message, **extra)

    if demo is not None:
        swap = _order_violation(kb, demo)
        if swap is not None:
            return case(FailureCategory.WRONG_ORDER, f"Plan steps {swap} and {swap + 1} are out of order", swap_index=swap)

        _, gaps = _gaps(kb, demo)
        for gap in gaps:
            surplus = gap.demo_unmatched[len(gap.kb_unmatched):]
            if surplus and gap.kb_end <= plan_index:
                return case(
                    FailureCategory.MISSING_STEP,
                    f"Demonstration step {surplus[0]} has no plan step",
                    demo_index=surplus[0],
                )
    elif active is not None:
        executed_kinds = {s.action.kind for _, s in _executed(traj)}
        if active.action_template.kind not in executed_kinds:
            return case(FailureCategory.MISSING_STEP, f"No {active.action_template.kind.value} action was executed")

    if active is None:
        return case(FailureCategory.UNEXPLAINED, "Plan completed but the task failed")

    template = active.action_template
    matched = template.matches(step.action, step.target, values, step.observation)
    if matched and not step.transitioned:
        return case(FailureCategory.UNEXPLAINED, "Action matched the plan but the screen did not change")

    counterpart = _counterpart(kb, demo, plan_index) if demo is not None else None

    if template.kind in TEXT_KINDS and step.action is not None and step.action.kind == template.kind:
        hardcoded = _hardcoded_literal(template, kb.source_params)
        if hardcoded is not None and goal.params.get(hardcoded) != kb.source_params[hardcoded]:
            return case(FailureCategory.WRONG_LITERAL, f"Literal value of '{hardcoded}' is hard-coded")
        if not matched:
            return case(FailureCategory.WRONG_LITERAL, "Executed text differs from the planned text")

    if template.kind in TAP_KINDS:
        if demo is not None and counterpart is not None:
            reference = demo.steps[counterpart]
            if reference.action.kind == template.kind and reference.target != template.target:
                return case(
                    FailureCategory.WRONG_ELEMENT,
                    f"Plan targets {template.target}, demonstration used {reference.target}",
                    demo_index=counterpart,
                )
        if step.action is not None and step.action.kind == template.kind and step.target != template.target:
            return case(
                FailureCategory.WRONG_ELEMENT,
                f"Executed tap hit {step.target}, plan targets {template.target}",
                demo_index=counterpart,
            )

    if matched and step.transitioned:
        precondition = counterpart - 1 if counterpart is not None and counterpart > 0 else None
        return case(FailureCategory.MISSING_PRECONDITION, "Outcome unmet after the planned action", demo_index=precondition)

    return case(FailureCategory.UNEXPLAINED, "No rule explains the failure")


# =============================================================================
# Revise
# =============================================================================

def revise(kb: KnowledgeBase, failure: FailureCase, t_star: int, demo: Demonstration) -> KnowledgeBase:
    """
    Repair the knowledge base with exactly one operator.

    Args:
        kb: Current knowledge base
        failure: Reflect's diagnosis
        t_star: Located step (recorded in provenance)
        demo: Demonstration the plan came from

    Returns:
        New KnowledgeBase with revision + 1 and one provenance record

    Raises:
        RevisionRefused: For unexplained failures or missing evidence
    """
    category = failure.category
    if category == FailureCategory.UNEXPLAINED:
        raise RevisionRefused("Unexplained failures are not revised")

    steps = list(kb.steps)
    params = kb.source_params
    index = failure.plan_index

    if category in (FailureCategory.MISSING_STEP, FailureCategory.MISSING_PRECONDITION):
        if failure.demo_index is None:
            raise RevisionRefused(f"No demonstration step to add for {category.value}")
        new_step = step_from_demo(demo.steps[failure.demo_index], params)
        if category == FailureCategory.MISSING_STEP:
            position = _insert_position(kb, demo, failure.demo_index)
        else:
            position = min(index, len(steps))
        steps.insert(position, new_step)
        operator, step_index = RevisionOperator.ADD, position
        detail = f"added demo step {failure.demo_index}"

    elif category == FailureCategory.WRONG_LITERAL:
        old = steps[index]
        template = old.action_template
        steps[index] = replace(
            old,
            instruction=generalize(old.instruction, params),
            action_template=replace(template, text=generalize(template.text, params)),
            emphasis=Emphasis.IMPORTANT,
            mandatory=True,
        )
        operator, step_index = RevisionOperator.UPDATE, index
        detail = "restored parameter placeholder"

    elif category == FailureCategory.WRONG_ELEMENT:
        if failure.demo_index is None:
            if len(steps) < 2:
                raise RevisionRefused("Cannot delete the only plan step")
            del steps[index]
            operator, step_index = RevisionOperator.DELETE, index
            detail = "removed step without demonstration counterpart"
        else:
            old = steps[index]
            rebuilt = step_from_demo(demo.steps[failure.demo_index], params)
            steps[index] = replace(rebuilt, emphasis=old.emphasis, mandatory=old.mandatory)
            operator, step_index = RevisionOperator.UPDATE, index
            detail = f"retargeted to {rebuilt.action_template.target}"

    else:  # WRONG_ORDER
        swap = failure.swap_index if failure.swap_index is not None else index
        if swap + 1 >= len(steps):
            raise RevisionRefused(f"Step {swap} has no successor to reorder")
        steps[swap], steps[swap + 1] = steps[swap + 1], steps[swap]
        steps[swap] = replace(steps[swap], emphasis=Emphasis.CRITICAL, mandatory=True)
        operator, step_index = RevisionOperator.HIGHLIGHT, swap
        detail = f"step {swap} must precede step {swap + 1}"

    record = RevisionRecord(
        revision=kb.revision + 1,
        operator=operator,
        category=category,
        step_index=step_index,
        detail=f"{detail} (t*={t_star})",
    )
    logger.info("Revision %d of %s: %s %s", record.revision, kb.task_template, operator.value, detail)
    return replace(kb, steps=tuple(steps), revision=kb.revision + 1, provenance=kb.provenance + (record,))


def _insert_position(kb: KnowledgeBase, demo: Demonstration, demo_index: int) -> int:
    """Plan index in front of the first aligned step that follows demo_index."""
    pairs = lcs_pairs(_keys(kb), _demo_keys(demo))
    for i, j in pairs:
        if j > demo_index:
            return i
    return len(kb.steps)


# =============================================================================
# SRLR loop
# =============================================================================

@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    seed: int
    success: bool
    t_star: Optional[int] = None
    category: Optional[str] = None
    operator: Optional[str] = None


@dataclass
class LoopReport:
    """Per-iteration outcome of one SRLR run."""
    template_id: str
    records: list[IterationRecord] = field(default_factory=list)
    converged: bool = False
    final_streak: int = 0
    final_revision: int = 0

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def operators(self) -> list[str]:
        return [r.operator for r in self.records if r.operator]

    def to_frame(self) -> pd.DataFrame:
        columns = ["iteration", "seed", "success", "t_star", "category", "operator"]
        rows = [
            {"iteration": r.iteration, "seed": r.seed, "success": r.success,
             "t_star": r.t_star, "category": r.category, "operator": r.operator}
            for r in self.records
        ]
        return pd.DataFrame(rows, columns=columns)

    def save_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path


def srlr_loop(
    task_template: str,
    demo: Demonstration,
    env: MiniDroidEnvironment,
    agent,
    cfg: Optional[LoopConfig] = None,
    initial_kb: Optional[KnowledgeBase] = None,
) -> tuple[KnowledgeBase, LoopReport]:
    """
    Summarize once, then execute and repair until the plan succeeds
    `success_thresh` times in a row or `max_iter` iterations are spent.

    Args:
        task_template: Template to evolve
        demo: Demonstration for the template
        env: Environment episodes run in
        agent: Object with run_episode(task, seed, env=..., kb=...) -> Trajectory
        cfg: Loop limits
        initial_kb: Start from this knowledge base instead of summarizing

    Returns:
        (final knowledge base, loop report)
    """
    cfg = cfg or LoopConfig()
    if demo.task.template_id != task_template:
        raise ValueError(f"Demonstration is for {demo.task.template_id}, not {task_template}")

    suite = TaskSuite(env)
    kb = initial_kb or summarize(demo)
    report = LoopReport(template_id=task_template)
    streak = 0

    for iteration in range(cfg.max_iter):
        seed = demo.task.seed + cfg.seed_offset + iteration
        task = suite.instantiate_task(task_template, seed)
        traj = agent.run_episode(task, seed, env=env, kb=kb)

        if traj.success:
            streak += 1
            report.records.append(IterationRecord(iteration, seed, True))
            logger.info("SRLR %s iter %d: success (streak %d)", task_template, iteration, streak)
            if streak >= cfg.success_thresh:
                break
            continue

        streak = 0
        t_star = locate(traj, kb, demo, task)
        failure = reflect(traj, kb, task, t_star, demo)
        operator = None
        if failure.category != FailureCategory.UNEXPLAINED:
            try:
                kb = revise(kb, failure, t_star, demo)
                operator = kb.provenance[-1].operator.value
            except RevisionRefused as e:
                logger.warning("SRLR %s iter %d: %s", task_template, iteration, e)
        report.records.append(IterationRecord(
            iteration, seed, False, t_star, failure.category.value, operator,
        ))
        logger.info(
            "SRLR %s iter %d: failed at t*=%s (%s)", task_template, iteration, t_star, failure.category.value,
        )

    report.converged = streak >= cfg.success_thresh
    report.final_streak = streak
    report.final_revision = kb.revision
    return kb, report
