"""
Task Suite Module

Parameterized task templates on top of the MiniDroid environment:
- Seeded task instantiation from value pools
- Scripted expert demonstrations (the stand-in for human recordings)
- Decomposition of demonstrations into single-step training samples
- Knowledge-base corruption scenarios used to exercise plan repair
"""

import logging
import zlib
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from enum import Enum
from typing import Optional

import numpy as np

from .environment import (
    SWIPE_ANCHORS,
    Action,
    ActionKind,
    ActionValidationError,
    ConfigurationError,
    ElementKind,
    MiniDroidEnvironment,
    Screen,
    UsageError,
    substitute,
)

logger = logging.getLogger(__name__)

# Base instant for deterministic sample timestamps
SAMPLE_EPOCH = datetime(2025, 1, 1, 9, 0, 0)


class ExpertScriptError(RuntimeError):
    """A template's expert script does not reach success (template bug)."""

    def __init__(self, template_id: str, step_index: int, reason: str):
        self.template_id = template_id
        self.step_index = step_index
        super().__init__(f"{template_id}: expert step {step_index}: {reason}")


class CorruptionError(ValueError):
    """Scenario cannot be applied to the given knowledge base."""


class Difficulty(Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"


class CorruptionKind(Enum):
    """Knowledge-base defects planted for repair testing."""
    HARDCODED_PARAM = "hardcoded_param"
    MISSING_STEP = "missing_step"
    WRONG_ELEMENT = "wrong_element"
    OVER_ABSTRACTION = "over_abstraction"
    SWAPPED_ORDER = "swapped_order"


@dataclass(frozen=True)
class TaskSpec:
    """A goal instance: template id plus randomized parameters."""
    template_id: str
    goal_text: str
    params: dict[str, str]
    difficulty: Difficulty
    seed: int
    hidden: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for name, value in self.params.items():
            if value not in self.goal_text:
                raise ValueError(f"Goal text does not inline param '{name}' ({value!r})")

    def to_dict(self) -> dict:
        return {
            "template_id": self.template_id,
            "goal_text": self.goal_text,
            "params": dict(self.params),
            "hidden": dict(self.hidden),
            "difficulty": self.difficulty.value,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TaskSpec":
        return cls(
            template_id=data["template_id"],
            goal_text=data["goal_text"],
            params=dict(data["params"]),
            difficulty=Difficulty(data["difficulty"]),
            seed=data["seed"],
            hidden=dict(data.get("hidden", {})),
        )


@dataclass(frozen=True)
class DemoStep:
    """One recorded expert step."""
    pre_obs: Screen
    post_obs: Screen
    instruction: str
    action: Action
    target: Optional[str] = None    # Element id acted on, if any


@dataclass(frozen=True)
class Demonstration:
    """A scripted expert trajectory for one task instance."""
    task: TaskSpec
    steps: tuple[DemoStep, ...]

    def __post_init__(self):
        if not self.steps:
            raise ValueError("Demonstration must have at least one step")

    @property
    def demo_id(self) -> str:
        return f"{self.task.template_id}_{self.task.seed}"

    def __len__(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class TrainingSample:
    """A single-step (context, expert action) pair cut from a demonstration."""
    sample_id: str
    task_goal: str
    instruction: str
    observation: Screen
    expert_action: Action
    demo_ref: tuple[str, int]
    template_id: str = ""


@dataclass(frozen=True)
class CorruptionScenario:
    """A scripted knowledge-base defect."""
    scenario_id: str
    kind: CorruptionKind
    target_step: int
    payload: dict[str, str] = field(default_factory=dict)


def camel_case(template_id: str) -> str:
    """recorder_save -> RecorderSave"""
    return "".join(part.capitalize() for part in template_id.split("_"))


def sample_timestamp(seed: int) -> str:
    """Deterministic timestamp string derived from a demonstration seed."""
    return (SAMPLE_EPOCH + timedelta(minutes=int(seed))).strftime("%Y%m%d_%H%M%S")


class TaskSuite:
    """Registry of task templates read from the environment definition."""

    def __init__(self, env: Optional[MiniDroidEnvironment] = None):
        self.env = env or MiniDroidEnvironment()
        self.definition = self.env.definition
        self._templates = self.definition.templates

    @property
    def template_ids(self) -> list[str]:
        return list(self._templates)

    def template(self, template_id: str) -> dict:
        if template_id not in self._templates:
            raise ConfigurationError(f"Unknown task template: {template_id}")
        return self._templates[template_id]

    def instantiate_task(self, template_id: str, seed: int) -> TaskSpec:
        """
        Create a task instance with parameters drawn for (template, seed).

        Args:
            template_id: Registered template
            seed: Instance seed

        Returns:
            TaskSpec with goal text inlining every parameter
        """
        template = self.template(template_id)
        rng = np.random.default_rng([int(seed), zlib.crc32(template_id.encode("utf-8"))])

        def draw(specs: dict) -> dict[str, str]:
            values = {}
            for name, spec in specs.items():
                pool = self.definition.pools[spec["pool"]]
                values[name] = pool[int(rng.integers(len(pool)))]
            return values

        params = draw(template.get("params", {}))
        hidden = draw(template.get("hidden", {}))

        values = dict(self.definition.fixtures)
        values.update(params)
        return TaskSpec(
            template_id=template_id,
            goal_text=substitute(template["goal"], values),
            params=params,
            difficulty=Difficulty(template.get("difficulty", "medium")),
            seed=int(seed),
            hidden=hidden,
        )

    def record_demonstration(self, task: TaskSpec) -> Demonstration:
        """
        Run the template's expert script from reset(task, task.seed).

        The final terminate(success) is applied only to check the outcome; it
        is not part of the recorded steps.

        Raises:
            ExpertScriptError: If a step cannot be executed or the script
                does not reach success
        """
        template = self.template(task.template_id)
        script = template["expert"]
        values = self.env.values_for(task)

        state = self.env.reset(task, task.seed)
        steps = []
        for index, step_def in enumerate(script):
            observation = self.env.observe(state)
            action, target = self._expert_action(step_def["action"], observation, values, task, index)
            try:
                state, outcome = self.env.step(state, action)
            except (ActionValidationError, UsageError) as e:
                raise ExpertScriptError(task.template_id, index, str(e))
            steps.append(DemoStep(
                pre_obs=observation,
                post_obs=outcome.observation,
                instruction=substitute(step_def["instruction"], values),
                action=action,
                target=target,
            ))
            if state.done and index < len(script) - 1:
                raise ExpertScriptError(task.template_id, index, "episode ended before script finished")

        if not state.done:
            state, outcome = self.env.step(state, Action.terminate("success"))
        if not outcome.success:
            raise ExpertScriptError(task.template_id, len(script) - 1, "script did not reach success")

        return Demonstration(task=task, steps=tuple(steps))

    def _expert_action(
        self,
        spec: dict,
        observation: Screen,
        values: dict[str, str],
        task: TaskSpec,
        index: int,
    ) -> tuple[Action, Optional[str]]:
        kind = ActionKind(spec["kind"])

        if kind in (ActionKind.CLICK, ActionKind.LONG_PRESS):
            if "element" in spec:
                element = observation.find(spec["element"])
            else:
                label = substitute(spec["label"], values)
                element = next((e for e in observation.elements if e.label == label), None)
            if element is None:
                raise ExpertScriptError(
                    task.template_id, index,
                    f"target {spec.get('element') or spec.get('label')!r} not on screen {observation.screen_id}",
                )
            x, y = element.tap_point
            if kind == ActionKind.CLICK:
                return Action.click(x, y), element.element_id
            return Action.long_press(x, y), element.element_id

        if kind == ActionKind.SWIPE:
            start, end = SWIPE_ANCHORS[spec["direction"]]
            return Action.swipe(start, end), None
        if kind == ActionKind.TYPE:
            return Action.type_text(substitute(spec["text"], values)), None
        if kind == ActionKind.ANSWER:
            return Action.answer(substitute(spec["text"], values)), None
        if kind == ActionKind.SYSTEM_BUTTON:
            return Action.system_button(spec["button"]), None
        return Action.terminate(spec.get("status", "success")), None

    def decompose_demo(self, demo: Demonstration) -> list[TrainingSample]:
        """
        Split a demonstration into single-step samples, dropping no-op steps.

        Terminal answer steps are kept even though the screen does not change.
        """
        samples = []
        prefix = f"action_{camel_case(demo.task.template_id)}_step_"
        stamp = sample_timestamp(demo.task.seed)
        for k, step in enumerate(demo.steps):
            if step.pre_obs == step.post_obs and step.action.kind != ActionKind.ANSWER:
                logger.debug("Dropping no-op step %d of %s", k, demo.demo_id)
                continue
            samples.append(TrainingSample(
                sample_id=f"{prefix}{k}_{stamp}",
                task_goal=demo.task.goal_text,
                instruction=step.instruction,
                observation=step.pre_obs,
                expert_action=step.action,
                demo_ref=(demo.demo_id, k),
                template_id=demo.task.template_id,
            ))
        return samples

    def demonstrations(self, templates: Optional[list[str]] = None, per_template: int = 5) -> list[Demonstration]:
        """Record demonstrations with seeds 1..per_template for each template."""
        demos = []
        for template_id in templates or self.template_ids:
            for seed in range(1, per_template + 1):
                demos.append(self.record_demonstration(self.instantiate_task(template_id, seed)))
        logger.info("Recorded %d demonstrations", len(demos))
        return demos

    def build_dataset(self, demos: list[Demonstration]) -> list[TrainingSample]:
        samples = []
        for demo in demos:
            samples.extend(self.decompose_demo(demo))
        return samples

    def default_scenarios(self, kb, demo: Demonstration) -> list[CorruptionScenario]:
        """
        Build the scripted corruption scenarios applicable to a knowledge base.

        Args:
            kb: KnowledgeBase summarized from `demo`
            demo: The demonstration the knowledge base was built from

        Returns:
            Up to one scenario per corruption kind
        """
        from .planner import PARAM_PLACEHOLDER

        template_id = kb.task_template
        steps = kb.steps
        scenarios = []

        for i, step in enumerate(steps):
            text = step.action_template.text or ""
            match = PARAM_PLACEHOLDER.search(text)
            if match:
                name = match.group(1).lower()
                scenarios.append(CorruptionScenario(
                    f"{template_id}:hardcoded_param", CorruptionKind.HARDCODED_PARAM, i,
                    {"value": kb.source_params.get(name, "")},
                ))
                break

        kinds = [s.action_template.kind for s in steps]
        if ActionKind.LONG_PRESS in kinds:
            missing = kinds.index(ActionKind.LONG_PRESS)
        else:
            missing = len(steps) - 1
        scenarios.append(CorruptionScenario(
            f"{template_id}:missing_step", CorruptionKind.MISSING_STEP, missing,
        ))

        wrong = self._wrong_element_candidate(kb, demo)
        if wrong is not None:
            index, element = wrong
            scenarios.append(CorruptionScenario(
                f"{template_id}:wrong_element", CorruptionKind.WRONG_ELEMENT, index,
                {"element_id": element.element_id, "element_label": element.label},
            ))

        clicks = [i for i, k in enumerate(kinds) if k == ActionKind.CLICK]
        if clicks:
            scenarios.append(CorruptionScenario(
                f"{template_id}:over_abstraction", CorruptionKind.OVER_ABSTRACTION, clicks[0],
            ))

        if len(steps) >= 2:
            if ActionKind.TYPE in kinds and kinds.index(ActionKind.TYPE) > 0:
                first = kinds.index(ActionKind.TYPE) - 1
            else:
                first = 0
            scenarios.append(CorruptionScenario(
                f"{template_id}:swapped_order", CorruptionKind.SWAPPED_ORDER, first,
            ))

        return scenarios

    def _wrong_element_candidate(self, kb, demo: Demonstration):
        """Latest click step with an interactive alternative on its screen."""
        for index in range(len(kb.steps) - 1, -1, -1):
            template = kb.steps[index].action_template
            if template.kind != ActionKind.CLICK or template.target is None or index >= len(demo.steps):
                continue
            screen = demo.steps[index].pre_obs
            screen_def = self.definition.screens[screen.screen_id]
            target = screen.find(template.target)
            candidates = [
                e for e in screen.elements
                if e.element_id != template.target
                and e.kind != ElementKind.TEXT_FIELD
                and screen_def.element(e.element_id).on_click
            ]
            if not candidates or target is None:
                continue
            same_kind = [e for e in candidates if e.kind == target.kind]
            return index, (same_kind or candidates)[0]
        return None


def corrupt_knowledge(kb, scenario: CorruptionScenario):
    """
    Apply one scripted defect to a knowledge base.

    Args:
        kb: KnowledgeBase to corrupt
        scenario: Defect description

    Returns:
        New KnowledgeBase; revision and provenance are untouched

    Raises:
        CorruptionError: If the scenario does not fit the knowledge base
    """
    from .planner import PARAM_PLACEHOLDER

    steps = list(kb.steps)
    index = scenario.target_step
    if not 0 <= index < len(steps):
        raise CorruptionError(f"target_step {index} outside plan of length {len(steps)}")
    step = steps[index]
    template = step.action_template

    if scenario.kind == CorruptionKind.HARDCODED_PARAM:
        text = template.text or ""
        match = PARAM_PLACEHOLDER.search(text)
        if not match:
            raise CorruptionError(f"Step {index} has no placeholder to hardcode")
        literal = scenario.payload.get("value") or kb.source_params.get(match.group(1).lower())
        if not literal:
            raise CorruptionError(f"No literal value for {match.group(0)}")
        steps[index] = replace(
            step,
            instruction=step.instruction.replace(match.group(0), literal),
            action_template=replace(template, text=text.replace(match.group(0), literal)),
        )

    elif scenario.kind == CorruptionKind.MISSING_STEP:
        if len(steps) < 2:
            raise CorruptionError("Cannot delete the only plan step")
        del steps[index]

    elif scenario.kind == CorruptionKind.WRONG_ELEMENT:
        if template.target is None:
            raise CorruptionError(f"Step {index} has no element target")
        new_id = scenario.payload.get("element_id")
        new_label = scenario.payload.get("element_label", new_id)
        if not new_id or new_id == template.target:
            raise CorruptionError("wrong_element needs a different element_id")
        instruction = step.instruction
        if template.target_label:
            instruction = instruction.replace(f"'{template.target_label}'", f"'{new_label}'")
        steps[index] = replace(
            step,
            instruction=instruction,
            action_template=replace(template, target=new_id, target_label=new_label, coordinate=None),
        )

    elif scenario.kind == CorruptionKind.OVER_ABSTRACTION:
        steps[index] = replace(
            step,
            expected_outcome=None,
            action_template=replace(template, coordinate=None, coordinate2=None),
        )

    elif scenario.kind == CorruptionKind.SWAPPED_ORDER:
        if index + 1 >= len(steps):
            raise CorruptionError(f"Step {index} has no successor to swap with")
        steps[index], steps[index + 1] = steps[index + 1], steps[index]

    return replace(kb, steps=tuple(steps))


if __name__ == "__main__":
    suite = TaskSuite()
    demos = suite.demonstrations(per_template=1)
    samples = suite.build_dataset(demos)
    print(f"Templates: {len(suite.template_ids)}")
    print(f"Samples: {len(samples)}")
