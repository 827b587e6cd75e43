"""
MiniDroid Environment Module

Deterministic synthetic mobile GUI used as the training and evaluation MDP:
- Structured screens of typed UI elements (no pixels)
- The seven-action interface (click, long_press, swipe, type,
  system_button, terminate, answer)
- A declarative transition-rule interpreter driven by a JSON definition
- Task success checking over final app states

Screen graphs, transition rules and task templates are declared in
data/environment/minidroid.json so new tasks are additive.
"""

import json
import logging
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
SCREEN_WIDTH = 1080
SCREEN_HEIGHT = 2400

# Layout grid used to author element positions (and by the policy's cell head)
GRID_COLS = 12
GRID_ROWS = 24

DEFAULT_DEFINITION_PATH = (
    Path(__file__).parent.parent / "data" / "environment" / "minidroid.json"
)

# Canonical gesture endpoints, all grid-cell centers
SWIPE_ANCHORS = {
    "up": ((585, 1850), (585, 850)),
    "down": ((585, 850), (585, 1850)),
    "left": ((945, 1250), (135, 1250)),
    "right": ((135, 1250), (945, 1250)),
}

PARAM_PATTERN = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")
REF_PATTERN = re.compile(r"\{ref:([^/{}]+)/([^/{}]+)/([^/{}]+)\}")


class ConfigurationError(ValueError):
    """Invalid environment definition or unknown task template."""


class UsageError(RuntimeError):
    """Operation called in a state that does not allow it."""


class ActionValidationError(ValueError):
    """Action does not carry exactly the arguments its kind requires."""


class ElementKind(Enum):
    """Kinds of UI elements."""
    BUTTON = "button"
    ICON = "icon"
    TEXT_FIELD = "text_field"
    LIST_ITEM = "list_item"
    APP_ICON = "app_icon"
    TOGGLE = "toggle"
    LABEL = "label"         # Static text, not interactive


class ActionKind(Enum):
    """The seven primitive actions. Order defines the policy's kind head."""
    CLICK = "click"
    LONG_PRESS = "long_press"
    SWIPE = "swipe"
    TYPE = "type"
    SYSTEM_BUTTON = "system_button"
    TERMINATE = "terminate"
    ANSWER = "answer"


ACTION_KINDS = list(ActionKind)
ELEMENT_KINDS = list(ElementKind)

SYSTEM_BUTTONS = ("back", "home")
TERMINATE_STATUSES = ("success", "failure")


def grid_to_bbox(col: int, row: int, cols: int, rows: int) -> tuple[int, int, int, int]:
    """Convert grid units to a pixel bounding box (x, y, w, h)."""
    cell_w = SCREEN_WIDTH // GRID_COLS
    cell_h = SCREEN_HEIGHT // GRID_ROWS
    return (col * cell_w, row * cell_h, cols * cell_w, rows * cell_h)


def anchor_point(bbox: tuple[int, int, int, int]) -> tuple[int, int]:
    """
    Center of the grid cell that contains the bbox center.

    Expert taps land here, so a correct cell choice reproduces the expert
    coordinate exactly.
    """
    cell_w = SCREEN_WIDTH // GRID_COLS
    cell_h = SCREEN_HEIGHT // GRID_ROWS
    x, y, w, h = bbox
    col = (x + w // 2) // cell_w
    row = (y + h // 2) // cell_h
    return (col * cell_w + cell_w // 2, row * cell_h + cell_h // 2)


def substitute(text: str, values: dict[str, str]) -> str:
    """Replace {name} slots with values; unknown names raise KeyError."""
    return PARAM_PATTERN.sub(lambda m: values[m.group(1)], text)


@dataclass(frozen=True)
class UiElement:
    """A rendered UI element on a screen."""
    element_id: str
    kind: ElementKind
    label: str
    bbox: tuple[int, int, int, int]
    state: tuple[tuple[str, str], ...] = ()
    description: str = ""

    def __post_init__(self):
        if self.bbox[2] <= 0 or self.bbox[3] <= 0:
            raise ConfigurationError(f"Element {self.element_id} has empty bbox")

    @property
    def center(self) -> tuple[int, int]:
        x, y, w, h = self.bbox
        return (x + w // 2, y + h // 2)

    @property
    def tap_point(self) -> tuple[int, int]:
        return anchor_point(self.bbox)

    @property
    def state_dict(self) -> dict[str, str]:
        return dict(self.state)

    @property
    def text(self) -> Optional[str]:
        return self.state_dict.get("text")

    def get(self, key: str, default: Optional[str] = None) -> Optional[str]:
        return self.state_dict.get(key, default)

    def contains(self, x: int, y: int) -> bool:
        bx, by, bw, bh = self.bbox
        return bx <= x < bx + bw and by <= y < by + bh

    def to_dict(self) -> dict:
        return {
            "element_id": self.element_id,
            "kind": self.kind.value,
            "label": self.label,
            "bbox": list(self.bbox),
            "state": dict(self.state),
            "description": self.description,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "UiElement":
        return cls(
            element_id=data["element_id"],
            kind=ElementKind(data["kind"]),
            label=data["label"],
            bbox=tuple(data["bbox"]),
            state=tuple(sorted(data.get("state", {}).items())),
            description=data.get("description", ""),
        )


@dataclass(frozen=True)
class Screen:
    """A structured observation: the elements visible on one screen."""
    screen_id: str
    elements: tuple[UiElement, ...]
    width: int = SCREEN_WIDTH
    height: int = SCREEN_HEIGHT

    def find(self, element_id: str) -> Optional[UiElement]:
        for element in self.elements:
            if element.element_id == element_id:
                return element
        return None

    def element_at(self, x: int, y: int) -> Optional[UiElement]:
        """The element whose bbox contains (x, y), if any."""
        for element in self.elements:
            if element.contains(x, y):
                return element
        return None

    @property
    def focused_field(self) -> Optional[UiElement]:
        for element in self.elements:
            if element.kind == ElementKind.TEXT_FIELD and element.get("focused") == "true":
                return element
        return None

    def to_dict(self) -> dict:
        return {
            "screen_id": self.screen_id,
            "width": self.width,
            "height": self.height,
            "elements": [e.to_dict() for e in self.elements],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Screen":
        return cls(
            screen_id=data["screen_id"],
            elements=tuple(UiElement.from_dict(e) for e in data["elements"]),
            width=data.get("width", SCREEN_WIDTH),
            height=data.get("height", SCREEN_HEIGHT),
        )


@dataclass(frozen=True)
class Action:
    """
    One primitive action with exactly the arguments its kind requires.

    Use the classmethod constructors (Action.click, Action.swipe, ...) for
    readable call sites.
    """
    kind: ActionKind
    coordinate: Optional[tuple[int, int]] = None
    coordinate2: Optional[tuple[int, int]] = None
    text: Optional[str] = None
    button: Optional[str] = None
    status: Optional[str] = None

    @classmethod
    def click(cls, x: int, y: int) -> "Action":
        return cls(ActionKind.CLICK, coordinate=(x, y))

    @classmethod
    def long_press(cls, x: int, y: int) -> "Action":
        return cls(ActionKind.LONG_PRESS, coordinate=(x, y))

    @classmethod
    def swipe(cls, start: tuple[int, int], end: tuple[int, int]) -> "Action":
        return cls(ActionKind.SWIPE, coordinate=tuple(start), coordinate2=tuple(end))

    @classmethod
    def type_text(cls, text: str) -> "Action":
        return cls(ActionKind.TYPE, text=text)

    @classmethod
    def system_button(cls, button: str) -> "Action":
        return cls(ActionKind.SYSTEM_BUTTON, button=button)

    @classmethod
    def terminate(cls, status: str = "success") -> "Action":
        return cls(ActionKind.TERMINATE, status=status)

    @classmethod
    def answer(cls, text: str) -> "Action":
        return cls(ActionKind.ANSWER, text=text)

    def validate(self, width: int = SCREEN_WIDTH, height: int = SCREEN_HEIGHT) -> None:
        """
        Check the per-kind argument set and coordinate bounds.

        Raises:
            ActionValidationError: If the action is malformed
        """
        required = {
            ActionKind.CLICK: {"coordinate"},
            ActionKind.LONG_PRESS: {"coordinate"},
            ActionKind.SWIPE: {"coordinate", "coordinate2"},
            ActionKind.TYPE: {"text"},
            ActionKind.SYSTEM_BUTTON: {"button"},
            ActionKind.TERMINATE: {"status"},
            ActionKind.ANSWER: {"text"},
        }[self.kind]
        present = {
            name for name in ("coordinate", "coordinate2", "text", "button", "status")
            if getattr(self, name) is not None
        }
        if present != required:
            raise ActionValidationError(
                f"{self.kind.value} requires {sorted(required)}, got {sorted(present)}"
            )

        for point in (self.coordinate, self.coordinate2):
            if point is None:
                continue
            x, y = point
            if not (0 <= x < width and 0 <= y < height):
                raise ActionValidationError(f"Coordinate {point} outside screen")

        if self.text is not None and self.text == "":
            raise ActionValidationError(f"{self.kind.value} requires non-empty text")
        if self.button is not None and self.button not in SYSTEM_BUTTONS:
            raise ActionValidationError(f"Unknown system button: {self.button}")
        if self.status is not None and self.status not in TERMINATE_STATUSES:
            raise ActionValidationError(f"Unknown terminate status: {self.status}")

    def is_well_formed(self, width: int = SCREEN_WIDTH, height: int = SCREEN_HEIGHT) -> bool:
        try:
            self.validate(width, height)
        except ActionValidationError:
            return False
        return True

    def to_dict(self) -> dict:
        """Tool-call arguments form: {"action": kind, ...present arguments}."""
        data: dict[str, Any] = {"action": self.kind.value}
        if self.coordinate is not None:
            data["coordinate"] = list(self.coordinate)
        if self.coordinate2 is not None:
            data["coordinate2"] = list(self.coordinate2)
        if self.text is not None:
            data["text"] = self.text
        if self.button is not None:
            data["button"] = self.button
        if self.status is not None:
            data["status"] = self.status
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "Action":
        return cls(
            kind=ActionKind(data["action"]),
            coordinate=tuple(data["coordinate"]) if "coordinate" in data else None,
            coordinate2=tuple(data["coordinate2"]) if "coordinate2" in data else None,
            text=data.get("text"),
            button=data.get("button"),
            status=data.get("status"),
        )

    def __str__(self) -> str:
        args = {k: v for k, v in self.to_dict().items() if k != "action"}
        inner = ", ".join(f"{k}={v}" for k, v in args.items())
        return f"{self.kind.value}({inner})"


@dataclass(frozen=True)
class EnvState:
    """
    Complete environment state. A pure value: step() returns a new one.

    app_states maps screen_id -> element_id -> state key -> value.
    """
    template_id: str
    params: tuple[tuple[str, str], ...]
    current_screen: str
    app_states: dict[str, dict[str, dict[str, str]]]
    step_count: int = 0
    done: bool = False
    answer_given: Optional[str] = None
    seed: int = 0
    discount: float = 1.0
    status: Optional[str] = None    # success / failure / answered / timeout

    @property
    def param_dict(self) -> dict[str, str]:
        return dict(self.params)


@dataclass(frozen=True)
class StepOutcome:
    """Result of one environment step."""
    observation: Screen
    transitioned: bool
    terminal: bool
    success: Optional[bool] = None

    def __post_init__(self):
        if (self.success is not None) != self.terminal:
            raise ValueError("success must be set exactly when terminal")


class EnvConfig(BaseModel):
    """Environment settings."""
    model_config = ConfigDict(frozen=True)

    horizon: int = Field(default=30, ge=1)
    definition_path: Optional[str] = None
    swipe_min_travel: int = Field(default=300, ge=1)


@dataclass(frozen=True)
class ElementDef:
    """An element as declared in the definition file (labels unresolved)."""
    element_id: str
    kind: ElementKind
    label: str
    bbox: tuple[int, int, int, int]
    state: dict[str, str] = field(default_factory=dict)
    description: str = ""
    on_click: tuple[dict, ...] = ()
    on_long_press: tuple[dict, ...] = ()


@dataclass(frozen=True)
class ScreenDef:
    """A screen as declared in the definition file."""
    screen_id: str
    app: str
    elements: tuple[ElementDef, ...]
    back: Optional[str] = None
    autofocus: Optional[str] = None
    swipe: dict[str, tuple[dict, ...]] = field(default_factory=dict)

    def element(self, element_id: str) -> Optional[ElementDef]:
        for element in self.elements:
            if element.element_id == element_id:
                return element
        return None


@dataclass
class EnvironmentDefinition:
    """Parsed and validated environment definition file."""
    format_version: int
    width: int
    height: int
    home_screen: str
    screens: dict[str, ScreenDef]
    fixtures: dict[str, str]
    pools: dict[str, list[str]]
    templates: dict[str, dict]
    raw: dict

    @classmethod
    def from_dict(cls, data: dict) -> "EnvironmentDefinition":
        """
        Parse and validate a definition dictionary.

        Raises:
            ConfigurationError: On schema or consistency violations
        """
        version = data.get("format_version")
        if version != FORMAT_VERSION:
            raise ConfigurationError(
                f"Unsupported format_version {version!r} (expected {FORMAT_VERSION})"
            )

        width = data.get("width", SCREEN_WIDTH)
        height = data.get("height", SCREEN_HEIGHT)

        screens = {}
        for screen_id, screen_data in data.get("screens", {}).items():
            screens[screen_id] = _parse_screen(screen_id, screen_data, width, height)

        definition = cls(
            format_version=version,
            width=width,
            height=height,
            home_screen=data.get("home_screen", "home"),
            screens=screens,
            fixtures=dict(data.get("fixtures", {})),
            pools={k: list(v) for k, v in data.get("pools", {}).items()},
            templates=dict(data.get("templates", {})),
            raw=data,
        )
        definition._validate()
        return definition

    def _validate(self) -> None:
        if self.home_screen not in self.screens:
            raise ConfigurationError(f"Home screen '{self.home_screen}' not declared")

        for screen in self.screens.values():
            if screen.back and screen.back not in self.screens:
                raise ConfigurationError(f"{screen.screen_id}: back target '{screen.back}' unknown")
            if screen.autofocus and screen.element(screen.autofocus) is None:
                raise ConfigurationError(f"{screen.screen_id}: autofocus element unknown")

            ops = [op for ops in screen.swipe.values() for op in ops]
            for element in screen.elements:
                ops.extend(element.on_click)
                ops.extend(element.on_long_press)
                for slot in PARAM_PATTERN.findall(element.label):
                    if slot not in self.fixtures:
                        raise ConfigurationError(
                            f"{screen.screen_id}/{element.element_id}: label slot '{slot}' has no fixture"
                        )
            for op in ops:
                if op.get("op") == "goto" and op.get("screen") not in self.screens:
                    raise ConfigurationError(
                        f"{screen.screen_id}: goto target '{op.get('screen')}' unknown"
                    )
                if op.get("op") == "goto":
                    continue
                target_screen = op.get("screen", screen.screen_id)
                if target_screen not in self.screens:
                    raise ConfigurationError(
                        f"{screen.screen_id}: op '{op.get('op')}' targets unknown screen '{target_screen}'"
                    )
                if "element" in op and self.screens[target_screen].element(op["element"]) is None:
                    raise ConfigurationError(
                        f"{screen.screen_id}: op '{op.get('op')}' targets unknown element "
                        f"'{target_screen}/{op['element']}'"
                    )

        for template_id, template in self.templates.items():
            for name, spec in template.get("params", {}).items():
                if spec.get("pool") not in self.pools:
                    raise ConfigurationError(f"{template_id}: param '{name}' uses unknown pool")
            for name, spec in template.get("hidden", {}).items():
                if spec.get("pool") not in self.pools:
                    raise ConfigurationError(f"{template_id}: hidden value '{name}' uses unknown pool")
            if "success" not in template or not template.get("expert"):
                raise ConfigurationError(f"{template_id}: needs 'success' and 'expert'")

    def reachable_screens(self) -> set[str]:
        """Screens reachable from home through goto, back and swipe rules."""
        seen = {self.home_screen}
        frontier = [self.home_screen]
        while frontier:
            screen = self.screens[frontier.pop()]
            targets = [screen.back] if screen.back else []
            ops = [op for ops in screen.swipe.values() for op in ops]
            for element in screen.elements:
                ops.extend(element.on_click)
                ops.extend(element.on_long_press)
            targets.extend(op["screen"] for op in ops if op.get("op") == "goto")
            for target in targets:
                if target not in seen:
                    seen.add(target)
                    frontier.append(target)
        return seen

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.raw, indent=indent, ensure_ascii=False)


def _parse_screen(screen_id: str, data: dict, width: int, height: int) -> ScreenDef:
    """Parse one screen, applying element defaults and geometry checks."""
    elements = []
    seen_ids = set()
    for raw in data.get("elements", []):
        element_id = raw["id"]
        if element_id in seen_ids:
            raise ConfigurationError(f"{screen_id}: duplicate element id '{element_id}'")
        seen_ids.add(element_id)

        try:
            kind = ElementKind(raw["kind"])
        except ValueError:
            raise ConfigurationError(f"{screen_id}/{element_id}: unknown kind {raw['kind']!r}")

        if "grid" in raw:
            bbox = grid_to_bbox(*raw["grid"])
        else:
            bbox = tuple(raw["bbox"])
        x, y, w, h = bbox
        if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > width or y + h > height:
            raise ConfigurationError(f"{screen_id}/{element_id}: bbox {bbox} outside screen")
        ax, ay = anchor_point(bbox)
        if not (x <= ax < x + w and y <= ay < y + h):
            raise ConfigurationError(f"{screen_id}/{element_id}: anchor cell center falls outside bbox")

        state = {k: str(v) for k, v in raw.get("state", {}).items()}
        on_click = tuple(raw.get("on_click", ()))
        if kind == ElementKind.TEXT_FIELD:
            state.setdefault("text", "")
            state.setdefault("focused", "false")
            if not on_click:
                on_click = ({"op": "focus"},)
        elif kind == ElementKind.TOGGLE:
            state.setdefault("on", "false")
            if not on_click:
                on_click = ({"op": "toggle"},)

        elements.append(ElementDef(
            element_id=element_id,
            kind=kind,
            label=raw.get("label", ""),
            bbox=bbox,
            state=state,
            description=raw.get("description", ""),
            on_click=on_click,
            on_long_press=tuple(raw.get("on_long_press", ())),
        ))

    # Non-overlapping regions
    for i, a in enumerate(elements):
        for b in elements[i + 1:]:
            if _overlaps(a.bbox, b.bbox):
                raise ConfigurationError(
                    f"{screen_id}: elements '{a.element_id}' and '{b.element_id}' overlap"
                )

    return ScreenDef(
        screen_id=screen_id,
        app=data.get("app", "system"),
        elements=tuple(elements),
        back=data.get("back"),
        autofocus=data.get("autofocus"),
        swipe={k: tuple(v) for k, v in data.get("swipe", {}).items()},
    )


def _overlaps(a: tuple, b: tuple) -> bool:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return ax < bx + bw and bx < ax + aw and ay < by + bh and by < ay + ah


def load_definition(path: Optional[str | Path] = None) -> EnvironmentDefinition:
    """
    Load an environment definition file.

    Args:
        path: JSON file; defaults to the built-in definition

    Returns:
        Validated EnvironmentDefinition
    """
    path = Path(path) if path else DEFAULT_DEFINITION_PATH
    if not path.exists():
        raise FileNotFoundError(f"Environment definition not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    definition = EnvironmentDefinition.from_dict(data)
    logger.debug(
        "Loaded %d screens and %d templates from %s",
        len(definition.screens), len(definition.templates), path,
    )
    return definition


class MiniDroidEnvironment:
    """
    Interpreter for an environment definition.

    All methods are pure functions of their arguments; the environment
    object itself holds only the immutable definition and config.
    """

    def __init__(
        self,
        definition: Optional[EnvironmentDefinition] = None,
        config: Optional[EnvConfig] = None,
    ):
        """
        Initialize the environment.

        Args:
            definition: Parsed definition (loaded from config or default if None)
            config: Environment settings
        """
        self.config = config or EnvConfig()
        self.definition = definition or load_definition(self.config.definition_path)
        self.width = self.definition.width
        self.height = self.definition.height

    @property
    def horizon(self) -> int:
        return self.config.horizon

    @property
    def screen_graph(self) -> set[str]:
        return self.definition.reachable_screens()

    def values_for(self, task) -> dict[str, str]:
        """Fixture values overlaid with a task's params and hidden values."""
        values = dict(self.definition.fixtures)
        values.update(getattr(task, "hidden", {}) or {})
        values.update(task.params)
        return values

    def reset(self, task, seed: int) -> EnvState:
        """
        Build the initial home-screen state for a task.

        Args:
            task: TaskSpec (template_id, params, hidden)
            seed: Episode seed, recorded in the state

        Returns:
            Initial EnvState with step_count 0

        Raises:
            ConfigurationError: If the task's template is unknown
        """
        template = self.definition.templates.get(task.template_id)
        if template is None:
            raise ConfigurationError(f"Unknown task template: {task.template_id}")

        values = self.values_for(task)
        app_states: dict[str, dict[str, dict[str, str]]] = {}
        for screen in self.definition.screens.values():
            per_screen = {}
            for element in screen.elements:
                if element.state:
                    per_screen[element.element_id] = {
                        k: substitute(v, values) for k, v in element.state.items()
                    }
            app_states[screen.screen_id] = per_screen

        for target, value in template.get("initial_state", {}).items():
            screen_id, element_id, key = target.split("/")
            app_states[screen_id].setdefault(element_id, {})[key] = substitute(value, values)

        return EnvState(
            template_id=task.template_id,
            params=tuple(sorted(values.items())),
            current_screen=self.definition.home_screen,
            app_states=app_states,
            step_count=0,
            done=False,
            answer_given=None,
            seed=int(seed),
            discount=1.0,
        )

    def observe(self, state: EnvState) -> Screen:
        """Render the structured observation of the current screen."""
        screen = self.definition.screens[state.current_screen]
        values = state.param_dict
        screen_states = state.app_states.get(screen.screen_id, {})
        elements = []
        for element in screen.elements:
            element_state = screen_states.get(element.element_id, {})
            if element_state.get("visible") == "false":
                continue
            elements.append(UiElement(
                element_id=element.element_id,
                kind=element.kind,
                label=substitute(element.label, values),
                bbox=element.bbox,
                state=tuple(sorted(element_state.items())),
                description=element.description,
            ))
        return Screen(
            screen_id=screen.screen_id,
            elements=tuple(elements),
            width=self.width,
            height=self.height,
        )

    def step(self, state: EnvState, action: Action) -> tuple[EnvState, StepOutcome]:
        """
        Apply one action.

        Args:
            state: Current (non-terminal) state
            action: Well-formed action

        Returns:
            Tuple of (next state, outcome)

        Raises:
            UsageError: If the state is already done
            ActionValidationError: If the action is malformed
        """
        if state.done:
            raise UsageError("Episode is done; no further steps accepted")
        action.validate(self.width, self.height)

        work = _Scratch.from_state(state)
        screen = self.definition.screens[state.current_screen]
        values = state.param_dict

        if action.kind in (ActionKind.CLICK, ActionKind.LONG_PRESS):
            element = self._hit(state, action.coordinate)
            if element is not None:
                ops = element.on_click if action.kind == ActionKind.CLICK else element.on_long_press
                self._apply_ops(work, ops, screen.screen_id, element.element_id, values)

        elif action.kind == ActionKind.SWIPE:
            direction = self.swipe_direction(action.coordinate, action.coordinate2)
            if direction is not None:
                self._apply_ops(work, screen.swipe.get(direction, ()), screen.screen_id, None, values)

        elif action.kind == ActionKind.TYPE:
            focused = work.focused(screen)
            if focused is not None:
                work.set(screen.screen_id, focused, "text", work.get(screen.screen_id, focused, "text") + action.text)

        elif action.kind == ActionKind.SYSTEM_BUTTON:
            target = screen.back if action.button == "back" else self.definition.home_screen
            if target and target != work.current_screen:
                self._goto(work, target)

        elif action.kind == ActionKind.TERMINATE:
            work.done = True
            work.status = action.status

        elif action.kind == ActionKind.ANSWER:
            work.done = True
            work.answer_given = action.text
            work.status = "answered"

        step_count = state.step_count + 1
        if not work.done and step_count >= self.horizon:
            work.done = True
            work.status = "timeout"

        next_state = replace(
            state,
            current_screen=work.current_screen,
            app_states=work.app_states,
            step_count=step_count,
            done=work.done,
            answer_given=work.answer_given,
            status=work.status,
        )
        return next_state, self._outcome(state, next_state)

    def skip(self, state: EnvState) -> tuple[EnvState, StepOutcome]:
        """Consume one step without acting (malformed executor output)."""
        if state.done:
            raise UsageError("Episode is done; no further steps accepted")
        step_count = state.step_count + 1
        done = step_count >= self.horizon
        next_state = replace(
            state,
            step_count=step_count,
            done=done,
            status="timeout" if done else state.status,
        )
        return next_state, self._outcome(state, next_state)

    def check_success(self, state: EnvState, task) -> bool:
        """
        Evaluate the task's success predicate on a terminal state.

        Raises:
            UsageError: If the state is not terminal
        """
        if not state.done:
            raise UsageError("check_success requires a terminal state")
        if state.status in ("failure", "timeout"):
            return False
        template = self.definition.templates.get(task.template_id)
        if template is None:
            raise ConfigurationError(f"Unknown task template: {task.template_id}")
        return self._evaluate(template["success"], state, self.values_for(task))

    def swipe_direction(self, start: tuple[int, int], end: tuple[int, int]) -> Optional[str]:
        """Dominant-axis direction of a swipe, or None if too short."""
        dx = end[0] - start[0]
        dy = end[1] - start[1]
        if max(abs(dx), abs(dy)) < self.config.swipe_min_travel:
            return None
        if abs(dy) >= abs(dx):
            return "up" if dy < 0 else "down"
        return "left" if dx < 0 else "right"

    def _outcome(self, before: EnvState, after: EnvState) -> StepOutcome:
        transitioned = (
            before.current_screen != after.current_screen
            or before.app_states != after.app_states
            or before.done != after.done
            or before.answer_given != after.answer_given
        )
        success = None
        if after.done:
            task = _TemplateRef(after.template_id, after.param_dict)
            success = self.check_success(after, task)
        return StepOutcome(
            observation=self.observe(after),
            transitioned=transitioned,
            terminal=after.done,
            success=success,
        )

    def _hit(self, state: EnvState, point: tuple[int, int]) -> Optional[ElementDef]:
        observation = self.observe(state)
        element = observation.element_at(*point)
        if element is None:
            return None
        return self.definition.screens[state.current_screen].element(element.element_id)

    def _goto(self, work: "_Scratch", screen_id: str) -> None:
        work.current_screen = screen_id
        target = self.definition.screens[screen_id]
        if target.autofocus:
            work.focus(target, target.autofocus)

    def _apply_ops(
        self,
        work: "_Scratch",
        ops: tuple[dict, ...],
        rule_screen: str,
        owner: Optional[str],
        values: dict[str, str],
    ) -> None:
        """Interpret transition ops in order against the scratch state."""
        for op in ops:
            name = op["op"]
            screen_id = op.get("screen", rule_screen)
            element_id = op.get("element", owner)
            key = op.get("key")

            if name == "goto":
                self._goto(work, op["screen"])
            elif name == "focus":
                work.focus(self.definition.screens[screen_id], element_id)
            elif name == "set_state":
                work.set(screen_id, element_id, key, work.resolve(op["value"], values))
            elif name == "toggle":
                key = key or "on"
                current = work.get(screen_id, element_id, key)
                work.set(screen_id, element_id, key, "false" if current == "true" else "true")
            elif name in ("append_text", "clear_text", "delete_char"):
                if "element" not in op:
                    element_id = work.focused(self.definition.screens[screen_id])
                    if element_id is None:
                        continue
                text = work.get(screen_id, element_id, "text")
                if name == "append_text":
                    text = text + work.resolve(op["value"], values)
                elif name == "clear_text":
                    text = ""
                else:
                    text = text[:-1]
                work.set(screen_id, element_id, "text", text)
            elif name in ("append_item", "remove_item"):
                key = key or "items"
                value = work.resolve(op["value"], values)
                items = [i for i in work.get(screen_id, element_id, key).split("\n") if i]
                if name == "append_item":
                    items.append(value)
                elif value in items:
                    items.remove(value)
                work.set(screen_id, element_id, key, "\n".join(items))
            else:
                raise ConfigurationError(f"Unknown transition op: {name}")

    def _evaluate(self, predicate: dict, state: EnvState, values: dict[str, str]) -> bool:
        kind = predicate["kind"]
        if kind == "all":
            return all(self._evaluate(p, state, values) for p in predicate["of"])
        if kind == "answer_equals":
            return state.answer_given == substitute(predicate["value"], values)
        if kind == "screen_is":
            return state.current_screen == predicate["screen"]

        screen_id, element_id, key = predicate["target"].split("/")
        current = state.app_states.get(screen_id, {}).get(element_id, {}).get(key, "")
        expected = substitute(predicate["value"], values)
        if kind == "state_equals":
            return current == expected
        items = [i for i in current.split("\n") if i]
        if kind == "list_contains":
            return expected in items
        if kind == "list_excludes":
            return expected not in items
        raise ConfigurationError(f"Unknown success predicate: {kind}")


@dataclass(frozen=True)
class _TemplateRef:
    """Minimal task view rebuilt from a state for terminal checks."""
    template_id: str
    params: dict


class _Scratch:
    """Mutable working copy of the parts of EnvState a step can change."""

    def __init__(self, current_screen, app_states, done, answer_given, status):
        self.current_screen = current_screen
        self.app_states = app_states
        self.done = done
        self.answer_given = answer_given
        self.status = status

    @classmethod
    def from_state(cls, state: EnvState) -> "_Scratch":
        app_states = {
            screen: {element: dict(values) for element, values in elements.items()}
            for screen, elements in state.app_states.items()
        }
        return cls(state.current_screen, app_states, state.done, state.answer_given, state.status)

    def get(self, screen_id: str, element_id: str, key: str) -> str:
        return self.app_states.get(screen_id, {}).get(element_id, {}).get(key, "")

    def set(self, screen_id: str, element_id: str, key: str, value: str) -> None:
        self.app_states.setdefault(screen_id, {}).setdefault(element_id, {})[key] = value

    def focused(self, screen: ScreenDef) -> Optional[str]:
        for element in screen.elements:
            if element.kind != ElementKind.TEXT_FIELD:
                continue
            values = self.app_states.get(screen.screen_id, {}).get(element.element_id, {})
            if values.get("focused") == "true" and values.get("visible") != "false":
                return element.element_id
        return None

    def focus(self, screen: ScreenDef, element_id: str) -> None:
        for element in screen.elements:
            if element.kind == ElementKind.TEXT_FIELD:
                flag = "true" if element.element_id == element_id else "false"
                self.set(screen.screen_id, element.element_id, "focused", flag)

    def resolve(self, template: str, values: dict[str, str]) -> str:
        resolved = REF_PATTERN.sub(lambda m: self.get(m.group(1), m.group(2), m.group(3)), template)
        return substitute(resolved, values)


class FaultyEnvironment(MiniDroidEnvironment):
    """
    Environment that silently drops every non-terminal action.

    Models invisible input loss: the step is consumed, nothing changes.
    """

    def step(self, state: EnvState, action: Action) -> tuple[EnvState, StepOutcome]:
        if action.kind in (ActionKind.TERMINATE, ActionKind.ANSWER):
            return super().step(state, action)
        action.validate(self.width, self.height)
        return self.skip(state)


if __name__ == "__main__":
    env = MiniDroidEnvironment()
    definition = env.definition
    print(f"Screens: {len(definition.screens)}")
    print(f"Templates: {len(definition.templates)}")
    print(f"Reachable from home: {len(env.screen_graph)}")
