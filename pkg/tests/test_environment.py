"""
Tests for the MiniDroid environment module.

Run with: python tests/test_environment.py
Or: python -m pytest tests/test_environment.py
"""

import copy
import sys
from pathlib import Path

# Add project root to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.environment import (
    DEFAULT_DEFINITION_PATH,
    SWIPE_ANCHORS,
    Action,
    ActionKind,
    ActionValidationError,
    ConfigurationError,
    EnvConfig,
    EnvironmentDefinition,
    FaultyEnvironment,
    MiniDroidEnvironment,
    UsageError,
    anchor_point,
    grid_to_bbox,
    load_definition,
)
from src.tasks import Difficulty, TaskSpec, TaskSuite


def minimal_definition() -> dict:
    """Smallest valid definition: one screen, one button, no templates."""
    return {
        "format_version": 1,
        "home_screen": "home",
        "fixtures": {},
        "pools": {},
        "screens": {
            "home": {
                "elements": [
                    {"id": "ok", "kind": "button", "label": "OK", "grid": [0, 0, 2, 1]},
                ],
            },
        },
        "templates": {},
    }


def wifi_task(seed: int = 1):
    return TaskSuite().instantiate_task("settings_wifi_off", seed)


def tap(screen, element_id: str) -> Action:
    x, y = screen.find(element_id).tap_point
    return Action.click(x, y)


class TestGeometry:
    """Tests for grid and anchor helpers."""

    def test_grid_to_bbox(self):
        """Grid units map to 90 x 100 pixel cells."""
        assert grid_to_bbox(6, 3, 3, 2) == (540, 300, 270, 200)
        print("  OK Grid to bbox")

    def test_anchor_point_is_cell_center(self):
        """Anchor is the center of the cell holding the bbox center."""
        assert anchor_point((540, 300, 270, 200)) == (675, 450)
        assert anchor_point((0, 0, 90, 100)) == (45, 50)
        print("  OK Anchor point")

    def test_swipe_anchors_are_cell_centers(self):
        for start, end in SWIPE_ANCHORS.values():
            for x, y in (start, end):
                assert x % 90 == 45 and y % 100 == 50
        print("  OK Swipe anchors on cell centers")


class TestAction:
    """Tests for action validation and conversion."""

    def test_well_formed_actions(self):
        actions = [
            Action.click(10, 10),
            Action.long_press(500, 500),
            Action.swipe((585, 1850), (585, 850)),
            Action.type_text("hello"),
            Action.system_button("back"),
            Action.terminate("failure"),
            Action.answer("42"),
        ]
        for action in actions:
            assert action.is_well_formed(), str(action)
        print("  OK All seven kinds validate")

    def test_missing_argument_rejected(self):
        try:
            Action(ActionKind.CLICK).validate()
            assert False, "Should have raised ActionValidationError"
        except ActionValidationError:
            print("  OK Click without coordinate rejected")

    def test_extra_argument_rejected(self):
        action = Action(ActionKind.TYPE, text="hi", coordinate=(10, 10))
        assert not action.is_well_formed()
        print("  OK Extra argument rejected")

    def test_out_of_bounds_rejected(self):
        assert not Action.click(1080, 10).is_well_formed()
        assert not Action.click(-1, 10).is_well_formed()
        assert Action.click(1079, 2399).is_well_formed()
        print("  OK Coordinate bounds enforced")

    def test_unknown_values_rejected(self):
        assert not Action.system_button("menu").is_well_formed()
        assert not Action.terminate("maybe").is_well_formed()
        assert not Action.type_text("").is_well_formed()
        print("  OK Unknown button, status and empty text rejected")

    def test_dict_round_trip(self):
        action = Action.swipe((135, 1250), (945, 1250))
        data = action.to_dict()
        assert data == {"action": "swipe", "coordinate": [135, 1250], "coordinate2": [945, 1250]}
        assert Action.from_dict(data) == action
        print("  OK to_dict / from_dict")


class TestDefinition:
    """Tests for definition loading and validation."""

    def test_builtin_definition_loads(self):
        definition = load_definition()
        assert definition.home_screen == "home"
        assert len(definition.templates) >= 20
        print(f"  OK Built-in definition: {len(definition.screens)} screens")

    def test_all_goto_targets_reachable(self):
        definition = load_definition()
        reachable = definition.reachable_screens()
        for screen in ("home", "drawer", "recorder_files", "settings_network"):
            assert screen in reachable, screen
        print("  OK Screen graph reachable from home")

    def test_missing_file(self):
        try:
            load_definition(DEFAULT_DEFINITION_PATH.parent / "missing.json")
            assert False, "Should have raised FileNotFoundError"
        except FileNotFoundError:
            print("  OK Missing definition file")

    def test_minimal_definition(self):
        definition = EnvironmentDefinition.from_dict(minimal_definition())
        assert list(definition.screens) == ["home"]
        print("  OK Minimal definition parses")

    def test_wrong_version(self):
        data = minimal_definition()
        data["format_version"] = 2
        try:
            EnvironmentDefinition.from_dict(data)
            assert False, "Should have raised ConfigurationError"
        except ConfigurationError:
            print("  OK Unsupported format_version")

    def test_overlapping_elements(self):
        data = minimal_definition()
        data["screens"]["home"]["elements"].append(
            {"id": "other", "kind": "button", "label": "Other", "grid": [1, 0, 2, 1]}
        )
        try:
            EnvironmentDefinition.from_dict(data)
            assert False, "Should have raised ConfigurationError"
        except ConfigurationError as e:
            assert "overlap" in str(e)
            print("  OK Overlapping elements rejected")

    def test_unknown_goto_target(self):
        data = minimal_definition()
        data["screens"]["home"]["elements"][0]["on_click"] = [{"op": "goto", "screen": "nowhere"}]
        try:
            EnvironmentDefinition.from_dict(data)
            assert False, "Should have raised ConfigurationError"
        except ConfigurationError:
            print("  OK Unknown goto target rejected")

    def test_duplicate_element_id(self):
        data = minimal_definition()
        duplicate = copy.deepcopy(data["screens"]["home"]["elements"][0])
        duplicate["grid"] = [4, 4, 2, 1]
        data["screens"]["home"]["elements"].append(duplicate)
        try:
            EnvironmentDefinition.from_dict(data)
            assert False, "Should have raised ConfigurationError"
        except ConfigurationError:
            print("  OK Duplicate element id rejected")


class TestTransitions:
    """Tests for reset, step and success checking."""

    def test_reset_is_deterministic(self):
        env = MiniDroidEnvironment()
        task = wifi_task()
        a = env.reset(task, 7)
        b = env.reset(task, 7)
        assert a == b
        assert a.step_count == 0 and not a.done
        assert a.current_screen == "home"
        print("  OK Reset deterministic")

    def test_unknown_template(self):
        env = MiniDroidEnvironment()
        bogus = TaskSpec("nope", "Nope.", {}, Difficulty.EASY, 0)
        try:
            env.reset(bogus, 0)
            assert False, "Should have raised ConfigurationError"
        except ConfigurationError:
            print("  OK Unknown template rejected on reset")

    def test_click_navigates(self):
        env = MiniDroidEnvironment()
        state = env.reset(wifi_task(), 0)
        next_state, outcome = env.step(state, tap(env.observe(state), "settings_icon"))
        assert next_state.current_screen == "settings_main"
        assert outcome.transitioned and not outcome.terminal
        assert outcome.success is None
        assert state.current_screen == "home", "Input state must not change"
        print("  OK Click navigates; input state untouched")

    def test_click_on_empty_area(self):
        env = MiniDroidEnvironment()
        state = env.reset(wifi_task(), 0)
        next_state, outcome = env.step(state, Action.click(45, 2350))
        assert not outcome.transitioned
        assert next_state.step_count == 1
        assert next_state.current_screen == "home"
        print("  OK Empty-area click is a no-op that costs a step")

    def test_swipe_opens_drawer(self):
        env = MiniDroidEnvironment()
        state = env.reset(wifi_task(), 0)
        start, end = SWIPE_ANCHORS["up"]
        next_state, outcome = env.step(state, Action.swipe(start, end))
        assert next_state.current_screen == "drawer"
        assert outcome.observation.screen_id == "drawer"
        print("  OK Swipe up opens the drawer")

    def test_short_swipe_ignored(self):
        env = MiniDroidEnvironment()
        state = env.reset(wifi_task(), 0)
        next_state, outcome = env.step(state, Action.swipe((585, 1850), (585, 1700)))
        assert not outcome.transitioned
        assert env.swipe_direction((585, 1850), (585, 1700)) is None
        assert env.swipe_direction((100, 100), (900, 200)) == "right"
        print("  OK Short swipe ignored")

    def test_type_without_focus(self):
        env = MiniDroidEnvironment()
        state = env.reset(wifi_task(), 0)
        _, outcome = env.step(state, Action.type_text("hello"))
        assert not outcome.transitioned
        print("  OK Typing with no focused field changes nothing")

    def test_back_on_home(self):
        env = MiniDroidEnvironment()
        state = env.reset(wifi_task(), 0)
        _, outcome = env.step(state, Action.system_button("back"))
        assert not outcome.transitioned
        print("  OK Back on home is a no-op")

    def test_expert_path_succeeds(self):
        env = MiniDroidEnvironment()
        task = wifi_task()
        state = env.reset(task, 0)
        for element_id in ("settings_icon", "network_item", "wifi_toggle"):
            state, _ = env.step(state, tap(env.observe(state), element_id))
        state, outcome = env.step(state, Action.terminate("success"))
        assert outcome.terminal and outcome.success is True
        assert env.check_success(state, task)
        print("  OK Wi-Fi task succeeds")

    def test_premature_terminate_fails(self):
        env = MiniDroidEnvironment()
        task = wifi_task()
        state, outcome = env.step(env.reset(task, 0), Action.terminate("success"))
        assert outcome.terminal and outcome.success is False
        print("  OK Terminate before the goal fails")

    def test_terminate_failure_never_succeeds(self):
        env = MiniDroidEnvironment()
        task = wifi_task()
        state = env.reset(task, 0)
        for element_id in ("settings_icon", "network_item", "wifi_toggle"):
            state, _ = env.step(state, tap(env.observe(state), element_id))
        state, outcome = env.step(state, Action.terminate("failure"))
        assert outcome.success is False
        print("  OK terminate(failure) is a failure")

    def test_answer_task(self):
        env = MiniDroidEnvironment()
        task = TaskSuite(env).instantiate_task("notes_read_answer", 3)
        state = env.reset(task, 3)
        _, outcome = env.step(state, Action.answer(task.hidden["note_body"]))
        assert outcome.success is True
        _, wrong = env.step(state, Action.answer("something else"))
        assert wrong.success is False
        print("  OK Answer compared with hidden value")

    def test_horizon_timeout(self):
        env = MiniDroidEnvironment(config=EnvConfig(horizon=2))
        state = env.reset(wifi_task(), 0)
        state, first = env.step(state, Action.click(45, 2350))
        assert not first.terminal
        state, second = env.step(state, Action.click(45, 2350))
        assert second.terminal and second.success is False
        assert state.status == "timeout"
        print("  OK Horizon ends the episode")

    def test_step_after_done(self):
        env = MiniDroidEnvironment()
        state, _ = env.step(env.reset(wifi_task(), 0), Action.terminate("failure"))
        try:
            env.step(state, Action.click(10, 10))
            assert False, "Should have raised UsageError"
        except UsageError:
            print("  OK Step after done rejected")

    def test_check_success_requires_terminal(self):
        env = MiniDroidEnvironment()
        task = wifi_task()
        try:
            env.check_success(env.reset(task, 0), task)
            assert False, "Should have raised UsageError"
        except UsageError:
            print("  OK check_success needs a terminal state")

    def test_malformed_action_rejected(self):
        env = MiniDroidEnvironment()
        try:
            env.step(env.reset(wifi_task(), 0), Action(ActionKind.CLICK))
            assert False, "Should have raised ActionValidationError"
        except ActionValidationError:
            print("  OK Malformed action rejected by step")

    def test_skip_consumes_step(self):
        env = MiniDroidEnvironment()
        state = env.reset(wifi_task(), 0)
        next_state, outcome = env.skip(state)
        assert next_state.step_count == 1
        assert not outcome.transitioned
        print("  OK Skip consumes a step")


class TestFaultyEnvironment:
    """Tests for the input-dropping environment."""

    def test_inputs_dropped(self):
        base = MiniDroidEnvironment()
        env = FaultyEnvironment(base.definition, base.config)
        state = env.reset(wifi_task(), 0)
        next_state, outcome = env.step(state, tap(env.observe(state), "settings_icon"))
        assert next_state.current_screen == "home"
        assert not outcome.transitioned
        print("  OK Click silently dropped")

    def test_terminate_still_works(self):
        base = MiniDroidEnvironment()
        env = FaultyEnvironment(base.definition, base.config)
        _, outcome = env.step(env.reset(wifi_task(), 0), Action.terminate("success"))
        assert outcome.terminal and outcome.success is False
        print("  OK Terminate still ends the episode")


def run_all_tests():
    """Run all tests and report results."""
    print("\n" + "=" * 60)
    print("Environment Tests")
    print("=" * 60)

    test_classes = [
        TestGeometry,
        TestAction,
        TestDefinition,
        TestTransitions,
        TestFaultyEnvironment,
    ]

    passed = 0
    failed = 0

    for test_class in test_classes:
        print(f"\n{test_class.__name__}:")

        instance = test_class()

        for method_name in dir(instance):
            if method_name.startswith("test_"):
                try:
                    getattr(instance, method_name)()
                    passed += 1
                except AssertionError as e:
                    print(f"  FAIL {method_name}: {e}")
                    failed += 1
                except Exception as e:
                    print(f"  FAIL {method_name}: Unexpected error: {e}")
                    failed += 1

    print("\n" + "=" * 60)
    print(f"Results: {passed} passed, {failed} failed")
    print("=" * 60 + "\n")

    return failed == 0


if __name__ == "__main__":
    success = run_all_tests()
    sys.exit(0 if success else 1)
