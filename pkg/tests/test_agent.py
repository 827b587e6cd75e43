"""
Tests for the hierarchical agent module.

Run with: python tests/test_agent.py
"""

import sys
from pathlib import Path

# Add project root to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.agent import (
    DONE_SUBGOAL,
    EpisodeMode,
    HierarchicalAgent,
    PolicyExecutor,
    RuleExecutor,
    replay_trajectory,
    tap_target,
)
from src.environment import Action, ActionKind, EnvConfig, MiniDroidEnvironment
from src.planner import summarize
from src.policy import Context, ExecutorPolicy, PolicyConfig
from src.tasks import TaskSuite


ENV = MiniDroidEnvironment()
SUITE = TaskSuite(ENV)
WIFI_DEMO = SUITE.record_demonstration(SUITE.instantiate_task("settings_wifi_off", 1))
WIFI_KB = summarize(WIFI_DEMO)


class SilentExecutor:
    """Executor that never produces a well-formed action."""

    def act(self, ctx):
        return None


def wifi_agent(executor=None) -> HierarchicalAgent:
    return HierarchicalAgent(ENV, executor or RuleExecutor(), {"settings_wifi_off": WIFI_KB})


class TestRuleExecutor:
    """Tests for instruction grounding."""

    def test_tap_quoted_label(self):
        obs = WIFI_DEMO.steps[0].pre_obs
        action = RuleExecutor().act(Context(obs, "", "Tap the 'Settings' app icon."))
        assert action is not None and action.kind == ActionKind.CLICK
        assert tap_target(obs, action) == "settings_icon"
        print(f"  OK {action}")

    def test_type_and_buttons(self):
        obs = WIFI_DEMO.steps[0].pre_obs
        executor = RuleExecutor()
        assert executor.act(Context(obs, "", "Type the text 'hello'.")) == Action.type_text("hello")
        assert executor.act(Context(obs, "", "Press the back button.")) == Action.system_button("back")
        print("  OK Type and system buttons")

    def test_ungroundable(self):
        obs = WIFI_DEMO.steps[0].pre_obs
        executor = RuleExecutor()
        assert executor.act(Context(obs, "", "Tap the 'Nonexistent' thing.")) is None
        assert executor.act(Context(obs, "", "Do something useful.")) is None
        print("  OK Unknown labels give None")


class TestEpisodes:
    """Tests for hierarchical episode execution."""

    def test_hierarchy_succeeds(self):
        task = SUITE.instantiate_task("settings_wifi_off", 3)
        traj = wifi_agent().run_episode(task, 3)
        assert traj.success
        assert traj.actions[-1] == Action.terminate("success")
        assert traj.steps[-1].sub_goal == DONE_SUBGOAL
        assert traj.kb_revision == 0
        print(f"  OK Succeeded in {len(traj)} steps")

    def test_plan_indices_recorded(self):
        task = SUITE.instantiate_task("settings_wifi_off", 3)
        traj = wifi_agent().run_episode(task, 3)
        indices = [s.plan_index for s in traj.steps[:-1]]
        assert indices == sorted(indices)
        assert traj.steps[0].target == "settings_icon"
        print(f"  OK Plan indices {indices}")

    def test_repeat_limit(self):
        task = SUITE.instantiate_task("settings_wifi_off", 3)
        traj = wifi_agent(SilentExecutor()).run_episode(task, 3)
        assert len(traj) == 4
        assert traj.actions[:3] == [None, None, None]
        assert traj.actions[-1] == Action.terminate("failure")
        assert not traj.success
        assert not any(s.transitioned for s in traj.steps[:3])
        print("  OK Three repeats, then terminate(failure)")

    def test_no_hierarchy_uses_goal(self):
        env = MiniDroidEnvironment(ENV.definition, EnvConfig(horizon=5))
        task = SUITE.instantiate_task("settings_wifi_off", 3)
        agent = wifi_agent(SilentExecutor()).with_mode(EpisodeMode.NO_HIERARCHY)
        traj = agent.run_episode(task, 3, env=env)
        assert len(traj) == 5
        assert not traj.success
        assert all(s.sub_goal == task.goal_text for s in traj.steps)
        assert all(s.plan_index is None for s in traj.steps)
        print("  OK Flat executor times out at the horizon")

    def test_no_hierarchy_with_kb(self):
        env = MiniDroidEnvironment(ENV.definition, EnvConfig(horizon=3))
        task = SUITE.instantiate_task("settings_wifi_off", 3)
        agent = wifi_agent(SilentExecutor()).with_mode(EpisodeMode.NO_HIERARCHY_KB)
        traj = agent.run_episode(task, 3, env=env)
        first = traj.steps[0].sub_goal
        assert first.startswith(task.goal_text)
        assert len(first) > len(task.goal_text)
        print("  OK Goal plus the whole plan")

    def test_missing_kb(self):
        task = SUITE.instantiate_task("recorder_save", 1)
        try:
            wifi_agent().run_episode(task, 1)
            assert False, "Should have raised ValueError"
        except ValueError:
            print("  OK Missing knowledge base rejected")

    def test_no_hierarchy_needs_no_kb(self):
        env = MiniDroidEnvironment(ENV.definition, EnvConfig(horizon=2))
        task = SUITE.instantiate_task("recorder_save", 1)
        agent = HierarchicalAgent(env, SilentExecutor(), mode=EpisodeMode.NO_HIERARCHY)
        traj = agent.run_episode(task, 1)
        assert traj.kb_revision is None
        print("  OK Flat mode runs without a knowledge base")


class TestPolicyExecutor:
    """Tests for the learned executor wrapper."""

    def test_acts_greedily(self):
        policy = ExecutorPolicy.from_definition(SUITE.definition)
        executor = PolicyExecutor(policy, policy.init_params())
        ctx = Context(WIFI_DEMO.steps[0].pre_obs, WIFI_DEMO.task.goal_text, WIFI_DEMO.steps[0].instruction)
        assert executor.act(ctx) == policy.act(policy.init_params(), ctx)
        print("  OK Same action as the policy's greedy decode")

    def test_rejects_mismatched_params(self):
        policy = ExecutorPolicy.from_definition(SUITE.definition)
        small = ExecutorPolicy.from_definition(SUITE.definition, PolicyConfig(hash_dim=8))
        try:
            PolicyExecutor(policy, small.init_params())
            assert False, "Should have raised ValueError"
        except ValueError:
            print("  OK Parameter dimensions checked")


class TestReplay:
    """Tests for trajectory replay."""

    def test_replay_matches(self):
        task = SUITE.instantiate_task("settings_wifi_off", 3)
        traj = wifi_agent().run_episode(task, 3)
        result = replay_trajectory(traj, ENV)
        assert result.matches
        assert result.success
        assert result.first_mismatch is None
        print("  OK Replay reproduces every observation")

    def test_replay_with_skips(self):
        task = SUITE.instantiate_task("settings_wifi_off", 3)
        traj = wifi_agent(SilentExecutor()).run_episode(task, 3)
        result = replay_trajectory(traj, ENV)
        assert result.matches
        assert not result.success
        print("  OK Malformed steps replayed as skips")


def run_all_tests():
    """Run all tests and report results."""
    print("\n" + "=" * 60)
    print("Hierarchical Agent Tests")
    print("=" * 60)

    test_classes = [
        TestRuleExecutor,
        TestEpisodes,
        TestPolicyExecutor,
        TestReplay,
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
