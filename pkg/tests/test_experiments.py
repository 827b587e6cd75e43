"""
Tests for the experiments module.

These run the harnesses at toy scale (one training step per phase).

Run with: python tests/test_experiments.py
"""

import math
import sys
from pathlib import Path

# Add project root to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.agent import HierarchicalAgent, RuleExecutor
from src.config import RunConfig
from src.experiments import (
    ARMS,
    ablate,
    build_runtime,
    coevolve,
    eval_seed,
    evaluate,
    evolve,
    summarize_all,
    sweep,
    vanilla_config,
)
from src.planner import LoopConfig
from src.tasks import CorruptionKind
from src.trainer import TrainConfig


CFG = RunConfig(
    templates=["settings_wifi_off", "recorder_save"],
    demos_per_template=1,
    phase_steps=1,
    rounds=1,
    n_srlr=1,
    seeds=[0],
    episodes_per_eval=1,
    train=TrainConfig(learning_rate=0.5, G=4, per_device_batch=1, grad_accum=1, record_wall_time=False),
    loop=LoopConfig(max_iter=4),
)
RUNTIME = build_runtime(CFG)


class TestRuntime:
    """Tests for runtime construction."""

    def test_demos_and_dataset(self):
        assert RUNTIME.templates == ["settings_wifi_off", "recorder_save"]
        assert len(RUNTIME.demos) == 2
        assert len(RUNTIME.dataset) == 3 + 7
        assert RUNTIME.first_demo("recorder_save").task.seed == 1
        print(f"  OK {len(RUNTIME.dataset)} samples from 2 demonstrations")

    def test_unknown_template(self):
        try:
            build_runtime(CFG.model_copy(update={"templates": ["no_such_template"]}))
            assert False, "Should have raised an error"
        except (KeyError, ValueError):
            print("  OK Unknown template rejected")

    def test_first_demo_missing(self):
        try:
            RUNTIME.first_demo("settings_airplane_on")
            assert False, "Should have raised ValueError"
        except ValueError:
            print("  OK No demonstration for an unused template")


class TestEvaluate:
    """Tests for success-rate evaluation."""

    def test_eval_seed_layout(self):
        assert eval_seed(0, 0, 0) == 20000
        assert eval_seed(1, 2, 3) == 21103
        print("  OK Evaluation seeds disjoint from training seeds")

    def test_empty_inputs(self):
        agent = HierarchicalAgent(RUNTIME.env, RuleExecutor(), summarize_all(RUNTIME))
        assert evaluate(agent, [], [0]).empty
        assert evaluate(agent, ["settings_wifi_off"], []).empty
        assert evaluate(agent, [], [0]).mean == 0.0
        print("  OK Empty templates or seeds give empty stats")

    def test_rule_executor_success(self):
        agent = HierarchicalAgent(RUNTIME.env, RuleExecutor(), summarize_all(RUNTIME))
        stats = evaluate(agent, RUNTIME.templates, [0, 1], episodes=2, suite=RUNTIME.suite)
        assert list(stats.per_template["template"]) == RUNTIME.templates
        assert len(stats.per_seed) == 2
        assert stats.mean == 1.0 and stats.std == 0.0
        assert stats.format() == "100.0 ± 0.0"
        print(f"  OK Summarized plans with the rule executor: {stats.format()}")


class TestEvolve:
    """Tests for single-template SRLR runs."""

    def test_clean(self):
        kb, report = evolve(CFG, RUNTIME, "recorder_save")
        assert report.converged
        assert kb.revision == 0
        print(f"  OK Converged in {report.iterations} iterations")

    def test_missing_step(self):
        kb, report = evolve(CFG, RUNTIME, "recorder_save", CorruptionKind.MISSING_STEP)
        assert report.converged
        assert report.operators == ["Add"]
        print("  OK Missing step repaired with Add")

    def test_corruption_not_applicable(self):
        try:
            evolve(CFG, RUNTIME, "settings_wifi_off", CorruptionKind.HARDCODED_PARAM)
            assert False, "Should have raised ValueError"
        except ValueError:
            print("  OK Parameterless template has no literal to hardcode")

    def test_faulty(self):
        _, report = evolve(CFG, RUNTIME, "settings_wifi_off", faulty=True)
        assert not report.converged
        assert report.iterations == CFG.loop.max_iter
        print("  OK Dropped inputs never converge")


class TestCoevolve:
    """Tests for the alternating schedule."""

    def test_rounds(self):
        report = coevolve(CFG, RUNTIME)
        assert list(report.rounds["round"]) == [0, 1]
        assert math.isnan(report.rounds["terminal_reward"].iloc[0])
        assert len(report.training) == 1
        assert len(report.loop_reports) == len(RUNTIME.templates)
        assert report.params.version == CFG.phase_steps
        assert len(report.success_curve) == 2
        assert set(report.kb_store) == set(RUNTIME.templates)
        assert list(report.metrics_frame()["round"]) == [1]
        print(f"  OK Success curve {report.success_curve}")


class TestAblationAndSweep:
    """Tests for the ablation and sensitivity harnesses."""

    def test_vanilla_config(self):
        vanilla = vanilla_config(CFG)
        assert not vanilla.curriculum.balancing
        assert vanilla.schedule.temperature == 5.0
        assert CFG.curriculum.balancing
        print("  OK Vanilla GRPO disables injection and balancing")

    def test_ablate(self):
        table = ablate(CFG, RUNTIME, steps=1)
        assert list(table.frame["arm"]) == list(ARMS)
        assert list(table.summary()["arm"]) == list(ARMS)
        assert set(table.curves) == {(arm, 0) for arm in ARMS}
        assert all(len(curve) == 1 for curve in table.curves.values())
        print(f"  OK {len(ARMS)} arms, one seed")

    def test_sweep(self):
        report = sweep(CFG, "beta_con", [0.5, 0.8], RUNTIME, steps=1)
        assert list(report.frame["value"]) == [0.5, 0.8]
        assert len(report.summary()) == 2
        print("  OK Two beta_con values")

    def test_sweep_errors(self):
        for param, values in (("beta_con", []), ("learning_rate", [0.1])):
            try:
                sweep(CFG, param, values, RUNTIME, steps=1)
                assert False, "Should have raised ValueError"
            except ValueError:
                pass
        print("  OK Empty values and unknown parameters rejected")


def run_all_tests():
    """Run all tests and report results."""
    print("\n" + "=" * 60)
    print("Experiment Harness Tests")
    print("=" * 60)

    test_classes = [
        TestRuntime,
        TestEvaluate,
        TestEvolve,
        TestCoevolve,
        TestAblationAndSweep,
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
