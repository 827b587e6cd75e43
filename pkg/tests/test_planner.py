"""
Tests for the SRLR planner module.

Run with: python tests/test_planner.py
"""

import sys
import tempfile
from dataclasses import replace
from pathlib import Path

# Add project root to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.agent import HierarchicalAgent, RuleExecutor
from src.environment import ActionKind, EnvConfig, FaultyEnvironment, MiniDroidEnvironment
from src.planner import (
    Done,
    Emphasis,
    FailureCase,
    FailureCategory,
    KnowledgeBase,
    LoopConfig,
    OutcomeKind,
    PlannerError,
    RevisionOperator,
    RevisionRefused,
    SubGoal,
    first_divergence,
    generalize,
    lcs_pairs,
    locate,
    next_subgoal,
    reflect,
    resolve_text,
    revise,
    srlr_loop,
    summarize,
    verify,
)
from src.tasks import CorruptionKind, CorruptionScenario, TaskSpec, TaskSuite, corrupt_knowledge


ENV = MiniDroidEnvironment()
SUITE = TaskSuite(ENV)
DEMO = SUITE.record_demonstration(SUITE.instantiate_task("recorder_save", 1))
FILENAMES = SUITE.definition.pools["filenames"]


def other_filename_task(seed: int = 77) -> TaskSpec:
    """A recorder_save task whose filename differs from the demonstration's."""
    used = DEMO.task.params["filename"]
    filename = next(f for f in FILENAMES if f != used)
    return TaskSpec(
        template_id="recorder_save",
        goal_text=f"Record an audio clip and save it as '{filename}'.",
        params={"filename": filename},
        difficulty=DEMO.task.difficulty,
        seed=seed,
    )


def rule_agent(env=ENV) -> HierarchicalAgent:
    return HierarchicalAgent(env, RuleExecutor())


class TestSummarize:
    """Tests for demonstration summarization."""

    def test_one_step_per_demo_step(self):
        kb = summarize(DEMO)
        assert len(kb) == len(DEMO)
        assert kb.revision == 0 and kb.provenance == ()
        assert kb.task_template == "recorder_save"
        print(f"  OK {len(kb)} plan steps")

    def test_params_generalized(self):
        kb = summarize(DEMO)
        filename = DEMO.task.params["filename"]
        type_step = kb.steps[5]
        assert type_step.action_template.text == "[FILENAME]"
        assert "[FILENAME]" in type_step.instruction
        assert all(filename not in s.instruction for s in kb.steps)
        assert kb.source_params == {"filename": filename}
        print("  OK Literal replaced with [FILENAME]")

    def test_outcomes_derived(self):
        kb = summarize(DEMO)
        assert kb.steps[0].expected_outcome.kind == OutcomeKind.SCREEN_BECOMES
        assert kb.steps[0].expected_outcome.args == ("drawer",)
        assert kb.steps[4].expected_outcome.kind == OutcomeKind.ELEMENT_TEXT_EQUALS
        assert kb.steps[5].expected_outcome.args == ("name_field", "[FILENAME]")
        print("  OK Outcomes from screen differences")

    def test_answer_uses_screen_placeholder(self):
        demo = SUITE.record_demonstration(SUITE.instantiate_task("notes_read_answer", 1))
        kb = summarize(demo)
        text = kb.steps[-1].action_template.text
        assert text.startswith("[SCREEN:")
        print(f"  OK Answer reads {text}")

    def test_text_helpers(self):
        assert generalize("Type 'a.m4a' now", {"filename": "a.m4a"}) == "Type '[FILENAME]' now"
        assert resolve_text("Type '[FILENAME]'", {"filename": "b.m4a"}) == "Type 'b.m4a'"
        try:
            resolve_text("Type '[FILENAME]'", {})
            assert False, "Should have raised PlannerError"
        except PlannerError:
            print("  OK generalize / resolve_text")


class TestSubGoals:
    """Tests for sub-goal emission and verification."""

    def test_first_subgoal(self):
        kb = summarize(DEMO)
        task = SUITE.instantiate_task("recorder_save", 5)
        obs = ENV.observe(ENV.reset(task, 5))
        proposal = next_subgoal(kb, obs, [], task)
        assert isinstance(proposal, SubGoal)
        assert proposal.plan_index == 0
        assert proposal.text.startswith("Swipe up")
        print(f"  OK {proposal.text}")

    def test_subgoal_resolves_goal_params(self):
        kb = summarize(DEMO)
        task = other_filename_task()
        history = [(s.pre_obs, s.action, s.post_obs) for s in DEMO.steps[:5]]
        proposal = next_subgoal(kb, DEMO.steps[5].pre_obs, history, task)
        assert proposal.plan_index == 5
        assert task.params["filename"] in proposal.text
        print("  OK Type step filled with the new goal's filename")

    def test_done_after_full_history(self):
        kb = summarize(DEMO)
        history = [(s.pre_obs, s.action, s.post_obs) for s in DEMO.steps]
        proposal = next_subgoal(kb, DEMO.steps[-1].post_obs, history, DEMO.task)
        assert isinstance(proposal, Done)
        print("  OK Done once every step is satisfied")

    def test_emphasis_rendered(self):
        kb = summarize(DEMO)
        step = kb.steps[5]
        marked = replace(step, emphasis=Emphasis.CRITICAL, mandatory=True)
        assert marked.render().startswith("CRITICAL: You MUST type the text")
        print(f"  OK {marked.render()}")

    def test_verify(self):
        kb = summarize(DEMO)
        step = DEMO.steps[0]
        assert verify((step.pre_obs, step.action, step.post_obs), kb, 0, DEMO.task)
        assert not verify((step.pre_obs, step.action, step.pre_obs), kb, 0, DEMO.task)
        try:
            verify((step.pre_obs, step.action, step.post_obs), kb, 99)
            assert False, "Should have raised PlannerError"
        except PlannerError:
            print("  OK verify checks outcomes and plan bounds")


class TestAlignment:
    """Tests for LCS alignment helpers."""

    def test_lcs_pairs(self):
        assert lcs_pairs(list("abcd"), list("abd")) == [(0, 0), (1, 1), (3, 2)]
        assert lcs_pairs([], list("ab")) == []
        print("  OK LCS pairs")

    def test_first_divergence(self):
        assert first_divergence(list("abc"), list("abc")) is None
        assert first_divergence(list("axc"), list("abc")) == 1
        assert first_divergence(list("ab"), list("abc")) == 2
        print("  OK First divergence")


class TestRepair:
    """Tests for locate, reflect and revise on planted defects."""

    def test_successful_episode_not_located(self):
        kb = summarize(DEMO)
        traj = rule_agent().run_episode(DEMO.task, DEMO.task.seed, kb=kb)
        assert traj.success
        assert locate(traj, kb, DEMO) is None
        print("  OK Nothing to locate on success")

    def test_hardcoded_literal(self):
        kb = summarize(DEMO)
        scenario = CorruptionScenario("x", CorruptionKind.HARDCODED_PARAM, 5, {"value": DEMO.task.params["filename"]})
        corrupted = corrupt_knowledge(kb, scenario)
        task = other_filename_task()
        traj = rule_agent().run_episode(task, task.seed, kb=corrupted)
        assert not traj.success

        t_star = locate(traj, corrupted, DEMO, task)
        assert traj.steps[t_star].plan_index == 5
        failure = reflect(traj, corrupted, task, t_star, DEMO)
        assert failure.category == FailureCategory.WRONG_LITERAL

        repaired = revise(corrupted, failure, t_star, DEMO)
        assert repaired.revision == 1
        assert repaired.provenance[0].operator == RevisionOperator.UPDATE
        assert repaired.steps[5].action_template.text == "[FILENAME]"
        assert repaired.steps[5].emphasis == Emphasis.IMPORTANT and repaired.steps[5].mandatory

        again = rule_agent().run_episode(task, task.seed, kb=repaired)
        assert again.success
        print("  OK Wrong literal located, restored and re-run")

    def test_missing_step(self):
        kb = corrupt_knowledge(summarize(DEMO), CorruptionScenario("x", CorruptionKind.MISSING_STEP, 4))
        traj = rule_agent().run_episode(DEMO.task, DEMO.task.seed, kb=kb)
        t_star = locate(traj, kb, DEMO)
        failure = reflect(traj, kb, DEMO.task, t_star, DEMO)
        assert failure.category == FailureCategory.MISSING_STEP
        assert failure.demo_index == 4

        repaired = revise(kb, failure, t_star, DEMO)
        assert len(repaired) == len(DEMO)
        assert repaired.steps[4].action_template.kind == ActionKind.LONG_PRESS
        assert repaired.provenance[-1].operator == RevisionOperator.ADD
        print("  OK Missing long press re-added at index 4")

    def test_swapped_order(self):
        kb = corrupt_knowledge(summarize(DEMO), CorruptionScenario("x", CorruptionKind.SWAPPED_ORDER, 4))
        traj = rule_agent().run_episode(DEMO.task, DEMO.task.seed, kb=kb)
        t_star = locate(traj, kb, DEMO)
        failure = reflect(traj, kb, DEMO.task, t_star, DEMO)
        assert failure.category == FailureCategory.WRONG_ORDER
        assert failure.swap_index == 4

        repaired = revise(kb, failure, t_star, DEMO)
        assert repaired.steps[4].action_template.kind == ActionKind.LONG_PRESS
        assert repaired.steps[4].emphasis == Emphasis.CRITICAL
        assert repaired.provenance[-1].operator == RevisionOperator.HIGHLIGHT
        print("  OK Swapped steps reordered and highlighted")

    def test_unexplained_not_revised(self):
        kb = summarize(DEMO)
        failure = FailureCase(FailureCategory.UNEXPLAINED, None, None, "", "", "no idea")
        try:
            revise(kb, failure, 0, DEMO)
            assert False, "Should have raised RevisionRefused"
        except RevisionRefused:
            print("  OK Unexplained failure refused")

    def test_reflect_without_location(self):
        kb = summarize(DEMO)
        traj = rule_agent().run_episode(DEMO.task, DEMO.task.seed, kb=kb)
        failure = reflect(traj, kb, DEMO.task, None, DEMO)
        assert failure.category == FailureCategory.UNEXPLAINED
        print("  OK No located step is unexplained")


class TestSRLRLoop:
    """Tests for the full summarize / execute / repair loop."""

    def test_clean_plan_converges_without_revision(self):
        kb, report = srlr_loop("recorder_save", DEMO, ENV, rule_agent(), LoopConfig(max_iter=5))
        assert report.converged
        assert report.iterations == 3
        assert kb.revision == 0
        assert [r.seed for r in report.records] == [10001, 10002, 10003]
        print("  OK Converged in 3 iterations, no revisions")

    def test_missing_step_repaired(self):
        broken = corrupt_knowledge(summarize(DEMO), CorruptionScenario("x", CorruptionKind.MISSING_STEP, 4))
        kb, report = srlr_loop("recorder_save", DEMO, ENV, rule_agent(), LoopConfig(max_iter=6), initial_kb=broken)
        assert report.converged
        assert report.operators == ["Add"]
        assert kb.revision == 1 and len(kb) == len(DEMO)
        print(f"  OK Repaired in {report.iterations} iterations")

    def test_faulty_environment_never_converges(self):
        env = FaultyEnvironment(ENV.definition, EnvConfig(horizon=10))
        kb, report = srlr_loop("recorder_save", DEMO, env, rule_agent(env), LoopConfig(max_iter=3))
        assert not report.converged
        assert report.iterations == 3
        assert report.final_streak == 0
        print(f"  OK Dropped inputs: categories {[r.category for r in report.records]}")

    def test_wrong_demo(self):
        try:
            srlr_loop("settings_wifi_off", DEMO, ENV, rule_agent())
            assert False, "Should have raised ValueError"
        except ValueError:
            print("  OK Demonstration template mismatch rejected")

    def test_report_csv(self):
        _, report = srlr_loop("recorder_save", DEMO, ENV, rule_agent(), LoopConfig(max_iter=3))
        with tempfile.TemporaryDirectory() as tmpdir:
            path = report.save_csv(Path(tmpdir) / "loop.csv")
            header = path.read_text(encoding="utf-8").splitlines()[0]
        assert header == "iteration,seed,success,t_star,category,operator"
        print("  OK Loop report CSV")


class TestKnowledgeFile:
    """Tests for knowledge-base persistence."""

    def test_save_load(self):
        kb = summarize(DEMO)
        with tempfile.TemporaryDirectory() as tmpdir:
            path = kb.save(Path(tmpdir) / "recorder_save.json")
            assert KnowledgeBase.load(path) == kb
        print("  OK Knowledge base round trip")

    def test_provenance_must_match_revision(self):
        kb = summarize(DEMO)
        try:
            KnowledgeBase(kb.task_template, kb.steps, revision=2)
            assert False, "Should have raised ValueError"
        except ValueError:
            print("  OK Revision without provenance rejected")

    def test_wrong_format(self):
        try:
            KnowledgeBase.from_dict({"format": "something-else"})
            assert False, "Should have raised ValueError"
        except ValueError:
            print("  OK Foreign file rejected")


def run_all_tests():
    """Run all tests and report results."""
    print("\n" + "=" * 60)
    print("SRLR Planner Tests")
    print("=" * 60)

    test_classes = [
        TestSummarize,
        TestSubGoals,
        TestAlignment,
        TestRepair,
        TestSRLRLoop,
        TestKnowledgeFile,
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
