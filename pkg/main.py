"""
MiniDroid Planner-Executor Agent

Batch experiments for a hierarchical GUI agent on a synthetic mobile
environment: a rule-evolved declarative planner (Summarize, Reflect,
Locate, Revise) over a curriculum-guided GRPO executor.

Usage:
    python main.py [--config FILE] [--seed N] [--out DIR] [-v] <command> [options]

Examples:
    python main.py gen-env
    python main.py record-demo recorder_save
    python main.py --seed 3 train --steps 500
    python main.py evolve recorder_save --corrupt hardcoded_param
    python main.py coevolve
    python main.py replay runs/trajectories/recorder_save_20000.json
"""

import argparse
import logging
import sys
from pathlib import Path

from dotenv import load_dotenv

from src.agent import EpisodeMode, HierarchicalAgent, PolicyExecutor, RuleExecutor, replay_trajectory
from src.config import RunConfig, load_config
from src.experiments import (
    SWEEP_PARAMS,
    ablate,
    build_runtime,
    coevolve,
    eval_seed,
    evaluate,
    evolve,
    summarize_all,
    sweep,
    train_executor,
)
from src.environment import MiniDroidEnvironment
from src.planner import KnowledgeBase
from src.policy import load_checkpoint, save_checkpoint
from src.reporter import (
    RunReporter,
    ablation_report,
    coevolution_report,
    evaluation_report,
    loop_report,
    sweep_report,
    training_report,
)
from src.serialization import (
    export_dataset,
    kind_histogram,
    load_knowledge_dir,
    load_trajectory,
    save_demonstration,
    save_knowledge,
    save_trajectory,
)
from src.tasks import CorruptionKind, TaskSuite


def print_header(text: str, char: str = "=", width: int = 60) -> None:
    """Print a formatted header."""
    print(char * width)
    print(text)
    print(char * width)


def print_progress(step: str, end: str = "... ") -> None:
    """Print a progress indicator."""
    print(step, end=end, flush=True)


def finish(report, output_dir: Path) -> None:
    """Print the summary and write report artifacts."""
    reporter = RunReporter(output_dir)
    print()
    reporter.print_cli_summary(report)
    paths = reporter.save_all(report)
    print(f"\nReport saved to: {paths[0]}")


def save_store(store: dict[str, KnowledgeBase], directory: Path) -> None:
    for template_id, kb in store.items():
        save_knowledge(kb, directory / f"{template_id}.json")


# =============================================================================
# Commands
# =============================================================================

def cmd_gen_env(cfg: RunConfig, args, output_dir: Path) -> int:
    print_progress("Validating environment definition")
    env = MiniDroidEnvironment(config=cfg.env)
    definition = env.definition
    print(f"done ({len(definition.screens)} screens, {len(definition.templates)} templates)")

    reachable = env.screen_graph
    unreachable = sorted(set(definition.screens) - reachable)
    output_dir.mkdir(parents=True, exist_ok=True)
    path = output_dir / "environment.json"
    path.write_text(definition.to_json() + "\n", encoding="utf-8")

    print(f"Reachable screens: {len(reachable)}")
    if unreachable:
        print(f"[NOTE] Unreachable from home: {', '.join(unreachable)}")
    print(f"Definition written to: {path}")
    return 0


def cmd_record_demo(cfg: RunConfig, args, output_dir: Path) -> int:
    suite = TaskSuite(MiniDroidEnvironment(config=cfg.env))
    task = suite.instantiate_task(args.template, args.demo_seed)
    print(f"Goal: {task.goal_text}")
    print_progress("Recording expert demonstration")
    demo = suite.record_demonstration(task)
    print(f"done ({len(demo)} steps)")

    for i, step in enumerate(demo.steps):
        print(f"  {i}. {step.instruction}  ->  {step.action}")
    path = save_demonstration(demo, output_dir / "demos" / f"{demo.demo_id}.json")
    print(f"\nDemonstration saved to: {path}")
    return 0


def cmd_decompose(cfg: RunConfig, args, output_dir: Path) -> int:
    suite = TaskSuite(MiniDroidEnvironment(config=cfg.env))
    print_progress("Recording demonstrations")
    demos = suite.demonstrations(cfg.templates, per_template=cfg.demos_per_template)
    print(f"done ({len(demos)})")

    print_progress("Decomposing into training samples")
    samples = suite.build_dataset(demos)
    paths = export_dataset(samples, output_dir / "dataset")
    print(f"done ({len(samples)} samples)")

    histogram = kind_histogram(samples)
    print("Action kinds:")
    for row in histogram.itertuples(index=False):
        print(f"  {row.action:<14} {row.count:>5}  ({row.share:.1%})")
    print(f"Samples written to: {paths['samples']}")
    return 0


def cmd_train(cfg: RunConfig, args, output_dir: Path) -> int:
    print_progress("Building runtime")
    runtime = build_runtime(cfg)
    print(f"done ({len(runtime.dataset)} samples)")

    params = load_checkpoint(args.checkpoint, runtime.policy) if args.checkpoint else None
    steps = args.steps or cfg.train.total_steps(len(runtime.dataset))
    print_progress(f"Training executor ({'SFT' if args.sft else 'C-GRPO'}, {steps} steps)")
    report = train_executor(cfg, runtime, params, steps=steps, sft=args.sft)
    print("done")

    report.save(output_dir)
    finish(training_report(report, cfg.to_dict(), cfg.seed), output_dir)
    return 0


def cmd_evolve(cfg: RunConfig, args, output_dir: Path) -> int:
    runtime = build_runtime(cfg.model_copy(update={"templates": [args.template]}))
    params = load_checkpoint(args.checkpoint, runtime.policy) if args.checkpoint else None
    corruption = CorruptionKind(args.corrupt) if args.corrupt else None

    print_progress(f"Running SRLR on {args.template}")
    kb, report = evolve(cfg, runtime, args.template, corruption, params, faulty=args.faulty)
    print(f"done ({report.iterations} iterations, converged={report.converged})")

    save_knowledge(kb, output_dir / "knowledge" / f"{args.template}.json")
    report.save_csv(output_dir / "loop.csv")
    finish(loop_report(report, kb, cfg.to_dict(), cfg.seed), output_dir)
    return 0 if report.converged else 2


def cmd_coevolve(cfg: RunConfig, args, output_dir: Path) -> int:
    print_progress("Building runtime")
    runtime = build_runtime(cfg)
    print(f"done ({len(runtime.templates)} templates)")

    print_progress(f"Co-evolving ({cfg.rounds} rounds, n_srlr={cfg.n_srlr})")
    report = coevolve(cfg, runtime)
    print("done")

    save_store(report.kb_store, output_dir / "knowledge")
    save_checkpoint(report.params, output_dir / "policy.ckpt")
    finish(coevolution_report(report, cfg.to_dict(), cfg.seed), output_dir)
    return 0


def cmd_eval(cfg: RunConfig, args, output_dir: Path) -> int:
    runtime = build_runtime(cfg)
    mode = EpisodeMode(args.mode)

    if args.checkpoint:
        executor = PolicyExecutor(runtime.policy, load_checkpoint(args.checkpoint, runtime.policy))
    else:
        executor = RuleExecutor()
    store = load_knowledge_dir(args.knowledge, runtime.templates) if args.knowledge else summarize_all(runtime)
    missing = [t for t in runtime.templates if t not in store]
    if missing and mode != EpisodeMode.NO_HIERARCHY:
        raise ValueError(f"No knowledge base for: {', '.join(missing)}")

    agent = HierarchicalAgent(runtime.env, executor, store, mode)
    print_progress(f"Evaluating {len(runtime.templates)} templates over {len(cfg.seeds)} seed groups")
    stats = evaluate(agent, runtime.templates, cfg.seeds, cfg.episodes_per_eval, runtime.suite)
    print("done")

    if args.save_trajectories:
        for t, template_id in enumerate(runtime.templates):
            seed = eval_seed(cfg.seeds[0], t, 0)
            traj = agent.run_episode(runtime.suite.instantiate_task(template_id, seed), seed)
            save_trajectory(traj, output_dir / "trajectories" / f"{template_id}_{seed}.json")

    finish(evaluation_report(stats, cfg.to_dict(), cfg.seed, mode.value), output_dir)
    return 0


def cmd_ablate(cfg: RunConfig, args, output_dir: Path) -> int:
    print_progress(f"Running 5 ablation arms over {len(cfg.seeds)} seeds")
    table = ablate(cfg, steps=args.steps)
    print("done")
    finish(ablation_report(table, cfg.to_dict(), cfg.seed), output_dir)
    return 0


def cmd_sweep(cfg: RunConfig, args, output_dir: Path) -> int:
    print_progress(f"Sweeping {args.param} over {args.values}")
    report = sweep(cfg, args.param, args.values, steps=args.steps)
    print("done")
    finish(sweep_report(report, cfg.to_dict(), cfg.seed), output_dir)
    return 0


def cmd_replay(cfg: RunConfig, args, output_dir: Path) -> int:
    traj = load_trajectory(args.trajectory)
    print(f"Task: {traj.task.goal_text}")
    print(f"Recorded: {len(traj)} steps, success={traj.success}, seed={traj.seed}")

    print_progress("Replaying")
    result = replay_trajectory(traj, MiniDroidEnvironment(config=cfg.env))
    print("done")

    if result.matches:
        print("[OK] Replay matches the recorded outcome")
        return 0
    print(f"[MISMATCH] First divergence at step {result.first_mismatch} (success={result.success})")
    return 1


COMMANDS = {
    "gen-env": cmd_gen_env,
    "record-demo": cmd_record_demo,
    "decompose": cmd_decompose,
    "train": cmd_train,
    "evolve": cmd_evolve,
    "coevolve": cmd_coevolve,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "replay": cmd_replay,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Hierarchical planner-executor GUI agent experiments on MiniDroid.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s gen-env
  %(prog)s --seed 1 train --steps 500
  %(prog)s evolve notes_create --corrupt missing_step
  %(prog)s sweep --param temperature --values 0.05 0.5 5
  %(prog)s --config config/default.toml coevolve

Environment variables MINIDROID_CONFIG, MINIDROID_SEED and MINIDROID_OUT
provide defaults for --config, --seed and --out (.env is read at start).
        """
    )

    parser.add_argument("--config", "-c", help="TOML config file")
    parser.add_argument("--seed", "-s", type=int, help="Training seed (overrides config)")
    parser.add_argument("--out", "-o", help="Output directory (default: runs)")
    parser.add_argument(
        "--verbose", "-v",
        action="store_true",
        help="Debug logging and stack traces on errors"
    )

    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-env", help="Validate and export the environment definition")

    p = sub.add_parser("record-demo", help="Record one expert demonstration")
    p.add_argument("template")
    p.add_argument("--demo-seed", type=int, default=1, help="Task instance seed (default: 1)")

    sub.add_parser("decompose", help="Export single-step training samples")

    p = sub.add_parser("train", help="Train the executor")
    p.add_argument("--steps", type=int, help="Step budget (default: from config)")
    p.add_argument("--sft", action="store_true", help="Supervised baseline instead of C-GRPO")
    p.add_argument("--checkpoint", help="Start from this checkpoint")

    p = sub.add_parser("evolve", help="Run SRLR on one template")
    p.add_argument("template")
    p.add_argument("--corrupt", choices=[k.value for k in CorruptionKind], help="Plant a plan defect first")
    p.add_argument("--checkpoint", help="Use this executor (default: rule executor)")
    p.add_argument("--faulty", action="store_true", help="Environment drops every input")

    sub.add_parser("coevolve", help="Alternate SRLR and C-GRPO phases")

    p = sub.add_parser("eval", help="Evaluate an agent")
    p.add_argument("--checkpoint", help="Executor checkpoint (default: rule executor)")
    p.add_argument("--knowledge", help="Directory of knowledge-base JSON files")
    p.add_argument("--mode", choices=[m.value for m in EpisodeMode], default=EpisodeMode.HIERARCHY.value)
    p.add_argument("--save-trajectories", action="store_true", help="Write one trajectory per template")

    p = sub.add_parser("ablate", help="Five-arm ablation")
    p.add_argument("--steps", type=int, help="Training steps per arm")

    p = sub.add_parser("sweep", help="Sensitivity sweep")
    p.add_argument("--param", choices=SWEEP_PARAMS, required=True)
    p.add_argument("--values", type=float, nargs="+", required=True)
    p.add_argument("--steps", type=int, help="Training steps per value")

    p = sub.add_parser("replay", help="Re-execute a saved trajectory")
    p.add_argument("trajectory")

    return parser


def main(argv: list[str] | None = None) -> int:
    """
    Main entry point.

    Returns:
        Exit code (0 success, 1 input error, 2 SRLR did not converge)
    """
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )

    try:
        cfg = load_config(args.config, seed=args.seed, output_dir=args.out)
        output_dir = Path(cfg.output_dir)

        print()
        print_header(f"MiniDroid Agent: {args.command}", "=", 44)
        return COMMANDS[args.command](cfg, args, output_dir)

    except KeyboardInterrupt:
        print("\n\nInterrupted by user")
        return 130

    except FileNotFoundError as e:
        print(f"\nError: File not found - {e}")
        return 1

    except ValueError as e:
        print(f"\nError: Invalid input - {e}")
        if args.verbose:
            import traceback
            traceback.print_exc()
        return 1

    except Exception as e:
        print(f"\nFatal error: {e}")
        if args.verbose:
            import traceback
            traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
