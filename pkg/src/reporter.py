"""
Report Generation Module

Turns experiment results into run artifacts:
- JSON report (machine-readable summary plus the effective config)
- CSV tables (metrics, per-round success, ablation and sweep tables)
- Text summary (CLI output)
- Markdown report

Reports carry no wall-clock timestamps so that every artifact is a pure
function of the config and seed.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd

from .experiments import AblationTable, CoevolutionReport, SuccessStats, SweepReport
from .planner import KnowledgeBase, LoopReport
from .trainer import TrainingReport, smoothed_rewards


def config_digest(config: dict) -> str:
    """Short stable hash of a config dict."""
    payload = json.dumps(config, sort_keys=True).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()[:12]


def _cell(value) -> str:
    if isinstance(value, float):
        return "-" if math.isnan(value) else f"{value:.4g}"
    if value is None:
        return "-"
    return str(value)


def markdown_table(frame: pd.DataFrame) -> list[str]:
    """Render a DataFrame as Markdown table lines."""
    if frame.empty:
        return ["*(no rows)*"]
    columns = [str(c) for c in frame.columns]
    lines = [
        "| " + " | ".join(columns) + " |",
        "|" + "|".join("-" * (len(c) + 2) for c in columns) + "|",
    ]
    for row in frame.itertuples(index=False):
        lines.append("| " + " | ".join(_cell(v) for v in row) + " |")
    return lines


@dataclass
class RunReport:
    """Summary of one CLI command's results."""

    command: str
    seed: int
    config: dict

    # Headline numbers, in display order
    summary: dict = field(default_factory=dict)

    # Named tables written as CSV and rendered in Markdown
    tables: dict[str, pd.DataFrame] = field(default_factory=dict)

    notes: list[str] = field(default_factory=list)

    @property
    def config_hash(self) -> str:
        return config_digest(self.config)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "summary": self.summary,
            "tables": sorted(self.tables),
            "notes": self.notes,
            "config": self.config,
        }

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, ensure_ascii=False, default=str)


# =============================================================================
# Report builders
# =============================================================================

def training_report(report: TrainingReport, config: dict, seed: int) -> RunReport:
    rewards = report.rewards
    curve = smoothed_rewards(rewards, window=max(1, len(rewards) // 10))
    return RunReport(
        command=f"train ({report.mode})",
        seed=seed,
        config=config,
        summary={
            "steps": len(rewards),
            "final_k": report.final_k,
            "initial_reward": round(rewards[0], 4) if rewards else None,
            "terminal_reward": round(report.terminal_reward(), 4),
        },
        tables={
            "metrics": report.metrics_frame(),
            "reward_curve": curve.rename_axis("window").reset_index(name="mean_reward"),
        },
    )


def loop_report(report: LoopReport, kb: KnowledgeBase, config: dict, seed: int) -> RunReport:
    provenance = pd.DataFrame(
        [r.to_dict() for r in kb.provenance],
        columns=["revision", "operator", "category", "step_index", "detail"],
    )
    return RunReport(
        command=f"evolve {report.template_id}",
        seed=seed,
        config=config,
        summary={
            "template": report.template_id,
            "iterations": report.iterations,
            "converged": report.converged,
            "final_streak": report.final_streak,
            "final_revision": report.final_revision,
            "plan_steps": len(kb.steps),
        },
        tables={"loop": report.to_frame(), "provenance": provenance},
        notes=[f"{i}. {step.render()}" for i, step in enumerate(kb.steps, 1)],
    )


def evaluation_report(stats: SuccessStats, config: dict, seed: int, mode: str) -> RunReport:
    return RunReport(
        command=f"eval ({mode})",
        seed=seed,
        config=config,
        summary={
            "templates": len(stats.per_template),
            "success": stats.format(),
            "success_mean": round(stats.mean, 4),
            "success_std": round(stats.std, 4),
        },
        tables={"per_template": stats.per_template},
    )


def coevolution_report(report: CoevolutionReport, config: dict, seed: int) -> RunReport:
    curve = report.success_curve
    loops = pd.concat([r.to_frame().assign(template=r.template_id) for r in report.loop_reports], ignore_index=True) \
        if report.loop_reports else pd.DataFrame()
    return RunReport(
        command="coevolve",
        seed=seed,
        config=config,
        summary={
            "rounds": len(curve) - 1,
            "initial_success": round(curve[0], 4),
            "final_success": round(curve[-1], 4),
            "kb_revisions": int(report.rounds["kb_revisions"].iloc[-1]),
        },
        tables={"rounds": report.rounds, "metrics": report.metrics_frame(), "srlr": loops},
    )


def ablation_report(table: AblationTable, config: dict, seed: int) -> RunReport:
    summary = table.summary()
    return RunReport(
        command="ablate",
        seed=seed,
        config=config,
        summary={row.arm: round(row.success_median, 4) for row in summary.itertuples(index=False)},
        tables={"ablation": table.frame, "ablation_summary": summary},
    )


def sweep_report(report: SweepReport, config: dict, seed: int) -> RunReport:
    summary = report.summary()
    return RunReport(
        command=f"sweep {report.param}",
        seed=seed,
        config=config,
        summary={f"{report.param}={row.value:g}": round(row.median, 4) for row in summary.itertuples(index=False)},
        tables={"sweep": report.frame, "sweep_summary": summary},
    )


# =============================================================================
# Writer
# =============================================================================

class RunReporter:
    """
    Writes RunReports to an output directory.

    Example:
        reporter = RunReporter("runs/exp1")
        paths = reporter.save_all(report)
    """

    def __init__(self, output_dir: str | Path = "runs"):
        """
        Initialize the reporter.

        Args:
            output_dir: Directory to save output files
        """
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def save_json(self, report: RunReport, filename: str = "report.json") -> Path:
        output_path = self.output_dir / filename
        output_path.write_text(report.to_json() + "\n", encoding="utf-8")
        return output_path

    def save_tables(self, report: RunReport) -> list[Path]:
        paths = []
        for name, frame in report.tables.items():
            path = self.output_dir / f"{name}.csv"
            frame.to_csv(path, index=False)
            paths.append(path)
        return paths

    def save_markdown(self, report: RunReport, filename: str = "report.md") -> Path:
        output_path = self.output_dir / filename
        output_path.write_text(self.format_markdown_report(report), encoding="utf-8")
        return output_path

    def save_all(self, report: RunReport) -> list[Path]:
        return [self.save_json(report), *self.save_tables(report), self.save_markdown(report)]

    def format_text_report(self, report: RunReport) -> str:
        """Format report as human-readable text (CLI output style)."""
        lines = []
        w = 60

        lines.append("=" * w)
        lines.append(report.command.upper())
        lines.append("=" * w)
        lines.append(f"Seed: {report.seed}   Config: {report.config_hash}")
        lines.append("")

        width = max((len(k) for k in report.summary), default=0)
        for key, value in report.summary.items():
            lines.append(f"  {key.ljust(width)}  {_cell(value)}")

        if report.notes:
            lines.append("")
            for note in report.notes:
                lines.append(f"  {note}")

        lines.append("=" * w)
        return "\n".join(lines)

    def format_markdown_report(self, report: RunReport) -> str:
        lines = [f"# Run report: {report.command}", ""]
        lines.append(f"*Seed {report.seed}, config `{report.config_hash}`*")
        lines.append("")

        lines.append("## Summary")
        lines.append("")
        lines.append("| Field | Value |")
        lines.append("|-------|-------|")
        for key, value in report.summary.items():
            lines.append(f"| {key} | {_cell(value)} |")
        lines.append("")

        if report.notes:
            lines.append("## Plan")
            lines.append("")
            lines.extend(report.notes)
            lines.append("")

        for name, frame in report.tables.items():
            # Per-step metrics go to CSV only
            if name == "metrics":
                continue
            lines.append(f"## {name.replace('_', ' ').capitalize()}")
            lines.append("")
            lines.extend(markdown_table(frame))
            lines.append("")

        return "\n".join(lines)

    def print_cli_summary(self, report: RunReport) -> None:
        print(self.format_text_report(report))


def write_report(report: RunReport, output_dir: str | Path, markdown: bool = True) -> list[Path]:
    """Save a report's JSON, CSV tables and (optionally) Markdown."""
    reporter = RunReporter(output_dir)
    paths = [reporter.save_json(report), *reporter.save_tables(report)]
    if markdown:
        paths.append(reporter.save_markdown(report))
    return paths
