"""
Serialization Module

JSON formats for everything the pipeline writes to disk:
- Trajectories (round-trip exact, parse errors carry a byte offset)
- Demonstrations
- Training samples in the conversation / tool_call schema, each with a
  screen-state file standing in for the screenshot
- Knowledge bases
"""

import json
import logging
from pathlib import Path
from typing import Optional

import pandas as pd

from .agent import EpisodeMode, Trajectory, TrajectoryStep
from .environment import Action, Screen
from .planner import KnowledgeBase
from .tasks import Demonstration, DemoStep, TaskSpec, TrainingSample

logger = logging.getLogger(__name__)

TRAJECTORY_FORMAT = "minidroid-trajectory"
DEMONSTRATION_FORMAT = "minidroid-demonstration"
FORMAT_VERSION = 1

TOOL_CALL_OPEN = "<tool_call>"
TOOL_CALL_CLOSE = "</tool_call>"


class TrajectoryParseError(ValueError):
    """Malformed trajectory bytes."""

    def __init__(self, message: str, byte_offset: int):
        self.byte_offset = byte_offset
        super().__init__(f"{message} (at byte {byte_offset})")


def _dumps(data: dict) -> bytes:
    return (json.dumps(data, indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def _loads(data: bytes) -> dict:
    """Decode JSON bytes, mapping failures to TrajectoryParseError."""
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise TrajectoryParseError(f"Invalid UTF-8: {e.reason}", e.start)
    try:
        parsed = json.loads(text)
    except json.JSONDecodeError as e:
        raise TrajectoryParseError(f"Invalid JSON: {e.msg}", len(text[: e.pos].encode("utf-8")))
    if not isinstance(parsed, dict):
        raise TrajectoryParseError("Top-level value must be an object", 0)
    return parsed


# =============================================================================
# Trajectories
# =============================================================================

def trajectory_to_dict(traj: Trajectory) -> dict:
    return {
        "format": TRAJECTORY_FORMAT,
        "version": FORMAT_VERSION,
        "task": traj.task.to_dict(),
        "seed": traj.seed,
        "success": traj.success,
        "mode": traj.mode.value,
        "kb_revision": traj.kb_revision,
        "steps": [
            {
                "index": s.index,
                "sub_goal": s.sub_goal,
                "plan_index": s.plan_index,
                "action": s.action.to_dict() if s.action is not None else None,
                "target": s.target,
                "transitioned": s.transitioned,
                "observation": s.observation.to_dict(),
                "post_observation": s.post_observation.to_dict(),
            }
            for s in traj.steps
        ],
    }


def trajectory_from_dict(data: dict) -> Trajectory:
    if data.get("format") != TRAJECTORY_FORMAT:
        raise ValueError(f"Not a trajectory (format {data.get('format')!r})")
    steps = tuple(
        TrajectoryStep(
            index=s["index"],
            observation=Screen.from_dict(s["observation"]),
            sub_goal=s["sub_goal"],
            plan_index=s["plan_index"],
            action=Action.from_dict(s["action"]) if s["action"] is not None else None,
            post_observation=Screen.from_dict(s["post_observation"]),
            transitioned=s["transitioned"],
            target=s.get("target"),
        )
        for s in data["steps"]
    )
    return Trajectory(
        task=TaskSpec.from_dict(data["task"]),
        steps=steps,
        success=data["success"],
        seed=data["seed"],
        mode=EpisodeMode(data.get("mode", EpisodeMode.HIERARCHY.value)),
        kb_revision=data.get("kb_revision"),
    )


def serialize_trajectory(traj: Trajectory) -> bytes:
    return _dumps(trajectory_to_dict(traj))


def parse_trajectory(data: bytes) -> Trajectory:
    """
    Parse trajectory bytes.

    Raises:
        TrajectoryParseError: On invalid encoding, JSON or structure; no
            partial object is returned
    """
    parsed = _loads(data)
    try:
        return trajectory_from_dict(parsed)
    except (KeyError, TypeError, ValueError) as e:
        raise TrajectoryParseError(f"Invalid trajectory structure: {e!r}", 0)


def save_trajectory(traj: Trajectory, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(serialize_trajectory(traj))
    return path


def load_trajectory(path: str | Path) -> Trajectory:
    return parse_trajectory(Path(path).read_bytes())


# =============================================================================
# Demonstrations
# =============================================================================

def demonstration_to_dict(demo: Demonstration) -> dict:
    return {
        "format": DEMONSTRATION_FORMAT,
        "version": FORMAT_VERSION,
        "demo_id": demo.demo_id,
        "task": demo.task.to_dict(),
        "steps": [
            {
                "instruction": s.instruction,
                "action": s.action.to_dict(),
                "target": s.target,
                "pre_obs": s.pre_obs.to_dict(),
                "post_obs": s.post_obs.to_dict(),
            }
            for s in demo.steps
        ],
    }


def demonstration_from_dict(data: dict) -> Demonstration:
    if data.get("format") != DEMONSTRATION_FORMAT:
        raise ValueError(f"Not a demonstration (format {data.get('format')!r})")
    return Demonstration(
        task=TaskSpec.from_dict(data["task"]),
        steps=tuple(
            DemoStep(
                pre_obs=Screen.from_dict(s["pre_obs"]),
                post_obs=Screen.from_dict(s["post_obs"]),
                instruction=s["instruction"],
                action=Action.from_dict(s["action"]),
                target=s.get("target"),
            )
            for s in data["steps"]
        ),
    )


def save_demonstration(demo: Demonstration, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_dumps(demonstration_to_dict(demo)))
    return path


def load_demonstration(path: str | Path) -> Demonstration:
    return demonstration_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# =============================================================================
# Training samples
# =============================================================================

def tool_call(action: Action) -> str:
    """Expert action as a tool_call string."""
    return f"{TOOL_CALL_OPEN}\n{json.dumps({'arguments': action.to_dict()})}\n{TOOL_CALL_CLOSE}"


def parse_tool_call(value: str) -> dict:
    """Arguments dict of a tool_call string."""
    start = value.find(TOOL_CALL_OPEN)
    end = value.find(TOOL_CALL_CLOSE)
    if start < 0 or end < start:
        raise ValueError("Missing tool_call markers")
    payload = json.loads(value[start + len(TOOL_CALL_OPEN): end])
    return payload["arguments"]


def export_sample(sample: TrainingSample, image_ref: str) -> dict:
    """
    One training sample in the conversation schema.

    Args:
        sample: Decomposed training sample
        image_ref: Path of the screen-state file for the pre-action screen
    """
    return {
        "id": sample.sample_id,
        "task": sample.task_goal,
        "conversations": [
            {"from": "human", "value": f"<image>\n{sample.instruction}"},
            {"from": "gpt", "value": tool_call(sample.expert_action)},
        ],
        "image": image_ref,
    }


def kind_histogram(samples: list[TrainingSample]) -> pd.DataFrame:
    """Action-kind counts and shares over a dataset."""
    kinds = pd.Series([s.expert_action.kind.value for s in samples], dtype="object")
    counts = kinds.value_counts().sort_index()
    frame = counts.rename_axis("action").reset_index(name="count")
    frame["share"] = (frame["count"] / max(1, len(samples))).round(4)
    return frame


def export_dataset(samples: list[TrainingSample], output_dir: str | Path) -> dict[str, Path]:
    """
    Write samples.json, one screen-state file per sample and the action-kind
    histogram.
    """
    output_dir = Path(output_dir)
    screens_dir = output_dir / "screens"
    screens_dir.mkdir(parents=True, exist_ok=True)

    records = []
    for sample in samples:
        image_ref = f"screens/{sample.sample_id}.json"
        (output_dir / image_ref).write_bytes(_dumps(sample.observation.to_dict()))
        records.append(export_sample(sample, image_ref))

    samples_path = output_dir / "samples.json"
    samples_path.write_text(json.dumps(records, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    histogram_path = output_dir / "action_kinds.csv"
    kind_histogram(samples).to_csv(histogram_path, index=False)
    logger.info("Exported %d samples to %s", len(records), output_dir)
    return {"samples": samples_path, "histogram": histogram_path, "screens": screens_dir}


# =============================================================================
# Knowledge bases
# =============================================================================

def save_knowledge(kb: KnowledgeBase, path: str | Path) -> Path:
    return kb.save(path)


def load_knowledge(path: str | Path) -> KnowledgeBase:
    return KnowledgeBase.load(path)


def load_knowledge_dir(directory: str | Path, templates: Optional[list[str]] = None) -> dict[str, KnowledgeBase]:
    """Every <template>.json knowledge base in a directory."""
    store = {}
    for path in sorted(Path(directory).glob("*.json")):
        kb = load_knowledge(path)
        if templates is None or kb.task_template in templates:
            store[kb.task_template] = kb
    return store
