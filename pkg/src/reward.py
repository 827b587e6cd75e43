"""
Reward Module

Step-level rewards for executor training:
- Format reward: does the output decode to a well-formed action
- Content reward: does it match the expert action (kind plus parameters)
- Weighted total, with content gated on format
- Error classification used to route samples into replay pools
"""

import math
from enum import Enum
from typing import Optional, Union

from pydantic import BaseModel, ConfigDict, Field

from .environment import Action, ActionKind
from .policy import ActionTokens


class RewardConfig(BaseModel):
    """Reward weights and coordinate tolerance (pixels)."""
    model_config = ConfigDict(frozen=True)

    epsilon: float = Field(default=50.0, gt=0.0)
    lambda_fmt: float = Field(default=1.0, ge=0.0)
    lambda_content: float = Field(default=1.0, ge=0.0)

    @property
    def max_reward(self) -> float:
        return self.lambda_fmt + self.lambda_content


class ErrorClass(Enum):
    """Exactly one class per (candidate, expert) pair."""
    CORRECT = "Correct"
    TYPE_ERROR = "TypeError"
    PARAM_ERROR = "ParamError"


RawOutput = Union[ActionTokens, Action, None]


def _as_action(raw: RawOutput) -> Optional[Action]:
    """Well-formed action carried by a raw output, or None."""
    if raw is None:
        return None
    action = raw.action if isinstance(raw, ActionTokens) else raw
    if action is None or not action.is_well_formed():
        return None
    return action


def format_reward(raw: RawOutput) -> int:
    """1 iff the output decodes to a well-formed action."""
    return 1 if _as_action(raw) is not None else 0


def _distance(a: tuple[int, int], b: tuple[int, int]) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def params_match(a: Action, expert: Action, cfg: RewardConfig) -> bool:
    """Parameter agreement for two actions of the same kind."""
    if a.kind in (ActionKind.CLICK, ActionKind.LONG_PRESS):
        return _distance(a.coordinate, expert.coordinate) < cfg.epsilon
    if a.kind == ActionKind.SWIPE:
        return (
            _distance(a.coordinate, expert.coordinate) < cfg.epsilon
            and _distance(a.coordinate2, expert.coordinate2) < cfg.epsilon
        )
    if a.kind in (ActionKind.TYPE, ActionKind.ANSWER):
        return a.text == expert.text
    # system_button and terminate are matched on kind alone
    return True


def content_reward(a: Action, expert: Action, cfg: RewardConfig) -> int:
    """1 iff kinds match and parameters match within tolerance."""
    return 1 if a.kind == expert.kind and params_match(a, expert, cfg) else 0


def total_reward(raw: RawOutput, expert: Action, cfg: RewardConfig) -> float:
    """lambda_fmt * r_fmt + lambda_content * r_content, content gated on format."""
    action = _as_action(raw)
    if action is None:
        return 0.0
    return cfg.lambda_fmt + cfg.lambda_content * content_reward(action, expert, cfg)


def classify(a: Action, expert: Action, cfg: RewardConfig) -> ErrorClass:
    if a.kind != expert.kind:
        return ErrorClass.TYPE_ERROR
    if not params_match(a, expert, cfg):
        return ErrorClass.PARAM_ERROR
    return ErrorClass.CORRECT


def classify_output(raw: RawOutput, expert: Action, cfg: RewardConfig) -> ErrorClass:
    """classify() extended to raw outputs; malformed outputs count as TypeError."""
    action = _as_action(raw)
    if action is None:
        return ErrorClass.TYPE_ERROR
    return classify(action, expert, cfg)
