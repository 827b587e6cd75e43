"""
Executor Policy Module

The trainable low-level executor: a factored categorical policy over
(action kind, grid cell, text token) with exact log-probabilities and
analytic gradients.

Token layout per action:
    [kind]                        terminate / system_button add one token
    [kind, cell]                  click, long_press
    [kind, cell, cell2]           swipe
    [kind, text..., END]          type, answer

Each position is scored by one of three linear softmax heads (kind, cell,
token) over hand-crafted context features. Later positions see the chosen
kind through conditioning features, so the sequence probability factorizes
as pi(o_t | c, o_<t).
"""

import json
import logging
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .environment import (
    ACTION_KINDS,
    ELEMENT_KINDS,
    SCREEN_HEIGHT,
    SCREEN_WIDTH,
    SWIPE_ANCHORS,
    Action,
    ActionKind,
    EnvironmentDefinition,
    Screen,
)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "minidroid-policy"

END = "END"
SPECIAL_TOKENS = (END, "<back>", "<home>", "<success>", "<failure>")
BUTTON_TOKENS = {"back": "<back>", "home": "<home>"}
STATUS_TOKENS = {"success": "<success>", "failure": "<failure>"}

STOPWORDS = frozenset({
    "a", "an", "the", "to", "and", "of", "for", "with", "on", "in", "it",
    "as", "its", "their", "then", "your", "is", "be", "at", "by", "or",
})

TEXT_KINDS = (ActionKind.TYPE, ActionKind.ANSWER)
TAP_KINDS = (ActionKind.CLICK, ActionKind.LONG_PRESS)
DIRECTION_WORDS = ("up", "down", "left", "right")

WORD_PATTERN = re.compile(r"[a-z0-9]+")
QUOTED_PATTERN = re.compile(r"'([^']+)'")


class DecodeError(ValueError):
    """Token sequence cannot be scored or decoded."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or does not match the policy."""


def words(text: str) -> list[str]:
    return WORD_PATTERN.findall(text.lower())


def content_words(text: str) -> set[str]:
    return {w for w in words(text) if w not in STOPWORDS}


class PolicyConfig(BaseModel):
    """Executor policy settings."""
    model_config = ConfigDict(frozen=True)

    grid_cols: int = Field(default=12, ge=1)
    grid_rows: int = Field(default=24, ge=1)
    hash_dim: int = Field(default=64, ge=1)
    max_text_tokens: int = Field(default=3, ge=1)
    grounding_prior: float = Field(default=5.0, ge=0.0)
    prefix_norm: int = Field(default=10, ge=1)


@dataclass(frozen=True)
class Context:
    """Augmented executor input: observation, goals and injected demo prefix."""
    observation: Screen
    task_goal: str
    sub_goal: str
    injected_prefix: tuple[tuple[str, Action], ...] = ()

    def __post_init__(self):
        for _, action in self.injected_prefix:
            action.validate(self.observation.width, self.observation.height)


@dataclass(frozen=True)
class FeatureVector:
    """Dense context features of fixed dimension F."""
    values: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class ActionTokens:
    """A token sequence with per-token log-probabilities under some params."""
    tokens: tuple[int, ...]
    per_token_logprobs: tuple[float, ...] = ()
    action: Optional[Action] = None     # None when the sequence is malformed

    @property
    def total_logprob(self) -> float:
        return float(sum(self.per_token_logprobs))

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True, eq=False)
class PolicyParams:
    """
    Flat parameter vector laid out as [kind F x 7 | cell F x C | token F x V].

    Immutable: the array is marked read-only and updates build new params.
    """
    theta: np.ndarray
    n_features: int
    n_cells: int
    n_vocab: int
    version: int = 0

    def __post_init__(self):
        expected = self.n_features * (len(ACTION_KINDS) + self.n_cells + self.n_vocab)
        if self.theta.shape != (expected,):
            raise ValueError(f"theta has shape {self.theta.shape}, expected ({expected},)")
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("theta contains non-finite values")
        self.theta.setflags(write=False)

    @property
    def size(self) -> int:
        return int(self.theta.shape[0])

    def blocks(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Views of the kind, cell and token weight matrices."""
        F = self.n_features
        k = len(ACTION_KINDS)
        kind = self.theta[: F * k].reshape(F, k)
        cell = self.theta[F * k: F * (k + self.n_cells)].reshape(F, self.n_cells)
        token = self.theta[F * (k + self.n_cells):].reshape(F, self.n_vocab)
        return kind, cell, token

    def updated(self, theta: np.ndarray) -> "PolicyParams":
        return PolicyParams(
            theta=np.array(theta, dtype=np.float64),
            n_features=self.n_features,
            n_cells=self.n_cells,
            n_vocab=self.n_vocab,
            version=self.version + 1,
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, PolicyParams):
            return NotImplemented
        return (
            self.version == other.version
            and (self.n_features, self.n_cells, self.n_vocab)
            == (other.n_features, other.n_cells, other.n_vocab)
            and np.array_equal(self.theta, other.theta)
        )


class Vocabulary:
    """Closed token vocabulary: special tokens plus every pool value."""

    def __init__(self, tokens: list[str]):
        if list(tokens[: len(SPECIAL_TOKENS)]) != list(SPECIAL_TOKENS):
            raise ValueError("Vocabulary must start with the special tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("Vocabulary tokens must be unique")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.end = self.index[END]
        # Longest first for greedy tokenization
        self._by_length = sorted(self.tokens[len(SPECIAL_TOKENS):], key=len, reverse=True)

    @classmethod
    def from_definition(cls, definition: EnvironmentDefinition) -> "Vocabulary":
        tokens = list(SPECIAL_TOKENS)
        for values in definition.pools.values():
            for value in values:
                if value not in tokens:
                    tokens.append(value)
        return cls(tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def is_special(self, token_id: int) -> bool:
        return token_id < len(SPECIAL_TOKENS)

    def value_ids(self) -> range:
        return range(len(SPECIAL_TOKENS), len(self.tokens))

    def tokenize(self, text: str, max_tokens: int) -> Optional[list[int]]:
        """Split text into at most max_tokens value tokens, or None."""
        result = []
        rest = text
        while rest:
            for token in self._by_length:
                if rest.startswith(token):
                    result.append(self.index[token])
                    rest = rest[len(token):]
                    break
            else:
                return None
            if len(result) > max_tokens:
                return None
        return result if result else None


class ActionCodec:
    """Maps well-formed actions to token sequences and back."""

    def __init__(
        self,
        vocab: Vocabulary,
        config: Optional[PolicyConfig] = None,
        width: int = SCREEN_WIDTH,
        height: int = SCREEN_HEIGHT,
    ):
        self.vocab = vocab
        self.config = config or PolicyConfig()
        self.width = width
        self.height = height
        self.cols = self.config.grid_cols
        self.rows = self.config.grid_rows
        self.n_cells = self.cols * self.rows
        self.max_text = self.config.max_text_tokens

    # Slot ids: 0 kind, 1 cell, 2 cell2, 3.. text positions
    @property
    def n_slots(self) -> int:
        return 3 + self.max_text + 1

    def slots_for(self, kind: ActionKind) -> list[int]:
        if kind in TAP_KINDS:
            return [1]
        if kind == ActionKind.SWIPE:
            return [1, 2]
        if kind in TEXT_KINDS:
            return list(range(3, 3 + self.max_text + 1))
        return [3]

    def cell_of(self, x: int, y: int) -> int:
        col = min(self.cols - 1, x * self.cols // self.width)
        row = min(self.rows - 1, y * self.rows // self.height)
        return row * self.cols + col

    def cell_center(self, cell: int) -> tuple[int, int]:
        row, col = divmod(cell, self.cols)
        cell_w = self.width // self.cols
        cell_h = self.height // self.rows
        return (col * cell_w + cell_w // 2, row * cell_h + cell_h // 2)

    def encode(self, action: Action) -> list[int]:
        """
        Tokens for a well-formed action.

        Raises:
            DecodeError: If the action is not representable (off-center
                coordinate or text outside the vocabulary)
        """
        action.validate(self.width, self.height)
        kind_id = ACTION_KINDS.index(action.kind)
        tokens = [kind_id]

        for point in (action.coordinate, action.coordinate2):
            if point is None:
                continue
            cell = self.cell_of(*point)
            if self.cell_center(cell) != tuple(point):
                raise DecodeError(f"Coordinate {point} is not a grid cell center")
            tokens.append(cell)

        if action.kind in TEXT_KINDS:
            text_ids = self.vocab.tokenize(action.text, self.max_text)
            if text_ids is None:
                raise DecodeError(f"Text {action.text!r} not representable in vocabulary")
            tokens.extend(text_ids)
            tokens.append(self.vocab.end)
        elif action.kind == ActionKind.SYSTEM_BUTTON:
            tokens.append(self.vocab.index[BUTTON_TOKENS[action.button]])
        elif action.kind == ActionKind.TERMINATE:
            tokens.append(self.vocab.index[STATUS_TOKENS[action.status]])
        return tokens

    def check_scorable(self, tokens) -> ActionKind:
        """
        Check that every token sits in a valid head slot.

        Scorable sequences may still be malformed (empty text, special token
        inside text, wrong button token); they just have a probability.
        """
        if not tokens:
            raise DecodeError("Empty token sequence")
        if not 0 <= tokens[0] < len(ACTION_KINDS):
            raise DecodeError(f"Invalid kind token {tokens[0]}")
        kind = ACTION_KINDS[tokens[0]]
        slots = self.slots_for(kind)
        rest = list(tokens[1:])

        if kind in TEXT_KINDS:
            if not 1 <= len(rest) <= len(slots):
                raise DecodeError(f"{kind.value} needs 1..{len(slots)} text tokens, got {len(rest)}")
            if self.vocab.end in rest[:-1]:
                raise DecodeError("Tokens after END")
        elif len(rest) != len(slots):
            raise DecodeError(f"{kind.value} needs {len(slots)} argument tokens, got {len(rest)}")

        for slot, token in zip(slots, rest):
            limit = self.n_cells if slot in (1, 2) else len(self.vocab)
            if not 0 <= token < limit:
                raise DecodeError(f"Token {token} out of range for slot {slot}")
        return kind

    def decode(self, tokens) -> Action:
        """
        Action for a token sequence.

        Raises:
            DecodeError: If the sequence is not a well-formed action
        """
        kind = self.check_scorable(tokens)
        rest = list(tokens[1:])

        if kind in TAP_KINDS:
            x, y = self.cell_center(rest[0])
            return Action(kind, coordinate=(x, y))
        if kind == ActionKind.SWIPE:
            return Action.swipe(self.cell_center(rest[0]), self.cell_center(rest[1]))
        if kind in TEXT_KINDS:
            if rest[-1] != self.vocab.end:
                raise DecodeError("Text not closed by END")
            values = rest[:-1]
            if not values:
                raise DecodeError("Empty text")
            if any(self.vocab.is_special(t) for t in values):
                raise DecodeError("Special token inside text")
            return Action(kind, text="".join(self.vocab.tokens[t] for t in values))
        token = self.vocab.tokens[rest[0]]
        if kind == ActionKind.SYSTEM_BUTTON:
            for button, name in BUTTON_TOKENS.items():
                if token == name:
                    return Action.system_button(button)
            raise DecodeError(f"{token!r} is not a system button")
        for status, name in STATUS_TOKENS.items():
            if token == name:
                return Action.terminate(status)
        raise DecodeError(f"{token!r} is not a terminate status")

    def try_decode(self, tokens) -> Optional[Action]:
        try:
            return self.decode(tokens)
        except DecodeError:
            return None


@dataclass
class _ContextFeatures:
    """Sparse base features plus the grounding signals used by the priors."""
    idx: np.ndarray
    vals: np.ndarray
    grounding: np.ndarray           # per cell
    in_subgoal: np.ndarray          # per vocab token
    on_screen: np.ndarray           # per vocab token
    direction: Optional[str]
    buttons: tuple[str, ...]
    heads: dict = field(default_factory=dict)


class FeatureExtractor:
    """
    Hand-crafted context features.

    Layout (offsets computed at construction):
        bias | hashed sub-goal words (H) | per-cell grounding (C)
        | per-cell element kind one-hots (7C) | focus flags (2)
        | vocab in sub-goal / on screen / in goal (3V)
        | last kind (7) | second-last kind (7) | prefix fraction | has prefix
        | slot one-hot | kind conditioning (7)
    """

    def __init__(self, codec: ActionCodec, config: Optional[PolicyConfig] = None):
        self.codec = codec
        self.config = config or codec.config
        C = codec.n_cells
        V = len(codec.vocab)
        H = self.config.hash_dim
        n_kinds = len(ACTION_KINDS)

        offset = 0

        def block(size: int) -> int:
            nonlocal offset
            start = offset
            offset += size
            return start

        self.bias = block(1)
        self.bow = block(H)
        self.grounding = block(C)
        self.element_kind = block(len(ELEMENT_KINDS) * C)
        self.focus = block(2)
        self.vocab_subgoal = block(V)
        self.vocab_screen = block(V)
        self.vocab_goal = block(V)
        self.last_kind = block(n_kinds)
        self.second_kind = block(n_kinds)
        self.prefix_frac = block(1)
        self.has_prefix = block(1)
        self.slot = block(codec.n_slots)
        self.cond_kind = block(n_kinds)
        self.dim = offset

    def grounding_scores(self, screen: Screen, sub_goal: str) -> np.ndarray:
        """
        Per-cell match between the sub-goal and the element anchored there.

        Score = shared content words / label words, plus 1 when the label is
        quoted verbatim in the sub-goal.
        """
        scores = np.zeros(self.codec.n_cells)
        goal_words = content_words(sub_goal)
        quoted = {q.lower() for q in QUOTED_PATTERN.findall(sub_goal)}
        for element in screen.elements:
            label_words = content_words(element.label)
            if not label_words:
                continue
            score = len(goal_words & label_words) / len(label_words)
            if element.label.lower() in quoted:
                score += 1.0
            scores[self.codec.cell_of(*element.tap_point)] = score
        return scores

    def _vocab_mask(self, text: str) -> np.ndarray:
        mask = np.zeros(len(self.codec.vocab))
        for i in self.codec.vocab.value_ids():
            if self.codec.vocab.tokens[i] in text:
                mask[i] = 1.0
        return mask

    def context_features(self, ctx: Context) -> _ContextFeatures:
        screen = ctx.observation
        entries: dict[int, float] = {self.bias: 1.0}

        def add(index: int, value: float) -> None:
            if value != 0.0:
                entries[index] = entries.get(index, 0.0) + value

        for word in words(ctx.sub_goal):
            add(self.bow + zlib.crc32(word.encode("utf-8")) % self.config.hash_dim, 1.0)

        grounding = self.grounding_scores(screen, ctx.sub_goal)
        for cell in np.flatnonzero(grounding):
            add(self.grounding + int(cell), float(grounding[cell]))

        n_kinds = len(ELEMENT_KINDS)
        for element in screen.elements:
            cell = self.codec.cell_of(*element.tap_point)
            add(self.element_kind + cell * n_kinds + ELEMENT_KINDS.index(element.kind), 1.0)

        focused = screen.focused_field
        if focused is not None:
            add(self.focus, 1.0)
            if focused.text:
                add(self.focus + 1, 1.0)

        screen_text = "\n".join(
            [e.label for e in screen.elements]
            + [value for e in screen.elements for _, value in e.state]
        )
        in_subgoal = self._vocab_mask(ctx.sub_goal)
        on_screen = self._vocab_mask(screen_text)
        in_goal = self._vocab_mask(ctx.task_goal)
        for i in np.flatnonzero(in_subgoal):
            add(self.vocab_subgoal + int(i), 1.0)
        for i in np.flatnonzero(on_screen):
            add(self.vocab_screen + int(i), 1.0)
        for i in np.flatnonzero(in_goal):
            add(self.vocab_goal + int(i), 1.0)

        prefix = ctx.injected_prefix
        if prefix:
            add(self.last_kind + ACTION_KINDS.index(prefix[-1][1].kind), 1.0)
            if len(prefix) >= 2:
                add(self.second_kind + ACTION_KINDS.index(prefix[-2][1].kind), 1.0)
            add(self.prefix_frac, min(len(prefix), self.config.prefix_norm) / self.config.prefix_norm)
            add(self.has_prefix, 1.0)

        goal_words = words(ctx.sub_goal)
        direction = next((w for w in goal_words if w in DIRECTION_WORDS), None)
        buttons = tuple(b for b in BUTTON_TOKENS if b in goal_words)

        idx = np.array(sorted(entries), dtype=np.int64)
        vals = np.array([entries[i] for i in idx], dtype=np.float64)
        return _ContextFeatures(idx, vals, grounding, in_subgoal, on_screen, direction, buttons)

    def head_features(self, cf: _ContextFeatures, slot: int, kind: Optional[ActionKind]):
        """Sparse features for one token position."""
        extra_idx = [self.slot + slot]
        if kind is not None:
            extra_idx.append(self.cond_kind + ACTION_KINDS.index(kind))
        idx = np.concatenate([cf.idx, np.array(extra_idx, dtype=np.int64)])
        vals = np.concatenate([cf.vals, np.ones(len(extra_idx))])
        return idx, vals

    def featurize(self, ctx: Context) -> FeatureVector:
        """Dense base features of a context (kind slot, no conditioning)."""
        cf = self.context_features(ctx)
        idx, vals = self.head_features(cf, 0, None)
        values = np.zeros(self.dim)
        values[idx] = vals
        return FeatureVector(values)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = np.max(logits)
    shifted = logits - m
    return shifted - np.log(np.sum(np.exp(shifted)))


class ExecutorPolicy:
    """
    Factored executor policy over a fixed codec and feature extractor.

    The policy object holds no parameters; every method takes PolicyParams
    explicitly so that sampling and gradients are pure functions.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        config: Optional[PolicyConfig] = None,
        width: int = SCREEN_WIDTH,
        height: int = SCREEN_HEIGHT,
    ):
        self.config = config or PolicyConfig()
        self.codec = ActionCodec(vocab, self.config, width, height)
        self.extractor = FeatureExtractor(self.codec, self.config)
        self.vocab = vocab
        self._cache: dict[Context, _ContextFeatures] = {}

    @classmethod
    def from_definition(
        cls, definition: EnvironmentDefinition, config: Optional[PolicyConfig] = None
    ) -> "ExecutorPolicy":
        return cls(Vocabulary.from_definition(definition), config, definition.width, definition.height)

    @property
    def n_features(self) -> int:
        return self.extractor.dim

    @property
    def n_cells(self) -> int:
        return self.codec.n_cells

    @property
    def n_vocab(self) -> int:
        return len(self.vocab)

    def init_params(self) -> PolicyParams:
        """Cold-start parameters (theta = 0)."""
        size = self.n_features * (len(ACTION_KINDS) + self.n_cells + self.n_vocab)
        return PolicyParams(np.zeros(size), self.n_features, self.n_cells, self.n_vocab, 0)

    def check_params(self, params: PolicyParams) -> None:
        dims = (params.n_features, params.n_cells, params.n_vocab)
        if dims != (self.n_features, self.n_cells, self.n_vocab):
            raise ValueError(f"Params dims {dims} do not match policy")

    def featurize(self, ctx: Context) -> FeatureVector:
        return self.extractor.featurize(ctx)

    def _context(self, ctx: Context) -> _ContextFeatures:
        cf = self._cache.get(ctx)
        if cf is None:
            if len(self._cache) > 4096:
                self._cache.clear()
            cf = self.extractor.context_features(ctx)
            self._cache[ctx] = cf
        return cf

    def _prior(self, cf: _ContextFeatures, slot: int, kind: Optional[ActionKind]) -> Optional[np.ndarray]:
        """Fixed, parameter-free logit offsets for one position."""
        kappa = self.config.grounding_prior
        if slot == 0 or kappa == 0.0:
            return None
        if slot in (1, 2):
            if kind in TAP_KINDS:
                return kappa * cf.grounding
            prior = np.zeros(self.n_cells)
            if cf.direction is not None:
                point = SWIPE_ANCHORS[cf.direction][slot - 1]
                prior[self.codec.cell_of(*point)] = kappa
            return prior

        prior = np.zeros(self.n_vocab)
        index = self.vocab.index
        if kind in TEXT_KINDS:
            if slot > 3:
                prior[self.vocab.end] = kappa
            elif kind == ActionKind.TYPE:
                prior += kappa * cf.in_subgoal
            else:
                prior += kappa * (cf.in_subgoal + cf.on_screen)
        elif kind == ActionKind.SYSTEM_BUTTON:
            for button in cf.buttons:
                prior[index[BUTTON_TOKENS[button]]] = kappa
        elif kind == ActionKind.TERMINATE:
            prior[index[STATUS_TOKENS["success"]]] = kappa
        return prior

    def _head(self, params: PolicyParams, cf: _ContextFeatures, slot: int, kind: Optional[ActionKind]):
        """(feature idx, feature vals, log-probs) for one position, cached per params version."""
        key = (id(params), params.version, slot, kind)
        cached = cf.heads.get(key)
        if cached is not None and cached[0] is params:
            return cached[1]

        kind_w, cell_w, token_w = params.blocks()
        weights = kind_w if slot == 0 else cell_w if slot in (1, 2) else token_w
        idx, vals = self.extractor.head_features(cf, slot, kind)
        logits = vals @ weights[idx]
        prior = self._prior(cf, slot, kind)
        if prior is not None:
            logits = logits + prior
        result = (idx, vals, _log_softmax(logits))

        if len(cf.heads) > 64:
            cf.heads.clear()
        cf.heads[key] = (params, result)
        return result

    def head_logprobs(self, params: PolicyParams, ctx: Context, slot: int, kind: Optional[ActionKind] = None) -> np.ndarray:
        """Log-probabilities of one head at one position."""
        return self._head(params, self._context(ctx), slot, kind)[2]

    def _positions(self, tokens) -> tuple[ActionKind, list[tuple[int, Optional[ActionKind], int]]]:
        """(slot, conditioning kind, token) for every position of a scorable sequence."""
        kind = self.codec.check_scorable(tokens)
        positions = [(0, None, tokens[0])]
        for slot, token in zip(self.codec.slots_for(kind), tokens[1:]):
            positions.append((slot, kind, token))
        return kind, positions

    def _sample_one(self, params: PolicyParams, cf: _ContextFeatures, rng: np.random.Generator) -> ActionTokens:
        def draw(logp: np.ndarray) -> int:
            cdf = np.cumsum(np.exp(logp))
            u = rng.random() * cdf[-1]
            return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))

        logp = self._head(params, cf, 0, None)[2]
        kind_id = draw(logp)
        tokens = [kind_id]
        logprobs = [float(logp[kind_id])]
        kind = ACTION_KINDS[kind_id]
        for slot in self.codec.slots_for(kind):
            logp = self._head(params, cf, slot, kind)[2]
            token = draw(logp)
            tokens.append(token)
            logprobs.append(float(logp[token]))
            if kind in TEXT_KINDS and token == self.vocab.end:
                break
        return ActionTokens(tuple(tokens), tuple(logprobs), self.codec.try_decode(tokens))

    def sample_group(self, params: PolicyParams, ctx: Context, G: int, seed: int) -> list[ActionTokens]:
        """
        Draw G independent token sequences.

        Deterministic in (params, ctx, G, seed). Sequences may be malformed;
        their `action` is then None.
        """
        if G < 1:
            raise ValueError("G must be at least 1")
        cf = self._context(ctx)
        rng = np.random.default_rng(seed)
        return [self._sample_one(params, cf, rng) for _ in range(G)]

    def greedy(self, params: PolicyParams, ctx: Context) -> ActionTokens:
        """Argmax decoding, one head at a time."""
        cf = self._context(ctx)
        logp = self._head(params, cf, 0, None)[2]
        kind_id = int(np.argmax(logp))
        tokens = [kind_id]
        logprobs = [float(logp[kind_id])]
        kind = ACTION_KINDS[kind_id]
        for slot in self.codec.slots_for(kind):
            logp = self._head(params, cf, slot, kind)[2]
            token = int(np.argmax(logp))
            tokens.append(token)
            logprobs.append(float(logp[token]))
            if kind in TEXT_KINDS and token == self.vocab.end:
                break
        return ActionTokens(tuple(tokens), tuple(logprobs), self.codec.try_decode(tokens))

    def logprob(self, params: PolicyParams, ctx: Context, tokens) -> tuple[float, list[float]]:
        """
        Sequence log-probability and its per-token terms.

        Raises:
            DecodeError: If tokens cannot be scored
        """
        cf = self._context(ctx)
        _, positions = self._positions(list(tokens))
        per_token = [float(self._head(params, cf, slot, kind)[2][token]) for slot, kind, token in positions]
        return float(sum(per_token)), per_token

    def add_token_grads(
        self,
        params: PolicyParams,
        ctx: Context,
        tokens,
        weights,
        out: np.ndarray,
    ) -> None:
        """
        Accumulate sum_t weights[t] * d log pi(token_t) / d theta into `out`.

        Per position the gradient is outer(f_t, e_y - p) on that head's block.
        """
        cf = self._context(ctx)
        _, positions = self._positions(list(tokens))
        if len(weights) != len(positions):
            raise ValueError("One weight per token required")

        F = self.n_features
        k = len(ACTION_KINDS)
        C = self.n_cells
        blocks = {
            "kind": out[: F * k].reshape(F, k),
            "cell": out[F * k: F * (k + C)].reshape(F, C),
            "token": out[F * (k + C):].reshape(F, self.n_vocab),
        }
        for (slot, kind, token), weight in zip(positions, weights):
            if weight == 0.0:
                continue
            idx, vals, logp = self._head(params, cf, slot, kind)
            delta = -np.exp(logp)
            delta[token] += 1.0
            name = "kind" if slot == 0 else "cell" if slot in (1, 2) else "token"
            blocks[name][idx] += weight * np.outer(vals, delta)

    def logprob_grad(self, params: PolicyParams, ctx: Context, tokens) -> np.ndarray:
        """Exact gradient of the total log-probability with respect to theta."""
        grad = np.zeros(params.size)
        n_positions = len(self._positions(list(tokens))[1])
        self.add_token_grads(params, ctx, tokens, [1.0] * n_positions, grad)
        return grad

    def act(self, params: PolicyParams, ctx: Context) -> Optional[Action]:
        """Greedy action, or None when the greedy sequence is malformed."""
        return self.greedy(params, ctx).action


def save_checkpoint(params: PolicyParams, path: str | Path) -> Path:
    """Write a header line then little-endian float64 theta."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": CHECKPOINT_FORMAT,
        "F": params.n_features,
        "C": params.n_cells,
        "V": params.n_vocab,
        "version": params.version,
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        f.write(params.theta.astype("<f8").tobytes())
    logger.info("Saved checkpoint v%d to %s", params.version, path)
    return path


def load_checkpoint(path: str | Path, policy: Optional[ExecutorPolicy] = None) -> PolicyParams:
    """
    Read a checkpoint, optionally checking dimensions against a policy.

    Raises:
        CheckpointError: On malformed header, size mismatch or dims mismatch
    """
    data = Path(path).read_bytes()
    newline = data.find(b"\n")
    if newline < 0:
        raise CheckpointError("Missing checkpoint header")
    try:
        header = json.loads(data[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Invalid checkpoint header: {e}")
    if header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"Unknown checkpoint format {header.get('format')!r}")

    F, C, V = header["F"], header["C"], header["V"]
    expected = F * (len(ACTION_KINDS) + C + V)
    payload = data[newline + 1:]
    if len(payload) != expected * 8:
        raise CheckpointError(f"Expected {expected * 8} theta bytes, found {len(payload)}")
    if policy is not None and (F, C, V) != (policy.n_features, policy.n_cells, policy.n_vocab):
        raise CheckpointError(f"Checkpoint dims {(F, C, V)} do not match policy")

    theta = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return PolicyParams(theta, F, C, V, int(header.get("version", 0)))
