"""Interactive grounding dialog loop, supervision pairs, and suffix loss.

The inference loop alternates: linearize the running context behind the
"<image>clarify " header, generate, and either decode a grounding box
from loc tokens or treat the output as a clarification question, append
the human reply, and go again. Role headers are exactly "assistant: "
and "user: " with single spaces so supervision pairs are reproducible
byte for byte.

A dialog with K turns linearizes into K+1 supervision pairs, cumulatively
revealing turns and alternating the target between the next question and
the final loc-token string. Cross-entropy applies to suffix positions
only; prefix logits never enter the loss.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Protocol, Union

import numpy as np

from ambimap.loccodec import BoxNorm, LocQuad, decode_box, encode_box, parse_loc_sequence
from ambimap.metrics import iou

HEADER = "<image>clarify "
DEFAULT_K_MAX = 10


class TurnLimitExceeded(RuntimeError):
    """The generator never grounded within k_max iterations."""


class MalformedGeneration(ValueError):
    """Generated text is empty after cleaning."""


class OracleExhausted(RuntimeError):
    """A scripted reply source ran out of answers."""


class GeneratorPort(Protocol):
    def generate(self, prefix: str) -> str: ...


@dataclass
class DialogState:
    """Append-only dialog context; frozen once the terminal box is set."""

    user_request: str
    turns: list[tuple[str, str]] = field(default_factory=list)
    terminal_box: Optional[BoxNorm] = None

    def append_turn(self, question: str, answer: str) -> None:
        if self.terminal_box is not None:
            raise ValueError("dialog already terminal")
        self.turns.append((question, answer))

    def set_terminal(self, box: BoxNorm) -> None:
        if self.terminal_box is not None:
            raise ValueError("terminal box already set")
        self.terminal_box = box


@dataclass(frozen=True)
class SupervisedPair:
    prefix: str  # linearized context, without the fixed header
    target: str
    is_grounding: bool

    def __post_init__(self):
        if not self.target:
            raise ValueError("empty target")
        if self.is_grounding != (parse_loc_sequence(self.target) is not None):
            raise ValueError("is_grounding flag disagrees with the target")


@dataclass(frozen=True)
class Question:
    text: str


@dataclass(frozen=True)
class Grounding:
    quad: LocQuad


def linearize_context(user_request: str, turns: Iterable[tuple[str, str]]) -> str:
    return user_request + "".join(
        f" assistant: {r} user: {h}" for r, h in turns
    )


def build_prefix(s: DialogState) -> str:
    """Full generation input: header plus the linearized running context."""
    if s.terminal_box is not None:
        raise ValueError("dialog already terminal")
    return HEADER + linearize_context(s.user_request, s.turns)


def linearize_dialog(
    user_request: str, turns: list[tuple[str, str]], gold: BoxNorm
) -> list[SupervisedPair]:
    """K+1 supervision pairs: each next question, then the grounding string."""
    pairs = []
    for k, (question, _) in enumerate(turns):
        pairs.append(
            SupervisedPair(
                prefix=linearize_context(user_request, turns[:k]),
                target=question,
                is_grounding=False,
            )
        )
    pairs.append(
        SupervisedPair(
            prefix=linearize_context(user_request, turns),
            target=encode_box(gold),
            is_grounding=True,
        )
    )
    return pairs


_ASSISTANT_ECHO = re.compile(r"^\s*assistant:\s*")


def classify_output(generated: str) -> Union[Question, Grounding]:
    """Grounding if a valid loc quad is present, otherwise a cleaned question."""
    quad = parse_loc_sequence(generated)
    if quad is not None:
        return Grounding(quad)
    text = generated
    while _ASSISTANT_ECHO.match(text):
        text = _ASSISTANT_ECHO.sub("", text, count=1)
    text = re.sub(r"\s+", " ", text).strip()
    if not text:
        raise MalformedGeneration(f"no question or loc sequence in {generated!r}")
    return Question(text)


class ScriptedGenerator:
    """Replays canned model outputs in order; stands in for the real VLM."""

    def __init__(self, outputs: list[str]):
        self._outputs = list(outputs)
        self._next = 0

    def generate(self, prefix: str) -> str:
        if self._next >= len(self._outputs):
            raise RuntimeError("generation script exhausted")
        out = self._outputs[self._next]
        self._next += 1
        return out


class GoldEchoGenerator:
    """Emits the loc tokens of each gold box in turn; the oracle upper bound."""

    def __init__(self, golds: list[BoxNorm]):
        self._golds = list(golds)
        self._next = 0

    def generate(self, prefix: str) -> str:
        if self._next >= len(self._golds):
            raise RuntimeError("no gold box left to echo")
        out = encode_box(self._golds[self._next])
        self._next += 1
        return out


class AlwaysAskGenerator:
    """Never grounds; forces the turn limit."""

    def __init__(self, question: str = "Which one do you mean?"):
        self.question = question

    def generate(self, prefix: str) -> str:
        return self.question


class ScriptedOracle:
    """Replays a fixed list of human answers; raises when exhausted."""

    def __init__(self, replies: list[str]):
        self._replies = list(replies)
        self._next = 0

    def reply(self, question: str) -> str:
        if self._next >= len(self._replies):
            raise OracleExhausted(f"no reply left for question {question!r}")
        answer = self._replies[self._next]
        self._next += 1
        return answer


class StdinOracle:
    """Reads human replies line by line; the CLI's interactive mode."""

    def __init__(self, prompt_sink: Callable[[str], None], line_source: Callable[[], str]):
        self._prompt = prompt_sink
        self._readline = line_source

    def reply(self, question: str) -> str:
        self._prompt(question)
        line = self._readline()
        if line == "":
            raise OracleExhausted("standard input closed")
        return line.rstrip("\n")


def run_dialog(
    gen: GeneratorPort,
    oracle,
    user_request: str,
    k_max: int = DEFAULT_K_MAX,
    pre_step: Optional[Callable[[DialogState], None]] = None,
) -> tuple[DialogState, BoxNorm]:
    """Iterate generate/classify until grounding; at most k_max iterations.

    pre_step, when given, observes the state before each generation; the
    natural use is consulting the ambiguity probe for logging or gating
    policies layered on top. It cannot mutate the loop's control flow.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    state = DialogState(user_request=user_request)
    for _ in range(k_max):
        if pre_step is not None:
            pre_step(state)
        generated = gen.generate(build_prefix(state))
        outcome = classify_output(generated)
        if isinstance(outcome, Grounding):
            box = decode_box(outcome.quad)
            state.set_terminal(box)
            return state, box
        state.append_turn(outcome.text, oracle.reply(outcome.text))
    raise TurnLimitExceeded(f"no grounding within {k_max} iterations")


def masked_ce(logits: np.ndarray, target_ids: list[int], suffix_start: int) -> float:
    """Mean token cross-entropy over suffix positions only.

    logits: (T_total, V). target_ids holds one id per suffix position.
    Prefix rows are never touched, so perturbing them cannot change the
    loss even at the bit level.
    """
    logits = np.asarray(logits, dtype=np.float64)
    t_total = logits.shape[0]
    if suffix_start >= t_total:
        raise ValueError("empty suffix")
    if len(target_ids) != t_total - suffix_start:
        raise ValueError(
            f"{len(target_ids)} targets for {t_total - suffix_start} suffix positions"
        )
    rows = logits[suffix_start:]
    shifted = rows - rows.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(rows.shape[0]), target_ids]
    return float(np.mean(log_z - picked))


def masked_ce_grad(
    logits: np.ndarray, target_ids: list[int], suffix_start: int
) -> np.ndarray:
    """d masked_ce / d logits; exactly zero on every prefix row."""
    logits = np.asarray(logits, dtype=np.float64)
    t_total, vocab = logits.shape
    if suffix_start >= t_total:
        raise ValueError("empty suffix")
    rows = logits[suffix_start:]
    shifted = rows - rows.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    softmax = e / e.sum(axis=1, keepdims=True)
    n = rows.shape[0]
    softmax[np.arange(n), target_ids] -= 1.0
    grad = np.zeros((t_total, vocab))
    grad[suffix_start:] = softmax / n
    return grad


def evaluate_guesser(
    pairs: list[tuple[str, BoxNorm]], gen: GeneratorPort, iou_threshold: float = 0.5
) -> float:
    """Acc@IoU: fraction of generations whose decoded box matches the gold.

    Each pair is (full-history prefix, gold box). Generations without a
    valid loc sequence count as misses, not errors.
    """
    if not pairs:
        raise ValueError("no evaluation pairs")
    hits = 0
    for prefix, gold in pairs:
        quad = parse_loc_sequence(gen.generate(prefix))
        if quad is None:
            continue
        if iou(decode_box(quad), gold) >= iou_threshold:
            hits += 1
    return hits / len(pairs)


@dataclass(frozen=True)
class DialogRecord:
    """One corpus line: request, turns, and the gold box."""

    image_id: str
    user_request: str
    turns: list[tuple[str, str]]
    gold_box: BoxNorm


def write_corpus(records: Iterable[DialogRecord], destination) -> int:
    count = 0
    for r in records:
        line = json.dumps(
            {
                "image_id": r.image_id,
                "U": r.user_request,
                "turns": [[q, a] for q, a in r.turns],
                "gold_box": [r.gold_box.y_min, r.gold_box.x_min, r.gold_box.y_max, r.gold_box.x_max],
            }
        )
        destination.write(line + "\n")
        count += 1
    return count


def read_corpus(source) -> list[DialogRecord]:
    records = []
    for line_no, line in enumerate(source, 1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
            box = BoxNorm(*obj["gold_box"])
            records.append(
                DialogRecord(
                    image_id=str(obj["image_id"]),
                    user_request=obj["U"],
                    turns=[(q, a) for q, a in obj["turns"]],
                    gold_box=box,
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"bad corpus record on line {line_no}: {exc}") from exc
    return records
