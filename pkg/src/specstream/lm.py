"""Language-model interface with prefix-cache semantics and toy backends.

Two deterministic reference backends power every test in this package:

* :class:`NGramLM` scores the next token as a seeded pseudorandom pure
  function of the last ``n`` context tokens. It is arbitrary but fully
  reproducible, which is exactly what verification and fixed-point tests
  need.
* :class:`ScriptedLM` follows a prefix-to-continuation table, so tests can
  stage exact accept / partial-accept / reject situations.

Both follow the same convention: a forward pass over a context of length L
returns one score row per position not already covered by the supplied
cache, where the row at position ``j`` scores the token at ``j + 1`` given
tokens ``0..j``. Pass cost in virtual milliseconds is
``pass_base_ms + per_new_token_ms * uncached_positions``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .text import EOS_ID, Vocabulary, split_words

DEFAULT_MAX_NEW_TOKENS = 256


class PrefixViolationError(ValueError):
    """The supplied cache does not cover a prefix of the context."""


class JudgeUnsupportedError(RuntimeError):
    """The backend cannot score consistency judgments."""


@dataclass(frozen=True)
class LatencyModel:
    """Virtual-time cost of one forward pass.

    ``pass_base_ms`` is the fixed per-pass overhead; ``per_new_token_ms``
    is charged for each input position the pass has to materialize (i.e.
    not already in the cache).
    """

    pass_base_ms: float = 30.0
    per_new_token_ms: float = 0.5

    def __post_init__(self) -> None:
        if self.pass_base_ms < 0 or self.per_new_token_ms < 0:
            raise ValueError("latency parameters must be nonnegative")

    def pass_cost(self, uncached_positions: int) -> float:
        return self.pass_base_ms + self.per_new_token_ms * uncached_positions


@dataclass(frozen=True)
class CacheHandle:
    """Opaque record of a materialized context prefix.

    Valid only for the backend instance that issued it and only for
    contexts extending ``prefix``. Truncation is free: real engines drop
    trailing KV entries the same way.
    """

    prefix: tuple[int, ...]
    backend_id: int

    @property
    def cached_prefix_length(self) -> int:
        return len(self.prefix)

    def truncated(self, length: int) -> "CacheHandle":
        if length > len(self.prefix):
            raise PrefixViolationError(
                f"cannot extend cache of length {len(self.prefix)} to {length} by truncation"
            )
        return CacheHandle(self.prefix[:length], self.backend_id)


@dataclass(frozen=True)
class LogitsBlock:
    """Score rows for a contiguous span of context positions.

    ``rows[i]`` belongs to absolute position ``first_position + i`` and
    scores the next token given everything up to and including that
    position.
    """

    rows: np.ndarray
    first_position: int

    def row_for(self, position: int) -> np.ndarray:
        idx = position - self.first_position
        if not 0 <= idx < len(self.rows):
            raise IndexError(f"position {position} not covered by this block")
        return self.rows[idx]

    @property
    def last_row(self) -> np.ndarray:
        return self.rows[-1]


@dataclass(frozen=True)
class JudgeResult:
    yes_score: float
    no_score: float

    @property
    def consistent(self) -> bool:
        return self.yes_score > self.no_score


CONSISTENCY_JUDGE_TEMPLATE = (
    "<|im_start|>user\n"
    "You are given an incomplete prompt and the model's speculative partial answer.\n"
    "Please judge whether the partial prompt is consistent with the model's answer.\n"
    "Partial Prompt: {partial_prompt}\n"
    "Partial Answer: {partial_answer}\n"
    "<|im_end|>\n"
    "<|im_start|>assistant\n"
)


def format_judge_prompt(partial_prompt: str, partial_answer: str) -> str:
    return CONSISTENCY_JUDGE_TEMPLATE.format(
        partial_prompt=partial_prompt, partial_answer=partial_answer
    )


def argmax_token(row: np.ndarray) -> int:
    """Highest-scoring token id; ties go to the lowest id."""
    return int(np.argmax(row))


def topk_tokens(row: np.ndarray, k: int) -> set[int]:
    """The ``min(k, |V|)`` highest-scoring ids, ties broken by lowest id."""
    if k < 1:
        raise ValueError("k must be at least 1")
    k = min(k, len(row))
    order = sorted(range(len(row)), key=lambda i: (-row[i], i))
    return set(order[:k])


_next_backend_id = 0


def _fresh_backend_id() -> int:
    global _next_backend_id
    _next_backend_id += 1
    return _next_backend_id


class LanguageModel:
    """Shared cache plumbing for deterministic backends.

    Subclasses implement :meth:`next_row`, the score vector over the
    vocabulary given a full context prefix. A wall-clock adapter for a real
    model implements the same surface with measured costs instead of
    modeled ones.
    """

    def __init__(self, vocab: Vocabulary, latency: LatencyModel | None = None) -> None:
        self.vocab = vocab
        self.latency = latency or LatencyModel()
        self._backend_id = _fresh_backend_id()

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def eos_id(self) -> int:
        return EOS_ID

    def next_row(self, context: tuple[int, ...]) -> np.ndarray:
        raise NotImplementedError

    def forward(
        self, context: list[int], cache: CacheHandle | None = None
    ) -> tuple[LogitsBlock, CacheHandle, float]:
        """Score every uncached position of ``context``.

        Returns the logits block, a handle covering the full context, and
        the virtual cost of the pass. At least one position must be
        uncached: a fully covered context has nothing left to score.
        """
        start = 0
        if cache is not None:
            if cache.backend_id != self._backend_id:
                raise PrefixViolationError("cache handle belongs to a different backend instance")
            if tuple(context[: len(cache.prefix)]) != cache.prefix:
                raise PrefixViolationError("context does not extend the cached prefix")
            start = len(cache.prefix)
        if start >= len(context):
            raise PrefixViolationError("forward pass requires at least one uncached position")
        ctx = tuple(context)
        rows = np.stack([self.next_row(ctx[: j + 1]) for j in range(start, len(ctx))])
        handle = CacheHandle(ctx, self._backend_id)
        return LogitsBlock(rows, start), handle, self.latency.pass_cost(len(ctx) - start)

    def judge_consistency(self, partial_prompt: str, partial_answer: str) -> tuple[JudgeResult, float]:
        raise JudgeUnsupportedError(f"{type(self).__name__} has no consistency judge")

    def judge_cost(self, partial_prompt: str, partial_answer: str) -> float:
        # One forward pass over the formatted judge prompt. The toy word
        # splitter stands in for the backend tokenizer here; the judge text
        # is scored, never generated from, so it stays out of the run vocab.
        prompt = format_judge_prompt(partial_prompt, partial_answer)
        return self.latency.pass_cost(len(split_words(prompt)))


class NGramLM(LanguageModel):
    """Deterministic toy LM: scores depend only on the last ``order`` tokens.

    Rows come from a PRNG seeded with (seed, window), so identical contexts
    always yield bit-identical scores. Rows are memoized, which also makes
    cache transparency trivially true.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        seed: int = 0,
        order: int = 3,
        latency: LatencyModel | None = None,
    ) -> None:
        super().__init__(vocab, latency)
        self.seed = seed
        self.order = order
        self._rows: dict[tuple[int, ...], np.ndarray] = {}

    def next_row(self, context: tuple[int, ...]) -> np.ndarray:
        window = context[-self.order:] if self.order > 0 else ()
        row = self._rows.get(window)
        if row is None:
            rng = np.random.default_rng([self.seed, len(window), *window])
            row = rng.random(self.vocab_size)
            self._rows[window] = row
        return row


@dataclass(frozen=True)
class ScriptEntry:
    """One prompt-to-continuation rule.

    ``positional`` continuations index by distance past the prompt no
    matter what tokens actually sit there; exact continuations require the
    observed tokens to follow the script and otherwise fall through to the
    default token. Positional mode is what lets a test stage a model that
    keeps predicting the right tail of a sentence around one wrong word.
    """

    prompt: tuple[int, ...]
    continuation: tuple[int, ...]
    positional: bool = False


class ScriptedLM(LanguageModel):
    """Table-driven LM for staging exact verification and decoding scenes."""

    def __init__(
        self,
        vocab: Vocabulary,
        entries: list[ScriptEntry],
        default_token: int = EOS_ID,
        judge_verdicts: dict[tuple[str, str], bool] | None = None,
        latency: LatencyModel | None = None,
    ) -> None:
        super().__init__(vocab, latency)
        # Longest prompt wins when several entries match a context.
        self.entries = sorted(entries, key=lambda e: -len(e.prompt))
        self.default_token = default_token
        self.judge_verdicts = dict(judge_verdicts or {})

    def next_token(self, context: tuple[int, ...]) -> int:
        for entry in self.entries:
            if context[: len(entry.prompt)] != entry.prompt:
                continue
            rest = context[len(entry.prompt):]
            if entry.positional:
                if len(rest) < len(entry.continuation):
                    return entry.continuation[len(rest)]
                return EOS_ID
            if rest == entry.continuation[: len(rest)]:
                if len(rest) < len(entry.continuation):
                    return entry.continuation[len(rest)]
                return EOS_ID
        return self.default_token

    def next_row(self, context: tuple[int, ...]) -> np.ndarray:
        row = np.zeros(self.vocab_size)
        row[self.next_token(context)] = 1.0
        return row

    def judge_consistency(self, partial_prompt: str, partial_answer: str) -> tuple[JudgeResult, float]:
        """Scripted yes/no verdicts; unknown pairs and empty answers say no."""
        cost = self.judge_cost(partial_prompt, partial_answer)
        if not partial_answer:
            return JudgeResult(yes_score=-1.0, no_score=0.0), cost
        consistent = self.judge_verdicts.get((partial_prompt, partial_answer), False)
        if consistent:
            return JudgeResult(yes_score=0.0, no_score=-1.0), cost
        return JudgeResult(yes_score=-1.0, no_score=0.0), cost


@dataclass
class ScriptedScenario:
    """Parsed scenario file: script entries plus judge verdicts.

    File format (JSON):
        {"entries": [{"prompt_prefix": str, "continuation": str,
                      "match": "exact" | "positional"}, ...],
         "judge": [{"prompt": str, "answer": str, "verdict": "yes"|"no"}, ...]}
    """

    entries: list[dict] = field(default_factory=list)
    judge: list[dict] = field(default_factory=list)

    @classmethod
    def load(cls, path: str | Path) -> "ScriptedScenario":
        data = json.loads(Path(path).read_text())
        return cls(entries=data.get("entries", []), judge=data.get("judge", []))

    def corpus(self) -> list[str]:
        texts = []
        for e in self.entries:
            texts.append(e["prompt_prefix"])
            texts.append(e["continuation"])
        return texts

    def build(self, vocab: Vocabulary, latency: LatencyModel | None = None) -> ScriptedLM:
        entries = [
            ScriptEntry(
                prompt=tuple(vocab.tokenize(e["prompt_prefix"])),
                continuation=tuple(vocab.tokenize(e["continuation"])) + (EOS_ID,),
                positional=e.get("match", "exact") == "positional",
            )
            for e in self.entries
        ]
        verdicts = {
            (j["prompt"], j["answer"]): j["verdict"] == "yes" for j in self.judge
        }
        return ScriptedLM(vocab, entries, judge_verdicts=verdicts, latency=latency)


def greedy_decode(
    lm: LanguageModel,
    prompt: list[int],
    max_new: int = DEFAULT_MAX_NEW_TOKENS,
    stop: "callable | None" = None,
) -> list[int]:
    """Reference greedy decoder: argmax continuation of ``prompt``.

    Appends the top-scoring next token one pass at a time until the end
    token, the optional ``stop(generated)`` rule, or ``max_new`` tokens.
    The end token, when reached, is included in the output. This is the
    oracle every speculative path is checked against, so it stays a plain
    prefill-plus-decode loop with no shortcuts.
    """
    if max_new < 0:
        raise ValueError("max_new must be nonnegative")
    seq = list(prompt)
    if max_new == 0 or not seq:
        return seq
    cache = None
    if len(seq) > 1:
        _, cache, _ = lm.forward(seq[:-1])  # prefill everything before the scored position
    generated: list[int] = []
    for _ in range(max_new):
        block, cache, _ = lm.forward(seq, cache)
        nxt = argmax_token(block.last_row)
        seq.append(nxt)
        generated.append(nxt)
        if nxt == lm.eos_id:
            break
        if stop is not None and stop(generated):
            break
    return seq
