"""Produce an updated candidate response from an accepted prefix.

Two interchangeable strategies complete a response from ``(k, P, R)``:

* :func:`ar_generate` resumes plain greedy decoding from the accepted
  tokens, one forward pass per new token.
* :func:`jacobi_generate` treats the rejected suffix as a draft window and
  rewrites it in parallel until it equals its own greedy continuation,
  then decodes the rest autoregressively. Tokens become *confirmed* as the
  window's verified prefix grows, which is what lets audio work start
  before the whole window settles.

:func:`predictive_generate` wraps either strategy with the speech side:
it keeps exactly one pre-synthesis job alive for the first sentence of the
current response, replacing it only when the sentence text changes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from .lm import CacheHandle, LanguageModel, argmax_token
from .text import EOS_ID
from .tts import BUFFERED, CANCELED, SYNTHESIZING, TtsJob, TtsSimulator

TokenSink = Callable[[list[int], float], None]


@dataclass(frozen=True)
class GenerationBudget:
    """Stop conditions for one generation call.

    ``deadline`` is a virtual timestamp (normally the next expected input
    chunk): no new pass starts at or after it, though an in-flight pass
    always completes. ``max_new_tokens`` caps freshly decoded tokens.
    """

    deadline: float | None = None
    max_new_tokens: int = 256

    def __post_init__(self) -> None:
        if self.max_new_tokens < 0:
            raise ValueError("max_new_tokens must be nonnegative")


@dataclass(frozen=True)
class PassRecord:
    """One forward pass: when it finished, what it did, what it cost."""

    at_ms: float
    kind: str  # prefill | decode | jacobi
    new_tokens: int
    uncached: int
    cost_ms: float


@dataclass
class GenerationResult:
    response: list[int]
    complete: bool
    nfe: int
    cost_ms: float
    passes: list[PassRecord] = field(default_factory=list)


class _Meter:
    """Charges the clock (when present) and records per-pass timing."""

    def __init__(self, clock) -> None:
        self.clock = clock
        self.offset = 0.0
        self.passes: list[PassRecord] = []

    @property
    def now(self) -> float:
        return self.clock.now if self.clock is not None else self.offset

    def record(self, kind: str, cost: float, uncached: int, new_tokens: int) -> float:
        if self.clock is not None:
            self.clock.charge(cost)
        else:
            self.offset += cost
        self.passes.append(PassRecord(self.now, kind, new_tokens, uncached, cost))
        return self.now

    def expired(self, budget: GenerationBudget | None) -> bool:
        return (
            budget is not None
            and budget.deadline is not None
            and self.now >= budget.deadline
        )

    def total_cost(self) -> float:
        return sum(p.cost_ms for p in self.passes)


def _truncate_at_eos(tokens: list[int], eos: int) -> tuple[list[int], bool]:
    if eos in tokens:
        return tokens[: tokens.index(eos) + 1], True
    return tokens, False


def _usable_cache(cache: CacheHandle | None, seq: list[int], limit: int) -> CacheHandle | None:
    """The provided cache truncated to at most ``limit`` matching tokens."""
    if cache is None:
        return None
    n = 0
    for a, b in zip(cache.prefix, seq[:limit]):
        if a != b:
            break
        n += 1
    if n == 0:
        return None
    return cache.truncated(n)


def _prefill(lm, seq, cache, meter) -> CacheHandle | None:
    """Ensure a cache over ``seq[:-1]`` so each decode pass scores one token."""
    target = len(seq) - 1
    cache = _usable_cache(cache, seq, target)
    covered = cache.cached_prefix_length if cache is not None else 0
    if covered < target:
        _, cache, cost = lm.forward(seq[:target], cache)
        meter.record("prefill", cost, target - covered, 0)
    return cache


def ar_generate(
    k: int,
    context: list[int],
    candidate: list[int],
    lm: LanguageModel,
    cache: CacheHandle | None = None,
    budget: GenerationBudget | None = None,
    clock=None,
    on_tokens: TokenSink | None = None,
) -> GenerationResult:
    """Greedy continuation of ``context ++ candidate[:k]``.

    The response always starts with the accepted prefix ``candidate[:k]``;
    everything after it is decoded token by token, one forward pass each,
    until the end token, the token cap, or the budget deadline. When no
    usable cache arrives, one prefill pass (charged) rebuilds it first.
    """
    if not 0 <= k <= len(candidate):
        raise ValueError("accepted count k out of range")
    if budget is not None and budget.deadline is not None and clock is None:
        raise ValueError("a deadline budget requires a clock")
    meter = _Meter(clock)
    base, done = _truncate_at_eos(list(candidate[:k]), lm.eos_id)
    max_new = budget.max_new_tokens if budget is not None else 256
    if done or max_new == 0 or meter.expired(budget):
        return GenerationResult(base, done, 0, 0.0, meter.passes)

    seq = list(context) + base
    if not seq:
        raise ValueError("generation requires a nonempty context")
    response = list(base)
    complete = False
    cache = _prefill(lm, seq, cache, meter)

    for _ in range(max_new):
        if meter.expired(budget):
            break
        covered = cache.cached_prefix_length if cache is not None else 0
        block, cache, cost = lm.forward(seq, cache)
        at = meter.record("decode", cost, len(seq) - covered, 1)
        nxt = argmax_token(block.last_row)
        seq.append(nxt)
        response.append(nxt)
        if on_tokens is not None:
            on_tokens([nxt], at)
        if nxt == lm.eos_id:
            complete = True
            break

    return GenerationResult(response, complete, len(meter.passes), meter.total_cost(), meter.passes)


def jacobi_generate(
    k: int,
    context: list[int],
    candidate: list[int],
    lm: LanguageModel,
    cache: CacheHandle | None = None,
    budget: GenerationBudget | None = None,
    clock=None,
    on_tokens: TokenSink | None = None,
) -> GenerationResult:
    """Fixed-point refinement of the rejected suffix, then greedy tail.

    The window starts as ``candidate[k:]``. Each iteration runs one pass
    over the whole sequence and replaces the window with the argmax
    prediction at every slot. A slot is confirmed once every slot before it
    reproduced itself; confirmed growth is at least one slot per iteration,
    so convergence takes at most window-length passes, after which the
    window equals the greedy continuation exactly. ``on_tokens`` receives
    confirmed tokens only, never unsettled draft.

    ``budget.max_new_tokens`` caps the autoregressive tail beyond the
    window. If the deadline interrupts iteration, the response carries the
    current window as an unverified draft for the next round to check.
    """
    if not 0 <= k <= len(candidate):
        raise ValueError("accepted count k out of range")
    if budget is not None and budget.deadline is not None and clock is None:
        raise ValueError("a deadline budget requires a clock")
    meter = _Meter(clock)
    base_resp, done = _truncate_at_eos(list(candidate[:k]), lm.eos_id)
    if done:
        return GenerationResult(base_resp, True, 0, 0.0, meter.passes)

    seq_base = list(context) + base_resp
    if not seq_base:
        raise ValueError("generation requires a nonempty context")
    window = list(candidate[k:])
    b = len(seq_base)

    if not window:
        return ar_generate(k, context, candidate, lm, cache, budget, clock, on_tokens)
    if meter.expired(budget):
        return GenerationResult(base_resp + window, False, 0, 0.0, meter.passes)

    # Iterations need the row just before the window, so the cache stays one
    # position short of the base.
    iteration_cache = _prefill(lm, seq_base, cache, meter)

    confirmed = 0
    converged = False
    complete = False
    iterations = 0
    last_handle: CacheHandle | None = None
    while not converged:
        if meter.expired(budget):
            break
        if iterations > len(window):
            raise RuntimeError("window failed to converge; backend is not deterministic")
        covered = iteration_cache.cached_prefix_length if iteration_cache is not None else 0
        block, last_handle, cost = lm.forward(seq_base + window, iteration_cache)
        iterations += 1
        at = meter.record("jacobi", cost, len(seq_base) + len(window) - covered, 0)
        preds = [argmax_token(block.row_for(b - 1 + i)) for i in range(len(window))]
        match = 0
        for a_tok, p_tok in zip(window, preds):
            if a_tok != p_tok:
                break
            match += 1
        if match == len(window):
            newly = window[confirmed:]
            confirmed = len(window)
            converged = True
        else:
            new_confirmed = min(len(window), match + 1)
            window = preds
            newly = window[confirmed:new_confirmed]
            confirmed = new_confirmed
            converged = confirmed == len(window)
        if newly and on_tokens is not None:
            on_tokens(newly, at)
        if lm.eos_id in newly:
            complete = True
            break
        iteration_cache = last_handle.truncated(b - 1) if b >= 1 else None

    response = base_resp + window
    if complete:
        response, complete = _truncate_at_eos(response, lm.eos_id)
        return GenerationResult(response, complete, len(meter.passes), meter.total_cost(), meter.passes)

    if not converged:
        # Deadline interrupt: hand the draft window to the next round.
        return GenerationResult(response, False, len(meter.passes), meter.total_cost(), meter.passes)

    tail = ar_generate(
        len(response),
        context,
        response,
        lm,
        cache=last_handle,
        budget=budget,
        clock=clock,
        on_tokens=on_tokens,
    )
    return GenerationResult(
        response=tail.response,
        complete=tail.complete,
        nfe=len(meter.passes) + tail.nfe,
        cost_ms=meter.total_cost() + tail.cost_ms,
        passes=meter.passes + tail.passes,
    )


class SentenceTracker:
    """Watches a confirmed token stream and fires once per completed sentence.

    ``on_sentence(index, text, at_ms, tokens)`` fires the moment a
    terminator lands; :meth:`flush_fragment` reports any trailing text that
    never got one.
    """

    def __init__(self, vocab, on_sentence) -> None:
        self.vocab = vocab
        self.on_sentence = on_sentence
        self.tokens: list[int] = []
        self._scanned = 0
        self._sentence_start = 0
        self.count = 0

    def feed(self, tokens: list[int], at: float) -> None:
        self.tokens.extend(t for t in tokens if t != EOS_ID)
        while self._scanned < len(self.tokens):
            tok = self.tokens[self._scanned]
            self._scanned += 1
            if self.vocab.surface(tok) in {".", "?", "!"}:
                seg = self.tokens[self._sentence_start:self._scanned]
                self.on_sentence(self.count, self.vocab.detokenize(seg), at, seg)
                self.count += 1
                self._sentence_start = self._scanned

    def flush_fragment(self, at: float) -> None:
        if self._sentence_start < len(self.tokens):
            seg = self.tokens[self._sentence_start:]
            self.on_sentence(self.count, self.vocab.detokenize(seg), at, seg)
            self.count += 1
            self._sentence_start = len(self.tokens)


GENERATORS = {"ar": ar_generate, "jacobi": jacobi_generate}


def predictive_generate(
    k: int,
    context: list[int],
    candidate: list[int],
    lm: LanguageModel,
    tts: TtsSimulator | None,
    clock,
    generator: str = "ar",
    deadline: float | None = None,
    max_response_tokens: int = 256,
    current_job: TtsJob | None = None,
    final_round: bool = False,
    on_sentence=None,
) -> tuple[GenerationResult, TtsJob | None]:
    """Update the candidate response and keep its first-sentence audio warm.

    Runs the configured generator over ``(k, context, candidate)``. The
    moment the response's first sentence is complete (it may already sit
    inside the accepted prefix), the speech side is reconciled: a live job
    backing the same sentence text is kept, anything else is canceled and
    replaced. Speculative rounds pre-buffer the replacement; the final
    round streams it, resumes a matching buffered job on the spot, and
    additionally synthesizes every later sentence as it completes.

    ``on_sentence(index, text, at_ms, tokens)`` observes completed
    sentences of the confirmed stream plus, on a complete final response,
    the trailing fragment.
    """
    if generator not in GENERATORS:
        raise ValueError(f"unknown generator {generator!r}")
    job = current_job
    vocab = lm.vocab

    def reconcile_first_sentence(text: str, at: float) -> None:
        nonlocal job
        if tts is None:
            return
        if job is not None and job.state != CANCELED and job.text == text:
            if final_round and job.state == BUFFERED:
                tts.resume(job, at)
            elif final_round and job.state == SYNTHESIZING:
                tts.resume_when_buffered(job)
            return
        if job is not None and job.live:
            tts.cancel(job)
        if final_round:
            job = tts.synthesize_streaming(text, at)
        else:
            job = tts.synthesize_buffer(text, at)

    def handle_sentence(idx: int, text: str, at: float, tokens: list[int]) -> None:
        if idx == 0:
            reconcile_first_sentence(text, at)
        elif final_round and tts is not None:
            tts.synthesize_streaming(text, at)
        if on_sentence is not None:
            on_sentence(idx, text, at, tokens)

    tracker = SentenceTracker(vocab, handle_sentence)
    base, base_done = _truncate_at_eos(list(candidate[:k]), lm.eos_id)
    tracker.feed(base, clock.now)

    if base_done:
        result = GenerationResult(base, True, 0, 0.0, [])
    else:
        # Jacobi carries the whole draft forward, so its cap governs only
        # the tail beyond the window.
        spent = len(candidate) if generator == "jacobi" else len(base)
        budget = GenerationBudget(deadline, max(0, max_response_tokens - spent))
        result = GENERATORS[generator](
            k, context, candidate, lm,
            budget=budget, clock=clock, on_tokens=tracker.feed,
        )

    if result.complete or final_round:
        # Nothing more will be generated for this response, so any trailing
        # text without a terminator is voiced as a final fragment; with no
        # terminator anywhere it lands at index 0 and reconciles the job.
        tracker.flush_fragment(clock.now)
    if final_round and tracker.count == 0:
        # Empty final response: any leftover speculative audio is stale.
        if job is not None and job.live:
            tts.cancel(job)
        job = None
    return result, job
