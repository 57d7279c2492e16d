"""Decide how many leading candidate tokens survive a newer prompt.

All three strategies answer the same question: given the prompt as it
stands now and a response drafted against an older, shorter prompt, how
long is the usable prefix? Greedy demands an exact argmax match per token,
top-k relaxes that to membership in the k best next tokens, and reflection
asks the model itself whether the whole first sentence still fits,
falling back to greedy when it says no.
"""

from __future__ import annotations

from dataclasses import dataclass

from .lm import CacheHandle, JudgeUnsupportedError, LanguageModel, argmax_token, topk_tokens
from .text import first_sentence


@dataclass
class VerifierOutcome:
    """Result of one verification: accepted prefix length plus bookkeeping.

    ``cache`` covers the prompt and the accepted tokens, ready for the
    generator to resume from the first rejected position. The judge path
    of reflection cannot produce one, since its forward pass runs over a
    reformatted prompt rather than the plain concatenation.
    """

    accepted_count: int
    first_sentence_accepted: bool
    cache: CacheHandle | None
    cost_ms: float
    nfe: int
    uncached_positions: int
    judge_fallback: str | None = None


def _charge(clock, cost: float) -> None:
    if clock is not None:
        clock.charge(cost)


def _accepted_prefix(prompt, candidate, block, accept_row) -> int:
    """Longest prefix of ``candidate`` where each token passes ``accept_row``.

    The row scoring candidate token ``i`` sits at the position just before
    it in the concatenated pass, i.e. ``len(prompt) + i - 1``.
    """
    k = 0
    for i, token in enumerate(candidate):
        row = block.row_for(len(prompt) + i - 1)
        if not accept_row(row, token):
            break
        k += 1
    return k


def _sentence_covered(candidate, k, vocab) -> bool:
    span = first_sentence(candidate, vocab)
    return span is not None and k >= span.end


def _verify_by_rule(
    prompt: list[int],
    candidate: list[int],
    lm: LanguageModel,
    accept_row,
    clock=None,
) -> VerifierOutcome:
    if not prompt:
        raise ValueError("verification requires a nonempty prompt context")
    sequence = list(prompt) + list(candidate)
    block, handle, cost = lm.forward(sequence)
    _charge(clock, cost)
    k = _accepted_prefix(prompt, candidate, block, accept_row) if candidate else 0
    return VerifierOutcome(
        accepted_count=k,
        first_sentence_accepted=_sentence_covered(candidate, k, lm.vocab),
        cache=handle.truncated(len(prompt) + k),
        cost_ms=cost,
        nfe=1,
        uncached_positions=len(sequence),
    )


def verify_greedy(
    prompt: list[int], candidate: list[int], lm: LanguageModel, clock=None
) -> VerifierOutcome:
    """Accept the maximal prefix whose tokens match argmax next-token picks.

    One forward pass over prompt ++ candidate. An empty candidate still
    runs the pass: it prefills the prompt, which the caller would need
    anyway, and keeps pass accounting uniform.
    """
    return _verify_by_rule(
        prompt, candidate, lm, lambda row, tok: tok == argmax_token(row), clock
    )


def verify_topk(
    prompt: list[int], candidate: list[int], lm: LanguageModel, k: int, clock=None
) -> VerifierOutcome:
    """Accept the maximal prefix whose tokens rank in the top ``k`` per row.

    Conditioning always uses the candidate tokens actually present in the
    pass, so a token admitted loosely still conditions its successors.
    ``k == 1`` coincides with greedy verification on every input.
    """
    if k < 1:
        raise ValueError("top-k verification requires k >= 1")
    return _verify_by_rule(
        prompt, candidate, lm, lambda row, tok: tok in topk_tokens(row, k), clock
    )


def verify_reflection(
    prompt: list[int],
    candidate: list[int],
    lm: LanguageModel,
    clock=None,
    judge_prompt_text: str | None = None,
) -> VerifierOutcome:
    """Whole-sentence accept via a yes/no self-judgment, else greedy.

    The judge sees the detokenized prompt (or ``judge_prompt_text``, which
    the pipeline sets to the raw user text) and the first sentence of the
    candidate. A yes verdict accepts exactly through the sentence end; the
    tokens beyond it remain an unverified draft for the generator. A no
    verdict falls back to greedy verification, paying for both passes.
    Backends without a judge fall back to greedy as well, with the reason
    recorded for the event log.
    """
    span = first_sentence(candidate, lm.vocab)
    if span is None:
        return verify_greedy(prompt, candidate, lm, clock)
    prompt_text = judge_prompt_text if judge_prompt_text is not None else lm.vocab.detokenize(prompt)
    sentence_text = lm.vocab.detokenize(candidate[: span.end])
    try:
        result, judge_cost = lm.judge_consistency(prompt_text, sentence_text)
    except JudgeUnsupportedError:
        outcome = verify_greedy(prompt, candidate, lm, clock)
        outcome.judge_fallback = "judge_unsupported"
        return outcome
    _charge(clock, judge_cost)
    if result.consistent:
        return VerifierOutcome(
            accepted_count=span.end,
            first_sentence_accepted=True,
            cache=None,
            cost_ms=judge_cost,
            nfe=1,
            uncached_positions=0,
        )
    greedy = verify_greedy(prompt, candidate, lm, clock)
    greedy.cost_ms += judge_cost
    greedy.nfe += 1
    greedy.judge_fallback = "judge_rejected"
    return greedy


def make_verifier(name: str, topk_k: int = 3):
    """Bind a verifier by config name to a uniform call signature."""
    if name == "greedy":
        return lambda prompt, candidate, lm, clock=None, judge_prompt_text=None: verify_greedy(
            prompt, candidate, lm, clock
        )
    if name == "topk":
        return lambda prompt, candidate, lm, clock=None, judge_prompt_text=None: verify_topk(
            prompt, candidate, lm, topk_k, clock
        )
    if name == "reflection":
        return lambda prompt, candidate, lm, clock=None, judge_prompt_text=None: verify_reflection(
            prompt, candidate, lm, clock, judge_prompt_text
        )
    raise ValueError(f"unknown verifier {name!r}")
