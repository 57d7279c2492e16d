"""Turn orchestration: poll, verify, speculate, then yield audio.

A turn runs on one virtual clock. While the user is still "speaking",
each newly arrived prompt prefix is verified against the current candidate
response and the candidate is regenerated from the accepted prefix, with
the first sentence kept warm in the TTS buffer. When the final prefix
lands, one last verification decides whether the buffered audio plays
instantly or the response is regenerated first. Everything observable is
appended to an event log; metrics are computed from that log alone.

The comparison baseline waits for the complete prompt and decodes from
scratch with the identical context, cost model and streaming TTS.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .clock import PromptStream, SimClock, make_stream
from .generate import ar_generate, GenerationBudget, SentenceTracker, predictive_generate
from .lm import LanguageModel, LatencyModel
from .text import EOS_ID, first_sentence
from .tts import TtsLatencyModel, TtsSimulator
from .verify import make_verifier

EVENT_SCHEMA_VERSION = 1

# Instruction prepended during speculative rounds (and, for parity, in the
# baseline) so the model answers truncated inputs instead of questioning them.
TRUNCATED_INPUT_SYSTEM_PROMPT = (
    "The instruction provided by the user may be truncated. In such cases, "
    "respond based on your best guess of the incomplete instruction. "
    "Do not complain about incomplete prompts."
)


@dataclass(frozen=True)
class PipelineConfig:
    verifier: str = "greedy"  # greedy | topk | reflection
    topk_k: int = 3
    generator: str = "ar"  # ar | jacobi
    system_prompt: str = TRUNCATED_INPUT_SYSTEM_PROMPT
    max_response_tokens: int = 256
    lm_latency: LatencyModel = field(default_factory=LatencyModel)
    tts_latency: TtsLatencyModel = field(default_factory=TtsLatencyModel)
    rate_chars_per_min: float = 600.0
    chunk_words: int = 2
    seed: int = 0
    ngram_order: int = 3

    def __post_init__(self) -> None:
        if self.verifier == "topk" and self.topk_k < 1:
            raise ValueError("topk verifier requires topk_k >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        if "lm_latency" in data and isinstance(data["lm_latency"], dict):
            data["lm_latency"] = LatencyModel(**data["lm_latency"])
        if "tts_latency" in data and isinstance(data["tts_latency"], dict):
            data["tts_latency"] = TtsLatencyModel(**data["tts_latency"])
        return cls(**data)

    def override(self, **kwargs) -> "PipelineConfig":
        return replace(self, **{k: v for k, v in kwargs.items() if v is not None})


@dataclass
class PipelineEvent:
    t_ms: float
    kind: str
    turn_id: str
    round: int
    payload: dict

    def to_dict(self) -> dict:
        return {
            "v": EVENT_SCHEMA_VERSION,
            "t_ms": self.t_ms,
            "kind": self.kind,
            "turn_id": self.turn_id,
            "round": self.round,
            **self.payload,
        }


class EventLog:
    """Append-only record of one turn, sorted stably by timestamp at the end."""

    def __init__(self, turn_id: str, round_index: int) -> None:
        self.turn_id = turn_id
        self.round_index = round_index
        self.events: list[PipelineEvent] = []
        self._final = False

    def add(self, kind: str, t_ms: float, **payload) -> None:
        self.events.append(PipelineEvent(t_ms, kind, self.turn_id, self.round_index, payload))

    def finalize(self) -> list[PipelineEvent]:
        if not self._final:
            self.events.sort(key=lambda e: e.t_ms)  # stable: ties keep insertion order
            self._final = True
        return self.events


def write_events_jsonl(events: list[PipelineEvent], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for event in events:
            fh.write(json.dumps(event.to_dict(), sort_keys=True) + "\n")


def read_events_jsonl(path: str | Path) -> list[PipelineEvent]:
    events = []
    for line in Path(path).read_text().splitlines():
        data = json.loads(line)
        data.pop("v", None)
        events.append(
            PipelineEvent(
                t_ms=data.pop("t_ms"),
                kind=data.pop("kind"),
                turn_id=data.pop("turn_id"),
                round=data.pop("round"),
                payload=data,
            )
        )
    return events


@dataclass
class TurnState:
    """Mutable speculation state while one turn is in flight."""

    round_no: int = 1
    candidate: list[int] = field(default_factory=list)
    accepted: int = 0
    audio_job: object = None


@dataclass
class TurnResult:
    final_text: str
    events: list[PipelineEvent]
    audio_job_id: int | None
    nfe_total: int


class _TurnRunner:
    """Shared wiring (clock, TTS, logging) for one simulated turn."""

    def __init__(self, history, stream: PromptStream, cfg: PipelineConfig, lm: LanguageModel,
                 turn_id: str, round_index: int, clock=None) -> None:
        self.cfg = cfg
        self.lm = lm
        self.stream = stream
        self.clock = clock if clock is not None else SimClock()
        self.log = EventLog(turn_id, round_index)
        self.tts = TtsSimulator(
            self.clock,
            cfg.tts_latency,
            on_chunk=lambda job, idx, at: self.log.add("tts_chunk_ready", at, job_id=job.id, chunk=idx),
        )
        self._jobs_logged = 0
        vocab = lm.vocab
        self.system_tokens = vocab.tokenize(cfg.system_prompt) if cfg.system_prompt else []
        self.history_tokens: list[int] = []
        for user_text, reply_text in history:
            self.history_tokens += vocab.tokenize(user_text) + vocab.tokenize(reply_text)

    def context_for(self, prompt_text: str) -> list[int]:
        ctx = self.system_tokens + self.history_tokens + self.lm.vocab.tokenize(prompt_text)
        if not ctx:
            raise ValueError("turn has an empty context: no system prompt, history, or input")
        return ctx

    def log_chunk(self, chunk, round_no: int) -> None:
        self.log.add(
            "chunk_received",
            self.clock.now,
            chunk_round=round_no,
            arrival_ms=chunk.arrival_ms,
            chars=len(chunk.text),
            is_final=chunk.is_final,
        )

    def log_verify(self, outcome, round_no: int, candidate_len: int, context_len: int,
                   sentence_len: int) -> None:
        accepted_fraction = (
            min(outcome.accepted_count, sentence_len) / sentence_len if sentence_len else 0.0
        )
        self.log.add(
            "verify",
            self.clock.now,
            chunk_round=round_no,
            k=outcome.accepted_count,
            nfe=outcome.nfe,
            cost_ms=outcome.cost_ms,
            uncached=outcome.uncached_positions,
            candidate_len=candidate_len,
            context_len=context_len,
            first_sentence_accepted=outcome.first_sentence_accepted,
            accepted_fraction=accepted_fraction,
            judge_fallback=outcome.judge_fallback,
        )

    def log_passes(self, result, round_no: int) -> None:
        for p in result.passes:
            self.log.add(
                "generate_step",
                p.at_ms,
                chunk_round=round_no,
                pass_kind=p.kind,
                new_tokens=p.new_tokens,
                uncached=p.uncached,
                cost_ms=p.cost_ms,
            )

    def log_new_tts_jobs(self) -> None:
        for job in self.tts.jobs[self._jobs_logged:]:
            self.log.add(
                "tts_submit",
                job.submitted_at,
                job_id=job.id,
                text=job.text,
                mode="stream" if job.streaming else "buffer",
            )
        self._jobs_logged = len(self.tts.jobs)

    def on_sentence_logger(self):
        def hook(idx: int, text: str, at: float, tokens) -> None:
            self.log.add("sentence_emitted", at, index=idx, text=text)
        return hook

    def finish(self, response_tokens: list[int], job, rounds: int) -> TurnResult:
        done_at = self.clock.now
        self.clock.drain()
        self.log_new_tts_jobs()
        if job is not None:
            self.log.add(
                "audio_start",
                self.tts.playback_start(job),
                job_id=job.id,
                via="fresh" if job.streaming else "buffered_resume",
            )
        else:
            # The model answered with nothing. The turn still responds (with
            # silence) the moment the empty response is known, so metrics
            # stay well formed.
            self.log.add("sentence_emitted", done_at, index=0, text="")
            self.log.add("audio_start", done_at, job_id=None, via="silence")
        final_text = self.lm.vocab.detokenize([t for t in response_tokens if t != EOS_ID])
        nfe_total = sum(
            e.payload.get("nfe", 1 if e.kind == "generate_step" else 0)
            for e in self.log.events
            if e.kind in ("verify", "generate_step")
        )
        self.log.add(
            "turn_done",
            self.clock.now,
            final_text=final_text,
            rounds=rounds,
            wasted_tts_ms=self.tts.wasted_synthesis_ms(),
        )
        return TurnResult(final_text, self.log.finalize(), job.id if job is not None else None, nfe_total)


def run_turn(
    history: list[tuple[str, str]],
    stream: PromptStream,
    cfg: PipelineConfig,
    lm: LanguageModel,
    turn_id: str = "turn0",
    round_index: int = 1,
    clock=None,
) -> TurnResult:
    """Simulate one speculative turn end to end.

    Follows the loop: receive the first prefix, speculate until the next
    prefix arrives, verify the candidate against each newer prefix, and on
    the final prefix either resume the pre-buffered audio (first sentence
    fully accepted) or regenerate once more. The remainder of the response
    streams sentence by sentence afterwards.

    ``clock`` defaults to a fresh virtual clock; the live CLI mode passes a
    wall clock instead.
    """
    runner = _TurnRunner(history, stream, cfg, lm, turn_id, round_index, clock)
    clock, tts, log = runner.clock, runner.tts, runner.log
    verifier = make_verifier(cfg.verifier, cfg.topk_k)
    state = TurnState()

    clock.advance_to(stream.first_arrival())
    chunk, is_final = stream.poll(clock.now)
    runner.log_chunk(chunk, state.round_no)

    if not is_final:
        # Initialization round: speculate on the very first prefix.
        result, state.audio_job = predictive_generate(
            0, runner.context_for(chunk.text), [], lm, tts, clock,
            generator=cfg.generator,
            deadline=stream.next_arrival_after(clock.now),
            max_response_tokens=cfg.max_response_tokens,
        )
        runner.log_passes(result, state.round_no)
        runner.log_new_tts_jobs()
        state.candidate = result.response

        while True:
            next_arrival = stream.next_arrival_after(clock.now)
            if next_arrival is not None:
                clock.advance_to(next_arrival)
            chunk, is_final = stream.poll(clock.now)
            state.round_no += 1
            runner.log_chunk(chunk, state.round_no)

            context = runner.context_for(chunk.text)
            span = first_sentence(state.candidate, lm.vocab)
            sentence_len = span.end if span is not None else len(state.candidate)
            outcome = verifier(context, state.candidate, lm, clock, judge_prompt_text=chunk.text)
            runner.log_verify(outcome, state.round_no, len(state.candidate), len(context), sentence_len)
            state.accepted = outcome.accepted_count
            if is_final:
                break

            # If the next chunk (or even the final one) already arrived while
            # verifying, speculate for zero time and poll it right away.
            deadline = stream.next_arrival_after(clock.now)
            if deadline is None:
                deadline = clock.now
            result, state.audio_job = predictive_generate(
                outcome.accepted_count,
                context, state.candidate, lm, tts, clock,
                generator=cfg.generator,
                deadline=deadline,
                max_response_tokens=cfg.max_response_tokens,
                current_job=state.audio_job,
            )
            runner.log_passes(result, state.round_no)
            runner.log_new_tts_jobs()
            state.candidate = result.response
    else:
        # The whole prompt arrived in one chunk; verification degenerates to
        # a prefill-style pass over the bare context.
        context = runner.context_for(chunk.text)
        outcome = verifier(context, state.candidate, lm, clock, judge_prompt_text=chunk.text)
        runner.log_verify(outcome, state.round_no, 0, len(context), 0)
        state.accepted = outcome.accepted_count

    # Final round: either the buffered first sentence is yielded as is, or
    # the response is regenerated; later sentences stream as they complete.
    context = runner.context_for(chunk.text)
    result, state.audio_job = predictive_generate(
        state.accepted, context, state.candidate, lm, tts, clock,
        generator=cfg.generator,
        deadline=None,
        max_response_tokens=cfg.max_response_tokens,
        current_job=state.audio_job,
        final_round=True,
        on_sentence=runner.on_sentence_logger(),
    )
    runner.log_passes(result, state.round_no)
    runner.log_new_tts_jobs()

    return runner.finish(result.response, state.audio_job, state.round_no)


def run_baseline(
    history: list[tuple[str, str]],
    stream: PromptStream,
    cfg: PipelineConfig,
    lm: LanguageModel,
    turn_id: str = "turn0",
    round_index: int = 1,
) -> TurnResult:
    """Naive cascade reference: wait for the full prompt, then decode.

    Identical context, cost model and streaming TTS as the speculative
    pipeline, but nothing happens until the final chunk has arrived.
    """
    runner = _TurnRunner(history, stream, cfg, lm, turn_id, round_index)
    clock, tts = runner.clock, runner.tts

    chunk = None
    for i, chunk in enumerate(stream.chunks):
        clock.advance_to(chunk.arrival_ms)
        runner.log_chunk(chunk, i + 1)
    rounds = len(stream.chunks)

    context = runner.context_for(chunk.text)
    job_ref: list = [None]
    sentence_log = runner.on_sentence_logger()

    def on_sentence(idx: int, text: str, at: float, tokens) -> None:
        job = tts.synthesize_streaming(text, at)
        if job_ref[0] is None:
            job_ref[0] = job
        sentence_log(idx, text, at, tokens)

    tracker = SentenceTracker(lm.vocab, on_sentence)
    result = ar_generate(
        0, context, [], lm,
        budget=GenerationBudget(max_new_tokens=cfg.max_response_tokens),
        clock=clock,
        on_tokens=tracker.feed,
    )
    tracker.flush_fragment(clock.now)
    runner.log_passes(result, rounds)
    runner.log_new_tts_jobs()

    return runner.finish(result.response, job_ref[0], rounds)


def run_conversation(
    turns: list[str],
    cfg: PipelineConfig,
    lm: LanguageModel,
    conversation_id: str = "conv0",
    baseline: bool = False,
) -> list[TurnResult]:
    """Run each user turn in sequence, feeding replies back into history."""
    if not turns:
        raise ValueError("a conversation needs at least one turn")
    history: list[tuple[str, str]] = []
    results = []
    run = run_baseline if baseline else run_turn
    for i, user_text in enumerate(turns):
        stream = make_stream(user_text, cfg.rate_chars_per_min, cfg.chunk_words)
        result = run(history, stream, cfg, lm, turn_id=f"{conversation_id}:{i + 1}", round_index=i + 1)
        results.append(result)
        history.append((user_text, result.final_text))
    return results
