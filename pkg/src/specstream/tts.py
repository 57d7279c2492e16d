"""Simulated chunked text-to-speech with pre-buffering and resume.

The simulator stands in for a streaming neural TTS engine. A buffered job
synthesizes only the fixed number of chunks needed to restart playback
smoothly, then parks with a saved-state token; resuming it later plays the
buffered chunks with zero additional synthesis latency while the rest of
the utterance is generated on schedule. That zero-cost resume is what
turns a fully accepted speculation into near-instant audio.

All progress rides on the shared virtual clock: chunk completions are
scheduled events, so observers only ever see state transitions at event
boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

SYNTHESIZING = "synthesizing"
BUFFERED = "buffered"
RESUMED = "resumed"
CANCELED = "canceled"


class TtsError(RuntimeError):
    pass


@dataclass(frozen=True)
class TtsLatencyModel:
    """Chunk timing of the simulated engine.

    ``first_chunk_ms`` is the latency to the first audio chunk of a fresh
    request, ``per_chunk_ms`` the spacing of later chunks, and
    ``chunk_audio_ms`` the playback duration one chunk holds.
    ``chars_per_chunk`` converts text length into total chunk count.
    """

    first_chunk_ms: float = 200.0
    per_chunk_ms: float = 80.0
    chunk_audio_ms: float = 80.0
    chars_per_chunk: int = 4
    buffer_target: int = 17

    def __post_init__(self) -> None:
        if min(self.first_chunk_ms, self.per_chunk_ms, self.chunk_audio_ms) < 0:
            raise ValueError("latency parameters must be nonnegative")
        if self.chars_per_chunk < 1 or self.buffer_target < 1:
            raise ValueError("chars_per_chunk and buffer_target must be positive")

    def total_chunks(self, text: str) -> int:
        return max(1, math.ceil(len(text) / self.chars_per_chunk))


@dataclass
class TtsJob:
    """One synthesis request: either a paused pre-buffer or a live stream."""

    id: int
    text: str
    buffer_target: int
    submitted_at: float
    first_chunk_ready_at: float
    total_chunks: int
    streaming: bool = False
    state: str = SYNTHESIZING
    chunks_ready: int = 0
    chunk_times: list[float] = field(default_factory=list)
    synthesis_cost_ms: float = 0.0
    saved_state: str | None = None
    resumed_at: float | None = None

    @property
    def live(self) -> bool:
        return self.state in (SYNTHESIZING, BUFFERED)


class TtsSimulator:
    """Schedules chunk completions on the clock and tracks job state."""

    def __init__(
        self,
        clock,
        model: TtsLatencyModel | None = None,
        on_chunk: Callable[[TtsJob, int, float], None] | None = None,
    ) -> None:
        self.clock = clock
        self.model = model or TtsLatencyModel()
        self.on_chunk = on_chunk
        self._next_id = 0
        self._auto_resume: set[int] = set()
        self.jobs: list[TtsJob] = []

    def _new_job(self, text: str, at: float, buffer_target: int, streaming: bool) -> TtsJob:
        if not text:
            raise TtsError("cannot synthesize empty text")
        job = TtsJob(
            id=self._next_id,
            text=text,
            buffer_target=buffer_target,
            submitted_at=at,
            first_chunk_ready_at=at + self.model.first_chunk_ms,
            total_chunks=self.model.total_chunks(text),
            streaming=streaming,
        )
        self._next_id += 1
        self.jobs.append(job)
        n = min(buffer_target, job.total_chunks) if not streaming else job.total_chunks
        for j in range(1, n + 1):
            ready = job.first_chunk_ready_at + (j - 1) * self.model.per_chunk_ms
            self.clock.schedule(ready, lambda job=job, j=j, ready=ready: self._chunk_done(job, j, ready))
        return job

    def _chunk_done(self, job: TtsJob, index: int, at: float) -> None:
        if job.state == CANCELED:
            return
        job.chunks_ready = index
        job.chunk_times.append(at)
        job.synthesis_cost_ms += self.model.first_chunk_ms if index == 1 else self.model.per_chunk_ms
        if self.on_chunk is not None:
            self.on_chunk(job, index, at)
        buffered_goal = min(job.buffer_target, job.total_chunks)
        if not job.streaming and job.state == SYNTHESIZING and index == buffered_goal:
            job.state = BUFFERED
            job.saved_state = f"job{job.id}@chunk{index}"
            if job.id in self._auto_resume:
                self._auto_resume.discard(job.id)
                self.resume(job, at)

    def synthesize_buffer(self, text: str, at: float) -> TtsJob:
        """Start a pre-buffer job: synthesize up to ``buffer_target`` chunks,
        then pause holding a resume token.

        Chunk 1 completes ``first_chunk_ms`` after ``at`` and each later
        chunk ``per_chunk_ms`` apart.
        """
        return self._new_job(text, at, self.model.buffer_target, streaming=False)

    def synthesize_streaming(self, text: str, at: float) -> TtsJob:
        """Start a straight-through job that synthesizes every chunk."""
        job = self._new_job(text, at, self.model.buffer_target, streaming=True)
        job.state = RESUMED
        job.resumed_at = job.first_chunk_ready_at
        return job

    def resume(self, job: TtsJob, at: float) -> TtsJob:
        """Make a buffered job playable immediately at ``at``.

        Buffered chunks cost nothing further; remaining chunks arrive every
        ``per_chunk_ms`` from ``at`` until the text is exhausted.
        """
        if job.state == CANCELED:
            raise TtsError(f"cannot resume canceled job {job.id}")
        if job.state != BUFFERED:
            raise TtsError(f"can only resume a buffered job, not {job.state}")
        job.state = RESUMED
        job.resumed_at = at
        for j in range(job.chunks_ready + 1, job.total_chunks + 1):
            ready = at + (j - job.chunks_ready) * self.model.per_chunk_ms
            self.clock.schedule(ready, lambda job=job, j=j, ready=ready: self._chunk_done(job, j, ready))
        return job

    def resume_when_buffered(self, job: TtsJob) -> None:
        """Arrange for a still-synthesizing job to resume the moment its
        buffer completes (audio then starts at that instant)."""
        if job.state == BUFFERED:
            self.resume(job, self.clock.now)
        elif job.state == SYNTHESIZING:
            self._auto_resume.add(job.id)

    def cancel(self, job: TtsJob) -> None:
        """Release a job; pending chunks are discarded. Idempotent."""
        job.state = CANCELED
        self._auto_resume.discard(job.id)

    def playback_start(self, job: TtsJob) -> float:
        """Virtual time at which the first audio of this job is playable."""
        if job.state == RESUMED and not job.streaming:
            # Buffered replay: audio available the instant it was resumed.
            return job.resumed_at if job.chunks_ready else job.first_chunk_ready_at
        return job.first_chunk_ready_at

    def wasted_synthesis_ms(self) -> float:
        return sum(j.synthesis_cost_ms for j in self.jobs if j.state == CANCELED)
