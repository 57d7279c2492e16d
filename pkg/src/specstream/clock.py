"""Virtual clock and the character-timed partial-prompt stream.

Every millisecond of the simulation flows through one clock: model passes
charge their cost, TTS chunks fire as scheduled events, and prompt chunks
become visible once their arrival time has passed. Replaying the same
inputs therefore reproduces the same timeline bit for bit.
"""

from __future__ import annotations

import heapq
import time
from dataclasses import dataclass, field
from typing import Callable


class SchedulingError(ValueError):
    """An event was scheduled before the current virtual time."""


class SimClock:
    """Discrete-event clock in virtual milliseconds.

    Time moves only through :meth:`charge`, :meth:`advance_to` and
    :meth:`advance_until`. Scheduled callbacks fire in timestamp order,
    ties resolved by insertion order, with ``now`` set to their timestamp.
    """

    def __init__(self, start_ms: float = 0.0) -> None:
        self.now = start_ms
        self._heap: list[tuple[float, int, Callable[[], None]]] = []
        self._seq = 0

    def schedule(self, at: float, fn: Callable[[], None]) -> None:
        if at < self.now:
            raise SchedulingError(f"cannot schedule at {at} before now={self.now}")
        heapq.heappush(self._heap, (at, self._seq, fn))
        self._seq += 1

    def _fire_due(self, limit: float) -> None:
        while self._heap and self._heap[0][0] <= limit:
            at, _, fn = heapq.heappop(self._heap)
            self.now = at
            fn()

    def charge(self, cost_ms: float) -> None:
        """Advance by a work duration, firing events that complete inside it."""
        if cost_ms < 0:
            raise ValueError("cost must be nonnegative")
        target = self.now + cost_ms
        self._fire_due(target)
        self.now = target

    def advance_to(self, at: float) -> None:
        """Idle forward to an absolute time (no-op if already past it)."""
        if at <= self.now:
            return
        self._fire_due(at)
        self.now = at

    def advance_until(self, predicate: Callable[[], bool]) -> None:
        """Fire pending events until the predicate holds.

        Raises if the event queue drains first: the condition could then
        never become true and the simulation would hang.
        """
        while not predicate():
            if not self._heap:
                raise RuntimeError("advance_until exhausted all pending events")
            at, _, fn = heapq.heappop(self._heap)
            self.now = at
            fn()

    def drain(self) -> None:
        """Fire everything still pending (end-of-turn cleanup)."""
        while self._heap:
            at, _, fn = heapq.heappop(self._heap)
            self.now = at
            fn()

    @property
    def pending(self) -> int:
        return len(self._heap)


class WallClock:
    """Real-time stand-in for :class:`SimClock` used by the live CLI mode.

    Charges sleep for their duration; ``now`` is elapsed wall time. No
    acceptance behavior depends on it.
    """

    def __init__(self) -> None:
        self._t0 = time.monotonic()
        self._heap: list[tuple[float, int, Callable[[], None]]] = []
        self._seq = 0

    @property
    def now(self) -> float:
        return (time.monotonic() - self._t0) * 1000.0

    def schedule(self, at: float, fn: Callable[[], None]) -> None:
        heapq.heappush(self._heap, (at, self._seq, fn))
        self._seq += 1

    def _fire_due(self) -> None:
        while self._heap and self._heap[0][0] <= self.now:
            _, _, fn = heapq.heappop(self._heap)
            fn()

    def charge(self, cost_ms: float) -> None:
        time.sleep(cost_ms / 1000.0)
        self._fire_due()

    def advance_to(self, at: float) -> None:
        delta = at - self.now
        if delta > 0:
            time.sleep(delta / 1000.0)
        self._fire_due()

    def advance_until(self, predicate: Callable[[], bool]) -> None:
        while not predicate():
            time.sleep(0.001)
            self._fire_due()

    def drain(self) -> None:
        while self._heap:
            at, _, fn = heapq.heappop(self._heap)
            self.advance_to(at)
            fn()


@dataclass(frozen=True)
class StreamChunk:
    """A word-aligned prefix of the user's utterance with its arrival time."""

    text: str
    arrival_ms: float
    index: int
    is_final: bool


@dataclass
class PromptStream:
    """Growing prefixes of one user turn, timed at a fixed character rate."""

    full_text: str
    rate_chars_per_min: float
    chunks: list[StreamChunk] = field(default_factory=list)

    def first_arrival(self) -> float:
        return self.chunks[0].arrival_ms

    def final_arrival(self) -> float:
        return self.chunks[-1].arrival_ms

    def poll(self, now: float) -> tuple[StreamChunk, bool]:
        """Latest chunk whose arrival time is at or before ``now``.

        Before anything has arrived, the result is an empty non-final
        prefix.
        """
        latest = StreamChunk("", self.chunks[0].arrival_ms, -1, False)
        for chunk in self.chunks:
            if chunk.arrival_ms <= now:
                latest = chunk
            else:
                break
        return latest, latest.is_final

    def next_arrival_after(self, now: float) -> float | None:
        for chunk in self.chunks:
            if chunk.arrival_ms > now:
                return chunk.arrival_ms
        return None


def make_stream(
    text: str,
    rate_chars_per_min: float = 600.0,
    chunk_words: int = 2,
    start_at: float = 0.0,
) -> PromptStream:
    """Split text into cumulative word-aligned prefixes with arrival times.

    Each prefix ends after ``chunk_words`` more words (the last may be
    shorter) and arrives when its final character does: a prefix of ``c``
    characters lands at ``start_at + c / rate * 60000``. An empty text
    yields a single empty terminal chunk at ``start_at``.
    """
    if rate_chars_per_min <= 0:
        raise ValueError("rate must be positive")
    if chunk_words < 1:
        raise ValueError("chunk_words must be at least 1")
    text = text.rstrip()
    ms_per_char = 60000.0 / rate_chars_per_min

    if not text:
        chunk = StreamChunk("", start_at, 0, True)
        return PromptStream(text, rate_chars_per_min, [chunk])

    word_ends = [
        i + 1
        for i, ch in enumerate(text)
        if not ch.isspace() and (i + 1 == len(text) or text[i + 1].isspace())
    ]

    boundaries = word_ends[chunk_words - 1::chunk_words]
    if not boundaries or boundaries[-1] != word_ends[-1]:
        boundaries.append(word_ends[-1])

    chunks = [
        StreamChunk(
            text=text[:end],
            arrival_ms=start_at + end * ms_per_char,
            index=i,
            is_final=end == len(text),
        )
        for i, end in enumerate(boundaries)
    ]
    return PromptStream(text, rate_chars_per_min, chunks)
