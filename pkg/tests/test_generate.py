import numpy as np
import pytest

from specstream.clock import SimClock
from specstream.generate import (
    GenerationBudget,
    SentenceTracker,
    ar_generate,
    jacobi_generate,
    predictive_generate,
)
from specstream.lm import LatencyModel, NGramLM, ScriptEntry, ScriptedLM, greedy_decode
from specstream.text import EOS_ID, build_vocabulary
from specstream.tts import BUFFERED, CANCELED, TtsSimulator

CORPUS = (
    "How many apples will Alice and Bob have ? "
    "Alice will have 2 apples, while Bob will have 1. "
    "Alice will have 3 apples, while Bob will have 1. "
    "some junk filler words go here now . ! done"
)


@pytest.fixture
def vocab():
    return build_vocabulary([CORPUS])


@pytest.fixture
def ngram(vocab):
    return NGramLM(vocab, seed=9)


def jacobi_iterations(result):
    return sum(1 for p in result.passes if p.kind == "jacobi")


class TestArGenerate:
    def test_accepted_complete_candidate_is_a_no_op(self, vocab, ngram):
        r = vocab.tokenize("done .") + [EOS_ID]
        out = ar_generate(len(r), vocab.tokenize("How many"), r, ngram)
        assert out.response == r
        assert out.complete
        assert out.nfe == 0

    def test_from_scratch_matches_greedy_decode_oracle(self, vocab, ngram):
        p = vocab.tokenize("How many apples")
        out = ar_generate(0, p, [], ngram, budget=GenerationBudget(max_new_tokens=12))
        oracle = greedy_decode(ngram, p, max_new=12)
        assert p + out.response == oracle

    def test_splice_keeps_accepted_prefix_then_follows_greedy(self, vocab):
        target = "Alice will have 2 apples, while Bob will have 1."
        wrong = "Alice will have 3 apples, while Bob will have 1."
        prompt = vocab.tokenize("How many apples ?")
        lm = ScriptedLM(
            vocab,
            [ScriptEntry(tuple(prompt), tuple(vocab.tokenize(target)) + (EOS_ID,))],
        )
        r = vocab.tokenize(wrong)
        out = ar_generate(3, prompt, r, lm)
        assert out.response[:3] == r[:3]
        assert out.response == vocab.tokenize(target) + [EOS_ID]
        assert out.complete

    def test_splice_soundness_on_random_inputs(self, vocab, ngram):
        rng = np.random.default_rng(2)
        ids = list(range(1, len(vocab)))
        for _ in range(25):
            p = [int(rng.choice(ids)) for _ in range(4)]
            r = [int(rng.choice(ids)) for _ in range(6)]
            k = int(rng.integers(0, 7))
            out = ar_generate(k, p, r, ngram, budget=GenerationBudget(max_new_tokens=5))
            assert out.response[:k] == r[:k]

    def test_nfe_counts_one_pass_per_token_plus_prefill(self, vocab, ngram):
        p = vocab.tokenize("How many apples will Alice")
        out = ar_generate(0, p, [], ngram, budget=GenerationBudget(max_new_tokens=6))
        decodes = [x for x in out.passes if x.kind == "decode"]
        prefills = [x for x in out.passes if x.kind == "prefill"]
        new_tokens = len(out.response)
        assert len(decodes) == new_tokens
        assert len(prefills) == 1
        assert out.nfe == new_tokens + 1
        assert all(d.uncached == 1 for d in decodes)
        assert prefills[0].uncached == len(p) - 1

    def test_cost_accounting_matches_latency_model(self, vocab):
        lat = LatencyModel(pass_base_ms=10.0, per_new_token_ms=1.0)
        lm = NGramLM(vocab, seed=9, latency=lat)
        p = vocab.tokenize("How many apples")
        out = ar_generate(0, p, [], lm, budget=GenerationBudget(max_new_tokens=4))
        expected = lat.pass_cost(len(p) - 1) + sum(
            lat.pass_cost(1) for _ in range(len(out.response))
        )
        assert out.cost_ms == expected

    def test_deadline_interrupts_between_passes(self, vocab, ngram):
        clock = SimClock()
        budget = GenerationBudget(deadline=100.0, max_new_tokens=100)
        p = vocab.tokenize("How many apples")
        out = ar_generate(0, p, [], ngram, budget=budget, clock=clock)
        # Passes started before the deadline complete; none start after.
        assert clock.now >= 100.0
        assert clock.now - 100.0 < ngram.latency.pass_cost(len(p))
        assert not out.complete

    def test_deadline_requires_clock(self, vocab, ngram):
        with pytest.raises(ValueError):
            ar_generate(0, [1], [], ngram, budget=GenerationBudget(deadline=5.0))

    def test_verifier_cache_skips_prefill(self, vocab, ngram):
        p = vocab.tokenize("How many apples will Alice")
        _, handle, _ = ngram.forward(p)
        out = ar_generate(0, p, [], ngram, cache=handle, budget=GenerationBudget(max_new_tokens=3))
        assert not [x for x in out.passes if x.kind == "prefill"]
        assert out.nfe == len(out.response)

    def test_mismatched_cache_triggers_one_prefill(self, vocab, ngram):
        other = vocab.tokenize("some junk filler words")
        _, handle, _ = ngram.forward(other)
        p = vocab.tokenize("How many apples will Alice")
        out = ar_generate(0, p, [], ngram, cache=handle, budget=GenerationBudget(max_new_tokens=3))
        assert len([x for x in out.passes if x.kind == "prefill"]) == 1


class TestJacobiGenerate:
    def test_correct_window_converges_in_one_verifying_pass(self, vocab, ngram):
        p = vocab.tokenize("How many apples will")
        full = greedy_decode(ngram, p, max_new=6)
        window = full[len(p):]
        out = jacobi_generate(0, p, window, ngram, budget=GenerationBudget(max_new_tokens=0))
        assert jacobi_iterations(out) == 1
        assert out.response[: len(window)] == window

    def test_two_step_correction_scene(self, vocab):
        # One wrong number in the draft: the first pass rewrites it (and the
        # tail holds steady), the second pass verifies the fixed point.
        prompt = vocab.tokenize("How many apples will Alice and Bob have ?")
        target = vocab.tokenize("Alice will have 2 apples, while Bob will have 1.")
        wrong = vocab.tokenize("Alice will have 3 apples, while Bob will have 1.")
        lm = ScriptedLM(
            vocab,
            [ScriptEntry(tuple(prompt), tuple(target) + (EOS_ID,), positional=True)],
        )
        out = jacobi_generate(0, prompt, wrong, lm)
        assert jacobi_iterations(out) == 2
        assert out.response == target + [EOS_ID]
        assert out.complete
        assert vocab.detokenize(out.response[:-1]) == "Alice will have 2 apples, while Bob will have 1."

    def test_random_windows_match_greedy_oracle(self, vocab, ngram):
        rng = np.random.default_rng(31)
        ids = list(range(1, len(vocab)))
        for _ in range(30):
            p = [int(rng.choice(ids)) for _ in range(int(rng.integers(1, 6)))]
            r = [int(rng.choice(ids)) for _ in range(int(rng.integers(1, 9)))]
            k = int(rng.integers(0, len(r) + 1))
            out = jacobi_generate(k, p, r, ngram, budget=GenerationBudget(max_new_tokens=0))
            window_len = len(r) - k
            oracle = greedy_decode(ngram, p + r[:k], max_new=window_len)[len(p) + k:]
            got = out.response[k:]
            if EOS_ID in oracle:
                assert got[: len(oracle)] == oracle
            else:
                assert got[:window_len] == oracle
            assert jacobi_iterations(out) <= max(1, window_len)

    def test_empty_window_defers_to_ar(self, vocab, ngram):
        p = vocab.tokenize("How many")
        r = vocab.tokenize("junk words")
        a = jacobi_generate(2, p, r, ngram, budget=GenerationBudget(max_new_tokens=4))
        b = ar_generate(2, p, r, ngram, budget=GenerationBudget(max_new_tokens=4))
        assert a.response == b.response

    def test_confirmed_tokens_stream_in_order(self, vocab, ngram):
        seen = []
        p = vocab.tokenize("How many apples")
        r = vocab.tokenize("junk filler words go")
        out = jacobi_generate(0, p, r, ngram, budget=GenerationBudget(max_new_tokens=3),
                              on_tokens=lambda toks, at: seen.extend(toks))
        flat = [t for t in out.response if t != EOS_ID]
        assert seen == flat or seen == out.response

    def test_deadline_interrupt_returns_draft(self, vocab, ngram):
        clock = SimClock()
        p = vocab.tokenize("How many apples")
        r = vocab.tokenize("junk filler words go here now")
        budget = GenerationBudget(deadline=clock.now + 1.0, max_new_tokens=50)
        out = jacobi_generate(0, p, r, ngram, budget=budget, clock=clock)
        assert len(out.response) == len(r)
        assert not out.complete

    def test_nfe_is_prefill_plus_iterations_plus_tail(self, vocab, ngram):
        p = vocab.tokenize("How many apples will")
        r = vocab.tokenize("junk filler")
        out = jacobi_generate(0, p, r, ngram, budget=GenerationBudget(max_new_tokens=4))
        kinds = [x.kind for x in out.passes]
        assert out.nfe == len(kinds)
        assert kinds.count("prefill") >= 1
        assert kinds.count("jacobi") == jacobi_iterations(out)


SENTENCE_CORPUS = "speak kindly to the old tree . it remembers every spring . roots run deep"


class TestPredictiveGenerate:
    def setup_scene(self, continuation, latency=None):
        vocab = build_vocabulary([SENTENCE_CORPUS, "ask me about trees"])
        prompt = vocab.tokenize("ask me about trees")
        lm = ScriptedLM(
            vocab,
            [ScriptEntry(tuple(prompt), tuple(vocab.tokenize(continuation)) + (EOS_ID,))],
            latency=latency,
        )
        clock = SimClock()
        tts = TtsSimulator(clock)
        return vocab, prompt, lm, clock, tts

    def test_submits_buffer_job_for_first_sentence(self, vocab):
        vocab, prompt, lm, clock, tts = self.setup_scene(
            "speak kindly to the old tree . it remembers every spring ."
        )
        result, job = predictive_generate(0, prompt, [], lm, tts, clock, max_response_tokens=40)
        assert job is not None
        assert job.text == "speak kindly to the old tree."
        assert not job.streaming
        assert result.complete

    def test_reuses_job_when_sentence_unchanged(self):
        vocab, prompt, lm, clock, tts = self.setup_scene(
            "speak kindly to the old tree . it remembers every spring ."
        )
        _, job1 = predictive_generate(0, prompt, [], lm, tts, clock, max_response_tokens=40)
        r = vocab.tokenize("speak kindly to the old tree . it remembers")
        _, job2 = predictive_generate(len(r), prompt, r, lm, tts, clock, max_response_tokens=40,
                                      current_job=job1)
        assert job2 is job1
        assert job1.state != CANCELED

    def test_changed_sentence_cancels_and_resubmits(self):
        vocab, prompt, lm, clock, tts = self.setup_scene(
            "speak kindly to the old tree . it remembers every spring ."
        )
        stale = vocab.tokenize("roots run deep .")
        _, old_job = predictive_generate(len(stale), prompt, stale, lm, tts, clock,
                                         max_response_tokens=40)
        assert old_job.text == "roots run deep."
        result, new_job = predictive_generate(0, prompt, stale, lm, tts, clock,
                                              max_response_tokens=40, current_job=old_job)
        assert old_job.state == CANCELED
        assert new_job is not old_job
        assert new_job.text == "speak kindly to the old tree."
        # Fresh buffer job: first chunk lands first_chunk_ms after submission.
        assert new_job.first_chunk_ready_at == new_job.submitted_at + tts.model.first_chunk_ms

    def test_no_job_without_terminator_mid_stream(self):
        vocab, prompt, lm, clock, tts = self.setup_scene("roots run deep")
        clock.schedule(10_000.0, lambda: None)
        result, job = predictive_generate(
            0, prompt, [], lm, tts, clock, deadline=2.0, max_response_tokens=40
        )
        assert job is None
        assert not result.complete

    def test_completed_terminatorless_response_is_voiced_whole(self):
        vocab, prompt, lm, clock, tts = self.setup_scene("roots run deep")
        result, job = predictive_generate(0, prompt, [], lm, tts, clock, max_response_tokens=40)
        assert result.complete
        assert job is not None
        assert job.text == "roots run deep"

    def test_final_round_streams_later_sentences_and_resumes_buffer(self):
        vocab, prompt, lm, clock, tts = self.setup_scene(
            "speak kindly to the old tree . it remembers every spring ."
        )
        _, job = predictive_generate(0, prompt, [], lm, tts, clock, max_response_tokens=40)
        clock.advance_until(lambda: job.state == BUFFERED)
        r = vocab.tokenize("speak kindly to the old tree . it remembers every spring .") + [EOS_ID]
        sentences = []
        result, final_job = predictive_generate(
            len(r), prompt, r, lm, tts, clock,
            final_round=True, max_response_tokens=40, current_job=job,
            on_sentence=lambda idx, text, at, toks: sentences.append((idx, text)),
        )
        assert final_job is job
        assert job.state == "resumed"
        assert tts.playback_start(job) == clock.now
        assert [s[1] for s in sentences] == [
            "speak kindly to the old tree.",
            "it remembers every spring.",
        ]
        streamed = [j for j in tts.jobs if j.streaming]
        assert len(streamed) == 1 and streamed[0].text == "it remembers every spring."


class TestSentenceTracker:
    def test_emits_each_sentence_once(self):
        vocab = build_vocabulary(["one . two ! three"])
        got = []
        tracker = SentenceTracker(vocab, lambda i, text, at, toks: got.append((i, text, at)))
        tracker.feed(vocab.tokenize("one ."), 1.0)
        tracker.feed(vocab.tokenize("two"), 2.0)
        tracker.feed(vocab.tokenize("!"), 3.0)
        tracker.flush_fragment(4.0)
        tracker.feed(vocab.tokenize("three"), 5.0)
        tracker.flush_fragment(6.0)
        assert got == [(0, "one.", 1.0), (1, "two!", 3.0), (2, "three", 6.0)]
