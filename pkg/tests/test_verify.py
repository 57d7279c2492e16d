import pytest

from specstream.lm import NGramLM, ScriptEntry, ScriptedLM, greedy_decode
from specstream.text import EOS_ID, build_vocabulary, first_sentence
from specstream.verify import make_verifier, verify_greedy, verify_reflection, verify_topk

CORPUS = "tell me a story about the old tree . it grew tall and wise ? ! extra junk words"


@pytest.fixture
def vocab():
    return build_vocabulary([CORPUS])


@pytest.fixture
def ngram(vocab):
    return NGramLM(vocab, seed=11)


def scripted_for(vocab, prompt_text, continuation_text):
    entry = ScriptEntry(
        tuple(vocab.tokenize(prompt_text)),
        tuple(vocab.tokenize(continuation_text)) + (EOS_ID,),
    )
    return ScriptedLM(vocab, [entry])


def random_pair(vocab, rng, max_p=8, max_r=10):
    ids = [i for i in range(1, len(vocab))]
    p = [int(rng.choice(ids)) for _ in range(int(rng.integers(1, max_p)))]
    r = [int(rng.choice(ids)) for _ in range(int(rng.integers(0, max_r)))]
    return p, r


class TestGreedy:
    def test_empty_candidate(self, ngram, vocab):
        out = verify_greedy(vocab.tokenize("tell me a"), [], ngram)
        assert out.accepted_count == 0
        assert not out.first_sentence_accepted
        assert out.nfe == 1

    def test_full_accept_scripted(self, vocab):
        lm = scripted_for(vocab, "tell me a story", "the old tree grew tall .")
        p = vocab.tokenize("tell me a story")
        r = vocab.tokenize("the old tree grew tall .")
        out = verify_greedy(p, r, lm)
        assert out.accepted_count == len(r)
        assert out.first_sentence_accepted

    def test_partial_accept_matches_common_prefix_oracle(self, vocab):
        lm = scripted_for(vocab, "tell me a story", "the old tree grew tall .")
        p = vocab.tokenize("tell me a story")
        r = vocab.tokenize("the old tree and wise .")
        out = verify_greedy(p, r, lm)
        assert out.accepted_count == 3

    def test_reject_outcome(self, vocab):
        lm = scripted_for(vocab, "tell me a story", "the old tree grew tall .")
        p = vocab.tokenize("tell me a story")
        r = vocab.tokenize("junk words about it")
        out = verify_greedy(p, r, lm)
        assert out.accepted_count == 0

    def test_prefix_consistency_against_brute_force(self, vocab, ngram):
        # k must equal the longest common prefix of the candidate and the
        # greedy continuation of the prompt, recomputed independently.
        import numpy as np

        rng = np.random.default_rng(5)
        for _ in range(50):
            p, r = random_pair(vocab, rng)
            out = verify_greedy(p, r, ngram)
            oracle = greedy_decode(ngram, p, max_new=len(r))[len(p):]
            expect = 0
            for a, b in zip(r, oracle):
                if a != b:
                    break
                expect += 1
            assert out.accepted_count == expect

    def test_cache_covers_prompt_plus_accepted(self, vocab, ngram):
        p = vocab.tokenize("tell me a story")
        r = vocab.tokenize("the old tree")
        out = verify_greedy(p, r, ngram)
        assert out.cache is not None
        assert out.cache.cached_prefix_length == len(p) + out.accepted_count
        assert out.cache.prefix == tuple(p + r[: out.accepted_count])

    def test_requires_nonempty_prompt(self, ngram):
        with pytest.raises(ValueError):
            verify_greedy([], [1, 2], ngram)

    def test_charges_clock(self, vocab, ngram):
        class Recorder:
            total = 0.0

            def charge(self, c):
                self.total += c

        clock = Recorder()
        p = vocab.tokenize("tell me a story")
        out = verify_greedy(p, vocab.tokenize("the old"), ngram, clock)
        assert clock.total == out.cost_ms == ngram.latency.pass_cost(6)


class TestTopK:
    def test_k1_identical_to_greedy(self, vocab, ngram):
        import numpy as np

        rng = np.random.default_rng(17)
        for _ in range(50):
            p, r = random_pair(vocab, rng)
            g = verify_greedy(p, r, ngram)
            t = verify_topk(p, r, ngram, 1)
            assert (t.accepted_count, t.first_sentence_accepted) == (
                g.accepted_count,
                g.first_sentence_accepted,
            )

    def test_k_full_vocab_accepts_everything(self, vocab, ngram):
        p = vocab.tokenize("tell me a story")
        r = vocab.tokenize("junk words about it")
        out = verify_topk(p, r, ngram, len(vocab))
        assert out.accepted_count == len(r)

    def test_monotone_in_k(self, vocab, ngram):
        import numpy as np

        rng = np.random.default_rng(23)
        for _ in range(30):
            p, r = random_pair(vocab, rng)
            counts = [verify_topk(p, r, ngram, k).accepted_count for k in (1, 2, 3, 5)]
            assert counts == sorted(counts)

    def test_rejects_bad_k(self, vocab, ngram):
        with pytest.raises(ValueError):
            verify_topk(vocab.tokenize("tell"), [], ngram, 0)


class TestReflection:
    def judge_lm(self, vocab, verdicts, prompt_text="tell me a story", continuation="the old tree grew tall ."):
        entry = ScriptEntry(
            tuple(vocab.tokenize(prompt_text)),
            tuple(vocab.tokenize(continuation)) + (EOS_ID,),
        )
        return ScriptedLM(vocab, [entry], judge_verdicts=verdicts)

    def test_no_sentence_behaves_as_greedy(self, vocab):
        lm = self.judge_lm(vocab, {})
        p = vocab.tokenize("tell me a story")
        r = vocab.tokenize("the old tree grew")  # no terminator
        out = verify_reflection(p, r, lm)
        ref = verify_greedy(p, r, lm)
        assert (out.accepted_count, out.nfe) == (ref.accepted_count, 1)

    def test_yes_accepts_whole_first_sentence(self, vocab):
        r = vocab.tokenize("it grew tall . and wise")
        p = vocab.tokenize("tell me a story")
        lm = self.judge_lm(vocab, {("tell me a story", "it grew tall."): True})
        out = verify_reflection(p, r, lm)
        assert out.accepted_count == first_sentence(r, vocab).end
        assert out.first_sentence_accepted
        assert out.cache is None
        assert out.nfe == 1

    def test_yes_even_when_greedy_would_reject(self, vocab):
        # The token-level argmax rejects immediately, but the judge accepts
        # the whole sentence on semantic grounds.
        p = vocab.tokenize("tell me a story")
        r = vocab.tokenize("junk words .")
        lm = self.judge_lm(vocab, {("tell me a story", "junk words."): True})
        greedy = verify_greedy(p, r, lm)
        out = verify_reflection(p, r, lm)
        assert greedy.accepted_count == 0
        assert out.accepted_count == len(r)

    def test_no_reproduces_greedy_with_two_passes(self, vocab):
        p = vocab.tokenize("tell me a story")
        r = vocab.tokenize("the old tree and wise .")
        lm = self.judge_lm(vocab, {})
        out = verify_reflection(p, r, lm)
        ref = verify_greedy(p, r, lm)
        assert (out.accepted_count, out.first_sentence_accepted) == (
            ref.accepted_count,
            ref.first_sentence_accepted,
        )
        assert out.nfe == 2
        assert out.cost_ms > ref.cost_ms
        assert out.judge_fallback == "judge_rejected"

    def test_judge_unsupported_falls_back(self, vocab, ngram):
        p = vocab.tokenize("tell me a story")
        r = vocab.tokenize("it grew tall .")
        out = verify_reflection(p, r, ngram)
        ref = verify_greedy(p, r, ngram)
        assert out.accepted_count == ref.accepted_count
        assert out.judge_fallback == "judge_unsupported"

    def test_pipeline_judge_prompt_override(self, vocab):
        p = vocab.tokenize("tell me a story")
        r = vocab.tokenize("it grew tall .")
        lm = self.judge_lm(vocab, {("raw user text", "it grew tall."): True})
        out = verify_reflection(p, r, lm, judge_prompt_text="raw user text")
        assert out.first_sentence_accepted


class TestMakeVerifier:
    def test_names(self, vocab, ngram):
        p = vocab.tokenize("tell me a story")
        r = vocab.tokenize("the old tree")
        for name in ("greedy", "topk", "reflection"):
            out = make_verifier(name)(p, r, ngram)
            assert out.accepted_count >= 0
        with pytest.raises(ValueError):
            make_verifier("nope")

    def test_topk_k_bound(self, vocab, ngram):
        p = vocab.tokenize("tell me a story")
        r = vocab.tokenize("junk words about it")
        loose = make_verifier("topk", topk_k=len(vocab))(p, r, ngram)
        assert loose.accepted_count == len(r)
