"""Input-time speculative generation engine and latency simulator.

While a user is still typing or speaking, the pipeline keeps a candidate
response alive: each newly arrived prompt prefix is verified against it,
the surviving prefix is extended, and the first sentence's audio stays
pre-synthesized. When the input completes, a single verification pass in
the best case is all that separates the user from hearing the answer.
"""

from .clock import PromptStream, SimClock, StreamChunk, WallClock, make_stream
from .generate import (
    GenerationBudget,
    GenerationResult,
    ar_generate,
    jacobi_generate,
    predictive_generate,
)
from .lm import (
    CacheHandle,
    JudgeResult,
    JudgeUnsupportedError,
    LanguageModel,
    LatencyModel,
    LogitsBlock,
    NGramLM,
    PrefixViolationError,
    ScriptedLM,
    ScriptedScenario,
    ScriptEntry,
    argmax_token,
    greedy_decode,
    topk_tokens,
)
from .metrics import (
    Conversation,
    MalformedLogError,
    MetricsRecord,
    compute_metrics,
    load_dataset,
    nfetfs_histogram,
    run_dataset,
    summarize,
    sweep_topk,
)
from .pipeline import (
    EventLog,
    PipelineConfig,
    PipelineEvent,
    TurnResult,
    TurnState,
    read_events_jsonl,
    run_baseline,
    run_conversation,
    run_turn,
    write_events_jsonl,
)
from .text import (
    EOS_ID,
    SentenceSpan,
    Vocabulary,
    VocabularyError,
    build_vocabulary,
    first_sentence,
)
from .tts import TtsJob, TtsLatencyModel, TtsSimulator
from .verify import VerifierOutcome, verify_greedy, verify_reflection, verify_topk

__version__ = "0.1.0"
