"""Latency metrics computed from event logs, plus dataset-level reporting.

Three quantities characterize a turn, all measured from the arrival of the
final input chunk: time to the first completed sentence of text (TTFS),
the number of model forward passes spent in that window (verification and
generation alike), and the time to the first playable audio chunk. They
are pure functions of the event log; recomputing them from a serialized
log reproduces the in-memory values exactly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

from .lm import NGramLM, ScriptedScenario
from .pipeline import PipelineConfig, PipelineEvent, TurnResult, run_conversation
from .text import build_vocabulary

NFETFS_BINS = ("1", "2-5", "6-10", "11-20", ">20")


class MalformedLogError(ValueError):
    def __init__(self, missing: list[str]) -> None:
        super().__init__(f"event log is missing required events: {', '.join(missing)}")
        self.missing = missing


@dataclass
class MetricsRecord:
    turn_id: str
    round: int
    ttfs_ms: float
    nfetfs: int
    audio_latency_ms: float
    accepted_fraction: float | None
    first_sentence_accepted: bool
    speedup: float | None = None


def compute_metrics(events: list[PipelineEvent]) -> MetricsRecord:
    """Derive one turn's metrics from its event log alone."""
    final_chunk = None
    audio_start = None
    first_sentence_t = None
    last_verify = None
    for e in events:
        if e.kind == "chunk_received" and e.payload.get("is_final"):
            final_chunk = e
        elif e.kind == "audio_start" and audio_start is None:
            audio_start = e
        elif e.kind == "sentence_emitted" and first_sentence_t is None:
            first_sentence_t = e.t_ms
        elif e.kind == "verify":
            last_verify = e

    missing = [
        name
        for name, val in (
            ("final chunk_received", final_chunk),
            ("audio_start", audio_start),
            ("sentence_emitted", first_sentence_t),
        )
        if val is None
    ]
    if missing:
        raise MalformedLogError(missing)

    t_final = final_chunk.payload["arrival_ms"]
    nfetfs = 0
    for e in events:
        if t_final < e.t_ms <= first_sentence_t:
            if e.kind == "verify":
                nfetfs += e.payload["nfe"]
            elif e.kind == "generate_step":
                nfetfs += 1

    return MetricsRecord(
        turn_id=events[0].turn_id,
        round=events[0].round,
        ttfs_ms=first_sentence_t - t_final,
        nfetfs=nfetfs,
        audio_latency_ms=audio_start.t_ms - t_final,
        accepted_fraction=last_verify.payload["accepted_fraction"] if last_verify else None,
        first_sentence_accepted=bool(last_verify.payload["first_sentence_accepted"]) if last_verify else False,
    )


def attach_speedups(records: list[MetricsRecord], baselines: list[MetricsRecord]) -> None:
    """Set each record's per-turn speedup against its matching baseline turn."""
    by_id = {b.turn_id: b for b in baselines}
    for r in records:
        if r.turn_id not in by_id:
            raise ValueError(f"no baseline record for turn {r.turn_id}")
        base = by_id[r.turn_id]
        r.speedup = base.audio_latency_ms / r.audio_latency_ms if r.audio_latency_ms > 0 else None


def summarize(records: list[MetricsRecord], baselines: list[MetricsRecord] | None = None) -> dict:
    """Dataset-level means; speedup is the ratio of mean audio latencies."""
    if not records:
        raise ValueError("cannot summarize an empty record set")
    if baselines is not None:
        if sorted(r.turn_id for r in records) != sorted(b.turn_id for b in baselines):
            raise ValueError("record and baseline turn ids do not match")
        if not baselines:
            raise ValueError("cannot summarize against an empty baseline set")
    n = len(records)
    summary = {
        "turns": n,
        "mean_ttfs_ms": sum(r.ttfs_ms for r in records) / n,
        "mean_nfetfs": sum(r.nfetfs for r in records) / n,
        "mean_latency_ms": sum(r.audio_latency_ms for r in records) / n,
        "speedup": None,
    }
    if baselines is not None:
        base_mean = sum(b.audio_latency_ms for b in baselines) / len(baselines)
        if summary["mean_latency_ms"] > 0:
            summary["speedup"] = base_mean / summary["mean_latency_ms"]
    return summary


def nfetfs_bin(value: int) -> str:
    if value <= 1:
        return "1"
    if value <= 5:
        return "2-5"
    if value <= 10:
        return "6-10"
    if value <= 20:
        return "11-20"
    return ">20"


def nfetfs_histogram(records: list[MetricsRecord], by_round: bool = False) -> dict:
    """Binned pass counts, optionally broken down per conversation round."""
    def empty() -> dict[str, int]:
        return {b: 0 for b in NFETFS_BINS}

    if not by_round:
        counts = empty()
        for r in records:
            counts[nfetfs_bin(r.nfetfs)] += 1
        return {"bins": list(NFETFS_BINS), "counts": counts}
    rounds: dict[str, dict[str, int]] = {}
    for r in records:
        counts = rounds.setdefault(str(r.round), empty())
        counts[nfetfs_bin(r.nfetfs)] += 1
    return {"bins": list(NFETFS_BINS), "rounds": dict(sorted(rounds.items()))}


@dataclass
class Conversation:
    id: str
    turns: list[str]


def load_dataset(path: str | Path) -> list[Conversation]:
    """Read conversations from JSONL: one {"id", "turns"} object per line."""
    conversations = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        data = json.loads(line)
        conversations.append(Conversation(id=str(data["id"]), turns=list(data["turns"])))
    if not conversations:
        raise ValueError(f"dataset {path} contains no conversations")
    return conversations


@dataclass
class DatasetRun:
    method: str
    records: list[MetricsRecord]
    results: list[TurnResult] = field(default_factory=list)
    summary: dict | None = None


def method_name(cfg: PipelineConfig, baseline: bool = False) -> str:
    if baseline:
        return "baseline"
    verifier = f"top{cfg.topk_k}" if cfg.verifier == "topk" else cfg.verifier
    return f"{verifier}-{cfg.generator}"


def build_backend(cfg: PipelineConfig, conversations: list[Conversation],
                  scenario: ScriptedScenario | None = None):
    """Deterministic backend covering the whole corpus of a run."""
    texts = [cfg.system_prompt] if cfg.system_prompt else []
    for conv in conversations:
        texts.extend(conv.turns)
    if scenario is not None:
        texts.extend(scenario.corpus())
        vocab = build_vocabulary(texts)
        return scenario.build(vocab, latency=cfg.lm_latency)
    vocab = build_vocabulary(texts)
    return NGramLM(vocab, seed=cfg.seed, order=cfg.ngram_order, latency=cfg.lm_latency)


def run_dataset(
    conversations: list[Conversation],
    cfg: PipelineConfig,
    baseline: bool = False,
    scenario: ScriptedScenario | None = None,
) -> DatasetRun:
    """Simulate every conversation and collect per-turn metrics."""
    lm = build_backend(cfg, conversations, scenario)
    records: list[MetricsRecord] = []
    results: list[TurnResult] = []
    for conv in conversations:
        for result in run_conversation(conv.turns, cfg, lm, conversation_id=conv.id, baseline=baseline):
            records.append(compute_metrics(result.events))
            results.append(result)
    return DatasetRun(method=method_name(cfg, baseline), records=records, results=results)


def sweep_topk(
    conversations: list[Conversation],
    k_values: list[int],
    cfg: PipelineConfig,
    scenario: ScriptedScenario | None = None,
) -> dict[int, dict]:
    """Run the top-k pipeline per k and summarize against one baseline run.

    Latency trends are reported, not asserted: without a quality judge the
    only observable effect of loosening k is on the latency side.
    """
    if any(k < 1 for k in k_values):
        raise ValueError("top-k sweep requires k values >= 1")
    base = run_dataset(conversations, cfg, baseline=True, scenario=scenario)
    out: dict[int, dict] = {}
    for k in k_values:
        run = run_dataset(conversations, cfg.override(verifier="topk", topk_k=k), scenario=scenario)
        attach_speedups(run.records, base.records)
        summary = summarize(run.records, base.records)
        summary["mean_accepted_fraction"] = sum(
            r.accepted_fraction or 0.0 for r in run.records
        ) / len(run.records)
        out[k] = summary
    return out


PER_TURN_COLUMNS = (
    "method", "dataset", "turn_id", "round", "ttfs_ms", "nfetfs",
    "audio_latency_ms", "accepted_fraction", "speedup",
)
SUMMARY_COLUMNS = (
    "method", "dataset", "mean_ttfs_ms", "mean_nfetfs", "mean_latency_ms", "speedup", "quality",
)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value)
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def write_per_turn_csv(path: str | Path, method: str, dataset: str,
                       records: list[MetricsRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PER_TURN_COLUMNS)
        for r in records:
            writer.writerow([
                method, dataset, r.turn_id, r.round, _fmt(r.ttfs_ms), r.nfetfs,
                _fmt(r.audio_latency_ms), _fmt(r.accepted_fraction), _fmt(r.speedup),
            ])


def write_summary_csv(path: str | Path, rows: list[dict]) -> None:
    """One row per (method, dataset); ``quality`` stays empty except for the
    lossless greedy configuration, whose output is the baseline's."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for row in rows:
            writer.writerow([
                row["method"], row["dataset"], _fmt(row["mean_ttfs_ms"]),
                _fmt(row["mean_nfetfs"]), _fmt(row["mean_latency_ms"]),
                _fmt(row.get("speedup")), row.get("quality", ""),
            ])


def summary_row(method: str, dataset: str, summary: dict, lossless: bool = False) -> dict:
    return {
        "method": method,
        "dataset": dataset,
        "mean_ttfs_ms": summary["mean_ttfs_ms"],
        "mean_nfetfs": summary["mean_nfetfs"],
        "mean_latency_ms": summary["mean_latency_ms"],
        "speedup": summary.get("speedup"),
        "quality": "identical to baseline" if lossless else "",
    }


def write_histogram_json(path: str | Path, histogram: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(histogram, indent=2, sort_keys=True) + "\n")
