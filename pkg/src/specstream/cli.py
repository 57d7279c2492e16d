"""Command-line front end for dataset simulation and reporting.

Subcommands:
    simulate   speculative pipeline over a JSONL dataset, events + CSVs out
    baseline   naive cascade over the same dataset
    sweep      top-k acceptance sweep against one shared baseline
    report     recompute metrics from previously written event logs
    live       wall-clock demo that replays a typed prompt in real time
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .clock import WallClock, make_stream
from .lm import NGramLM, ScriptedScenario
from .metrics import (
    attach_speedups,
    compute_metrics,
    load_dataset,
    nfetfs_histogram,
    run_dataset,
    summarize,
    summary_row,
    sweep_topk,
    write_histogram_json,
    write_per_turn_csv,
    write_summary_csv,
)
from .pipeline import PipelineConfig, read_events_jsonl, write_events_jsonl
from .text import build_vocabulary


def build_config(args) -> PipelineConfig:
    base = PipelineConfig()
    if getattr(args, "config", None):
        base = PipelineConfig.from_dict(json.loads(Path(args.config).read_text()))
    topk = getattr(args, "topk", None)
    if not isinstance(topk, int):
        topk = None  # the sweep command parses its own comma-separated list
    return base.override(
        verifier=getattr(args, "verifier", None),
        topk_k=topk,
        generator=getattr(args, "generator", None),
        rate_chars_per_min=getattr(args, "rate", None),
        chunk_words=getattr(args, "chunk_words", None),
        seed=getattr(args, "seed", None),
        max_response_tokens=getattr(args, "max_tokens", None),
    )


def _load_scenario(args) -> ScriptedScenario | None:
    if getattr(args, "scenario", None):
        return ScriptedScenario.load(args.scenario)
    return None


def _write_run_outputs(out_dir: Path, run, dataset_name: str, cfg: PipelineConfig,
                       baseline_run=None, lossless: bool = False) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    events_dir = out_dir / "events"
    for result in run.results:
        name = result.events[0].turn_id.replace(":", "__") + ".jsonl"
        write_events_jsonl(result.events, events_dir / name)
    if baseline_run is not None:
        attach_speedups(run.records, baseline_run.records)
        summary = summarize(run.records, baseline_run.records)
    else:
        summary = summarize(run.records)
    write_per_turn_csv(out_dir / "per_turn.csv", run.method, dataset_name, run.records)
    write_summary_csv(out_dir / "summary.csv", [summary_row(run.method, dataset_name, summary, lossless)])
    write_histogram_json(out_dir / "nfetfs_histogram.json", nfetfs_histogram(run.records, by_round=True))
    manifest = {
        "method": run.method,
        "dataset": dataset_name,
        "config": {
            "verifier": cfg.verifier,
            "topk_k": cfg.topk_k,
            "generator": cfg.generator,
            "seed": cfg.seed,
            "rate_chars_per_min": cfg.rate_chars_per_min,
            "chunk_words": cfg.chunk_words,
            "max_response_tokens": cfg.max_response_tokens,
        },
    }
    (out_dir / "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_simulate(args) -> int:
    cfg = build_config(args)
    conversations = load_dataset(args.dataset)
    scenario = _load_scenario(args)
    run = run_dataset(conversations, cfg, scenario=scenario)
    baseline_run = None
    if args.with_baseline:
        baseline_run = run_dataset(conversations, cfg, baseline=True, scenario=scenario)
        _write_run_outputs(Path(args.out) / "baseline", baseline_run,
                           Path(args.dataset).stem, cfg)
    lossless = cfg.verifier == "greedy" and cfg.generator == "ar"
    _write_run_outputs(Path(args.out), run, Path(args.dataset).stem, cfg,
                       baseline_run=baseline_run, lossless=lossless)
    print(f"{run.method}: {len(run.records)} turns -> {args.out}")
    return 0


def cmd_baseline(args) -> int:
    cfg = build_config(args)
    conversations = load_dataset(args.dataset)
    run = run_dataset(conversations, cfg, baseline=True, scenario=_load_scenario(args))
    _write_run_outputs(Path(args.out), run, Path(args.dataset).stem, cfg)
    print(f"baseline: {len(run.records)} turns -> {args.out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = build_config(args)
    k_values = [int(k) for k in args.topk.split(",")]
    conversations = load_dataset(args.dataset)
    sweep = sweep_topk(conversations, k_values, cfg, scenario=_load_scenario(args))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for k in k_values:
        summary = sweep[k]
        row = summary_row(f"top{k}-{cfg.generator}", Path(args.dataset).stem, summary)
        row["quality"] = ""
        rows.append(row)
    write_summary_csv(out_dir / "sweep.csv", rows)
    (out_dir / "sweep.json").write_text(json.dumps(sweep, indent=2, sort_keys=True) + "\n")
    print(f"sweep over k={k_values} -> {args.out}")
    return 0


def cmd_report(args) -> int:
    events_dir = Path(args.events) / "events"
    if not events_dir.is_dir():
        events_dir = Path(args.events)
    records = []
    for path in sorted(events_dir.glob("*.jsonl")):
        records.append(compute_metrics(read_events_jsonl(path)))
    if not records:
        print(f"no event logs found under {events_dir}", file=sys.stderr)
        return 1
    manifest_path = Path(args.events) / "run.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    method = manifest.get("method", "unknown")
    dataset = manifest.get("dataset", "unknown")

    baselines = None
    if args.baseline:
        base_dir = Path(args.baseline) / "events"
        if not base_dir.is_dir():
            base_dir = Path(args.baseline)
        baselines = [compute_metrics(read_events_jsonl(p)) for p in sorted(base_dir.glob("*.jsonl"))]
        attach_speedups(records, baselines)

    out_dir = Path(args.out or args.events)
    summary = summarize(records, baselines)
    write_per_turn_csv(out_dir / "per_turn.csv", method, dataset, records)
    write_summary_csv(out_dir / "summary.csv", [summary_row(method, dataset, summary)])
    write_histogram_json(out_dir / "nfetfs_histogram.json", nfetfs_histogram(records, by_round=True))
    print(f"report for {len(records)} turns -> {out_dir}")
    return 0


def cmd_live(args) -> int:
    """Type a prompt; watch the speculative timeline replay in real time."""
    from .pipeline import run_turn

    cfg = build_config(args)
    print("Type a prompt and press enter:")
    text = input("> ").strip()
    if not text:
        print("nothing to do")
        return 0
    vocab = build_vocabulary([cfg.system_prompt, text])
    lm = NGramLM(vocab, seed=cfg.seed, order=cfg.ngram_order, latency=cfg.lm_latency)
    stream = make_stream(text, cfg.rate_chars_per_min, cfg.chunk_words)
    print(f"replaying input at {cfg.rate_chars_per_min:.0f} chars/min "
          f"({stream.final_arrival() / 1000.0:.1f}s)...")

    result = _run_live_turn(stream, cfg, lm)
    print(f"\nresponse: {result.final_text}")
    return 0


def _run_live_turn(stream, cfg, lm):
    # Same orchestration as the simulator, but on the wall clock.
    from .pipeline import run_turn

    result = run_turn([], stream, cfg, lm, clock=WallClock())
    for event in result.events:
        if event.kind in ("chunk_received", "verify", "audio_start", "sentence_emitted"):
            print(f"  [{event.t_ms / 1000.0:7.2f}s] {event.kind}: "
                  + json.dumps(event.payload, sort_keys=True))
    return result


def _add_common(parser: argparse.ArgumentParser, with_dataset: bool = True,
                with_topk: bool = True) -> None:
    if with_dataset:
        parser.add_argument("--dataset", required=True, help="JSONL file: {'id', 'turns'} per line")
        parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--config", help="JSON config file (flags override it)")
    parser.add_argument("--verifier", choices=["greedy", "topk", "reflection"])
    if with_topk:
        parser.add_argument("--topk", type=int, help="k for the topk verifier")
    parser.add_argument("--generator", choices=["ar", "jacobi"])
    parser.add_argument("--rate", type=float, help="input rate in chars per minute")
    parser.add_argument("--chunk-words", dest="chunk_words", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--max-tokens", dest="max_tokens", type=int)
    parser.add_argument("--scenario", help="scripted-backend scenario JSON")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="specstream",
                                     description="input-time speculation latency simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run the speculative pipeline over a dataset")
    _add_common(p)
    p.add_argument("--with-baseline", action="store_true",
                   help="also run the baseline and report speedups")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("baseline", help="run the naive cascade over a dataset")
    _add_common(p)
    p.set_defaults(fn=cmd_baseline)

    p = sub.add_parser("sweep", help="top-k sweep, e.g. --topk 1,2,3,5,10")
    _add_common(p, with_topk=False)
    p.add_argument("--topk", required=True, help="comma-separated k values")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("report", help="recompute metrics from event logs")
    p.add_argument("--events", required=True, help="run directory (or its events/ subdir)")
    p.add_argument("--baseline", help="baseline run directory for speedups")
    p.add_argument("--out", help="output directory (defaults to --events)")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("live", help="wall-clock interactive demo")
    _add_common(p, with_dataset=False)
    p.set_defaults(fn=cmd_live)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
