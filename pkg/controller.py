from __future__ import annotations

import argparse
import json
import logging
import random
import sys
from collections import Counter
from contextlib import nullcontext
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Optional

from dotenv import load_dotenv

from backends.base import GenerationBackend
from backends.remote import ChatCompletionsBackend
from backends.scripted import load_script
from config import AppConfig, BackendConfig, load_config
from errors import CannotSwap, CovRagError, NoSamples
from evaluation.judge import aggregate_ranks, load_cases, run_judge_ranking
from evaluation.metrics import batch_accuracy, high_quality_rate, reference_correctness_pairs, reference_delta
from models import PIPELINE_MODES, PipelineTrace, Question, RagSample
from pipeline import BatchOutcome, CovRagPipeline, run_batch, write_traces
from rendering.prompt_templates import PromptBuilder
from retrievers.base import Retriever
from retrievers.offline import Corpus, CorpusRetriever, load_corpus
from retrievers.web import WebRetriever
from synthesis.annotate import annotate_batch, audit_annotations
from synthesis.augment import augment_negative, augment_with_backend
from synthesis.dataset import Dataset, load_dataset, sample_rag, split_dataset, write_dataset
from synthesis.records import check_split_integrity, emit_training_set, write_records
from utils.http import network_denied
from utils.jsonl import append_jsonl, write_json, write_jsonl
from utils.logging_setup import setup_logging


EXIT_OK = 0
EXIT_FAILED = 1
EXIT_INTERRUPTED = 130


@dataclass
class Runtime:
    config: AppConfig
    config_path: str
    logger: logging.Logger
    prompts: PromptBuilder
    hermetic: bool
    started_at: datetime
    corpus: Optional[Corpus] = None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="controller.py", description="Retrieval-augmented QA with a chain-of-verification loop.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="config.yaml")
    common.add_argument("--hermetic", action="store_true", help="Scripted backends and the offline corpus; any network access fails")
    common.add_argument("--seed", type=int, default=None, help="Overrides run.seed")
    common.add_argument("--parallelism", type=int, default=None, help="Overrides run.parallelism")
    common.add_argument("--max-iters", type=int, default=None, help="Overrides sigma.max_iterations")

    sub = parser.add_subparsers(dest="command", required=True)

    p_answer = sub.add_parser("answer", parents=[common], help="Answer one question")
    p_answer.add_argument("question")
    p_answer.add_argument("--single", action="store_true", help="One retrieval, one generation, no verification")
    p_answer.add_argument("--trace", default=None, help="Write the full trace (JSONL, one line) to this path")
    p_answer.add_argument("--ablation", choices=PIPELINE_MODES, default=None)
    p_answer.add_argument("--chain", choices=("with", "without"), default=None)
    p_answer.set_defaults(func=cmd_answer)

    p_eval = sub.add_parser("eval", parents=[common], help="Answer a dataset and score it")
    p_eval.add_argument("dataset")
    p_eval.add_argument("--single", action="store_true")
    p_eval.add_argument("--ablation", choices=PIPELINE_MODES, default=None)
    p_eval.add_argument("--chain", choices=("with", "without"), default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_synth = sub.add_parser("synth", parents=[common], help="Build RAG + verification training records")
    p_synth.add_argument("dataset")
    p_synth.add_argument("--chain", choices=("with", "without"), default=None)
    p_synth.set_defaults(func=cmd_synth)

    p_judge = sub.add_parser("judge", parents=[common], help="Rank system outputs with the judge backend")
    p_judge.add_argument("cases")
    p_judge.set_defaults(func=cmd_judge)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    load_dotenv()
    try:
        with network_denied() if args.hermetic else nullcontext():
            rt = _runtime(args)
            return int(args.func(args, rt))
    except KeyboardInterrupt:
        _emit_error({"error": "KeyboardInterrupt", "message": "interrupted", "stage": None})
        return EXIT_INTERRUPTED
    except CovRagError as e:
        _emit_error(e.to_json_dict())
        return EXIT_FAILED
    except Exception as e:
        _emit_error({"error": type(e).__name__, "message": _format_exception_short(e), "stage": None})
        return EXIT_FAILED


def _runtime(args: argparse.Namespace) -> Runtime:
    config = load_config(args.config).with_overrides(
        seed=args.seed,
        parallelism=args.parallelism,
        max_iterations=args.max_iters,
        hermetic=bool(args.hermetic),
    )
    logger = setup_logging(config.run.log_dir, config.run.log_level)
    return Runtime(
        config=config,
        config_path=str(args.config),
        logger=logger,
        prompts=PromptBuilder.from_config(config.prompts),
        hermetic=bool(args.hermetic),
        started_at=datetime.now(),
    )


def _build_backend(config: BackendConfig, *, logger: logging.Logger) -> GenerationBackend:
    if config.kind == "scripted":
        if config.script_path is None:
            raise ValueError("scripted backend needs script_path")
        return load_script(config.script_path, logger=logger)
    if config.kind == "remote":
        return ChatCompletionsBackend.from_config(config, logger=logger)
    raise ValueError(f"Unknown backend kind: {config.kind}")


def _build_retriever(rt: Runtime, *, backend: Optional[GenerationBackend]) -> Retriever:
    cfg = rt.config.retriever
    if cfg.mode == "offline":
        if cfg.corpus_path is None:
            raise ValueError("offline retriever needs retriever.corpus_path")
        rt.corpus = load_corpus(cfg.corpus_path)
        return CorpusRetriever(
            rt.corpus,
            top_k=cfg.top_k,
            reranker=cfg.reranker,
            backend=backend,
            prompts=rt.prompts,
            logger=rt.logger,
        )
    if cfg.mode == "live":
        return WebRetriever.from_config(cfg, backend=backend, prompts=rt.prompts, logger=rt.logger)
    raise ValueError(f"Unknown retriever mode: {cfg.mode}")


def _build_pipeline(rt: Runtime, chain: Optional[str]) -> CovRagPipeline:
    backend = _build_backend(rt.config.backend, logger=rt.logger)
    retriever = _build_retriever(rt, backend=backend)
    style = chain or rt.config.synthesis.chain
    return CovRagPipeline(
        backend,
        retriever,
        policy=rt.config.sigma,
        prompts=rt.prompts,
        generation=rt.config.generation,
        chain=style == "with",
        logger=rt.logger,
    )


def _mode(args: argparse.Namespace) -> str:
    if getattr(args, "single", False):
        return "no_revise"
    return args.ablation or "end_revise"


def cmd_answer(args: argparse.Namespace, rt: Runtime) -> int:
    pipeline = _build_pipeline(rt, args.chain)
    trace = pipeline.run(Question(text=args.question, id="cli"), _mode(args))
    if args.trace:
        write_traces(Path(args.trace), [trace])
        rt.logger.info("Wrote trace to %s", args.trace)
    print(trace.final_answer.text)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, rt: Runtime) -> int:
    cfg = rt.config
    out_dir = cfg.output.dir
    traces_path = out_dir / cfg.output.traces
    summary_path = out_dir / cfg.output.summary
    csv_path = out_dir / cfg.output.per_sample_csv

    dataset = load_dataset(Path(args.dataset))
    pipeline = _build_pipeline(rt, args.chain)
    mode = _mode(args)

    # Traces are streamed so an interrupted run leaves everything answered so far on disk.
    write_jsonl(traces_path, [])
    errors: list[dict[str, Any]] = []

    def _flush(outcome: BatchOutcome) -> None:
        if outcome.trace is not None:
            append_jsonl(traces_path, outcome.trace.to_json_dict())
        else:
            errors.append({"id": outcome.question.id, **(outcome.error or {})})

    outcomes: list[BatchOutcome] = []
    try:
        outcomes = run_batch(pipeline, dataset.questions(), mode=mode, parallelism=cfg.run.parallelism, on_outcome=_flush)
    except KeyboardInterrupt:
        _write_run_summary(rt, summary_path, command="eval", complete=False, payload={"mode": mode, "errors": errors})
        raise

    traces = [o.trace for o in outcomes if o.trace is not None]
    payload: dict[str, Any] = {
        "mode": mode,
        "questions": len(dataset),
        "answered": len(traces),
        "failed": len(errors),
        "errors": errors,
        "terminated_by": dict(Counter(t.terminated_by for t in traces)),
    }
    payload.update(_accuracy_section(traces, dataset, csv_path))
    payload.update(_reference_section(traces, rt.corpus))
    payload.update(_quality_section(traces))

    _write_run_summary(rt, summary_path, command="eval", complete=True, payload=payload)
    rt.logger.info(
        "Done. Questions=%s Answered=%s Failed=%s Accuracy=%s",
        len(dataset),
        len(traces),
        len(errors),
        payload.get("accuracy"),
    )
    print(json.dumps({"accuracy": payload.get("accuracy"), "answered": len(traces), "failed": len(errors)}))
    if errors:
        _emit_error(
            {
                "error": "PartialFailure",
                "message": f"{len(errors)} of {len(dataset)} questions failed; see {summary_path}",
                "stage": None,
                "failed": len(errors),
            }
        )
        return EXIT_FAILED
    return EXIT_OK


def _accuracy_section(traces: list[PipelineTrace], dataset: Dataset, csv_path: Path) -> dict[str, Any]:
    try:
        return {"accuracy": batch_accuracy(traces, dataset, csv_path=csv_path)}
    except NoSamples:
        return {"accuracy": None}


def _reference_section(traces: list[PipelineTrace], corpus: Optional[Corpus]) -> dict[str, Any]:
    if corpus is None or not traces or not any(p.gold_for for p in corpus.passages):
        return {}
    before, after = reference_correctness_pairs(traces, corpus)
    return {
        "reference_correct_before": sum(before) / len(before),
        "reference_correct_after": sum(after) / len(after),
        "reference_delta": reference_delta(before, after),
    }


def _quality_section(traces: list[PipelineTrace]) -> dict[str, Any]:
    reports = [it.report for t in traces for it in t.iterations[:1] if it.report is not None]
    if not reports:
        return {}
    return {"high_quality_rate": high_quality_rate(reports)}


def _augment(rt: Runtime, d2p: Dataset, *, teacher: GenerationBackend, on_failure: Callable[[RagSample, str], None]) -> Dataset:
    """Turn a seeded fraction of D2' into negatives; kinds rotate so every configured kind is used."""
    cfg = rt.config.synthesis
    seed = rt.config.run.seed
    samples = list(d2p.samples)
    n_neg = round(len(samples) * cfg.negative_fraction)
    chosen = sorted(random.Random(seed).sample(range(len(samples)), n_neg))
    use_backend = cfg.augmenter == "backend" and not rt.hermetic

    for j, i in enumerate(chosen):
        sample = samples[i]
        donor = samples[(i + 1) % len(samples)] if len(samples) > 1 else None
        kinds = cfg.negative_kinds[j % len(cfg.negative_kinds) :] + cfg.negative_kinds[: j % len(cfg.negative_kinds)]
        for kind in kinds:
            try:
                if use_backend:
                    samples[i] = augment_with_backend(
                        sample, kind, teacher, rt.prompts, max_tokens=rt.config.generation.max_tokens
                    )
                else:
                    samples[i] = augment_negative(sample, kind, seed, donor=donor)
                break
            except (CannotSwap, ValueError) as e:
                rt.logger.info("Augmentation %s not applicable to %s: %s", kind, sample.id, e)
            except CovRagError as e:
                rt.logger.warning("Augmentation %s failed for %s: %s", kind, sample.id, e)
        else:
            on_failure(sample, "no negative kind applicable; kept unaugmented")
    return Dataset(samples=tuple(samples), name=d2p.name)


def cmd_synth(args: argparse.Namespace, rt: Runtime) -> int:
    cfg = rt.config
    out_dir = cfg.output.dir
    rejects_path = out_dir / cfg.output.rejects
    summary_path = out_dir / cfg.output.summary
    chain = (args.chain or cfg.synthesis.chain) == "with"

    dataset = load_dataset(Path(args.dataset))
    d1, d2 = split_dataset(dataset, cfg.run.seed)
    rt.logger.info("Split %s samples: D1=%s D2=%s", len(dataset), len(d1), len(d2))

    write_jsonl(rejects_path, [])

    def _reject(sample: RagSample, reason: str) -> None:
        append_jsonl(rejects_path, {**sample.to_json_dict(), "reason": reason})

    seed_backend = _build_backend(cfg.backend, logger=rt.logger)
    teacher = _build_backend(cfg.teacher, logger=rt.logger)
    retriever = _build_retriever(rt, backend=seed_backend)

    stages: dict[str, Any] = {"d1": len(d1), "d2": len(d2)}
    try:
        d2p = sample_rag(
            seed_backend,
            d2,
            retriever,
            rt.prompts,
            max_tokens=cfg.generation.max_tokens,
            temperature=cfg.generation.temperature,
            max_workers=cfg.synthesis.max_workers,
            on_failure=_reject,
            logger=rt.logger,
        )
        stages["sampled"] = len(d2p)
        d2p = _augment(rt, d2p, teacher=teacher, on_failure=_reject)
        stages["negatives"] = sum(1 for s in d2p.samples if s.polarity == "negative")
        write_dataset(out_dir / "d2_sampled.jsonl", d2p)

        annotated = annotate_batch(
            teacher,
            d2p.samples,
            rt.prompts,
            reject_path=rejects_path,
            max_workers=cfg.synthesis.max_workers,
            max_tokens=cfg.generation.verify_max_tokens,
            logger=rt.logger,
        )
        stages["annotated"] = len(annotated)
    except KeyboardInterrupt:
        _write_run_summary(rt, summary_path, command="synth", complete=False, payload={"stages": stages})
        raise

    audit = audit_annotations(annotated)
    write_json(out_dir / cfg.output.audit, audit.to_json_dict())

    result = emit_training_set(
        d1,
        annotated,
        rt.prompts,
        chain=chain,
        cov_keep_fraction=cfg.synthesis.cov_keep_fraction,
        seed=cfg.run.seed,
    )
    write_records(out_dir / cfg.output.training_records, result.records)

    violations = check_split_integrity(result.records)
    payload = {
        "chain": "with" if chain else "without",
        "stages": stages,
        "records": result.to_summary(),
        "audit": audit.to_json_dict(),
        "split_violations": violations,
    }
    _write_run_summary(rt, summary_path, command="synth", complete=not violations, payload=payload)
    rt.logger.info(
        "Done. Records=%s Annotated=%s AuditAgreement=%s",
        len(result.records),
        len(annotated),
        audit.agreement_rate,
    )
    if violations:
        raise CovRagError(f"split integrity violated: {violations[0]}", stage="emit")
    print(json.dumps(result.to_summary(), sort_keys=True))
    return EXIT_OK


def cmd_judge(args: argparse.Namespace, rt: Runtime) -> int:
    cfg = rt.config
    out_dir = cfg.output.dir
    cases = load_cases(Path(args.cases))
    judge = _build_backend(cfg.judge, logger=rt.logger)
    run = run_judge_ranking(
        judge,
        cases,
        rt.prompts,
        seed=cfg.run.seed,
        max_workers=cfg.run.parallelism,
        max_tokens=cfg.generation.max_tokens,
        logger=rt.logger,
    )
    write_jsonl(out_dir / cfg.output.judge_transcripts, run.transcripts)
    payload = {
        "cases": len(cases),
        "ranked": len(run.outcomes),
        "quarantined": len(run.rejects),
        "mean_ranks": aggregate_ranks(run.outcomes) if run.outcomes else {},
        "outcomes": [o.to_json_dict() for o in run.outcomes],
        "rejects": run.rejects,
    }
    _write_run_summary(rt, out_dir / cfg.output.judge_summary, command="judge", complete=True, payload=payload)
    print(json.dumps(payload["mean_ranks"], sort_keys=True))
    return EXIT_OK


def _write_run_summary(rt: Runtime, path: Path, *, command: str, complete: bool, payload: dict[str, Any]) -> None:
    write_json(
        path,
        {
            "command": command,
            "complete": complete,
            "run_started_at": rt.started_at.isoformat(timespec="seconds"),
            "config_path": rt.config_path,
            "hermetic": rt.hermetic,
            "seed": rt.config.run.seed,
            **payload,
        },
    )


def _emit_error(payload: dict[str, Any]) -> None:
    sys.stderr.write(json.dumps(payload, ensure_ascii=False) + "\n")


def _format_exception_short(e: Exception) -> str:
    return f"{type(e).__name__}: {e}"


if __name__ == "__main__":
    raise SystemExit(main())
