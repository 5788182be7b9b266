from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Literal, Optional

from models import SIGMA_MODES, SigmaPolicy


BackendKind = Literal["remote", "scripted"]
RetrieverMode = Literal["live", "offline"]
RerankerKind = Literal["lexical", "backend_assisted"]
SearchEngine = Literal["generic", "bing"]
SeparatorStyle = Literal["backslash", "newline"]
AugmenterKind = Literal["deterministic", "backend"]
ChainStyle = Literal["with", "without"]

_BACKEND_KINDS: set[str] = {"remote", "scripted"}
_RETRIEVER_MODES: set[str] = {"live", "offline"}
_RERANKERS: set[str] = {"lexical", "backend_assisted"}
_SEARCH_ENGINES: set[str] = {"generic", "bing"}
_SEPARATORS: set[str] = {"backslash", "newline"}
_AUGMENTERS: set[str] = {"deterministic", "backend"}
_CHAIN_STYLES: set[str] = {"with", "without"}
_NEGATIVE_KINDS: set[str] = {"repeated", "citation_swap", "retrieval_error"}


@dataclass(frozen=True)
class BackendConfig:
    kind: BackendKind
    endpoint_url: str
    model_name: str
    api_key_env: str
    timeout_seconds: float
    retry_attempts: int
    backoff_seconds: tuple[float, ...]
    max_in_flight: int
    user_agent: str
    script_path: Optional[Path] = None


@dataclass(frozen=True)
class RetrieverConfig:
    mode: RetrieverMode
    corpus_path: Optional[Path]
    search_endpoint: str
    search_engine: SearchEngine
    search_api_key_env: str
    max_hits: int
    max_pages: int
    top_k: int
    passage_max_chars: int
    reranker: RerankerKind
    timeout_seconds: float
    retry_attempts: int
    backoff_seconds: tuple[float, ...]
    max_body_bytes: int
    max_redirects: int
    fetch_workers: int
    user_agent: str


@dataclass(frozen=True)
class GenerationConfig:
    max_tokens: int
    verify_max_tokens: int
    temperature: float
    stop_sequences: tuple[str, ...]


@dataclass(frozen=True)
class PromptConfig:
    templates_dir: Optional[Path]
    separator: SeparatorStyle


@dataclass(frozen=True)
class OutputConfig:
    dir: Path
    traces: str
    summary: str
    per_sample_csv: str
    training_records: str
    rejects: str
    audit: str
    judge_transcripts: str
    judge_summary: str


@dataclass(frozen=True)
class SynthesisConfig:
    augmenter: AugmenterKind
    negative_kinds: tuple[str, ...]
    negative_fraction: float
    cov_keep_fraction: float
    chain: ChainStyle
    max_workers: int


@dataclass(frozen=True)
class RunConfig:
    seed: int
    parallelism: int
    log_dir: Path
    log_level: str


@dataclass(frozen=True)
class AppConfig:
    backend: BackendConfig
    teacher: BackendConfig
    judge: BackendConfig
    retriever: RetrieverConfig
    sigma: SigmaPolicy
    generation: GenerationConfig
    prompts: PromptConfig
    output: OutputConfig
    synthesis: SynthesisConfig
    run: RunConfig

    def with_overrides(
        self,
        *,
        seed: Optional[int] = None,
        parallelism: Optional[int] = None,
        max_iterations: Optional[int] = None,
        hermetic: bool = False,
    ) -> "AppConfig":
        """Apply CLI flag overrides. Hermetic swaps every backend to scripted and the retriever to offline."""
        cfg = self
        if seed is not None or parallelism is not None:
            cfg = replace(
                cfg,
                run=replace(
                    cfg.run,
                    seed=cfg.run.seed if seed is None else int(seed),
                    parallelism=cfg.run.parallelism if parallelism is None else max(1, int(parallelism)),
                ),
            )
        if max_iterations is not None:
            cfg = replace(cfg, sigma=replace(cfg.sigma, max_iterations=int(max_iterations)))
        if hermetic:
            for name in ("backend", "teacher", "judge"):
                b: BackendConfig = getattr(cfg, name)
                if b.script_path is None:
                    raise ValueError(f"--hermetic requires {name}.script_path")
                cfg = replace(cfg, **{name: replace(b, kind="scripted")})
            if cfg.retriever.corpus_path is None:
                raise ValueError("--hermetic requires retriever.corpus_path")
            cfg = replace(cfg, retriever=replace(cfg.retriever, mode="offline", reranker="lexical"))
        return cfg


def _require_dict(obj: Any, path: str) -> dict[str, Any]:
    if not isinstance(obj, dict):
        raise ValueError(f"Expected mapping at {path}")
    return obj


def _choice(value: Any, allowed: set[str], path: str) -> str:
    v = str(value).strip().lower()
    if v not in allowed:
        raise ValueError(f"Expected {path} to be one of: {', '.join(sorted(allowed))}")
    return v


def _optional_path(value: Any) -> Optional[Path]:
    if value is None or not str(value).strip():
        return None
    return Path(str(value))


def _backoff(raw: Any, path: str) -> tuple[float, ...]:
    if raw is None:
        return (1.0, 2.0, 4.0)
    if not isinstance(raw, list):
        raise ValueError(f"Expected {path} to be a list of seconds")
    out = tuple(float(x) for x in raw)
    if any(x < 0 for x in out):
        raise ValueError(f"Expected {path} entries to be >= 0")
    return out


def _parse_backend(raw: dict[str, Any], path: str, *, base: Optional[BackendConfig] = None) -> BackendConfig:
    retry_raw = _require_dict(raw.get("retry", {}), f"{path}.retry")
    if base is not None:
        # Partial sections inherit from the section they default to.
        merged = {
            "kind": base.kind,
            "endpoint_url": base.endpoint_url,
            "model_name": base.model_name,
            "api_key_env": base.api_key_env,
            "timeout_seconds": base.timeout_seconds,
            "max_in_flight": base.max_in_flight,
            "user_agent": base.user_agent,
            "script_path": str(base.script_path) if base.script_path else None,
        }
        merged.update(raw)
        raw = merged
        retry_raw = {"attempts": base.retry_attempts, "backoff_seconds": list(base.backoff_seconds), **retry_raw}

    attempts = int(retry_raw.get("attempts", 3))
    if attempts < 1:
        raise ValueError(f"Expected {path}.retry.attempts >= 1")
    max_in_flight = int(raw.get("max_in_flight", 4))
    if max_in_flight < 1:
        raise ValueError(f"Expected {path}.max_in_flight >= 1")
    return BackendConfig(
        kind=_choice(raw.get("kind", "remote"), _BACKEND_KINDS, f"{path}.kind"),  # type: ignore[arg-type]
        endpoint_url=str(raw.get("endpoint_url", "") or ""),
        model_name=str(raw.get("model_name", "") or ""),
        api_key_env=str(raw.get("api_key_env", "") or ""),
        timeout_seconds=float(raw.get("timeout_seconds", 60)),
        retry_attempts=attempts,
        backoff_seconds=_backoff(retry_raw.get("backoff_seconds"), f"{path}.retry.backoff_seconds"),
        max_in_flight=max_in_flight,
        user_agent=str(raw.get("user_agent", "covrag/1.0")),
        script_path=_optional_path(raw.get("script_path")),
    )


def _parse_retriever(raw: dict[str, Any]) -> RetrieverConfig:
    retry_raw = _require_dict(raw.get("retry", {}), "retriever.retry")
    top_k = int(raw.get("top_k", 5))
    if not 1 <= top_k <= 5:
        raise ValueError("Expected retriever.top_k in 1..5")
    passage_max_chars = int(raw.get("passage_max_chars", 600))
    if passage_max_chars < 1:
        raise ValueError("Expected retriever.passage_max_chars >= 1")
    return RetrieverConfig(
        mode=_choice(raw.get("mode", "offline"), _RETRIEVER_MODES, "retriever.mode"),  # type: ignore[arg-type]
        corpus_path=_optional_path(raw.get("corpus_path")),
        search_endpoint=str(raw.get("search_endpoint", "") or ""),
        search_engine=_choice(raw.get("search_engine", "generic"), _SEARCH_ENGINES, "retriever.search_engine"),  # type: ignore[arg-type]
        search_api_key_env=str(raw.get("search_api_key_env", "") or ""),
        max_hits=int(raw.get("max_hits", 10)),
        max_pages=int(raw.get("max_pages", 5)),
        top_k=top_k,
        passage_max_chars=passage_max_chars,
        reranker=_choice(raw.get("reranker", "lexical"), _RERANKERS, "retriever.reranker"),  # type: ignore[arg-type]
        timeout_seconds=float(raw.get("timeout_seconds", 20)),
        retry_attempts=max(1, int(retry_raw.get("attempts", 2))),
        backoff_seconds=_backoff(retry_raw.get("backoff_seconds", [0.5, 1.0]), "retriever.retry.backoff_seconds"),
        max_body_bytes=int(raw.get("max_body_bytes", 1024 * 1024)),
        max_redirects=int(raw.get("max_redirects", 3)),
        fetch_workers=max(1, int(raw.get("fetch_workers", 4))),
        user_agent=str(raw.get("user_agent", "covrag/1.0")),
    )


def _parse_sigma(raw: dict[str, Any]) -> SigmaPolicy:
    defaults = SigmaPolicy()
    return SigmaPolicy(
        mode=_choice(raw.get("mode", defaults.mode), set(SIGMA_MODES), "sigma.mode"),
        ref_min=float(raw.get("ref_min", defaults.ref_min)),
        correctness_min=float(raw.get("correctness_min", defaults.correctness_min)),
        bias_max=float(raw.get("bias_max", defaults.bias_max)),
        truthfulness_min=float(raw.get("truthfulness_min", defaults.truthfulness_min)),
        require_judgment_false=bool(raw.get("require_judgment_false", defaults.require_judgment_false)),
        max_iterations=int(raw.get("max_iterations", defaults.max_iterations)),
    )


def load_config(path: str | Path) -> AppConfig:
    try:
        import yaml  # type: ignore
    except Exception as e:  # pragma: no cover
        raise RuntimeError("Missing dependency PyYAML. Install with `pip install -r requirements.txt`.") from e

    config_path = Path(path)
    raw = yaml.safe_load(config_path.read_text(encoding="utf-8"))
    root = _require_dict(raw, "root")

    backend = _parse_backend(_require_dict(root.get("backend"), "backend"), "backend")
    teacher = _parse_backend(_require_dict(root.get("teacher", {}) or {}, "teacher"), "teacher", base=backend)
    judge = _parse_backend(_require_dict(root.get("judge", {}) or {}, "judge"), "judge", base=teacher)
    retriever = _parse_retriever(_require_dict(root.get("retriever"), "retriever"))

    try:
        sigma = _parse_sigma(_require_dict(root.get("sigma", {}) or {}, "sigma"))
    except ValueError as e:
        raise ValueError(f"Invalid sigma section: {e}") from e

    gen_raw = _require_dict(root.get("generation", {}) or {}, "generation")
    temperature = float(gen_raw.get("temperature", 0.0))
    if temperature < 0:
        raise ValueError("Expected generation.temperature >= 0")
    max_tokens = int(gen_raw.get("max_tokens", 512))
    verify_max_tokens = int(gen_raw.get("verify_max_tokens", max_tokens))
    if max_tokens < 1 or verify_max_tokens < 1:
        raise ValueError("Expected generation.max_tokens and generation.verify_max_tokens >= 1")
    generation = GenerationConfig(
        max_tokens=max_tokens,
        verify_max_tokens=verify_max_tokens,
        temperature=temperature,
        stop_sequences=tuple(str(x) for x in (gen_raw.get("stop_sequences") or []) if str(x)),
    )

    prompts_raw = _require_dict(root.get("prompts", {}) or {}, "prompts")
    prompts = PromptConfig(
        templates_dir=_optional_path(prompts_raw.get("templates_dir")),
        separator=_choice(prompts_raw.get("separator", "backslash"), _SEPARATORS, "prompts.separator"),  # type: ignore[arg-type]
    )

    output_raw = _require_dict(root.get("output", {}) or {}, "output")
    output = OutputConfig(
        dir=Path(str(output_raw.get("dir", "output"))),
        traces=str(output_raw.get("traces", "traces.jsonl")),
        summary=str(output_raw.get("summary", "summary.json")),
        per_sample_csv=str(output_raw.get("per_sample_csv", "per_sample.csv")),
        training_records=str(output_raw.get("training_records", "training_records.jsonl")),
        rejects=str(output_raw.get("rejects", "rejects.jsonl")),
        audit=str(output_raw.get("audit", "audit.json")),
        judge_transcripts=str(output_raw.get("judge_transcripts", "judge_transcripts.jsonl")),
        judge_summary=str(output_raw.get("judge_summary", "judge_summary.json")),
    )

    synth_raw = _require_dict(root.get("synthesis", {}) or {}, "synthesis")
    kinds = [str(x) for x in (synth_raw.get("negative_kinds") or sorted(_NEGATIVE_KINDS))]
    for i, k in enumerate(kinds):
        if k not in _NEGATIVE_KINDS:
            raise ValueError(f"Unsupported negative kind at synthesis.negative_kinds[{i}]: {k}")
    negative_fraction = float(synth_raw.get("negative_fraction", 0.5))
    cov_keep_fraction = float(synth_raw.get("cov_keep_fraction", 1.0))
    for name, value in (("negative_fraction", negative_fraction), ("cov_keep_fraction", cov_keep_fraction)):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"Expected synthesis.{name} in [0,1]")
    synthesis = SynthesisConfig(
        augmenter=_choice(synth_raw.get("augmenter", "deterministic"), _AUGMENTERS, "synthesis.augmenter"),  # type: ignore[arg-type]
        negative_kinds=tuple(kinds),
        negative_fraction=negative_fraction,
        cov_keep_fraction=cov_keep_fraction,
        chain=_choice(synth_raw.get("chain", "with"), _CHAIN_STYLES, "synthesis.chain"),  # type: ignore[arg-type]
        max_workers=max(1, int(synth_raw.get("max_workers", 4))),
    )

    run_raw = _require_dict(root.get("run", {}) or {}, "run")
    run = RunConfig(
        seed=int(run_raw.get("seed", 0)),
        parallelism=max(1, int(run_raw.get("parallelism", 1))),
        log_dir=Path(str(run_raw.get("log_dir", "logs"))),
        log_level=str(run_raw.get("log_level", "INFO")).upper(),
    )

    return AppConfig(
        backend=backend,
        teacher=teacher,
        judge=judge,
        retriever=retriever,
        sigma=sigma,
        generation=generation,
        prompts=prompts,
        output=output,
        synthesis=synthesis,
        run=run,
    )
