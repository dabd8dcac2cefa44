"""Command line front end: run the pipeline, build corpora, score outputs.

``casepipe run`` drives the full flow for a directory of plain-text case
documents: extract, prenormalize, split, detect the source, then push each
segment through the rule path and/or the model path, with shared
harmonization, geocoding, validation, and emission. ``casepipe synth`` writes
a synthetic corpus, and ``casepipe eval`` scores a finished run against a
gold file.

Outputs land in the run's output directory: cases_rule.jsonl/csv and
cases_llm.jsonl/csv (per enabled path), warnings.jsonl, run_summary.json,
and, when a gold file is given, metrics_<path>.json plus report.txt.

Records are emitted sorted by case_id and the warning log is saved in a
stable order, so a rule-path run is byte-reproducible for a fixed
--ingest-ts regardless of worker count.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from time import perf_counter
from typing import Any, Callable, Mapping, Sequence

from casepipe import emit, metrics
from casepipe.config import ConfigError, bundled_path, read_jsonl
from casepipe.extract import (
    EngineSpec,
    ExtractionFailure,
    SourceDocument,
    extract_text,
    prenormalize,
    split_cases,
)
from casepipe.extract import DEFAULT_SPLIT_PATTERNS
from casepipe.geocode import Gazetteer, GeocodeCache, apply_geocode
from casepipe.harmonize import MappingTable, harmonize, identity_table, load_mapping_dir
from casepipe.llm import (
    DEFAULT_BUDGET_CHARS,
    DEFAULT_MAX_REPAIR_ATTEMPTS,
    DEFAULT_TIMEOUT_S,
    TIER_EXTRACT,
    BackendError,
    BackendRequest,
    CandidateParseError,
    build_extraction_prompt,
    call_backend,
    make_backend,
    repair_loop,
    sanitize_candidate,
)
from casepipe.rules import DraftRecord, dispatch, load_rulesets
from casepipe.schema import (
    SchemaDefinition,
    default_schema,
    parse_iso_timestamp,
    validate,
)
from casepipe.sources import UNKNOWN_LABEL, detect_source, load_signatures
from casepipe.synth import FAMILY_LABELS, SynthesisSpec, write_corpus

PATH_CHOICES = ("rule", "llm", "both")
BACKEND_CHOICES = ("wire", "oracle", "dropout_oracle", "invalid_then_fix", "never_fix")

RULE_CASES_NAME = "cases_rule"
LLM_CASES_NAME = "cases_llm"


@dataclass(frozen=True)
class RunConfig:
    """Everything one pipeline run needs, resolved and checkable up front."""

    input_dir: Path
    output_dir: Path
    paths_enabled: str = "both"
    schema_path: Path | None = None
    signatures_path: Path | None = None
    rulesets_dir: Path | None = None
    mappings_dir: Path | None = None
    gazetteer_path: Path | None = None
    cache_path: Path | None = None
    backend: str = "oracle"
    backend_params: Mapping[str, Any] = field(default_factory=dict)
    budget_chars: int = DEFAULT_BUDGET_CHARS
    max_repair_attempts: int = DEFAULT_MAX_REPAIR_ATTEMPTS
    max_in_flight: int = 1
    gold_path: Path | None = None
    seed: int | None = None
    ingest_ts: str | None = None

    def __post_init__(self) -> None:
        if self.paths_enabled not in PATH_CHOICES:
            raise ConfigError(f"paths_enabled must be one of {PATH_CHOICES}")
        if self.backend not in BACKEND_CHOICES:
            raise ConfigError(f"backend must be one of {BACKEND_CHOICES}")
        if self.budget_chars < 1:
            raise ConfigError("budget_chars must be positive")
        if self.max_repair_attempts < 1:
            raise ConfigError("max_repair_attempts must be at least 1")
        if self.max_in_flight < 1:
            raise ConfigError("max_in_flight must be at least 1")
        if self.ingest_ts is not None and parse_iso_timestamp(self.ingest_ts) is None:
            raise ConfigError(f"ingest_ts is not an ISO timestamp: {self.ingest_ts!r}")

    def resolved_schema_path(self) -> Path:
        return self.schema_path or bundled_path("schema.jsonl")

    def resolved_signatures_path(self) -> Path:
        return self.signatures_path or bundled_path("signatures.jsonl")

    def resolved_rulesets_dir(self) -> Path:
        return self.rulesets_dir or bundled_path("rulesets")

    def resolved_mappings_dir(self) -> Path:
        return self.mappings_dir or bundled_path("mappings")

    def resolved_gazetteer_path(self) -> Path:
        return self.gazetteer_path or bundled_path("gazetteer.jsonl")

    def check_paths(self) -> None:
        if not self.input_dir.is_dir():
            raise ConfigError(f"input_dir does not exist: {self.input_dir}")
        for label, path in (
            ("schema", self.resolved_schema_path()),
            ("signatures", self.resolved_signatures_path()),
            ("gazetteer", self.resolved_gazetteer_path()),
        ):
            if not path.is_file():
                raise ConfigError(f"{label} file does not exist: {path}")
        for label, directory in (
            ("rulesets", self.resolved_rulesets_dir()),
            ("mappings", self.resolved_mappings_dir()),
        ):
            if not directory.is_dir():
                raise ConfigError(f"{label} directory does not exist: {directory}")
        if self.gold_path is not None and not self.gold_path.is_file():
            raise ConfigError(f"gold file does not exist: {self.gold_path}")

    def digest(self) -> str:
        payload = {
            "input_dir": str(self.input_dir),
            "output_dir": str(self.output_dir),
            "paths_enabled": self.paths_enabled,
            "schema_path": str(self.resolved_schema_path()),
            "signatures_path": str(self.resolved_signatures_path()),
            "rulesets_dir": str(self.resolved_rulesets_dir()),
            "mappings_dir": str(self.resolved_mappings_dir()),
            "gazetteer_path": str(self.resolved_gazetteer_path()),
            "cache_path": str(self.cache_path) if self.cache_path else None,
            "backend": self.backend,
            "backend_params": dict(self.backend_params),
            "budget_chars": self.budget_chars,
            "max_repair_attempts": self.max_repair_attempts,
            "max_in_flight": self.max_in_flight,
            "gold_path": str(self.gold_path) if self.gold_path else None,
            "seed": self.seed,
        }
        blob = json.dumps(payload, sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass
class RunSummary:
    documents_in: int
    segments: int
    records_out_rule: int
    records_out_llm: int
    warnings_by_severity: dict[str, int]
    runtime: dict[str, dict[str, Any]]
    repair_log: dict[str, list[dict[str, Any]]]
    backend_calls: dict[str, int]
    geocode_cache: dict[str, int]
    gazetteer_lookups: int
    config_digest: str

    def as_dict(self) -> dict[str, Any]:
        return {
            "documents_in": self.documents_in,
            "segments": self.segments,
            "records_out_rule": self.records_out_rule,
            "records_out_llm": self.records_out_llm,
            "warnings_by_severity": self.warnings_by_severity,
            "runtime": self.runtime,
            "repair_log": self.repair_log,
            "backend_calls": self.backend_calls,
            "geocode_cache": self.geocode_cache,
            "gazetteer_lookups": self.gazetteer_lookups,
            "config_digest": self.config_digest,
        }


@dataclass
class _DocumentResult:
    document_id: str
    segments: int = 0
    rule_records: list[dict] = field(default_factory=list)
    llm_records: list[dict] = field(default_factory=list)
    rule_log: list[dict] = field(default_factory=list)
    llm_log: list[dict] = field(default_factory=list)
    rule_runtimes: list[tuple[str, float]] = field(default_factory=list)
    llm_runtimes: list[tuple[str, float]] = field(default_factory=list)


class _Pipeline:
    """Loaded resources plus the per-document and per-segment steps."""

    def __init__(self, config: RunConfig):
        config.check_paths()
        self.config = config
        self.schema = SchemaDefinition.load(config.resolved_schema_path())
        self.signatures = load_signatures(config.resolved_signatures_path())
        self.rulesets = load_rulesets(config.resolved_rulesets_dir())
        self.mappings = load_mapping_dir(config.resolved_mappings_dir())
        if UNKNOWN_LABEL not in self.mappings:
            raise ConfigError(
                f"mappings directory lacks a table for {UNKNOWN_LABEL!r} sources"
            )
        for signature in self.signatures:
            if signature.source_label not in self.mappings:
                raise ConfigError(
                    f"no mapping table for source {signature.source_label!r}"
                )
        self.gazetteer = Gazetteer.load(config.resolved_gazetteer_path())
        self.cache = GeocodeCache(config.cache_path)
        self.rule_enabled = config.paths_enabled in ("rule", "both")
        self.llm_enabled = config.paths_enabled in ("llm", "both")
        self.backend = None
        if self.llm_enabled:
            params = dict(config.backend_params)
            if config.seed is not None:
                params.setdefault("seed", config.seed)
            self.backend = make_backend(config.backend, params)
        self.ingest_ts = config.ingest_ts or datetime.now(timezone.utc).isoformat(
            timespec="seconds"
        )
        self.warning_log = emit.WarningLog(clock=lambda: self.ingest_ts)
        self.engine_chain = [EngineSpec(engine="plaintext")]
        self._identity_tables: dict[str, MappingTable] = {}

    # -- helpers ----------------------------------------------------------

    def _identity_for(self, source_label: str) -> MappingTable:
        table = self._identity_tables.get(source_label)
        if table is None:
            mapping = self.mappings.get(source_label) or self.mappings[UNKNOWN_LABEL]
            table = identity_table(self.schema, tz_default=mapping.tz_default)
            self._identity_tables[source_label] = table
        return table

    def _sink(
        self, document_id: str, case_id: str | None
    ) -> tuple[Callable[[str], Callable[[str, str], None]], Callable[[], int]]:
        """Per-case warning adapter that also counts what it forwarded."""
        count = [0]

        def for_stage(stage: str, severity: str = "warning"):
            def _warn(code: str, message: str) -> None:
                count[0] += 1
                self.warning_log.log(
                    document_id=document_id,
                    case_id=case_id,
                    stage=stage,
                    severity=severity,
                    code=code,
                    message=message,
                )

            return _warn

        return for_stage, lambda: count[0]

    def _stamp(
        self,
        record: dict,
        *,
        case_id: str,
        detection,
        engine_used: str,
        document_id: str,
        extraction_path: str,
        field_origins: dict[str, list[int]],
    ) -> None:
        record["case_id"] = case_id
        prov = record.setdefault("provenance", {})
        prov["source_label"] = detection.source_label
        prov["source_family"] = detection.family
        prov["extraction_path"] = extraction_path
        prov["engine_used"] = engine_used
        prov["document_id"] = document_id
        prov["ingest_ts"] = self.ingest_ts
        prov["repair_count"] = 0
        prov["field_origins"] = field_origins

    def _geocode_and_count(self, record: dict, warn_geocode) -> None:
        apply_geocode(record, self.gazetteer, self.cache, on_warning=warn_geocode)
        spatial = record.get("spatial", {})
        has_place_text = any(
            spatial.get(k) for k in ("last_seen_location", "city", "postal_code")
        )
        if spatial.get("geocode_method") == "none" and has_place_text:
            warn_geocode(
                "geocode_no_match",
                "no gazetteer match for the record's place text",
            )

    # -- per-segment paths -------------------------------------------------

    def _run_rule_path(
        self, result: _DocumentResult, segment, detection, case_id: str, engine: str
    ) -> None:
        for_stage, warned = self._sink(result.document_id, case_id)
        started = perf_counter()
        draft: DraftRecord = dispatch(
            detection, segment, self.rulesets, on_warning=for_stage("parse")
        )
        harmonized = harmonize(
            draft,
            self.mappings.get(detection.source_label) or self.mappings[UNKNOWN_LABEL],
            self.schema,
            on_warning=for_stage("harmonize"),
        )
        record = harmonized.record
        origins: dict[str, list[int]] = {}
        for source_key, target_path in harmonized.key_trace:
            candidate = draft.candidates.get(source_key)
            if candidate is not None:
                origins[target_path] = [
                    segment.segment_index,
                    candidate.char_start,
                    candidate.char_end,
                ]
        self._stamp(
            record,
            case_id=case_id,
            detection=detection,
            engine_used=engine,
            document_id=result.document_id,
            extraction_path="rule",
            field_origins=origins,
        )
        self._geocode_and_count(record, for_stage("geocode"))
        record["provenance"]["warnings_count"] = warned()
        report = validate(record, self.schema)
        if not report.valid:
            warn = for_stage("validate")
            for violation in report.violations:
                warn(
                    "validation_violation",
                    f"{violation.field_path}: {violation.code}: {violation.message}",
                )
        result.rule_records.append(record)
        result.rule_log.append(
            {
                "case_id": case_id,
                "pre_valid": report.valid,
                "post_valid": report.valid,
                "attempts": 0,
            }
        )
        result.rule_runtimes.append((case_id, perf_counter() - started))

    def _run_llm_path(
        self, result: _DocumentResult, segment, detection, case_id: str, engine: str
    ) -> None:
        assert self.backend is not None
        for_stage, warned = self._sink(result.document_id, case_id)
        started = perf_counter()
        prompt = build_extraction_prompt(
            segment.text, self.schema, budget_chars=self.config.budget_chars
        )
        request = BackendRequest(
            prompt=prompt,
            tier=TIER_EXTRACT,
            timeout_s=DEFAULT_TIMEOUT_S,
            request_id=f"{case_id}:extract",
        )
        try:
            response = call_backend(request, self.backend)
            candidate = sanitize_candidate(
                response.text, self.schema, on_warning=for_stage("sanitize")
            )
        except BackendError as exc:
            for_stage("parse", "error")("backend_error", str(exc))
            result.llm_runtimes.append((case_id, perf_counter() - started))
            return
        except CandidateParseError as exc:
            for_stage("sanitize", "error")("candidate_parse_error", str(exc))
            result.llm_runtimes.append((case_id, perf_counter() - started))
            return
        harmonized = harmonize(
            candidate,
            self._identity_for(detection.source_label),
            self.schema,
            on_warning=for_stage("harmonize"),
        )
        record = harmonized.record
        self._stamp(
            record,
            case_id=case_id,
            detection=detection,
            engine_used=engine,
            document_id=result.document_id,
            extraction_path="llm",
            field_origins={},
        )
        self._geocode_and_count(record, for_stage("geocode"))
        record["provenance"]["warnings_count"] = warned()
        outcome = repair_loop(
            record,
            self.schema,
            self.backend,
            max_attempts=self.config.max_repair_attempts,
            on_warning=for_stage("repair"),
            request_prefix=f"{case_id}:repair",
        )
        pre_valid = outcome.attempts == 0 and outcome.passed
        record = outcome.record
        record["provenance"]["repair_count"] = outcome.attempts
        post_valid = outcome.passed and validate(record, self.schema).valid
        result.llm_log.append(
            {
                "case_id": case_id,
                "pre_valid": pre_valid,
                "post_valid": post_valid,
                "attempts": outcome.attempts,
            }
        )
        if post_valid:
            result.llm_records.append(record)
        else:
            if outcome.attempts > 0:
                for_stage("repair", "error")(
                    "repair_exhausted",
                    f"still invalid after {outcome.attempts} repair attempts",
                )
            for_stage("emit", "error")(
                "record_withheld", "record failed validation and was not emitted"
            )
        result.llm_runtimes.append((case_id, perf_counter() - started))

    # -- per-document ------------------------------------------------------

    def process_document(self, path: Path) -> _DocumentResult:
        document_id = path.stem
        result = _DocumentResult(document_id=document_id)
        doc = SourceDocument(
            document_id=document_id, path=path, declared_kind="plaintext"
        )
        try:
            extracted = extract_text(doc, self.engine_chain)
        except ExtractionFailure as exc:
            self.warning_log.log(
                document_id=document_id,
                stage="extract",
                severity="error",
                code="extraction_failed",
                message=str(exc),
            )
            return result
        if not extracted.quality_ok:
            self.warning_log.log(
                document_id=document_id,
                stage="extract",
                severity="warning",
                code="low_quality_text",
                message=(
                    f"best effort text: {extracted.char_count} chars, "
                    f"alnum ratio {extracted.alnum_ratio:.2f}"
                ),
            )
        normalized = prenormalize(extracted.text)
        segments = split_cases(normalized, DEFAULT_SPLIT_PATTERNS)
        result.segments = len(segments)
        for segment in segments:
            detection = detect_source(segment.text, self.signatures)
            case_id = f"{document_id}#s{segment.segment_index}"
            if detection.source_label == UNKNOWN_LABEL:
                self.warning_log.log(
                    document_id=document_id,
                    case_id=case_id,
                    stage="detect",
                    severity="warning",
                    code="unknown_source",
                    message="no signature reached its marker threshold",
                )
            if self.rule_enabled:
                self._run_rule_path(
                    result, segment, detection, case_id, extracted.engine_used
                )
            if self.llm_enabled:
                self._run_llm_path(
                    result, segment, detection, case_id, extracted.engine_used
                )
        return result


def _runtime_block(samples: list[tuple[str, float]]) -> dict[str, Any]:
    ordered = [seconds for _, seconds in sorted(samples, key=lambda kv: kv[0])]
    block: dict[str, Any] = {"samples": ordered}
    if ordered:
        mean_s, p95_s = metrics.runtime_stats(ordered)
        block["mean_s"] = mean_s
        block["p95_s"] = p95_s
    else:
        block["mean_s"] = None
        block["p95_s"] = None
    return block


def _write_path_outputs(
    output_dir: Path,
    stem: str,
    records: list[dict],
    schema: SchemaDefinition,
) -> int:
    records = sorted(records, key=lambda r: r["case_id"])
    written = emit.write_records_jsonl(output_dir / f"{stem}.jsonl", records)
    emit.write_records_csv(output_dir / f"{stem}.csv", records, schema)
    return written


def run(config: RunConfig) -> RunSummary:
    """Process every document under the config and write all run artifacts."""
    pipeline = _Pipeline(config)
    files = sorted(config.input_dir.glob("*.txt"))
    results: list[_DocumentResult] = []
    if config.max_in_flight == 1 or len(files) <= 1:
        for path in files:
            results.append(pipeline.process_document(path))
    else:
        with ThreadPoolExecutor(max_workers=config.max_in_flight) as pool:
            results = list(pool.map(pipeline.process_document, files))

    output_dir = config.output_dir
    output_dir.mkdir(parents=True, exist_ok=True)
    rule_records = [r for result in results for r in result.rule_records]
    llm_records = [r for result in results for r in result.llm_records]
    records_out_rule = records_out_llm = 0
    if pipeline.rule_enabled:
        records_out_rule = _write_path_outputs(
            output_dir, RULE_CASES_NAME, rule_records, pipeline.schema
        )
    if pipeline.llm_enabled:
        records_out_llm = _write_path_outputs(
            output_dir, LLM_CASES_NAME, llm_records, pipeline.schema
        )
    pipeline.warning_log.save(output_dir / "warnings.jsonl")

    repair_log = {
        "rule": sorted(
            (row for result in results for row in result.rule_log),
            key=lambda row: row["case_id"],
        ),
        "llm": sorted(
            (row for result in results for row in result.llm_log),
            key=lambda row: row["case_id"],
        ),
    }
    backend = pipeline.backend
    summary = RunSummary(
        documents_in=len(files),
        segments=sum(result.segments for result in results),
        records_out_rule=records_out_rule,
        records_out_llm=records_out_llm,
        warnings_by_severity=pipeline.warning_log.counts_by_severity(),
        runtime={
            "rule": _runtime_block(
                [s for result in results for s in result.rule_runtimes]
            ),
            "llm": _runtime_block(
                [s for result in results for s in result.llm_runtimes]
            ),
        },
        repair_log=repair_log,
        backend_calls={
            "extract": backend.call_count("extract") if backend else 0,
            "repair": backend.call_count("repair") if backend else 0,
        },
        geocode_cache={
            "hits": pipeline.cache.hits,
            "misses": pipeline.cache.misses,
            "entries": len(pipeline.cache),
        },
        gazetteer_lookups=pipeline.gazetteer.lookup_count,
        config_digest=config.digest(),
    )
    summary_path = output_dir / "run_summary.json"
    summary_path.write_text(
        json.dumps(summary.as_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    return summary


# ---------------------------------------------------------------------------
# Evaluation


def evaluate_outputs(
    output_dir: Path,
    gold_path: Path,
    schema: SchemaDefinition,
    config_digest: str = "unrecorded",
    on_warning: metrics.WarnFn | None = None,
) -> dict[str, metrics.MetricsReport]:
    """Score each path's emitted JSONL against gold; write reports + table."""
    if not gold_path.is_file():
        raise ConfigError(f"gold file does not exist: {gold_path}")
    gold = read_jsonl(gold_path)
    summary: dict[str, Any] = {}
    summary_path = output_dir / "run_summary.json"
    if summary_path.is_file():
        summary = json.loads(summary_path.read_text(encoding="utf-8"))
        config_digest = summary.get("config_digest", config_digest)
    reports: dict[str, metrics.MetricsReport] = {}
    for label, stem in (("rule", RULE_CASES_NAME), ("llm", LLM_CASES_NAME)):
        cases_path = output_dir / f"{stem}.jsonl"
        if not cases_path.is_file():
            continue
        parsed = read_jsonl(cases_path)
        run_log = summary.get("repair_log", {}).get(label, [])
        runtimes = summary.get("runtime", {}).get(label, {}).get("samples", [])
        report = metrics.build_report(
            parsed,
            gold,
            schema=schema,
            run_log=run_log,
            runtimes=runtimes,
            on_warning=on_warning,
        )
        reports[label] = report
        (output_dir / f"metrics_{label}.json").write_text(
            json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
    if not reports:
        raise ConfigError(f"no cases_*.jsonl files to evaluate in {output_dir}")
    table = metrics.format_report(reports, config_digest)
    (output_dir / "report.txt").write_text(table, encoding="utf-8")
    return reports


def evaluate(config: RunConfig) -> dict[str, metrics.MetricsReport]:
    if config.gold_path is None:
        raise ConfigError("evaluation needs a gold file (--gold)")
    schema = SchemaDefinition.load(config.resolved_schema_path())

    def _warn(code: str, message: str) -> None:
        print(f"eval: {code}: {message}", file=sys.stderr)

    return evaluate_outputs(
        config.output_dir,
        config.gold_path,
        schema,
        config_digest=config.digest(),
        on_warning=_warn,
    )


# ---------------------------------------------------------------------------
# Argument parsing


def _parse_params(pairs: Sequence[str]) -> dict[str, str]:
    params: dict[str, str] = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"backend param must look like key=value: {pair!r}")
        params[key] = value
    return params


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="casepipe",
        description="Dual-path case document extraction pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="process a directory of .txt documents")
    run_p.add_argument("--input", required=True, type=Path, help="document directory")
    run_p.add_argument("--output", required=True, type=Path, help="output directory")
    run_p.add_argument("--paths", choices=PATH_CHOICES, default="both")
    run_p.add_argument("--schema", type=Path, default=None)
    run_p.add_argument("--signatures", type=Path, default=None)
    run_p.add_argument("--rulesets", type=Path, default=None)
    run_p.add_argument("--mappings", type=Path, default=None)
    run_p.add_argument("--gazetteer", type=Path, default=None)
    run_p.add_argument("--cache", type=Path, default=None, help="geocode cache file")
    run_p.add_argument("--backend", choices=BACKEND_CHOICES, default="oracle")
    run_p.add_argument(
        "--backend-param",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="backend knob, repeatable (e.g. rate=0.1)",
    )
    run_p.add_argument("--budget-chars", type=int, default=DEFAULT_BUDGET_CHARS)
    run_p.add_argument(
        "--max-repair-attempts", type=int, default=DEFAULT_MAX_REPAIR_ATTEMPTS
    )
    run_p.add_argument("--max-in-flight", type=int, default=1)
    run_p.add_argument("--gold", type=Path, default=None, help="evaluate after the run")
    run_p.add_argument("--seed", type=int, default=None)
    run_p.add_argument(
        "--ingest-ts",
        default=None,
        help="fixed provenance timestamp for byte-reproducible runs",
    )

    synth_p = sub.add_parser("synth", help="write a synthetic corpus")
    synth_p.add_argument("--out", required=True, type=Path)
    synth_p.add_argument("--seed", type=int, default=0)
    synth_p.add_argument("--count", type=int, default=5, help="documents per family")
    synth_p.add_argument(
        "--families",
        default=",".join(sorted(FAMILY_LABELS)),
        help="comma-separated families to generate",
    )
    synth_p.add_argument("--cue-rate", type=float, default=0.7)
    synth_p.add_argument("--dropout", type=float, default=0.0)

    eval_p = sub.add_parser("eval", help="score run outputs against a gold file")
    eval_p.add_argument("--output", required=True, type=Path, help="run output dir")
    eval_p.add_argument("--gold", required=True, type=Path)
    eval_p.add_argument("--schema", type=Path, default=None)
    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    config = RunConfig(
        input_dir=args.input,
        output_dir=args.output,
        paths_enabled=args.paths,
        schema_path=args.schema,
        signatures_path=args.signatures,
        rulesets_dir=args.rulesets,
        mappings_dir=args.mappings,
        gazetteer_path=args.gazetteer,
        cache_path=args.cache,
        backend=args.backend,
        backend_params=_parse_params(args.backend_param),
        budget_chars=args.budget_chars,
        max_repair_attempts=args.max_repair_attempts,
        max_in_flight=args.max_in_flight,
        gold_path=args.gold,
        seed=args.seed,
        ingest_ts=args.ingest_ts,
    )
    summary = run(config)
    print(f"documents in:      {summary.documents_in}")
    print(f"segments:          {summary.segments}")
    print(f"records out (rule): {summary.records_out_rule}")
    print(f"records out (llm):  {summary.records_out_llm}")
    print(f"warnings:          {summary.warnings_by_severity or '{}'}")
    print(f"summary file:      {config.output_dir / 'run_summary.json'}")
    if config.gold_path is not None:
        evaluate(config)
        print(f"report file:       {config.output_dir / 'report.txt'}")
        print((config.output_dir / "report.txt").read_text(encoding="utf-8"))
    return 0


def _cmd_synth(args: argparse.Namespace) -> int:
    families = [f.strip() for f in args.families.split(",") if f.strip()]
    spec = SynthesisSpec(
        seed=args.seed,
        count_per_family={family: args.count for family in families},
        narrative_cue_rate=args.cue_rate,
        label_dropout_rate=args.dropout,
    )
    cases = write_corpus(spec, args.out)
    print(f"wrote {len(cases)} documents to {args.out}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    schema_path = args.schema or bundled_path("schema.jsonl")
    if not schema_path.is_file():
        raise ConfigError(f"schema file does not exist: {schema_path}")
    schema = SchemaDefinition.load(schema_path)

    def _warn(code: str, message: str) -> None:
        print(f"eval: {code}: {message}", file=sys.stderr)

    evaluate_outputs(args.output, args.gold, schema, on_warning=_warn)
    print((args.output / "report.txt").read_text(encoding="utf-8"))
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {"run": _cmd_run, "synth": _cmd_synth, "eval": _cmd_eval}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"casepipe: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
