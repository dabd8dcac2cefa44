"""Output artifacts: canonical JSONL, flattened CSV, and the warning log.

Both files produced by a run carry the same records in the same order; the
CSV is a lossless flattening of the JSONL under the schema (dot-path columns,
lists indexed numerically, empty string for null). Key order in JSON output
is the schema's canonical order, which by construction is plain lexicographic
order at every nesting level.

Warnings never interrupt a run. Every call appends exactly one entry (no
deduplication), codes come from the WARNING_CODES registry below, and a
failing sink file degrades to in-memory logging rather than raising.
"""

from __future__ import annotations

import csv
import json
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from casepipe.schema import (
    KIND_INTEGER,
    KIND_LIST,
    KIND_SECTION,
    SchemaDefinition,
    assemble_record,
    flatten_leaves,
)

STAGES = (
    "extract",
    "detect",
    "parse",
    "sanitize",
    "harmonize",
    "geocode",
    "validate",
    "repair",
    "emit",
)
SEVERITIES = ("info", "warning", "error")

# Registry of every warning code the pipeline can emit. log() rejects codes
# not listed here, so a typo fails loudly in tests instead of silently
# fragmenting the log vocabulary.
WARNING_CODES = {
    "engine_error": "a text extraction engine exited with an error",
    "engine_timeout": "a text extraction engine hit its time limit",
    "low_quality_text": "no engine met the quality floor; best-effort text used",
    "extraction_failed": "every engine failed; the document was skipped",
    "unknown_source": "no source signature reached the marker threshold",
    "unknown_source_fallback": "unknown source routed to the fallback rule set",
    "duplicate_field_match": "a later rule match for an already-filled field was ignored",
    "candidate_parse_error": "no structured object found in a backend response",
    "unknown_key_dropped": "candidate carried a key outside the schema",
    "backend_error": "backend call failed after retries",
    "empty_response": "backend returned an empty response",
    "unmapped_key": "draft key had no mapping row and was dropped",
    "unparseable_timestamp": "timestamp text could not be normalized",
    "unparseable_height": "height text could not be normalized",
    "unparseable_weight": "weight text could not be normalized",
    "bad_enum_value": "value outside the field's allowed set",
    "uncoercible_value": "value could not be coerced to the field's type",
    "duplicate_target": "two source keys mapped onto one already-filled field",
    "ambiguous_place": "place name exists in several regions; no match recorded",
    "geocode_no_match": "place not found in the gazetteer",
    "validation_violation": "a schema violation on an emitted record",
    "repair_exhausted": "record still invalid after the repair attempt limit",
    "repair_attempt_failed": "a repair-tier backend call failed",
    "non_minimal_edit_reverted": "a repair touched fields outside the cited violations",
    "record_withheld": "an invalid record was withheld from output",
    "io_error": "an output artifact could not be written",
}


# ---------------------------------------------------------------------------
# JSONL


def canonical_json(record: Mapping[str, Any]) -> str:
    return json.dumps(record, ensure_ascii=False, sort_keys=True)


def write_records_jsonl(path: str | Path, records: Iterable[Mapping[str, Any]]) -> int:
    """One canonical JSON object per line, UTF-8, LF. Returns the line count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            fh.write(canonical_json(record))
            fh.write("\n")
            count += 1
    return count


# ---------------------------------------------------------------------------
# Flat CSV


def _format_cell(value: Any) -> str:
    if value is None:
        return ""
    if value is True:
        return "true"
    if value is False:
        return "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def flatten_record(record: Mapping[str, Any], schema: SchemaDefinition) -> dict[str, str]:
    """Dot-path columns for one record, in canonical column order.

    Nulls become empty strings; empty lists and maps produce no columns at
    all (their absence is what marks them empty on the way back in).
    """
    cells = {}
    for path, value in flatten_leaves(dict(record)).items():
        if isinstance(value, (list, dict)) and not value:
            continue
        cells[path] = _format_cell(value)
    return {column: cells[column] for column in column_order(cells, schema)}


def column_order(columns: Iterable[str], schema: SchemaDefinition) -> list[str]:
    """Order columns by schema position, then numerically within lists."""
    anchor_index = {e.field_path: i for i, e in enumerate(schema.entries)}

    def natural(segment: str) -> tuple:
        if segment.isdigit():
            return (0, int(segment), "")
        return (1, 0, segment)

    def key(column: str) -> tuple:
        parts = column.split(".")
        for take in range(len(parts), 0, -1):
            candidate = ".".join(parts[:take])
            if candidate in anchor_index:
                suffix = tuple(natural(s) for s in parts[take:])
                return (anchor_index[candidate], suffix, column)
        return (len(anchor_index), (), column)

    return sorted(columns, key=key)


def _coerce_cell(raw: str, kind: str) -> Any:
    """Parse a CSV cell by schema kind; unparseable text is kept verbatim so
    the validator can point at it instead of it silently becoming null."""
    if kind == KIND_INTEGER:
        try:
            return int(raw)
        except ValueError:
            return raw
    if kind == "decimal":
        try:
            return float(raw)
        except ValueError:
            return raw
    if kind == "boolean":
        if raw == "true":
            return True
        if raw == "false":
            return False
        return raw
    return raw


def unflatten_row(row: Mapping[str, str], schema: SchemaDefinition) -> dict[str, Any]:
    """Inverse of flatten_record under the schema's typing.

    Empty cells become nulls (or stay out of lists/maps). Unknown columns are
    grafted into the candidate at their dotted position so validation can
    flag them rather than them vanishing.
    """
    values: dict[str, Any] = {}
    lists: dict[str, list[tuple[int, str]]] = {}
    maps: dict[str, dict[str, list[tuple[int, Any]]]] = {}
    unknown: list[tuple[str, str]] = []
    open_maps = [
        e.field_path
        for e in schema.entries
        if e.kind == KIND_SECTION and e.pattern is not None
    ]

    for column, raw in row.items():
        if raw == "":
            continue
        entry = schema.entry(column)
        if entry is not None and entry.kind not in (KIND_SECTION, KIND_LIST):
            values[column] = _coerce_cell(raw, entry.kind)
            continue
        base, sep, last = column.rpartition(".")
        if sep and last.isdigit():
            base_entry = schema.entry(base)
            if base_entry is not None and base_entry.kind == KIND_LIST:
                lists.setdefault(base, []).append((int(last), raw))
                continue
            section = next(
                (s for s in open_maps if base.startswith(s + ".")), None
            )
            if section is not None:
                map_key = base[len(section) + 1 :]
                maps.setdefault(section, {}).setdefault(map_key, []).append(
                    (int(last), _coerce_cell(raw, KIND_INTEGER))
                )
                continue
        unknown.append((column, raw))

    for base, items in lists.items():
        values[base] = [value for _, value in sorted(items)]
    for section, keymap in maps.items():
        values[section] = {
            key: [value for _, value in sorted(items)]
            for key, items in keymap.items()
        }

    record = assemble_record(values, schema)
    for column, raw in unknown:
        _graft(record, column.split("."), raw)
    return record


def _graft(record: dict, segments: list[str], value: str) -> None:
    node = record
    for segment in segments[:-1]:
        child = node.get(segment)
        if not isinstance(child, dict):
            child = {}
            node[segment] = child
        node = child
    node[segments[-1]] = value


def write_records_csv(
    path: str | Path,
    records: Iterable[Mapping[str, Any]],
    schema: SchemaDefinition,
) -> int:
    """All records as one CSV with union columns in canonical order."""
    flat_rows = [flatten_record(record, schema) for record in records]
    columns: set[str] = set()
    for row in flat_rows:
        columns.update(row)
    ordered = column_order(columns, schema)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ordered)
        for row in flat_rows:
            writer.writerow([row.get(column, "") for column in ordered])
    return len(flat_rows)


# ---------------------------------------------------------------------------
# Warning log


@dataclass(frozen=True)
class WarningLogEntry:
    document_id: str
    case_id: str | None
    stage: str
    severity: str
    code: str
    message: str
    ts: str

    def as_dict(self) -> dict[str, Any]:
        return {
            "document_id": self.document_id,
            "case_id": self.case_id,
            "stage": self.stage,
            "severity": self.severity,
            "code": self.code,
            "message": self.message,
            "ts": self.ts,
        }


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class WarningLog:
    """Append-only, thread-safe warning collector.

    ``clock`` exists so runs that must be byte-reproducible can pin the
    timestamp; the default is wall-clock UTC.
    """

    def __init__(
        self,
        sink_path: str | Path | None = None,
        clock: Callable[[], str] = _utc_now,
    ):
        self.sink_path = Path(sink_path) if sink_path is not None else None
        self._clock = clock
        self._entries: list[WarningLogEntry] = []
        self._lock = threading.Lock()

    @property
    def entries(self) -> tuple[WarningLogEntry, ...]:
        return tuple(self._entries)

    def log(
        self,
        *,
        document_id: str,
        stage: str,
        severity: str,
        code: str,
        message: str,
        case_id: str | None = None,
        ts: str | None = None,
    ) -> WarningLogEntry:
        if stage not in STAGES:
            raise ValueError(f"unknown warning stage: {stage!r}")
        if severity not in SEVERITIES:
            raise ValueError(f"unknown warning severity: {severity!r}")
        if code not in WARNING_CODES:
            raise ValueError(f"unknown warning code: {code!r}")
        entry = WarningLogEntry(
            document_id=document_id,
            case_id=case_id,
            stage=stage,
            severity=severity,
            code=code,
            message=message,
            ts=ts if ts is not None else self._clock(),
        )
        with self._lock:
            self._entries.append(entry)
            if self.sink_path is not None:
                try:
                    with self.sink_path.open("a", encoding="utf-8", newline="\n") as fh:
                        fh.write(json.dumps(entry.as_dict(), ensure_ascii=False))
                        fh.write("\n")
                except OSError:
                    pass  # logging must never take the pipeline down
        return entry

    def warn_fn(
        self,
        document_id: str,
        stage: str,
        severity: str = "warning",
        case_id: str | None = None,
    ) -> Callable[[str, str], None]:
        """Adapter matching the (code, message) callback the stages take."""

        def _warn(code: str, message: str) -> None:
            self.log(
                document_id=document_id,
                case_id=case_id,
                stage=stage,
                severity=severity,
                code=code,
                message=message,
            )

        return _warn

    def counts_by_severity(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for entry in self._entries:
            counts[entry.severity] = counts.get(entry.severity, 0) + 1
        return counts

    def count(self, code: str | None = None, severity: str | None = None) -> int:
        return sum(
            1
            for e in self._entries
            if (code is None or e.code == code)
            and (severity is None or e.severity == severity)
        )

    def save(self, path: str | Path) -> int:
        """Write all entries sorted by a stable key (not arrival order), so
        concurrent runs produce identical files."""
        ordered = sorted(
            self._entries,
            key=lambda e: (
                e.document_id,
                e.case_id or "",
                e.stage,
                e.code,
                e.message,
                e.ts,
            ),
        )
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            for entry in ordered:
                fh.write(json.dumps(entry.as_dict(), ensure_ascii=False))
                fh.write("\n")
        return len(ordered)
