"""Case record schema: definition, path resolution, and validation.

The schema is data, not code. ``default_schema()`` builds the canonical
definition; the same definition ships as ``data/schema.jsonl`` and can be
loaded from any file in that format, so deployments can evolve the record
shape without touching the validator.

A record is a nested dict of plain JSON types. Fields are addressed by dot
paths ("demographic.name", "narrative_osint.movement_cues.0"). Missingness is
explicit: a populated record carries all six sections as keys even when every
field inside is null.

Validation reports every violation it finds (it never stops at the first) and
is pure: the candidate is not modified, and validating twice gives the same
report.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from datetime import date, datetime
from pathlib import Path
from typing import Any, Iterable, Mapping

from casepipe.config import ConfigError, read_jsonl, write_jsonl

# Field kinds a schema entry may declare.
KIND_STRING = "string"
KIND_INTEGER = "integer"
KIND_DECIMAL = "decimal"
KIND_BOOLEAN = "boolean"
KIND_ENUM = "enum"
KIND_LIST = "list"
KIND_SECTION = "section"
_KINDS = (
    KIND_STRING,
    KIND_INTEGER,
    KIND_DECIMAL,
    KIND_BOOLEAN,
    KIND_ENUM,
    KIND_LIST,
    KIND_SECTION,
)

# Violation codes, the full closed set.
MISSING_REQUIRED = "missing_required"
WRONG_TYPE = "wrong_type"
OUT_OF_RANGE = "out_of_range"
BAD_ENUM = "bad_enum"
BAD_PATTERN = "bad_pattern"
BAD_TIMESTAMP = "bad_timestamp"
UNKNOWN_KEY = "unknown_key"
VIOLATION_CODES = (
    MISSING_REQUIRED,
    WRONG_TYPE,
    OUT_OF_RANGE,
    BAD_ENUM,
    BAD_PATTERN,
    BAD_TIMESTAMP,
    UNKNOWN_KEY,
)

# Sentinel pattern value marking a string field as an ISO-8601 timestamp.
# Timestamp fields get the bad_timestamp code instead of bad_pattern.
ISO_TIMESTAMP = "<iso8601>"

# Plausibility bounds shared with harmonization.
AGE_RANGE = (0, 120)
HEIGHT_RANGE_CM = (30, 250)
WEIGHT_RANGE_KG = (1, 400)
LAT_RANGE = (-90.0, 90.0)
LON_RANGE = (-180.0, 180.0)

SEX_VALUES = ("female", "male", "unknown")
STATUS_VALUES = ("missing", "located", "deceased", "unknown")
GEOCODE_METHODS = ("source_provided", "gazetteer", "none")
SOURCE_FAMILIES = ("registry_form", "bulletin", "narrative_profile", "unknown")
EXTRACTION_PATHS = ("rule", "llm")
ENGINES = ("layout", "basic", "ocr", "plaintext")

_PATH_RE = re.compile(r"^[^.\s]+(?:\.[^.\s]+)*$")
_TZ_PATTERN = (
    r"^(?:UTC|[+-](?:0\d|1[0-4]):[0-5]\d|"
    r"[A-Za-z]+(?:[_-][A-Za-z]+)*(?:/[A-Za-z0-9_.+-]+)+)$"
)
_NONBLANK_PATTERN = r"^\S(?:.*\S)?$"


class PathSyntaxError(ValueError):
    """A dot path is syntactically malformed (empty segment or whitespace)."""


class _Absent:
    __slots__ = ()

    def __repr__(self) -> str:  # pragma: no cover - repr only
        return "<absent>"


#: Returned by resolve_path when the path does not exist in the record.
#: Distinct from None, which is a stored null.
ABSENT = _Absent()


@dataclass(frozen=True)
class SchemaEntry:
    """One field (or section) of the record shape.

    pattern semantics: a regular expression applied with re.search to string
    values, or to each element of a list field. The sentinel value
    ISO_TIMESTAMP marks the field as an ISO-8601 date or datetime instead.
    On a section entry, a pattern marks the section as an open map: keys must
    match the pattern and name schema leaf fields; values are origin triples
    (segment_index, char_start, char_end).
    """

    field_path: str
    kind: str
    required: bool = False
    enum_values: tuple[str, ...] | None = None
    numeric_range: tuple[float | None, float | None] | None = None
    pattern: str | None = None

    def __post_init__(self) -> None:
        if not _PATH_RE.match(self.field_path):
            raise ConfigError(f"bad field path: {self.field_path!r}")
        if self.kind not in _KINDS:
            raise ConfigError(f"{self.field_path}: unknown kind {self.kind!r}")
        if self.kind == KIND_ENUM and not self.enum_values:
            raise ConfigError(f"{self.field_path}: enum entry needs enum_values")
        if self.numeric_range is not None:
            lo, hi = self.numeric_range
            if lo is not None and hi is not None and lo > hi:
                raise ConfigError(f"{self.field_path}: range min exceeds max")
        if self.pattern is not None and self.pattern != ISO_TIMESTAMP:
            try:
                re.compile(self.pattern)
            except re.error as exc:
                raise ConfigError(f"{self.field_path}: bad pattern: {exc}") from exc


@dataclass(frozen=True)
class ValidationViolation:
    field_path: str
    code: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    valid: bool
    violations: tuple[ValidationViolation, ...]

    def codes(self) -> list[tuple[str, str]]:
        return [(v.field_path, v.code) for v in self.violations]


@dataclass(frozen=True)
class SchemaDefinition:
    """An ordered, immutable set of schema entries.

    Entries are normalized to lexicographic field-path order; that same order
    is the canonical key order for every serialization of records built
    against the schema, and the byte order of the schema file itself.
    """

    entries: tuple[SchemaEntry, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        ordered = tuple(sorted(self.entries, key=lambda e: e.field_path))
        seen: set[str] = set()
        for entry in ordered:
            if entry.field_path in seen:
                raise ConfigError(f"duplicate schema entry: {entry.field_path}")
            seen.add(entry.field_path)
        for entry in ordered:
            parent = _parent_path(entry.field_path)
            if parent is None:
                continue
            parent_entry = next((e for e in ordered if e.field_path == parent), None)
            if parent_entry is None or parent_entry.kind != KIND_SECTION:
                raise ConfigError(
                    f"{entry.field_path}: parent {parent!r} is not a section"
                )
        object.__setattr__(self, "entries", ordered)
        object.__setattr__(self, "_by_path", {e.field_path: e for e in ordered})

    # -- lookup helpers -----------------------------------------------------

    def entry(self, path: str) -> SchemaEntry | None:
        return self._by_path.get(path)  # type: ignore[attr-defined]

    def has_path(self, path: str) -> bool:
        return path in self._by_path  # type: ignore[attr-defined]

    def leaf_paths(self) -> list[str]:
        return [e.field_path for e in self.entries if e.kind != KIND_SECTION]

    def section_paths(self) -> list[str]:
        return [e.field_path for e in self.entries if e.kind == KIND_SECTION]

    def children(self, path: str) -> list[SchemaEntry]:
        prefix = path + "."
        return [
            e
            for e in self.entries
            if e.field_path.startswith(prefix) and "." not in e.field_path[len(prefix):]
        ]

    def top_level(self) -> list[SchemaEntry]:
        return [e for e in self.entries if "." not in e.field_path]

    def required_paths(self) -> list[str]:
        return [e.field_path for e in self.entries if e.required]

    def without_prefix(self, prefix: str) -> "SchemaDefinition":
        """A copy with the named top-level field and its children removed."""
        keep = tuple(
            e
            for e in self.entries
            if e.field_path != prefix and not e.field_path.startswith(prefix + ".")
        )
        return SchemaDefinition(keep)

    # -- serialization ------------------------------------------------------

    def to_records(self) -> list[dict[str, Any]]:
        records = []
        for e in self.entries:
            records.append(
                {
                    "field_path": e.field_path,
                    "kind": e.kind,
                    "required": e.required,
                    "enum_values": list(e.enum_values) if e.enum_values else None,
                    "range": list(e.numeric_range) if e.numeric_range else None,
                    "pattern": e.pattern,
                }
            )
        return records

    def save(self, path: str | Path) -> None:
        write_jsonl(path, self.to_records())

    @classmethod
    def from_records(cls, records: Iterable[Mapping[str, Any]]) -> "SchemaDefinition":
        entries = []
        for rec in records:
            try:
                entries.append(
                    SchemaEntry(
                        field_path=rec["field_path"],
                        kind=rec["kind"],
                        required=bool(rec.get("required", False)),
                        enum_values=(
                            tuple(rec["enum_values"]) if rec.get("enum_values") else None
                        ),
                        numeric_range=(
                            tuple(rec["range"]) if rec.get("range") else None
                        ),
                        pattern=rec.get("pattern"),
                    )
                )
            except KeyError as exc:
                raise ConfigError(f"schema record missing key {exc}") from exc
        return cls(tuple(entries))

    @classmethod
    def load(cls, path: str | Path) -> "SchemaDefinition":
        return cls.from_records(read_jsonl(path))


def _parent_path(path: str) -> str | None:
    if "." not in path:
        return None
    return path.rsplit(".", 1)[0]


def default_schema() -> SchemaDefinition:
    """The canonical case record shape."""
    e = SchemaEntry
    entries = (
        e("case_id", KIND_STRING, required=True, pattern=r"\S"),
        e("demographic", KIND_SECTION, required=True),
        e("demographic.name", KIND_STRING),
        e("demographic.sex", KIND_ENUM, enum_values=SEX_VALUES),
        e("demographic.age_years", KIND_INTEGER, numeric_range=AGE_RANGE),
        e("demographic.age_min", KIND_INTEGER, numeric_range=AGE_RANGE),
        e("demographic.age_max", KIND_INTEGER, numeric_range=AGE_RANGE),
        e("demographic.height_min_cm", KIND_INTEGER, numeric_range=HEIGHT_RANGE_CM),
        e("demographic.height_max_cm", KIND_INTEGER, numeric_range=HEIGHT_RANGE_CM),
        e("demographic.weight_min_kg", KIND_INTEGER, numeric_range=WEIGHT_RANGE_KG),
        e("demographic.weight_max_kg", KIND_INTEGER, numeric_range=WEIGHT_RANGE_KG),
        e("demographic.race_ethnicity", KIND_STRING),
        e("spatial", KIND_SECTION, required=True),
        e("spatial.last_seen_location", KIND_STRING),
        e("spatial.city", KIND_STRING),
        e("spatial.county", KIND_STRING),
        e("spatial.state", KIND_STRING),
        e("spatial.postal_code", KIND_STRING, pattern=r"^\d{5}(?:-\d{4})?$"),
        e("spatial.lat", KIND_DECIMAL, numeric_range=LAT_RANGE),
        e("spatial.lon", KIND_DECIMAL, numeric_range=LON_RANGE),
        e("spatial.geocode_method", KIND_ENUM, enum_values=GEOCODE_METHODS),
        e("spatial.geocode_plausible", KIND_BOOLEAN),
        e("temporal", KIND_SECTION, required=True),
        e("temporal.last_seen_ts", KIND_STRING, pattern=ISO_TIMESTAMP),
        e("temporal.reported_missing_ts", KIND_STRING, pattern=ISO_TIMESTAMP),
        e("temporal.timezone", KIND_STRING, pattern=_TZ_PATTERN),
        e("narrative_osint", KIND_SECTION, required=True),
        e("narrative_osint.circumstances", KIND_STRING),
        e("narrative_osint.clothing_description", KIND_STRING),
        e("narrative_osint.distinctive_features", KIND_STRING),
        e("narrative_osint.movement_cues", KIND_LIST, pattern=_NONBLANK_PATTERN),
        e("outcome", KIND_SECTION, required=True),
        e("outcome.status", KIND_ENUM, enum_values=STATUS_VALUES),
        e("outcome.status_ts", KIND_STRING, pattern=ISO_TIMESTAMP),
        e("provenance", KIND_SECTION, required=True),
        e("provenance.source_label", KIND_STRING, required=True, pattern=r"\S"),
        e("provenance.source_family", KIND_ENUM, enum_values=SOURCE_FAMILIES),
        e("provenance.extraction_path", KIND_ENUM, required=True, enum_values=EXTRACTION_PATHS),
        e("provenance.engine_used", KIND_ENUM, enum_values=ENGINES),
        e("provenance.document_id", KIND_STRING),
        e(
            "provenance.field_origins",
            KIND_SECTION,
            pattern=r"^[A-Za-z0-9_]+(?:\.[A-Za-z0-9_]+)*$",
        ),
        e("provenance.ingest_ts", KIND_STRING, pattern=ISO_TIMESTAMP),
        e("provenance.repair_count", KIND_INTEGER, numeric_range=(0, None)),
        e("provenance.warnings_count", KIND_INTEGER, numeric_range=(0, None)),
    )
    return SchemaDefinition(entries)


# ---------------------------------------------------------------------------
# Path resolution


def split_path(path: str) -> list[str]:
    if not isinstance(path, str) or not _PATH_RE.match(path):
        raise PathSyntaxError(f"malformed field path: {path!r}")
    return path.split(".")


def resolve_path(record: Any, path: str) -> Any:
    """Resolve a dot path against a nested record.

    Returns the stored value (which may be None) or ABSENT when the path does
    not exist. Map keys that themselves contain dots (field origin keys) are
    matched greedily by trying progressively longer joins of the remaining
    segments. List segments must be decimal indices.
    """
    segments = split_path(path)
    return _resolve(record, segments)


def _resolve(node: Any, segments: list[str]) -> Any:
    if not segments:
        return node
    head, rest = segments[0], segments[1:]
    if isinstance(node, dict):
        if head in node:
            return _resolve(node[head], rest)
        # Dotted keys: try joining more segments into a single key.
        for take in range(1, len(rest) + 1):
            joined = ".".join([head] + rest[:take])
            if joined in node:
                return _resolve(node[joined], rest[take:])
        return ABSENT
    if isinstance(node, list):
        if not head.isdigit():
            return ABSENT
        index = int(head)
        if index >= len(node):
            return ABSENT
        return _resolve(node[index], rest)
    return ABSENT


def set_path(record: dict, path: str, value: Any) -> None:
    """Set a leaf value on a nested record, creating sections as needed.

    Only dict segments are created; a numeric segment indexes an existing
    list (list elements cannot be created here).
    """
    segments = split_path(path)
    node: Any = record
    for i, segment in enumerate(segments[:-1]):
        if isinstance(node, list) and segment.isdigit():
            node = node[int(segment)]
            continue
        if not isinstance(node, dict):
            raise PathSyntaxError(f"cannot descend into {'.'.join(segments[:i + 1])!r}")
        if segment not in node or not isinstance(node[segment], (dict, list)):
            node[segment] = {}
        node = node[segment]
    last = segments[-1]
    if isinstance(node, list) and last.isdigit():
        node[int(last)] = value
    elif isinstance(node, dict):
        node[last] = value
    else:
        raise PathSyntaxError(f"cannot set {path!r}")


def flatten_leaves(candidate: Any, prefix: str = "") -> dict[str, Any]:
    """All leaf values of a nested record keyed by dot path.

    Lists expand to numeric segments; empty dicts and lists are themselves
    leaves (there is nothing below them).
    """
    out: dict[str, Any] = {}
    if isinstance(candidate, dict) and candidate:
        for key, value in candidate.items():
            sub = f"{prefix}.{key}" if prefix else str(key)
            out.update(flatten_leaves(value, sub))
    elif isinstance(candidate, list) and candidate:
        for i, value in enumerate(candidate):
            sub = f"{prefix}.{i}" if prefix else str(i)
            out.update(flatten_leaves(value, sub))
    else:
        out[prefix] = candidate
    return out


def assemble_record(values: Mapping[str, Any], schema: SchemaDefinition) -> dict[str, Any]:
    """Build a nested record in canonical schema key order.

    ``values`` maps leaf dot paths (list fields may be given whole) to values.
    Every schema section and leaf appears in the output; leaves missing from
    ``values`` come out null, list fields come out empty, open-map sections
    come out as sorted dicts.
    """
    record: dict[str, Any] = {}
    for entry in self_and_sections(schema):
        parts = entry.field_path.split(".")
        parent = record
        for part in parts[:-1]:
            parent = parent[part]
        name = parts[-1]
        if entry.kind == KIND_SECTION:
            if entry.pattern is not None:
                given = values.get(entry.field_path) or {}
                parent[name] = {k: given[k] for k in sorted(given)}
            else:
                parent[name] = {}
        elif entry.kind == KIND_LIST:
            value = values.get(entry.field_path)
            parent[name] = list(value) if value else []
        else:
            parent[name] = values.get(entry.field_path)
    return record


def self_and_sections(schema: SchemaDefinition) -> Iterable[SchemaEntry]:
    """Entries in creation order: every section before its children."""
    return sorted(schema.entries, key=lambda e: (e.field_path.count("."), e.field_path))


# ---------------------------------------------------------------------------
# Validation


def parse_iso_timestamp(value: str) -> tuple[date | datetime, str] | None:
    """Parse an ISO-8601 date or datetime. Returns (parsed, precision) or None."""
    if not isinstance(value, str) or not value:
        return None
    text = value.strip()
    if len(text) == 10:
        try:
            return date.fromisoformat(text), "date"
        except ValueError:
            return None
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    try:
        return datetime.fromisoformat(text), "datetime"
    except ValueError:
        return None


def validate(candidate: Any, schema: SchemaDefinition) -> ValidationReport:
    """Check a candidate record against the schema, reporting all violations.

    The schema is strict: keys with no schema entry are unknown_key
    violations. Cross-field consistency rules (min/max pairs, lat/lon
    pairing, timestamp ordering, rule-path repair count) report out_of_range
    at the offending path. Violations come back ordered by (field_path, code).
    """
    violations: list[ValidationViolation] = []

    def add(path: str, code: str, message: str) -> None:
        violations.append(ValidationViolation(path, code, message))

    if not isinstance(candidate, dict):
        add("", WRONG_TYPE, "record must be an object")
        return ValidationReport(False, tuple(violations))

    for path in schema.required_paths():
        value = resolve_path(candidate, path)
        if value is ABSENT or value is None:
            add(path, MISSING_REQUIRED, "required field is missing or null")

    for key, value in candidate.items():
        if not schema.has_path(str(key)):
            add(str(key), UNKNOWN_KEY, "key is not defined by the schema")
        else:
            _validate_node(str(key), value, schema, add)

    _validate_cross_field(candidate, add)

    ordered = tuple(sorted(violations, key=lambda v: (v.field_path, v.code)))
    return ValidationReport(not ordered, ordered)


def _validate_node(path: str, value: Any, schema: SchemaDefinition, add) -> None:
    entry = schema.entry(path)
    assert entry is not None
    if entry.kind == KIND_SECTION:
        if value is None:
            # Required sections are reported by the missing-required pass.
            return
        if not isinstance(value, dict):
            add(path, WRONG_TYPE, "section must be an object")
            return
        if entry.pattern is not None:
            _validate_open_map(path, value, entry, schema, add)
            return
        for key, child_value in value.items():
            child_path = f"{path}.{key}"
            if not schema.has_path(child_path):
                add(child_path, UNKNOWN_KEY, "key is not defined by the schema")
            else:
                _validate_node(child_path, child_value, schema, add)
        return
    _validate_leaf(path, value, entry, add)


def _validate_open_map(path: str, value: dict, entry: SchemaEntry, schema, add) -> None:
    key_re = re.compile(entry.pattern or "")
    for key, item in value.items():
        item_path = f"{path}.{key}"
        if not isinstance(key, str) or not key_re.search(key):
            add(item_path, BAD_PATTERN, "map key is not a well-formed field path")
            continue
        if not schema.has_path(key) or schema.entry(key).kind == KIND_SECTION:
            add(item_path, UNKNOWN_KEY, "map key does not name a schema field")
            continue
        ok = (
            isinstance(item, list)
            and len(item) == 3
            and all(type(v) is int and v >= 0 for v in item)
        )
        if not ok:
            add(item_path, WRONG_TYPE, "origin must be [segment_index, char_start, char_end]")


def _validate_leaf(path: str, value: Any, entry: SchemaEntry, add) -> None:
    if value is None:
        return
    kind = entry.kind
    if kind == KIND_STRING:
        if not isinstance(value, str):
            add(path, WRONG_TYPE, f"expected string, got {type(value).__name__}")
            return
        if entry.pattern == ISO_TIMESTAMP:
            if parse_iso_timestamp(value) is None:
                add(path, BAD_TIMESTAMP, "not an ISO-8601 date or datetime")
        elif entry.pattern is not None:
            if not re.search(entry.pattern, value):
                add(path, BAD_PATTERN, "value does not match the field pattern")
    elif kind == KIND_INTEGER:
        if type(value) is not int:
            add(path, WRONG_TYPE, f"expected integer, got {type(value).__name__}")
            return
        _check_range(path, value, entry, add)
    elif kind == KIND_DECIMAL:
        if type(value) not in (int, float):
            add(path, WRONG_TYPE, f"expected number, got {type(value).__name__}")
            return
        _check_range(path, value, entry, add)
    elif kind == KIND_BOOLEAN:
        if type(value) is not bool:
            add(path, WRONG_TYPE, f"expected boolean, got {type(value).__name__}")
    elif kind == KIND_ENUM:
        if not isinstance(value, str):
            add(path, WRONG_TYPE, f"expected string, got {type(value).__name__}")
        elif value not in (entry.enum_values or ()):
            allowed = ", ".join(entry.enum_values or ())
            add(path, BAD_ENUM, f"value {value!r} not one of: {allowed}")
    elif kind == KIND_LIST:
        if not isinstance(value, list):
            add(path, WRONG_TYPE, f"expected list, got {type(value).__name__}")
            return
        for i, element in enumerate(value):
            element_path = f"{path}.{i}"
            if not isinstance(element, str):
                add(element_path, WRONG_TYPE, "list entries must be strings")
            elif entry.pattern and not re.search(entry.pattern, element):
                add(element_path, BAD_PATTERN, "list entry is empty or untrimmed")


def _check_range(path: str, value: float, entry: SchemaEntry, add) -> None:
    if entry.numeric_range is None:
        return
    lo, hi = entry.numeric_range
    if (lo is not None and value < lo) or (hi is not None and value > hi):
        add(path, OUT_OF_RANGE, f"value {value} outside [{lo}, {hi}]")


_MINMAX_PAIRS = (
    ("demographic.age_min", "demographic.age_max"),
    ("demographic.height_min_cm", "demographic.height_max_cm"),
    ("demographic.weight_min_kg", "demographic.weight_max_kg"),
)


def _validate_cross_field(candidate: dict, add) -> None:
    def get(path: str) -> Any:
        value = resolve_path(candidate, path)
        return None if value is ABSENT else value

    for min_path, max_path in _MINMAX_PAIRS:
        lo, hi = get(min_path), get(max_path)
        if type(lo) is int and type(hi) is int and lo > hi:
            add(min_path, OUT_OF_RANGE, f"minimum {lo} exceeds maximum {hi}")

    lat, lon = get("spatial.lat"), get("spatial.lon")
    if (lat is None) != (lon is None):
        path = "spatial.lat" if lat is None else "spatial.lon"
        add(path, OUT_OF_RANGE, "lat and lon must both be set or both be null")

    method = get("spatial.geocode_method")
    if method == "none" and isinstance(lat, (int, float)) and not isinstance(lat, bool):
        add(
            "spatial.geocode_method",
            OUT_OF_RANGE,
            "geocode_method is none but coordinates are set",
        )

    last_seen = get("temporal.last_seen_ts")
    reported = get("temporal.reported_missing_ts")
    if isinstance(last_seen, str) and isinstance(reported, str):
        a = parse_iso_timestamp(last_seen)
        b = parse_iso_timestamp(reported)
        if a and b and a[1] == "datetime" and b[1] == "datetime":
            da, db = a[0], b[0]
            comparable = (da.tzinfo is None) == (db.tzinfo is None)  # type: ignore[union-attr]
            if comparable and da > db:
                add(
                    "temporal.reported_missing_ts",
                    OUT_OF_RANGE,
                    "reported_missing_ts precedes last_seen_ts",
                )

    if get("provenance.extraction_path") == "rule":
        repair_count = get("provenance.repair_count")
        if type(repair_count) is int and repair_count != 0:
            add(
                "provenance.repair_count",
                OUT_OF_RANGE,
                "rule-path records must have repair_count 0",
            )
