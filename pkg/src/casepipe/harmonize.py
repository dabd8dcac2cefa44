"""Harmonization: map per-source keys onto the canonical record shape.

Inputs arrive two ways. The rule path hands over a DraftRecord whose
candidate keys are the draft paths its rule set chose; the model path hands
over a nested candidate that already uses canonical paths. Both are flattened
to (key, raw value) pairs, renamed through the source's mapping table, run
through value transforms, and assembled into a record with every section
present. Missingness stays explicit: nothing here invents a fact, and a value
that fails its transform becomes null with a warning rather than aborting the
record.

Unit conversions use exact integer arithmetic (half-up rounding) so results
do not drift with float representation: inches x 2.54 -> whole centimeters,
pounds x 0.45359237 -> whole kilograms.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Mapping

from casepipe.config import ConfigError, read_jsonl
from casepipe.rules import DraftRecord
from casepipe.schema import (
    HEIGHT_RANGE_CM,
    KIND_DECIMAL,
    KIND_INTEGER,
    KIND_LIST,
    KIND_SECTION,
    SEX_VALUES,
    STATUS_VALUES,
    WEIGHT_RANGE_KG,
    SchemaDefinition,
    assemble_record,
    flatten_leaves,
    parse_iso_timestamp,
)

WarnFn = Callable[[str, str], None]

TRANSFORM_NONE = "none"
TRANSFORM_TIMESTAMP = "timestamp"
TRANSFORM_HEIGHT = "height"
TRANSFORM_WEIGHT = "weight"
TRANSFORM_SEX = "sex_enum"
TRANSFORM_STATUS = "status_enum"
TRANSFORM_PLACE = "place_parts"
TRANSFORM_CUES = "cue_list"
TRANSFORMS = (
    TRANSFORM_NONE,
    TRANSFORM_TIMESTAMP,
    TRANSFORM_HEIGHT,
    TRANSFORM_WEIGHT,
    TRANSFORM_SEX,
    TRANSFORM_STATUS,
    TRANSFORM_PLACE,
    TRANSFORM_CUES,
)

_TS_PATHS = ("temporal.last_seen_ts", "temporal.reported_missing_ts", "outcome.status_ts")
_OFFSET_RE = re.compile(r"^[+-]\d{2}:\d{2}$")
_US_DATE_RE = re.compile(r"^(\d{1,2})/(\d{1,2})/(\d{4})$")
_HEIGHT_TOKEN_RE = re.compile(r"(\d+)\s*'\s*(\d{1,2})\s*(?:\"|'')?")
_WEIGHT_RE = re.compile(
    r"^(\d+)(?:\s*(?:-|to)\s*(\d+))?\s*(?:lbs?\.?|pounds)$", re.IGNORECASE
)
_PLACE_RE = re.compile(
    r"^([^,]+?),\s*([A-Za-z][A-Za-z .'-]*?)(?:\s+(\d{5}(?:-\d{4})?))?$"
)
_INT_RE = re.compile(r"^[+-]?\d+$")
_INDEXED_KEY_RE = re.compile(r"^(.+)\.(\d+)$")

_SEX_ALIASES = {"f": "female", "m": "male", "u": "unknown"}


@dataclass(frozen=True)
class MappingTable:
    """Key mappings for one source: draft key -> (target path, transform)."""

    source_label: str
    rows: Mapping[str, tuple[str, str]]
    tz_default: str | None = None


@dataclass(frozen=True)
class HarmonizedRecord:
    record: dict[str, Any]
    applied_transforms: tuple[tuple[str, str], ...]
    dropped_fields: tuple[tuple[str, str], ...]
    key_trace: tuple[tuple[str, str], ...]


def load_mapping_table(path: str | Path, source_label: str) -> MappingTable:
    rows: dict[str, tuple[str, str]] = {}
    tz_default = None
    for rec in read_jsonl(path):
        if "meta" in rec:
            tz_default = rec["meta"].get("tz_default")
            continue
        source_key = rec.get("source_key")
        target_path = rec.get("target_path")
        transform = rec.get("transform", TRANSFORM_NONE)
        if not source_key or not target_path:
            raise ConfigError(f"{path}: mapping row needs source_key and target_path")
        if transform not in TRANSFORMS:
            raise ConfigError(f"{path}: unknown transform {transform!r}")
        if source_key in rows:
            raise ConfigError(f"{path}: duplicate source_key {source_key!r}")
        rows[source_key] = (target_path, transform)
    if not rows:
        raise ConfigError(f"no mapping rows in {path}")
    return MappingTable(source_label=source_label, rows=rows, tz_default=tz_default)


def load_mapping_dir(directory: str | Path) -> dict[str, MappingTable]:
    """Load ``<source_label>.jsonl`` mapping tables from a directory."""
    directory = Path(directory)
    tables = {}
    for path in sorted(directory.glob("*.jsonl")):
        label = path.stem
        tables[label] = load_mapping_table(path, label)
    if not tables:
        raise ConfigError(f"no mapping tables in {directory}")
    return tables


def build_identity_mappings(schema: SchemaDefinition) -> MappingTable:
    """Canonical-path passthrough for model candidates, with type transforms."""
    rows: dict[str, tuple[str, str]] = {}
    for entry in schema.entries:
        path = entry.field_path
        if entry.kind == KIND_SECTION or path.startswith("provenance"):
            continue
        if path in _TS_PATHS:
            transform = TRANSFORM_TIMESTAMP
        elif path == "demographic.sex":
            transform = TRANSFORM_SEX
        elif path == "outcome.status":
            transform = TRANSFORM_STATUS
        elif entry.kind == KIND_LIST:
            transform = TRANSFORM_CUES
        else:
            transform = TRANSFORM_NONE
        rows[path] = (path, transform)
    return MappingTable(source_label="identity", rows=rows)


def identity_table(schema: SchemaDefinition, tz_default: str | None = None) -> MappingTable:
    return replace(build_identity_mappings(schema), tz_default=tz_default)


# ---------------------------------------------------------------------------
# Value transforms


def _in_to_cm(inches: int) -> int:
    return (inches * 254 + 50) // 100


def _lb_to_kg(pounds: int) -> int:
    return (pounds * 45359237 + 50_000_000) // 100_000_000


def normalize_height(raw: str) -> tuple[int, int] | None:
    """Feet-and-inches text (single value or range) to whole centimeters.

    Returns (min_cm, max_cm), or None when the text cannot be read or the
    result falls outside plausible human bounds.
    """
    if not isinstance(raw, str):
        return None
    tokens = _HEIGHT_TOKEN_RE.findall(raw)
    if len(tokens) == 1:
        feet, inches = (int(x) for x in tokens[0])
        value = _in_to_cm(feet * 12 + inches)
        pair = (value, value)
    elif len(tokens) == 2:
        values = [_in_to_cm(int(f) * 12 + int(i)) for f, i in tokens]
        pair = (values[0], values[1])
    else:
        return None
    lo, hi = HEIGHT_RANGE_CM
    if pair[0] > pair[1] or pair[0] < lo or pair[1] > hi:
        return None
    return pair


def normalize_weight(raw: str) -> tuple[int, int] | None:
    """Pounds text (single value or range) to whole kilograms."""
    if not isinstance(raw, str):
        return None
    m = _WEIGHT_RE.match(raw.strip())
    if m is None:
        return None
    first = _lb_to_kg(int(m.group(1)))
    second = _lb_to_kg(int(m.group(2))) if m.group(2) else first
    pair = (first, second)
    lo, hi = WEIGHT_RANGE_KG
    if pair[0] > pair[1] or pair[0] < lo or pair[1] > hi:
        return None
    return pair


def normalize_timestamp(raw: str, tz_default: str | None = None) -> tuple[str, str] | None:
    """Normalize a source timestamp to ISO-8601 without shifting the clock.

    Returns (iso_text, precision) where precision is "date" or "datetime".
    Date-only inputs stay date-only. A naive datetime gets ``tz_default``
    appended only when the default is an offset string; named zones are
    context the temporal.timezone field carries instead.
    """
    if not isinstance(raw, str):
        return None
    text = raw.strip()
    if not text:
        return None
    parsed = parse_iso_timestamp(text)
    if parsed is not None:
        value, precision = parsed
        if precision == "date":
            return value.isoformat(), precision
        iso = value.isoformat()
        if value.tzinfo is None and tz_default and _OFFSET_RE.match(tz_default):
            iso += tz_default
        return iso, precision
    m = _US_DATE_RE.match(text)
    if m is not None:
        month, day, year = (int(x) for x in m.groups())
        try:
            return datetime(year, month, day).date().isoformat(), "date"
        except ValueError:
            return None
    for fmt in ("%B %d, %Y", "%b %d, %Y", "%B %d %Y"):
        try:
            return datetime.strptime(text, fmt).date().isoformat(), "date"
        except ValueError:
            continue
    return None


def parse_place_parts(raw: str) -> tuple[str | None, str | None, str | None]:
    """Split "City, State [ZIP]" into parts; anything else returns all None."""
    if not isinstance(raw, str):
        return (None, None, None)
    m = _PLACE_RE.match(raw.strip())
    if m is None:
        return (None, None, None)
    city, state, postal = m.groups()
    return (city.strip(), state.strip(), postal)


def _sex_value(raw: str) -> str | None:
    token = raw.strip().casefold()
    if token in SEX_VALUES:
        return token
    return _SEX_ALIASES.get(token)


def _status_value(raw: str) -> str | None:
    token = raw.strip().casefold()
    return token if token in STATUS_VALUES else None


def _cue_values(raw: Any) -> list[str]:
    items = raw if isinstance(raw, list) else [raw]
    return [item.strip() for item in items if isinstance(item, str) and item.strip()]


# ---------------------------------------------------------------------------
# Harmonization core


def _sibling(path: str) -> str:
    return path.replace("_min_", "_max_")


def _apply_transform(
    transform: str,
    raw: Any,
    target: str,
    tz_default: str | None,
    warn: WarnFn,
) -> dict[str, Any]:
    if transform == TRANSFORM_TIMESTAMP:
        result = normalize_timestamp(raw, tz_default) if isinstance(raw, str) else None
        if result is None:
            warn("unparseable_timestamp", f"{target}: cannot read {raw!r}")
            return {target: None}
        return {target: result[0]}
    if transform == TRANSFORM_HEIGHT:
        pair = normalize_height(raw)
        if pair is None:
            warn("unparseable_height", f"{target}: cannot read {raw!r}")
            return {target: None, _sibling(target): None}
        return {target: pair[0], _sibling(target): pair[1]}
    if transform == TRANSFORM_WEIGHT:
        pair = normalize_weight(raw)
        if pair is None:
            warn("unparseable_weight", f"{target}: cannot read {raw!r}")
            return {target: None, _sibling(target): None}
        return {target: pair[0], _sibling(target): pair[1]}
    if transform == TRANSFORM_SEX:
        value = _sex_value(raw) if isinstance(raw, str) else None
        if value is None:
            warn("bad_enum_value", f"{target}: cannot read {raw!r}")
        return {target: value}
    if transform == TRANSFORM_STATUS:
        value = _status_value(raw) if isinstance(raw, str) else None
        if value is None:
            warn("bad_enum_value", f"{target}: cannot read {raw!r}")
        return {target: value}
    if transform == TRANSFORM_PLACE:
        if not isinstance(raw, str) or not raw.strip():
            return {}
        city, state, postal = parse_place_parts(raw)
        out: dict[str, Any] = {"spatial.last_seen_location": raw.strip()}
        if city is not None:
            out["spatial.city"] = city
            out["spatial.state"] = state
            if postal is not None:
                out["spatial.postal_code"] = postal
        return out
    if transform == TRANSFORM_CUES:
        return {target: _cue_values(raw)}
    return {target: raw}


def _coerce(value: Any, kind: str, path: str, warn: WarnFn) -> Any:
    if value is None:
        return None
    if kind == KIND_INTEGER:
        if type(value) is int:
            return value
        if isinstance(value, str) and _INT_RE.match(value.strip()):
            return int(value.strip())
        if isinstance(value, float) and value.is_integer():
            return int(value)
        warn("uncoercible_value", f"{path}: cannot coerce {value!r} to integer")
        return None
    if kind == KIND_DECIMAL:
        if type(value) in (int, float):
            return value
        if isinstance(value, str):
            try:
                return float(value.strip())
            except ValueError:
                pass
        warn("uncoercible_value", f"{path}: cannot coerce {value!r} to number")
        return None
    return value


def _flatten_input(
    source: DraftRecord | Mapping[str, Any],
) -> dict[str, Any]:
    if isinstance(source, DraftRecord):
        flat = {path: cand.raw_value for path, cand in source.candidates.items()}
    else:
        flat = flatten_leaves(dict(source))
    # Group indexed keys (list elements) back into ordered lists.
    grouped: dict[str, Any] = {}
    lists: dict[str, list[tuple[int, Any]]] = {}
    for key, value in flat.items():
        m = _INDEXED_KEY_RE.match(key)
        if m is not None:
            lists.setdefault(m.group(1), []).append((int(m.group(2)), value))
        else:
            grouped[key] = value
    for base, items in lists.items():
        grouped[base] = [value for _, value in sorted(items, key=lambda kv: kv[0])]
    return grouped


def harmonize(
    source: DraftRecord | Mapping[str, Any],
    mappings: MappingTable,
    schema: SchemaDefinition,
    *,
    on_warning: WarnFn | None = None,
) -> HarmonizedRecord:
    """Produce a canonical record candidate from draft or model output.

    Every schema section is materialized. Defaults fill fields whose absence
    has a defined meaning (status missing, sex unknown, no movement cues, no
    geocode). The result carries the applied transforms, dropped source keys,
    and a source-key -> target-path trace so provenance can follow renames.
    """
    warn: WarnFn = on_warning if on_warning is not None else (lambda code, msg: None)
    flat = _flatten_input(source)
    values: dict[str, Any] = {}
    applied: list[tuple[str, str]] = []
    dropped: list[tuple[str, str]] = []
    trace: list[tuple[str, str]] = []

    for source_key in sorted(flat):
        raw = flat[source_key]
        row = mappings.rows.get(source_key)
        if row is None:
            if raw in (None, "", [], {}):
                continue
            dropped.append((source_key, "unmapped_key"))
            warn("unmapped_key", f"no mapping for {source_key!r}; value dropped")
            continue
        target, transform = row
        if raw is None:
            values.setdefault(target, None)
            continue
        outputs = _apply_transform(transform, raw, target, mappings.tz_default, warn)
        applied.append((target, transform))
        for out_path, out_value in outputs.items():
            entry = schema.entry(out_path)
            if entry is not None and transform in (TRANSFORM_NONE,):
                out_value = _coerce(out_value, entry.kind, out_path, warn)
            if out_path in values and values[out_path] is not None:
                if out_value is not None and out_value != values[out_path]:
                    warn(
                        "duplicate_target",
                        f"{out_path}: already set; ignoring value from {source_key!r}",
                    )
                continue
            values[out_path] = out_value
            trace.append((source_key, out_path))

    _apply_defaults(values, mappings.tz_default)
    record = assemble_record(values, schema)
    return HarmonizedRecord(
        record=record,
        applied_transforms=tuple(applied),
        dropped_fields=tuple(dropped),
        key_trace=tuple(trace),
    )


def _apply_defaults(values: dict[str, Any], tz_default: str | None) -> None:
    if values.get("outcome.status") is None:
        values["outcome.status"] = "missing"
    if values.get("demographic.sex") is None:
        values["demographic.sex"] = "unknown"
    if not values.get("narrative_osint.movement_cues"):
        values["narrative_osint.movement_cues"] = []
    if values.get("spatial.geocode_method") is None:
        values["spatial.geocode_method"] = "none"
    if values.get("temporal.timezone") is None and tz_default:
        if any(values.get(path) for path in _TS_PATHS):
            values["temporal.timezone"] = tz_default
