"""Run quality metrics: gold-aligned field agreement, coverage, and rates.

Everything here is a pure function of its inputs. Degenerate inputs (no
records, no slots, no samples) get a defined value plus a warning through the
caller's callback instead of a crash, so a thin evaluation run still produces
a complete report. The one exception is runtime_stats, where an empty sample
is a caller bug and raises.

Matching semantics: strings are compared case-folded with whitespace runs
collapsed, numerics numerically, timestamps at the coarser of the two stated
precisions, and movement cues as order-insensitive sets. A value mismatch on
a slot where both sides are populated counts as a false positive and a false
negative at once.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass
from datetime import date, datetime
from typing import Any, Callable, Iterable, Mapping, Sequence

from casepipe.config import ConfigError
from casepipe.schema import (
    ISO_TIMESTAMP,
    KIND_BOOLEAN,
    KIND_DECIMAL,
    KIND_INTEGER,
    KIND_LIST,
    KIND_SECTION,
    SchemaDefinition,
    default_schema,
    parse_iso_timestamp,
)

WarnFn = Callable[[str, str], None]

COMPARATOR_EXACT = "exact_canonical"
COMPARATOR_NUMERIC = "numeric_eq"
COMPARATOR_TIMESTAMP = "timestamp_eq"
COMPARATOR_SET = "set_eq"
COMPARATORS = (
    COMPARATOR_EXACT,
    COMPARATOR_NUMERIC,
    COMPARATOR_TIMESTAMP,
    COMPARATOR_SET,
)

# Free-prose appearance fields carry no stable answer to score against.
# The circumstances narrative stays scored: capturing it is part of the job.
_UNSCORED_PROSE = (
    "narrative_osint.clothing_description",
    "narrative_osint.distinctive_features",
)

DEFAULT_KEY_FIELDS = (
    "demographic.name",
    "spatial.city",
    "temporal.last_seen_ts",
    "outcome.status",
)


@dataclass(frozen=True)
class MatchRule:
    field_path: str
    comparator: str

    def __post_init__(self) -> None:
        if self.comparator not in COMPARATORS:
            raise ConfigError(
                f"{self.field_path}: unknown comparator {self.comparator!r}"
            )


@dataclass(frozen=True)
class AlignmentResult:
    """Case-id join of parsed records against gold records."""

    pairs: tuple[tuple[dict, dict], ...]
    unmatched_parsed: tuple[dict, ...]
    unmatched_gold: tuple[dict, ...]

    @property
    def unmatched_parsed_ids(self) -> tuple[Any, ...]:
        return tuple(r.get("case_id") for r in self.unmatched_parsed)

    @property
    def unmatched_gold_ids(self) -> tuple[Any, ...]:
        return tuple(r.get("case_id") for r in self.unmatched_gold)


def is_nullish(value: Any) -> bool:
    """None, empty text, and empty containers all mean "no answer"."""
    if value is None or value == "":
        return True
    return isinstance(value, (list, dict)) and not value


def get_path(record: Mapping[str, Any] | None, path: str) -> Any:
    node: Any = record
    for segment in path.split("."):
        if not isinstance(node, Mapping):
            return None
        node = node.get(segment)
    return node


def scored_paths(schema: SchemaDefinition) -> tuple[str, ...]:
    paths = []
    for rec in schema.to_records():
        path = rec["field_path"]
        if rec["kind"] == KIND_SECTION:
            continue
        if path.startswith("provenance.") or path in _UNSCORED_PROSE:
            continue
        paths.append(path)
    return tuple(paths)


def structured_paths(schema: SchemaDefinition) -> tuple[str, ...]:
    return tuple(
        p for p in scored_paths(schema) if p != "narrative_osint.circumstances"
    )


def default_match_rules(schema: SchemaDefinition) -> dict[str, MatchRule]:
    rules = {}
    for rec in schema.to_records():
        path = rec["field_path"]
        if path not in scored_paths(schema):
            continue
        if rec.get("pattern") == ISO_TIMESTAMP:
            comparator = COMPARATOR_TIMESTAMP
        elif rec["kind"] == KIND_LIST:
            comparator = COMPARATOR_SET
        elif rec["kind"] in (KIND_INTEGER, KIND_DECIMAL, KIND_BOOLEAN):
            comparator = COMPARATOR_NUMERIC
        else:
            comparator = COMPARATOR_EXACT
        rules[path] = MatchRule(path, comparator)
    return rules


# ---------------------------------------------------------------------------
# Value comparison


def _canonical_text(value: Any) -> str:
    return " ".join(str(value).split()).casefold()


def _numbers_equal(a: Any, b: Any) -> bool:
    try:
        return float(a) == float(b)
    except (TypeError, ValueError):
        return a == b


def _as_date(value: date | datetime) -> date:
    return value.date() if isinstance(value, datetime) else value


def _timestamps_equal(a: Any, b: Any) -> bool:
    parsed_a = parse_iso_timestamp(str(a).strip())
    parsed_b = parse_iso_timestamp(str(b).strip())
    if parsed_a is None or parsed_b is None:
        return _canonical_text(a) == _canonical_text(b)
    value_a, precision_a = parsed_a
    value_b, precision_b = parsed_b
    if precision_a == "date" or precision_b == "date":
        return _as_date(value_a) == _as_date(value_b)
    if (value_a.tzinfo is None) != (value_b.tzinfo is None):
        return False
    return value_a == value_b


def _sets_equal(a: Any, b: Any) -> bool:
    list_a = a if isinstance(a, list) else [a]
    list_b = b if isinstance(b, list) else [b]
    return {_canonical_text(x) for x in list_a} == {_canonical_text(x) for x in list_b}


def values_match(rule: MatchRule, parsed_value: Any, gold_value: Any) -> bool:
    if rule.comparator == COMPARATOR_NUMERIC:
        return _numbers_equal(parsed_value, gold_value)
    if rule.comparator == COMPARATOR_TIMESTAMP:
        return _timestamps_equal(parsed_value, gold_value)
    if rule.comparator == COMPARATOR_SET:
        return _sets_equal(parsed_value, gold_value)
    return _canonical_text(parsed_value) == _canonical_text(gold_value)


# ---------------------------------------------------------------------------
# Alignment


def _index_by_case_id(
    records: Iterable[Mapping[str, Any]], side: str
) -> tuple[dict[Any, dict], list[dict]]:
    by_id: dict[Any, dict] = {}
    anonymous = []
    for record in records:
        case_id = record.get("case_id")
        if case_id is None:
            anonymous.append(dict(record))
            continue
        if case_id in by_id:
            raise ValueError(f"duplicate case_id {case_id!r} in {side} records")
        by_id[case_id] = dict(record)
    return by_id, anonymous


def align(
    parsed: Iterable[Mapping[str, Any]], gold: Iterable[Mapping[str, Any]]
) -> AlignmentResult:
    """Join parsed records to gold records on exact case_id."""
    parsed_by_id, parsed_anonymous = _index_by_case_id(parsed, "parsed")
    gold_by_id, gold_anonymous = _index_by_case_id(gold, "gold")
    pairs = []
    for case_id, gold_record in gold_by_id.items():
        if case_id in parsed_by_id:
            pairs.append((parsed_by_id[case_id], gold_record))
    unmatched_parsed = [
        record for case_id, record in parsed_by_id.items() if case_id not in gold_by_id
    ]
    unmatched_gold = [
        record for case_id, record in gold_by_id.items() if case_id not in parsed_by_id
    ]
    return AlignmentResult(
        pairs=tuple(pairs),
        unmatched_parsed=tuple(unmatched_parsed + parsed_anonymous),
        unmatched_gold=tuple(unmatched_gold + gold_anonymous),
    )


# ---------------------------------------------------------------------------
# Field-level precision / recall


def _require_rules(rules: Mapping[str, MatchRule], paths: Sequence[str]) -> None:
    missing = [p for p in paths if p not in rules]
    if missing:
        raise ConfigError(f"no match rule for scored fields: {', '.join(missing)}")


def slot_counts(
    alignment: AlignmentResult, rules: Mapping[str, MatchRule]
) -> tuple[int, int, int]:
    """(true positives, false positives, false negatives) over all slots."""
    paths = sorted(rules)
    tp = fp = fn = 0
    for parsed_record, gold_record in alignment.pairs:
        for path in paths:
            parsed_value = get_path(parsed_record, path)
            gold_value = get_path(gold_record, path)
            parsed_null = is_nullish(parsed_value)
            gold_null = is_nullish(gold_value)
            if parsed_null and gold_null:
                continue
            if parsed_null:
                fn += 1
            elif gold_null:
                fp += 1
            elif values_match(rules[path], parsed_value, gold_value):
                tp += 1
            else:
                fp += 1
                fn += 1
    for gold_record in alignment.unmatched_gold:
        fn += sum(1 for p in paths if not is_nullish(get_path(gold_record, p)))
    for parsed_record in alignment.unmatched_parsed:
        fp += sum(1 for p in paths if not is_nullish(get_path(parsed_record, p)))
    return tp, fp, fn


def f1_score(precision: float, recall: float) -> float:
    if precision + recall <= 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def field_prf(
    alignment: AlignmentResult, rules: Mapping[str, MatchRule]
) -> tuple[float, float, float]:
    """Micro-averaged precision, recall, and F1 over every scored slot."""
    tp, fp, fn = slot_counts(alignment, rules)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall, f1_score(precision, recall)


def structured_field_accuracy(
    alignment: AlignmentResult,
    rules: Mapping[str, MatchRule],
    paths: Sequence[str],
    on_warning: WarnFn | None = None,
) -> float:
    """Share of gold-populated structured slots the parsed side got right."""
    _require_rules(rules, paths)
    slots = matches = 0
    for parsed_record, gold_record in alignment.pairs:
        for path in paths:
            gold_value = get_path(gold_record, path)
            if is_nullish(gold_value):
                continue
            slots += 1
            parsed_value = get_path(parsed_record, path)
            if not is_nullish(parsed_value) and values_match(
                rules[path], parsed_value, gold_value
            ):
                matches += 1
    for gold_record in alignment.unmatched_gold:
        slots += sum(1 for p in paths if not is_nullish(get_path(gold_record, p)))
    if slots == 0:
        if on_warning is not None:
            on_warning("degenerate_metric", "no gold-populated structured slots")
        return 0.0
    return matches / slots


# ---------------------------------------------------------------------------
# Coverage and rate metrics


def completeness(
    records: Iterable[Mapping[str, Any]],
    key_fields: Sequence[str] = DEFAULT_KEY_FIELDS,
    on_warning: WarnFn | None = None,
) -> tuple[float, dict[str, float]]:
    """Fraction of (record, key field) slots that carry an answer."""
    records = list(records)
    if not records or not key_fields:
        if on_warning is not None:
            on_warning("degenerate_metric", "completeness over an empty sample")
        return 0.0, {field: 0.0 for field in key_fields}
    by_field = {}
    populated_total = 0
    for field in key_fields:
        populated = sum(1 for r in records if not is_nullish(get_path(r, field)))
        populated_total += populated
        by_field[field] = populated / len(records)
    overall = populated_total / (len(records) * len(key_fields))
    return overall, by_field


def geocode_rates(
    records: Iterable[Mapping[str, Any]],
    on_warning: WarnFn | None = None,
) -> tuple[float, float]:
    """(success among records needing geocoding, plausibility among coords)."""
    records = list(records)
    needing = [
        r for r in records if get_path(r, "spatial.geocode_method") != "source_provided"
    ]
    having_coords = [
        r
        for r in records
        if get_path(r, "spatial.lat") is not None
        and get_path(r, "spatial.lon") is not None
    ]
    if needing:
        resolved = sum(
            1
            for r in needing
            if get_path(r, "spatial.lat") is not None
            and get_path(r, "spatial.lon") is not None
        )
        success = resolved / len(needing)
    else:
        success = 1.0
    if having_coords:
        plausible = sum(
            1 for r in having_coords if get_path(r, "spatial.geocode_plausible") is True
        ) / len(having_coords)
    else:
        if on_warning is not None:
            on_warning("degenerate_metric", "no records carry coordinates")
        plausible = 0.0
    return success, plausible


def repair_stats(
    run_log: Iterable[Mapping[str, Any]],
    on_warning: WarnFn | None = None,
) -> tuple[float, float, float]:
    """(pre-repair pass rate, post-repair pass rate, repair attempt rate)."""
    entries = list(run_log)
    if not entries:
        if on_warning is not None:
            on_warning("degenerate_metric", "repair stats over an empty run log")
        return 1.0, 1.0, 0.0
    count = len(entries)
    pre = sum(1 for e in entries if e["pre_valid"]) / count
    post = sum(1 for e in entries if e["post_valid"]) / count
    repaired = sum(1 for e in entries if e["attempts"] >= 1) / count
    return pre, post, repaired


def runtime_stats(per_record_seconds: Iterable[float]) -> tuple[float, float]:
    """(mean, nearest-rank 95th percentile) of per-record runtimes."""
    values = sorted(float(v) for v in per_record_seconds)
    if not values:
        raise ValueError("runtime_stats needs a non-empty sample")
    rank = max(1, math.ceil(0.95 * len(values)))
    return statistics.fmean(values), values[rank - 1]


# ---------------------------------------------------------------------------
# Report assembly


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    f1: float
    structured_field_accuracy: float
    completeness_overall: float
    completeness_by_field: Mapping[str, float]
    geocode_success_rate: float
    geocode_plausible_rate: float
    pre_pass_rate: float
    post_pass_rate: float
    repair_rate: float
    runtime_mean_s: float
    runtime_p95_s: float
    record_count: int

    def __post_init__(self) -> None:
        for name in (
            "precision",
            "recall",
            "f1",
            "structured_field_accuracy",
            "completeness_overall",
            "geocode_success_rate",
            "geocode_plausible_rate",
            "pre_pass_rate",
            "post_pass_rate",
            "repair_rate",
        ):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} out of range: {value}")
        if self.f1 != f1_score(self.precision, self.recall):
            raise ValueError("f1 does not match its precision/recall")

    def as_dict(self) -> dict[str, Any]:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "structured_field_accuracy": self.structured_field_accuracy,
            "completeness_overall": self.completeness_overall,
            "completeness_by_field": dict(self.completeness_by_field),
            "geocode_success_rate": self.geocode_success_rate,
            "geocode_plausible_rate": self.geocode_plausible_rate,
            "pre_pass_rate": self.pre_pass_rate,
            "post_pass_rate": self.post_pass_rate,
            "repair_rate": self.repair_rate,
            "runtime_mean_s": self.runtime_mean_s,
            "runtime_p95_s": self.runtime_p95_s,
            "record_count": self.record_count,
        }


def build_report(
    parsed: Iterable[Mapping[str, Any]],
    gold: Iterable[Mapping[str, Any]],
    *,
    schema: SchemaDefinition | None = None,
    rules: Mapping[str, MatchRule] | None = None,
    key_fields: Sequence[str] = DEFAULT_KEY_FIELDS,
    run_log: Iterable[Mapping[str, Any]] = (),
    runtimes: Iterable[float] = (),
    on_warning: WarnFn | None = None,
) -> MetricsReport:
    parsed = [dict(r) for r in parsed]
    gold = [dict(r) for r in gold]
    schema = schema if schema is not None else default_schema()
    if rules is None:
        rules = default_match_rules(schema)
    _require_rules(rules, scored_paths(schema))
    alignment = align(parsed, gold)
    precision, recall, f1 = field_prf(alignment, rules)
    accuracy = structured_field_accuracy(
        alignment, rules, structured_paths(schema), on_warning
    )
    overall, by_field = completeness(parsed, key_fields, on_warning)
    success, plausible = geocode_rates(parsed, on_warning)
    pre, post, repaired = repair_stats(run_log, on_warning)
    runtime_values = list(runtimes)
    if runtime_values:
        mean_s, p95_s = runtime_stats(runtime_values)
    else:
        if on_warning is not None:
            on_warning("degenerate_metric", "no runtime samples recorded")
        mean_s = p95_s = 0.0
    return MetricsReport(
        precision=precision,
        recall=recall,
        f1=f1,
        structured_field_accuracy=accuracy,
        completeness_overall=overall,
        completeness_by_field=by_field,
        geocode_success_rate=success,
        geocode_plausible_rate=plausible,
        pre_pass_rate=pre,
        post_pass_rate=post,
        repair_rate=repaired,
        runtime_mean_s=mean_s,
        runtime_p95_s=p95_s,
        record_count=len(parsed),
    )


def format_report(reports: Mapping[str, MetricsReport], config_digest: str) -> str:
    """Aligned side-by-side table, one column per labeled report."""
    labels = list(reports)
    rows: list[tuple[str, list[str]]] = []

    def add(name: str, values: list[Any], fmt: str = "{:.4f}") -> None:
        rows.append((name, [fmt.format(v) for v in values]))

    scalar_fields = [
        "precision",
        "recall",
        "f1",
        "structured_field_accuracy",
        "completeness_overall",
        "geocode_success_rate",
        "geocode_plausible_rate",
        "pre_pass_rate",
        "post_pass_rate",
        "repair_rate",
        "runtime_mean_s",
        "runtime_p95_s",
    ]
    for field in scalar_fields:
        add(field, [getattr(reports[label], field) for label in labels])
    add("record_count", [reports[label].record_count for label in labels], "{}")
    key_fields = sorted(
        {f for label in labels for f in reports[label].completeness_by_field}
    )
    for field in key_fields:
        add(
            f"completeness[{field}]",
            [reports[label].completeness_by_field.get(field, 0.0) for label in labels],
        )

    name_width = max(len("metric"), max(len(name) for name, _ in rows))
    widths = [
        max(len(label), max(len(values[i]) for _, values in rows))
        for i, label in enumerate(labels)
    ]
    lines = [f"run config digest: {config_digest}", ""]
    header = "  ".join(
        ["metric".ljust(name_width)] + [l.rjust(w) for l, w in zip(labels, widths)]
    )
    lines.append(header)
    lines.append("-" * len(header))
    for name, values in rows:
        lines.append(
            "  ".join(
                [name.ljust(name_width)]
                + [v.rjust(w) for v, w in zip(values, widths)]
            )
        )
    return "\n".join(lines) + "\n"
