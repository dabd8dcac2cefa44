"""Deterministic rule-based field extraction.

Each source family has a rule set: label rules that lift one field out of the
segment text with exactly one capture group. Three scopes control how the
pattern is applied:

* ``line``     - the pattern runs against each line in turn,
* ``section``  - the pattern runs once against the whole segment with
                 MULTILINE and DOTALL, so a capture can span a titled block,
* ``document`` - like section but without DOTALL (single-line captures
                 anywhere in the segment).

For a given field path the first match wins; later matches are dropped and
reported through the warning callback. Every candidate keeps the character
span of its capture within the segment so provenance can point back at the
evidence verbatim. A trailing end-of-document sentinel (used by the synthetic
corpus to park ground truth) is stripped before any pattern runs.

Narrative movement cues ("en route to Maryland or Delaware") are not label
rules: a fixed cue pattern finds destination phrases in prose and fans the
place list out into indexed candidates. Only explicit cue phrasing counts;
nothing is inferred.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

from casepipe.config import ConfigError, read_jsonl
from casepipe.extract import CaseSegment
from casepipe.sources import DetectionResult

FAMILY_REGISTRY = "registry_form"
FAMILY_BULLETIN = "bulletin"
FAMILY_NARRATIVE = "narrative_profile"
RULE_FAMILIES = (FAMILY_REGISTRY, FAMILY_BULLETIN, FAMILY_NARRATIVE)

SCOPE_LINE = "line"
SCOPE_SECTION = "section"
SCOPE_DOCUMENT = "document"
_SCOPES = (SCOPE_LINE, SCOPE_SECTION, SCOPE_DOCUMENT)

# Everything from this line on is not document content.
END_SENTINEL = "----- END CASE DOCUMENT -----"

# Explicit movement cue phrasing. The capture extends across "or"/"and"
# separated place names so one sentence can carry several destinations.
# A place word only carries periods as a dotted abbreviation ("D.C."), so a
# sentence-ending period stays outside the capture and the capitalized word
# opening the next sentence cannot be mistaken for a continuation.
_PLACE_WORD = r"(?:[A-Z]\.(?:[A-Z]\.)+|[A-Z][A-Za-z'-]*)"
_PLACE = rf"{_PLACE_WORD}(?: {_PLACE_WORD})*"
CUE_PATTERN = re.compile(
    r"\b(?:en route to|headed (?:to|toward|for)|heading (?:to|toward)|"
    r"travel(?:ing|ling) (?:to|toward))\s+"
    rf"({_PLACE}(?:(?:,| or| and)\s+{_PLACE})*)"
)
_CUE_SPLIT_RE = re.compile(r",\s*|\s+or\s+|\s+and\s+")

WarnFn = Callable[[str, str], None]


@dataclass(frozen=True)
class LabelRule:
    pattern_id: str
    field_path: str
    pattern: str
    scope: str = SCOPE_LINE

    def __post_init__(self) -> None:
        if self.scope not in _SCOPES:
            raise ConfigError(f"{self.pattern_id}: unknown scope {self.scope!r}")
        flags = re.MULTILINE
        if self.scope == SCOPE_SECTION:
            flags |= re.DOTALL
        try:
            compiled = re.compile(self.pattern, flags)
        except re.error as exc:
            raise ConfigError(f"{self.pattern_id}: bad pattern: {exc}") from exc
        if compiled.groups != 1:
            raise ConfigError(
                f"{self.pattern_id}: pattern must have exactly one capture group"
            )
        object.__setattr__(self, "_compiled", compiled)

    @property
    def compiled(self) -> re.Pattern[str]:
        return self._compiled  # type: ignore[attr-defined]


@dataclass(frozen=True)
class FieldCandidate:
    field_path: str
    raw_value: str
    pattern_id: str
    char_start: int
    char_end: int


@dataclass
class DraftRecord:
    source_label: str
    segment_index: int
    candidates: dict[str, FieldCandidate] = field(default_factory=dict)


def load_ruleset(path: str | Path) -> list[LabelRule]:
    rules = []
    ids = set()
    for rec in read_jsonl(path):
        rule = LabelRule(
            pattern_id=rec.get("pattern_id", ""),
            field_path=rec.get("field_path", ""),
            pattern=rec.get("pattern", ""),
            scope=rec.get("scope", SCOPE_LINE),
        )
        if rule.pattern_id in ids:
            raise ConfigError(f"duplicate pattern_id {rule.pattern_id!r} in {path}")
        ids.add(rule.pattern_id)
        rules.append(rule)
    if not rules:
        raise ConfigError(f"no rules in {path}")
    return rules


def load_rulesets(directory: str | Path) -> dict[str, list[LabelRule]]:
    """Load ``<family>.jsonl`` rule sets for every known family."""
    directory = Path(directory)
    rulesets = {}
    for family in RULE_FAMILIES:
        path = directory / f"{family}.jsonl"
        if not path.is_file():
            raise ConfigError(f"missing ruleset for family {family}: {path}")
        rulesets[family] = load_ruleset(path)
    return rulesets


def strip_sentinel(text: str) -> str:
    """Drop the end-of-document sentinel and anything after it."""
    index = text.find(END_SENTINEL)
    return text if index < 0 else text[:index]


def _iter_matches(rule: LabelRule, text: str):
    if rule.scope == SCOPE_LINE:
        offset = 0
        for line in text.split("\n"):
            m = rule.compiled.search(line)
            if m is not None:
                yield m, offset
            offset += len(line) + 1
    else:
        for m in rule.compiled.finditer(text):
            yield m, 0


def apply_rules(
    segment: CaseSegment,
    rules: Iterable[LabelRule],
    source_label: str,
    on_warning: WarnFn | None = None,
) -> DraftRecord:
    """Run label rules over a segment; first match per field path wins."""
    text = strip_sentinel(segment.text)
    draft = DraftRecord(source_label=source_label, segment_index=segment.segment_index)
    for rule in rules:
        for m, offset in _iter_matches(rule, text):
            raw = m.group(1)
            if raw is None or not raw.strip():
                continue
            start, end = offset + m.start(1), offset + m.end(1)
            existing = draft.candidates.get(rule.field_path)
            if existing is not None:
                if on_warning is not None:
                    on_warning(
                        "duplicate_field_match",
                        f"{rule.field_path}: rule {rule.pattern_id} matched again at "
                        f"offset {start}; keeping value from {existing.pattern_id}",
                    )
                continue
            draft.candidates[rule.field_path] = FieldCandidate(
                field_path=rule.field_path,
                raw_value=raw.strip(),
                pattern_id=rule.pattern_id,
                char_start=start,
                char_end=end,
            )
    return draft


def extract_movement_cues(
    text: str, base_index: int = 0
) -> list[FieldCandidate]:
    """Find explicit movement cue phrases and split out each destination."""
    candidates = []
    position = base_index
    seen: set[str] = set()
    for m in CUE_PATTERN.finditer(text):
        capture = m.group(1)
        cursor = 0
        for part in _CUE_SPLIT_RE.split(capture):
            place = part.strip()
            if not place:
                continue
            rel = capture.find(part, cursor)
            cursor = rel + len(part)
            key = place.casefold()
            if key in seen:
                continue
            seen.add(key)
            start = m.start(1) + rel
            candidates.append(
                FieldCandidate(
                    field_path=f"narrative_osint.movement_cues.{position}",
                    raw_value=place,
                    pattern_id="movement_cue",
                    char_start=start,
                    char_end=start + len(part),
                )
            )
            position += 1
    return candidates


def parse_registry_form(
    segment: CaseSegment,
    rules: Iterable[LabelRule],
    source_label: str = "registry_form",
    on_warning: WarnFn | None = None,
) -> DraftRecord:
    """Parse a labeled registry form segment."""
    return apply_rules(segment, rules, source_label, on_warning)


def parse_bulletin(
    segment: CaseSegment,
    rules: Iterable[LabelRule],
    source_label: str = "bulletin",
    on_warning: WarnFn | None = None,
) -> DraftRecord:
    """Parse a terse all-caps police bulletin segment."""
    return apply_rules(segment, rules, source_label, on_warning)


def parse_narrative_profile(
    segment: CaseSegment,
    rules: Iterable[LabelRule],
    source_label: str = "narrative_profile",
    on_warning: WarnFn | None = None,
) -> DraftRecord:
    """Parse a prose-heavy profile: label rules plus movement cue phrases."""
    draft = apply_rules(segment, rules, source_label, on_warning)
    for candidate in extract_movement_cues(strip_sentinel(segment.text)):
        draft.candidates[candidate.field_path] = candidate
    return draft


_PARSERS = {
    FAMILY_REGISTRY: parse_registry_form,
    FAMILY_BULLETIN: parse_bulletin,
    FAMILY_NARRATIVE: parse_narrative_profile,
}


def dispatch(
    detection: DetectionResult,
    segment: CaseSegment,
    rulesets: Mapping[str, Iterable[LabelRule]],
    on_warning: WarnFn | None = None,
) -> DraftRecord:
    """Route a segment to its family parser.

    Unknown sources fall back to the registry-form rules (the most generic
    label shape) and say so through the warning callback.
    """
    family = detection.family
    if family in _PARSERS:
        parser = _PARSERS[family]
        rules = rulesets.get(family)
        if rules is None:
            raise ConfigError(f"no ruleset configured for family {family!r}")
        return parser(segment, rules, detection.source_label, on_warning)
    if on_warning is not None:
        on_warning(
            "unknown_source_fallback",
            f"source {detection.source_label!r} has no family; using generic "
            "registry rules",
        )
    return parse_registry_form(
        segment,
        rulesets.get(FAMILY_REGISTRY, ()),
        detection.source_label,
        on_warning,
    )
