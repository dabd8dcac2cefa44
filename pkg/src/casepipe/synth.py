"""Deterministic synthetic corpus generation for the three document families.

Every synthetic case is built facts-first: a per-case RNG picks values from
fixed pools, the family template renders those values into document text, and
the same values become the gold record. A label dropout knob removes labeled
lines (or reworks prose so label rules cannot see them) while keeping the
facts readable in plain prose, which is what opens the gap between the rule
path and a model that can read running text. The gold answer travels with the
document itself as an encoded marker line after the end sentinel, where the
oracle backend can find it.

Generation is a pure function of the SynthesisSpec: same values, same bytes.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from datetime import date, timedelta
from pathlib import Path
from typing import Any, Iterator, Mapping

from casepipe.config import ConfigError, bundled_path, read_jsonl, write_jsonl
from casepipe.llm import encode_gold_marker
from casepipe.rules import (
    END_SENTINEL,
    FAMILY_BULLETIN,
    FAMILY_NARRATIVE,
    FAMILY_REGISTRY,
    RULE_FAMILIES,
)
from casepipe.schema import SchemaDefinition, assemble_record, default_schema

FAMILY_LABELS = {
    FAMILY_REGISTRY: "missing_persons_registry",
    FAMILY_BULLETIN: "police_bulletin",
    FAMILY_NARRATIVE: "case_profile_site",
}

# Value pools. Converted measurements are precomputed so the gold side never
# depends on the harmonizer it is supposed to judge.
_FIRST_NAMES = (
    "Avery", "Jordan", "Riley", "Casey", "Morgan",
    "Quinn", "Rowan", "Skyler", "Emerson", "Finley",
)
_LAST_NAMES = (
    "Quill", "Marsh", "Holloway", "Bramble", "Thorne",
    "Wexford", "Caldwell", "Finch", "Mosely", "Tarrant",
)
_HEIGHTS = (  # (display, whole centimeters)
    ("4'11\"", 150), ("5'2\"", 157), ("5'4\"", 163),
    ("5'7\"", 170), ("5'10\"", 178), ("6'1\"", 185),
)
_WEIGHTS_LB = ((98, 44), (110, 50), (120, 54), (135, 61), (150, 68), (180, 82))
_RACES = ("White", "Black", "Hispanic", "Asian", "Unknown")
_SEXES = (("Female", "female", "F"), ("Male", "male", "M"), ("Unknown", "unknown", "U"))
_CLOTHING = (
    "a gray windbreaker and jeans",
    "a red rain jacket",
    "a navy school hoodie",
    "a denim jacket and white sneakers",
    "a green flannel shirt",
)
_CUE_SETS = (
    ("Maryland", "Delaware"),
    ("Baltimore",),
    ("Richmond", "Norfolk"),
    ("Ocean City",),
    ("Dover",),
)
_SPOTS = (
    "a friend's residence",
    "the public library",
    "a bus stop on Main Street",
    "a shopping plaza",
    "the county fairgrounds",
)
_DESTINATIONS = ("home", "at work", "at school", "at a relative's home")
_DAYPARTS = ("morning", "afternoon", "evening", "late evening")

# Unambiguous gazetteer places only; the two same-named entries would make a
# postal-less mention unresolvable on purpose, which gold cases must avoid.
_PLACE_POOL = (
    ("Culpeper", "Virginia", "22701"),
    ("Norfolk", "Virginia", "23501"),
    ("Richmond", "Virginia", "23220"),
    ("Fairfax", "Virginia", "22030"),
    ("Baltimore", "Maryland", "21201"),
    ("Annapolis", "Maryland", "21401"),
    ("Frederick", "Maryland", "21701"),
    ("Wilmington", "Delaware", "19801"),
    ("Dover", "Delaware", "19901"),
)

_TZ_DEFAULT = "-05:00"

# Fields a template can drop from rule-visible form, in template order.
_DROPPABLE = {
    FAMILY_REGISTRY: (
        "name", "sex", "age", "height", "weight", "race",
        "last_contact", "reported", "location", "county", "status",
    ),
    FAMILY_BULLETIN: ("missing_line", "last_seen", "height_weight", "wearing"),
    FAMILY_NARRATIVE: ("age", "date", "place", "wearing", "status"),
}


@dataclass(frozen=True)
class SynthesisSpec:
    """Everything that determines a corpus. Equal specs mean equal bytes."""

    seed: int
    count_per_family: Mapping[str, int]
    narrative_cue_rate: float = 0.7
    label_dropout_rate: float = 0.0

    def __post_init__(self) -> None:
        for family in self.count_per_family:
            if family not in RULE_FAMILIES:
                raise ConfigError(f"unknown family {family!r}")
        for family, count in self.count_per_family.items():
            if count < 0:
                raise ConfigError(f"{family}: count must be >= 0")
        for name in ("narrative_cue_rate", "label_dropout_rate"):
            rate = getattr(self, name)
            if not 0.0 <= rate <= 1.0:
                raise ConfigError(f"{name} must be within [0, 1], got {rate}")


@dataclass(frozen=True)
class SynthCase:
    document_id: str
    family: str
    source_label: str
    document_text: str
    gold: dict[str, Any]
    cue_present: bool
    dropped: tuple[str, ...] = ()


@dataclass
class _Facts:
    """One case's ground truth plus the display strings templates print."""

    name: str
    first_name: str
    sex_display: str
    sex: str
    sex_code: str
    age: int
    height_display: str
    height_min_cm: int
    height_max_cm: int
    height_display_single: str
    height_single_cm: int
    weight_display: str
    weight_min_kg: int
    weight_max_kg: int
    weight_display_single: str
    weight_single_kg: int
    race: str
    city: str
    state: str
    postal: str
    lat: float
    lon: float
    county: str
    last_seen: date
    reported: date
    status_display: str
    status: str
    clothing: str
    spot: str
    daypart: str
    destination: str
    cue_places: tuple[str, ...] = ()

    @property
    def circumstances_registry(self) -> str:
        return (
            f"{self.name} was last seen leaving {self.spot} in the "
            f"{self.daypart}. The subject did not arrive {self.destination} "
            "and has not contacted family since."
        )


def _coords_index() -> dict[tuple[str, str], tuple[float, float]]:
    index = {}
    for row in read_jsonl(bundled_path("gazetteer.jsonl")):
        index[(row["place"], row["region"])] = (row["lat"], row["lon"])
    return index


_COORDS = _coords_index()


def _us_date(value: date) -> str:
    return f"{value.month:02d}/{value.day:02d}/{value.year}"


def _long_date(value: date) -> str:
    return value.strftime("%B %d, %Y")


def _day_first_date(value: date) -> str:
    return f"{value.day} {value.strftime('%B')} {value.year}"


def _make_facts(rng: random.Random, cue: bool) -> _Facts:
    first = rng.choice(_FIRST_NAMES)
    last = rng.choice(_LAST_NAMES)
    sex_display, sex, sex_code = rng.choice(_SEXES)
    height_index = rng.randrange(len(_HEIGHTS))
    height_single, height_single_cm = _HEIGHTS[height_index]
    if rng.random() < 0.35 and height_index + 1 < len(_HEIGHTS):
        high = _HEIGHTS[height_index + 1]
        height_display = f"{height_single} - {high[0]}"
        height_pair = (height_single_cm, high[1])
    else:
        height_display, height_pair = height_single, (height_single_cm, height_single_cm)
    weight_index = rng.randrange(len(_WEIGHTS_LB))
    pounds, weight_single_kg = _WEIGHTS_LB[weight_index]
    weight_single = f"{pounds} lbs"
    if rng.random() < 0.35 and weight_index + 1 < len(_WEIGHTS_LB):
        high_w = _WEIGHTS_LB[weight_index + 1]
        weight_display = f"{pounds} - {high_w[0]} lbs"
        weight_pair = (weight_single_kg, high_w[1])
    else:
        weight_display, weight_pair = weight_single, (weight_single_kg, weight_single_kg)
    city, state, postal = rng.choice(_PLACE_POOL)
    lat, lon = _COORDS[(city, state)]
    last_seen = date(2023, rng.randrange(1, 11), rng.randrange(1, 29))
    reported = last_seen + timedelta(days=rng.randrange(1, 6))
    if rng.random() < 0.8:
        status_display, status = "Missing", "missing"
    else:
        status_display, status = "Located", "located"
    return _Facts(
        name=f"{first} {last}",
        first_name=first,
        sex_display=sex_display,
        sex=sex,
        sex_code=sex_code,
        age=rng.randrange(12, 70),
        height_display=height_display,
        height_min_cm=height_pair[0],
        height_max_cm=height_pair[1],
        height_display_single=height_single,
        height_single_cm=height_single_cm,
        weight_display=weight_display,
        weight_min_kg=weight_pair[0],
        weight_max_kg=weight_pair[1],
        weight_display_single=weight_single,
        weight_single_kg=weight_single_kg,
        race=rng.choice(_RACES),
        city=city,
        state=state,
        postal=postal,
        lat=lat,
        lon=lon,
        county=f"{city} County",
        last_seen=last_seen,
        reported=reported,
        status_display=status_display,
        status=status,
        clothing=rng.choice(_CLOTHING),
        spot=rng.choice(_SPOTS),
        daypart=rng.choice(_DAYPARTS),
        destination=rng.choice(_DESTINATIONS),
        cue_places=rng.choice(_CUE_SETS) if cue else (),
    )


def _pick_dropped(rng: random.Random, family: str, rate: float) -> tuple[str, ...]:
    return tuple(name for name in _DROPPABLE[family] if rng.random() < rate)


def _cue_display(places: tuple[str, ...]) -> str:
    if len(places) == 1:
        return places[0]
    return " or ".join(places)


# ---------------------------------------------------------------------------
# Gold assembly


def _base_values(facts: _Facts, document_id: str, family: str) -> dict[str, Any]:
    return {
        "case_id": f"{document_id}#s0",
        "narrative_osint.movement_cues": list(facts.cue_places),
        "outcome.status": facts.status,
        "provenance.source_label": FAMILY_LABELS[family],
        "provenance.source_family": family,
        "provenance.extraction_path": "rule",
        "provenance.document_id": document_id,
        "provenance.repair_count": 0,
        "provenance.warnings_count": 0,
        "temporal.timezone": _TZ_DEFAULT,
    }


def _spatial_values(facts: _Facts, with_postal: bool) -> dict[str, Any]:
    location = f"{facts.city}, {facts.state}"
    if with_postal:
        location += f" {facts.postal}"
    values: dict[str, Any] = {
        "spatial.city": facts.city,
        "spatial.state": facts.state,
        "spatial.last_seen_location": location,
        "spatial.lat": facts.lat,
        "spatial.lon": facts.lon,
        "spatial.geocode_method": "gazetteer",
        "spatial.geocode_plausible": True,
    }
    if with_postal:
        values["spatial.postal_code"] = facts.postal
    return values


def _gold_values(
    facts: _Facts, document_id: str, family: str, dropped: frozenset[str]
) -> dict[str, Any]:
    values = _base_values(facts, document_id, family)
    if family == FAMILY_REGISTRY:
        values.update(_spatial_values(facts, with_postal=True))
        values.update(
            {
                "demographic.name": facts.name,
                "demographic.sex": facts.sex,
                "demographic.age_years": facts.age,
                "demographic.height_min_cm": facts.height_min_cm,
                "demographic.height_max_cm": facts.height_max_cm,
                "demographic.weight_min_kg": facts.weight_min_kg,
                "demographic.weight_max_kg": facts.weight_max_kg,
                "demographic.race_ethnicity": facts.race,
                "spatial.county": facts.county,
                "temporal.last_seen_ts": facts.last_seen.isoformat(),
                "temporal.reported_missing_ts": facts.reported.isoformat(),
                "narrative_osint.circumstances": facts.circumstances_registry,
            }
        )
    elif family == FAMILY_BULLETIN:
        values.update(_spatial_values(facts, with_postal=False))
        # A bulletin is inherently a missing-person notice; it never carries
        # an outcome label, so the truth of the document is the default.
        values["outcome.status"] = "missing"
        values.update(
            {
                "demographic.name": facts.name,
                "demographic.sex": facts.sex,
                "demographic.age_years": facts.age,
                "demographic.height_min_cm": facts.height_single_cm,
                "demographic.height_max_cm": facts.height_single_cm,
                "demographic.weight_min_kg": facts.weight_single_kg,
                "demographic.weight_max_kg": facts.weight_single_kg,
                "narrative_osint.clothing_description": facts.clothing,
                "temporal.last_seen_ts": facts.last_seen.isoformat(),
            }
        )
    else:
        values.update(_spatial_values(facts, with_postal=False))
        values.update(
            {
                "demographic.name": facts.name,
                "demographic.sex": "unknown",
                "demographic.age_years": facts.age,
                "narrative_osint.clothing_description": facts.clothing,
                "narrative_osint.circumstances": _narrative_paragraph(facts, dropped),
                "temporal.last_seen_ts": facts.last_seen.isoformat(),
            }
        )
    return values


# Fields the pipeline derives on its own; the marker payload carries content
# only, so the oracle path exercises the same downstream stages as the rules.
_PIPELINE_PATHS = (
    "case_id",
    "spatial.lat",
    "spatial.lon",
    "spatial.geocode_method",
    "spatial.geocode_plausible",
    "temporal.timezone",
)


def _marker_payload(values: Mapping[str, Any], schema: SchemaDefinition) -> dict[str, Any]:
    content = {
        path: value
        for path, value in values.items()
        if path not in _PIPELINE_PATHS and not path.startswith("provenance.")
    }
    payload = assemble_record(content, schema)
    payload.pop("provenance", None)
    return payload


# ---------------------------------------------------------------------------
# Family templates


def _registry_lines(facts: _Facts, index: int, dropped: frozenset[str]) -> list[str]:
    labeled = {
        "name": f"Full Name: {facts.name}",
        "sex": f"Sex: {facts.sex_display}",
        "age": f"Age at Disappearance: {facts.age}",
        "height": f"Height: {facts.height_display}",
        "weight": f"Weight: {facts.weight_display}",
        "race": f"Race / Ethnicity: {facts.race}",
        "last_contact": f"Date of Last Contact: {_us_date(facts.last_seen)}",
        "reported": f"Date Reported Missing: {_us_date(facts.reported)}",
        "location": f"Last Seen Location: {facts.city}, {facts.state} {facts.postal}",
        "county": f"County: {facts.county}",
        "status": f"Case Status: {facts.status_display}",
    }
    notes = {
        "name": f"The case file concerns {facts.name}.",
        "sex": f"The subject is recorded as {facts.sex_display.lower()}.",
        "age": f"The subject is {facts.age} years old.",
        "height": f"Stands about {facts.height_display}.",
        "weight": f"Weighs roughly {facts.weight_display}.",
        "race": f"Described in the file as {facts.race}.",
        "last_contact": f"Last contact noted on {_day_first_date(facts.last_seen)}.",
        "reported": f"Reported to authorities on {_day_first_date(facts.reported)}.",
        "location": f"The subject was last known to be around {facts.city}.",
        "county": f"The area falls under {facts.county}.",
        "status": (
            "The case remains open."
            if facts.status == "missing"
            else "The subject has since been found."
        ),
    }
    lines = [
        "MISSING PERSONS REGISTRY",
        f"Registry Case Number: MPR-2023-{4000 + index:04d}",
        "",
    ]
    lines.extend(labeled[name] for name in _DROPPABLE[FAMILY_REGISTRY] if name not in dropped)
    lines.extend(["", "Circumstances of Disappearance:", facts.circumstances_registry])
    note_sentences = [notes[name] for name in _DROPPABLE[FAMILY_REGISTRY] if name in dropped]
    if note_sentences:
        lines.extend(["", "Case Notes:", " ".join(note_sentences)])
    return lines


def _bulletin_lines(facts: _Facts, index: int, dropped: frozenset[str]) -> list[str]:
    labeled = {
        "missing_line": f"MISSING: {facts.name} ({facts.sex_code}, {facts.age})",
        "last_seen": f"LAST SEEN: {_us_date(facts.last_seen)} near {facts.city}, {facts.state}",
        "height_weight": (
            f"HEIGHT/WEIGHT: {facts.height_display_single} / {facts.weight_display_single}"
        ),
        "wearing": f"WEARING: {facts.clothing}",
    }
    notes = {
        "missing_line": f"subject {facts.name}, age {facts.age}, sex {facts.sex_code}",
        "last_seen": (
            f"seen {_day_first_date(facts.last_seen)} around {facts.city} {facts.state}"
        ),
        "height_weight": (
            f"about {facts.height_display_single} and {facts.weight_display_single}"
        ),
        "wearing": f"had on {facts.clothing}",
    }
    lines = [
        "MISSING PERSON BULLETIN",
        f"Bulletin No: PB-2023-{index:04d}",
        "",
    ]
    lines.extend(
        labeled[name] for name in _DROPPABLE[FAMILY_BULLETIN] if name not in dropped
    )
    clauses = [notes[name] for name in _DROPPABLE[FAMILY_BULLETIN] if name in dropped]
    if clauses:
        lines.append("NOTES: " + "; ".join(clauses) + ".")
    lines.append("CONTACT: Regional Tip Line 1-800-555-0188")
    return lines


def _narrative_paragraph(facts: _Facts, dropped: frozenset[str]) -> str:
    subject = facts.name if "age" in dropped else f"{facts.name}, {facts.age},"
    date_part = "" if "date" in dropped else f" on {_long_date(facts.last_seen)}"
    place_part = "" if "place" in dropped else f" in {facts.city}, {facts.state}"
    sentences = [f"{subject} was last seen{date_part}{place_part}."]
    if "age" in dropped:
        sentences.append(f"The subject is {facts.age} years old.")
    if "date" in dropped:
        sentences.append(
            f"Records place the disappearance on {_day_first_date(facts.last_seen)}."
        )
    if "place" in dropped:
        sentences.append(f"Sightings were reported around {facts.city}.")
    if "wearing" in dropped:
        sentences.append(f"The subject may have been dressed in {facts.clothing}.")
    else:
        sentences.append(f"The subject was wearing {facts.clothing}.")
    if facts.cue_places:
        sentences.append(
            f"{facts.first_name} is believed to be en route to "
            f"{_cue_display(facts.cue_places)}."
        )
    if "status" in dropped:
        sentences.append(
            "The case is still listed as open."
            if facts.status == "missing"
            else "The subject has since been located safe."
        )
    sentences.append("Anyone with information should contact the county tip line.")
    return " ".join(sentences)


def _narrative_lines(facts: _Facts, index: int, dropped: frozenset[str]) -> list[str]:
    lines = [
        f"CASE PROFILE: {facts.name}",
        f"Case Reference: CP-2023-{index:04d}",
        "",
        _narrative_paragraph(facts, dropped),
    ]
    if "status" not in dropped:
        lines.extend(["", f"Status: {facts.status_display}"])
    return lines


_TEMPLATES = {
    FAMILY_REGISTRY: _registry_lines,
    FAMILY_BULLETIN: _bulletin_lines,
    FAMILY_NARRATIVE: _narrative_lines,
}


def _jitter(lines: list[str], rng: random.Random) -> list[str]:
    """Deterministic formatting noise that pre-normalization removes."""
    noisy: list[str] = []
    for line in lines:
        if line == "":
            # Only runs of three or more blank lines collapse back to one.
            noisy.extend([""] * (3 if rng.random() < 0.15 else 1))
            continue
        if ": " in line and rng.random() < 0.2:
            line = line.replace(": ", ":  ", 1)
        if rng.random() < 0.1:
            line += "  "
        noisy.append(line)
    return noisy


def render_family(
    facts: _Facts,
    family: str,
    index: int,
    dropped: frozenset[str],
    rng: random.Random,
    marker: str,
) -> str:
    lines = _TEMPLATES[family](facts, index, dropped)
    lines = _jitter(lines, rng)
    lines.extend(["", END_SENTINEL, marker])
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Corpus assembly


def _iter_cases(spec: SynthesisSpec, schema: SchemaDefinition) -> Iterator[SynthCase]:
    for family in sorted(spec.count_per_family):
        for index in range(spec.count_per_family[family]):
            rng = random.Random(f"{spec.seed}:{family}:{index}")
            cue = family == FAMILY_NARRATIVE and rng.random() < spec.narrative_cue_rate
            facts = _make_facts(rng, cue)
            dropped = _pick_dropped(rng, family, spec.label_dropout_rate)
            document_id = f"{family}-{index:04d}"
            values = _gold_values(facts, document_id, family, frozenset(dropped))
            gold = assemble_record(values, schema)
            marker = encode_gold_marker(_marker_payload(values, schema))
            text = render_family(facts, family, index, frozenset(dropped), rng, marker)
            yield SynthCase(
                document_id=document_id,
                family=family,
                source_label=FAMILY_LABELS[family],
                document_text=text,
                gold=gold,
                cue_present=cue,
                dropped=dropped,
            )


def synthesize(spec: SynthesisSpec, schema: SchemaDefinition | None = None) -> list[SynthCase]:
    return list(_iter_cases(spec, schema if schema is not None else default_schema()))


def write_corpus(
    spec: SynthesisSpec,
    out_dir: str | Path,
    schema: SchemaDefinition | None = None,
) -> list[SynthCase]:
    """Write documents, gold records, and a manifest under ``out_dir``."""
    out_dir = Path(out_dir)
    cases = synthesize(spec, schema)
    docs_dir = out_dir / "docs"
    docs_dir.mkdir(parents=True, exist_ok=True)
    manifest = []
    for case in cases:
        doc_path = docs_dir / f"{case.document_id}.txt"
        doc_path.write_text(case.document_text, encoding="utf-8")
        manifest.append(
            {
                "document_id": case.document_id,
                "family": case.family,
                "source_label": case.source_label,
                "file": f"docs/{case.document_id}.txt",
                "seed": spec.seed,
                "narrative_cue_rate": spec.narrative_cue_rate,
                "label_dropout_rate": spec.label_dropout_rate,
                "cue_present": case.cue_present,
                "dropped": list(case.dropped),
            }
        )
    write_jsonl(out_dir / "gold.jsonl", (case.gold for case in cases))
    write_jsonl(out_dir / "manifest.jsonl", manifest)
    return cases
