"""Acceptance gates for the assembled pipeline.

Each test here is one release gate, run against synthetic corpora in tmp
dirs with deterministic backends standing in for a hosted model. Alongside
the usual pytest verdict, every gate prints a single ``[criterion N]``
pass/fail line so a captured log still shows which gate broke.

The brute-force scoring oracle lives in test_metrics and is reused here so
the two suites cannot drift apart.
"""

import functools
import json
import math
import random
import time
from pathlib import Path

from casepipe.cli import RunConfig, evaluate_outputs, run
from casepipe.config import bundled_path
from casepipe.emit import flatten_record, unflatten_row
from casepipe.extract import prenormalize
from casepipe.geocode import Gazetteer, plausible_coords
from casepipe.llm import encode_gold_marker
from casepipe.metrics import (
    DEFAULT_KEY_FIELDS,
    align,
    completeness,
    default_match_rules,
    field_prf,
    geocode_rates,
    repair_stats,
    slot_counts,
    structured_field_accuracy,
    structured_paths,
)
from casepipe.rules import (
    END_SENTINEL,
    FAMILY_BULLETIN,
    FAMILY_NARRATIVE,
    FAMILY_REGISTRY,
)
from casepipe.schema import default_schema, flatten_leaves, validate
from casepipe.synth import SynthesisSpec, synthesize, write_corpus

from test_metrics import _oracle_dig, _oracle_null, oracle_counts

INGEST = "2025-01-15T09:30:00+00:00"
SCHEMA = default_schema()
RULES = default_match_rules(SCHEMA)


def criterion(number: int, label: str):
    """Print one [criterion N] line next to the pytest verdict."""

    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"[criterion {number}] {label}: FAIL")
                raise
            print(f"[criterion {number}] {label}: PASS")

        return wrapper

    return decorate


def _config(corpus: Path, out: Path, **overrides) -> RunConfig:
    settings = {
        "input_dir": corpus / "docs",
        "output_dir": out,
        "backend": "oracle",
        "ingest_ts": INGEST,
    }
    settings.update(overrides)
    return RunConfig(**settings)


def _read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]


def _copy(record: dict) -> dict:
    return json.loads(json.dumps(record))


@criterion(1, "schema gate on a 60-case corpus")
def test_criterion_1_schema_gate(tmp_path):
    started = time.perf_counter()
    corpus = tmp_path / "corpus"
    cases = write_corpus(
        SynthesisSpec(seed=401, count_per_family={FAMILY_REGISTRY: 60}), corpus
    )
    assert len(cases) == 60

    summary = run(_config(corpus, tmp_path / "out", paths_enabled="rule"))
    records = _read_jsonl(tmp_path / "out" / "cases_rule.jsonl")
    assert summary.records_out_rule == 60
    assert len(records) == 60
    for record in records:
        assert validate(record, SCHEMA).valid

    # One malformed candidate per violation code. Each edit must produce
    # exactly the expected (field_path, code) pair and nothing else.
    base = cases[0].gold
    assert validate(base, SCHEMA).valid
    expectations = [
        (lambda r: r.pop("demographic"), ("demographic", "missing_required")),
        (
            lambda r: r["demographic"].__setitem__("age_years", "fifteen"),
            ("demographic.age_years", "wrong_type"),
        ),
        (
            lambda r: r["demographic"].__setitem__("age_years", 999),
            ("demographic.age_years", "out_of_range"),
        ),
        (
            lambda r: r["demographic"].__setitem__("sex", "wombat"),
            ("demographic.sex", "bad_enum"),
        ),
        (
            lambda r: r["spatial"].__setitem__("postal_code", "ABCDE"),
            ("spatial.postal_code", "bad_pattern"),
        ),
        (
            lambda r: r["temporal"].__setitem__("last_seen_ts", "June 14"),
            ("temporal.last_seen_ts", "bad_timestamp"),
        ),
        (lambda r: r.__setitem__("extra_field", 1), ("extra_field", "unknown_key")),
    ]
    for edit, expected in expectations:
        candidate = _copy(base)
        edit(candidate)
        assert validate(candidate, SCHEMA).codes() == [expected]

    assert time.perf_counter() - started < 5.0


@criterion(2, "metrics agree with brute-force enumeration")
def test_criterion_2_metrics_oracle_equivalence(tmp_path):
    spec = SynthesisSpec(
        seed=402,
        count_per_family={FAMILY_BULLETIN: 3, FAMILY_NARRATIVE: 3, FAMILY_REGISTRY: 3},
    )
    gold = [case.gold for case in synthesize(spec)]
    assert len(gold) == 9

    # Deterministic fates: exact copies, value mismatches, nulled slots, a
    # missing parsed record, an anonymous record, comparator stressors, and
    # one stray parsed record nothing in gold matches.
    parsed = []
    for position, source in enumerate(gold):
        record = _copy(source)
        if position == 1:
            record["demographic"]["name"] = "Someone Else"
        elif position == 2:
            record["demographic"]["age_years"] = None
            record["spatial"]["city"] = None
        elif position == 3:
            continue
        elif position == 4:
            record["case_id"] = None
        elif position == 5:
            ts = record["temporal"]["last_seen_ts"]
            if isinstance(ts, str) and len(ts) >= 10:
                record["temporal"]["last_seen_ts"] = ts[:10]
        elif position == 6:
            record["outcome"]["status"] = str(record["outcome"]["status"]).upper()
            cues = record["narrative_osint"]["movement_cues"]
            record["narrative_osint"]["movement_cues"] = [
                cue.upper() for cue in reversed(cues)
            ]
        elif position == 8:
            record["spatial"]["geocode_method"] = "source_provided"
            record["spatial"]["geocode_plausible"] = False
        parsed.append(record)
    parsed.append(
        {
            "case_id": "ghost-0001",
            "demographic": {"name": "Nobody Real"},
            "outcome": {"status": "missing"},
        }
    )

    alignment = align(parsed, gold)
    precision, recall, f1 = field_prf(alignment, RULES)
    accuracy = structured_field_accuracy(alignment, RULES, structured_paths(SCHEMA))
    want = oracle_counts(parsed, gold, RULES)
    for got, expected in zip((precision, recall, f1, accuracy), want):
        assert math.isclose(got, expected, rel_tol=0.0, abs_tol=1e-12)

    overall, _ = completeness(parsed, DEFAULT_KEY_FIELDS)
    populated = sum(
        1
        for record in parsed
        for field in DEFAULT_KEY_FIELDS
        if not _oracle_null(_oracle_dig(record, field))
    )
    want_overall = populated / (len(parsed) * len(DEFAULT_KEY_FIELDS))
    assert math.isclose(overall, want_overall, rel_tol=0.0, abs_tol=1e-12)

    success, plausible = geocode_rates(parsed)
    needing = [
        r for r in parsed if _oracle_dig(r, "spatial.geocode_method") != "source_provided"
    ]
    coords = [
        r
        for r in parsed
        if _oracle_dig(r, "spatial.lat") is not None
        and _oracle_dig(r, "spatial.lon") is not None
    ]
    want_success = (
        sum(
            1
            for r in needing
            if _oracle_dig(r, "spatial.lat") is not None
            and _oracle_dig(r, "spatial.lon") is not None
        )
        / len(needing)
        if needing
        else 1.0
    )
    want_plausible = (
        sum(1 for r in coords if _oracle_dig(r, "spatial.geocode_plausible") is True)
        / len(coords)
        if coords
        else 0.0
    )
    assert math.isclose(success, want_success, rel_tol=0.0, abs_tol=1e-12)
    assert math.isclose(plausible, want_plausible, rel_tol=0.0, abs_tol=1e-12)

    # Worked example: two matches, one value mismatch, one spurious slot,
    # one missed slot. The mismatch charges both sides.
    gold_one = {
        "case_id": "X-1",
        "demographic": {"name": "Avery Quill", "age_years": 16},
        "outcome": {"status": "missing"},
    }
    parsed_one = {
        "case_id": "X-1",
        "demographic": {"name": "avery  quill", "age_years": 15},
        "spatial": {"city": "Richmond"},
    }
    worked = align([parsed_one], [gold_one])
    assert slot_counts(worked, RULES) == (2, 2, 2)
    assert field_prf(worked, RULES) == (0.5, 0.5, 0.5)


@criterion(3, "extraction paths order as expected")
def test_criterion_3_path_ordering(tmp_path):
    started = time.perf_counter()

    dropout = tmp_path / "dropout"
    write_corpus(
        SynthesisSpec(
            seed=403,
            count_per_family={FAMILY_BULLETIN: 12, FAMILY_NARRATIVE: 12},
            label_dropout_rate=0.5,
        ),
        dropout,
    )
    out = tmp_path / "dropout_out"
    run(
        _config(
            dropout,
            out,
            backend="dropout_oracle",
            backend_params={"rate": 0.1},
            gold_path=dropout / "gold.jsonl",
        )
    )
    reports = evaluate_outputs(out, dropout / "gold.jsonl", SCHEMA)
    assert reports["llm"].f1 > reports["rule"].f1
    assert reports["llm"].completeness_overall >= reports["rule"].completeness_overall

    forms = tmp_path / "forms"
    write_corpus(SynthesisSpec(seed=404, count_per_family={FAMILY_REGISTRY: 12}), forms)
    forms_out = tmp_path / "forms_out"
    run(_config(forms, forms_out, paths_enabled="rule"))
    forms_reports = evaluate_outputs(forms_out, forms / "gold.jsonl", SCHEMA)
    assert forms_reports["rule"].f1 >= 0.95

    assert time.perf_counter() - started < 60.0


@criterion(4, "repair loop rates, withholding, minimal edits")
def test_criterion_4_repair_loop(tmp_path):
    corpus = tmp_path / "corpus"
    write_corpus(SynthesisSpec(seed=405, count_per_family={FAMILY_REGISTRY: 10}), corpus)

    baseline_out = tmp_path / "baseline"
    run(_config(corpus, baseline_out, paths_enabled="llm"))
    baseline = {r["case_id"]: r for r in _read_jsonl(baseline_out / "cases_llm.jsonl")}
    assert len(baseline) == 10

    # Every fifth extraction is invalid, then repaired: 20% repair rate.
    fix_out = tmp_path / "fix"
    summary = run(
        _config(
            corpus,
            fix_out,
            paths_enabled="llm",
            backend="invalid_then_fix",
            backend_params={"inject_every": 5},
        )
    )
    rows = summary.repair_log["llm"]
    pre, post, repaired_rate = repair_stats(rows)
    assert math.isclose(pre, 0.8, rel_tol=0.0, abs_tol=1e-9)
    assert math.isclose(post, 1.0, rel_tol=0.0, abs_tol=1e-9)
    assert math.isclose(repaired_rate, 0.2, rel_tol=0.0, abs_tol=1e-9)

    # Repaired records may differ from the clean baseline only at the cited
    # path (nulled by the repair) and the repair counter; everything else
    # must come through untouched.
    repaired_ids = {row["case_id"] for row in rows if row["attempts"] >= 1}
    assert len(repaired_ids) == 2
    fixed = {r["case_id"]: r for r in _read_jsonl(fix_out / "cases_llm.jsonl")}
    assert set(fixed) == set(baseline)
    for case_id, record in fixed.items():
        got = flatten_leaves(record)
        want = flatten_leaves(baseline[case_id])
        assert set(got) == set(want)
        changed = {key for key in got if got[key] != want[key]}
        if case_id in repaired_ids:
            assert changed == {"demographic.age_years", "provenance.repair_count"}
        else:
            assert changed == set()

    # When repairs never land the records are withheld and logged as errors.
    never_out = tmp_path / "never"
    run(
        _config(
            corpus,
            never_out,
            paths_enabled="llm",
            backend="never_fix",
            backend_params={"inject_every": 5},
        )
    )
    emitted = {r["case_id"] for r in _read_jsonl(never_out / "cases_llm.jsonl")}
    withheld = set(baseline) - emitted
    assert len(withheld) == 2
    errors = [
        w for w in _read_jsonl(never_out / "warnings.jsonl") if w["severity"] == "error"
    ]
    assert {w["case_id"] for w in errors} == withheld
    for code in ("repair_exhausted", "record_withheld"):
        assert {w["case_id"] for w in errors if w["code"] == code} == withheld


@criterion(5, "geocode cache serves the second run")
def test_criterion_5_geocode_cache(tmp_path):
    corpus = tmp_path / "corpus"
    write_corpus(
        SynthesisSpec(
            seed=406,
            count_per_family={FAMILY_BULLETIN: 4, FAMILY_NARRATIVE: 4, FAMILY_REGISTRY: 4},
        ),
        corpus,
    )
    cache = tmp_path / "cache.jsonl"
    cold_out = tmp_path / "cold"
    warm_out = tmp_path / "warm"
    cold = run(_config(corpus, cold_out, cache_path=cache))
    warm = run(_config(corpus, warm_out, cache_path=cache))

    assert cold.geocode_cache["misses"] > 0
    assert warm.geocode_cache["hits"] > 0
    assert warm.geocode_cache["misses"] == 0
    assert warm.gazetteer_lookups == 0
    for name in (
        "cases_rule.jsonl",
        "cases_rule.csv",
        "cases_llm.jsonl",
        "cases_llm.csv",
        "warnings.jsonl",
    ):
        assert (cold_out / name).read_bytes() == (warm_out / name).read_bytes()

    # The null island guard holds for every configured region and for the
    # no-expectation case.
    boxes = Gazetteer.load(bundled_path("gazetteer.jsonl")).region_boxes()
    assert boxes
    for region in [None, *sorted(boxes)]:
        assert plausible_coords(0.0, 0.0, region, boxes) is False


@criterion(6, "round trips are lossless")
def test_criterion_6_round_trips(tmp_path):
    spec = SynthesisSpec(
        seed=407,
        count_per_family={
            FAMILY_BULLETIN: 334,
            FAMILY_NARRATIVE: 334,
            FAMILY_REGISTRY: 334,
        },
    )
    cases = synthesize(spec)
    assert len(cases) == 1002

    # Null whole groups at a time so cross-field pairing stays legal, then
    # check every record survives the CSV cells unchanged.
    rng = random.Random(4071)
    null_groups = [
        ("demographic.height_min_cm", "demographic.height_max_cm"),
        ("demographic.weight_min_kg", "demographic.weight_max_kg"),
        ("demographic.age_years",),
        ("demographic.name",),
        ("demographic.race_ethnicity",),
        ("spatial.county",),
        ("spatial.postal_code",),
        ("temporal.reported_missing_ts",),
        ("narrative_osint.circumstances",),
        ("narrative_osint.clothing_description",),
        ("narrative_osint.distinctive_features",),
        ("outcome.status_ts",),
    ]
    for case in cases:
        record = case.gold
        for group in null_groups:
            if rng.random() < 0.3:
                for path in group:
                    section, leaf = path.split(".")
                    record[section][leaf] = None
        if rng.random() < 0.3:
            record["spatial"]["lat"] = None
            record["spatial"]["lon"] = None
            record["spatial"]["geocode_method"] = "none"
            record["spatial"]["geocode_plausible"] = None
        if rng.random() < 0.3:
            record["narrative_osint"]["movement_cues"] = []
        assert validate(record, SCHEMA).valid
        row = flatten_record(record, SCHEMA)
        assert unflatten_row(row, SCHEMA) == record

    # Stray control bytes, newlines, and exotic whitespace must normalize to
    # a fixed point in one pass.
    alphabet = (
        "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"
        " \t\r\n\x00\x07\x0b\x0c\x1b\x7f"
        ".,;:!?'\"()[]{}<>/\\|@#$%^&*-_=+~`"
        "éüñßÆøåÎç…—–·№"
        " ​  ﻿"
    )
    rng = random.Random(97)
    for _ in range(1000):
        text = "".join(rng.choice(alphabet) for _ in range(rng.randrange(0, 160)))
        once = prenormalize(text)
        assert prenormalize(once) == once

    # Emitted line counts track emitted record counts, including runs where
    # some records are withheld.
    corpus = tmp_path / "corpus"
    write_corpus(
        SynthesisSpec(
            seed=408,
            count_per_family={FAMILY_BULLETIN: 2, FAMILY_NARRATIVE: 2, FAMILY_REGISTRY: 2},
        ),
        corpus,
    )
    for label, overrides in (
        ("plain", {}),
        ("withheld", {"backend": "never_fix", "backend_params": {"inject_every": 3}}),
    ):
        out = tmp_path / f"out_{label}"
        summary = run(_config(corpus, out, **overrides))
        rule_lines = (out / "cases_rule.jsonl").read_text(encoding="utf-8").splitlines()
        llm_lines = (out / "cases_llm.jsonl").read_text(encoding="utf-8").splitlines()
        assert len(rule_lines) == summary.records_out_rule
        assert len(llm_lines) == summary.records_out_llm
    assert summary.records_out_llm < summary.records_out_rule


@criterion(7, "byte-identical reruns")
def test_criterion_7_determinism(tmp_path):
    spec = SynthesisSpec(
        seed=409,
        count_per_family={FAMILY_BULLETIN: 2, FAMILY_NARRATIVE: 2, FAMILY_REGISTRY: 2},
        label_dropout_rate=0.25,
        narrative_cue_rate=0.5,
    )
    corpus_a = tmp_path / "corpus_a"
    corpus_b = tmp_path / "corpus_b"
    write_corpus(spec, corpus_a)
    write_corpus(spec, corpus_b)
    names_a = sorted(p.relative_to(corpus_a) for p in corpus_a.rglob("*") if p.is_file())
    names_b = sorted(p.relative_to(corpus_b) for p in corpus_b.rglob("*") if p.is_file())
    assert names_a == names_b
    for name in names_a:
        assert (corpus_a / name).read_bytes() == (corpus_b / name).read_bytes()

    outputs = []
    for label, workers in (("one", 1), ("two", 1), ("wide", 4)):
        out = tmp_path / f"run_{label}"
        run(_config(corpus_a, out, paths_enabled="rule", max_in_flight=workers))
        outputs.append(out)
    for name in ("cases_rule.jsonl", "cases_rule.csv", "warnings.jsonl"):
        blobs = {(out / name).read_bytes() for out in outputs}
        assert len(blobs) == 1


@criterion(8, "registry fixture lands on both paths")
def test_criterion_8_trace_fixture(tmp_path):
    payload = {
        "demographic": {
            "name": "Dana Crosbie",
            "sex": "female",
            "age_years": 17,
            "height_min_cm": 163,
            "height_max_cm": 163,
            "weight_min_kg": 54,
            "weight_max_kg": 54,
            "race_ethnicity": "White",
        },
        "spatial": {
            "last_seen_location": "Culpeper, Virginia 22701",
            "city": "Culpeper",
            "state": "Virginia",
            "postal_code": "22701",
            "county": "Culpeper County",
        },
        "temporal": {
            "last_seen_ts": "2023-06-14T09:30:00-05:00",
            "reported_missing_ts": "2023-06-15",
        },
        "narrative_osint": {
            "circumstances": "Dana was last seen leaving a friend's house on Mill Road.",
            "movement_cues": [],
        },
        "outcome": {"status": "missing"},
    }
    document = "\n".join(
        [
            "MISSING PERSONS REGISTRY",
            "Registry Case Number: MPR-2023-4099",
            "",
            "Full Name: Dana Crosbie",
            "Sex: Female",
            "Age at Disappearance: 17",
            "Height: 5'4\"",
            "Weight: 120 lbs",
            "Race / Ethnicity: White",
            "Date of Last Contact: 2023-06-14 09:30",
            "Date Reported Missing: 2023-06-15",
            "Last Seen Location: Culpeper, Virginia 22701",
            "County: Culpeper County",
            "Case Status: Missing",
            "",
            "Circumstances of Disappearance:",
            "Dana was last seen leaving a friend's house on Mill Road.",
            "",
            END_SENTINEL,
            encode_gold_marker(payload),
            "",
        ]
    )
    corpus = tmp_path / "corpus" / "docs"
    corpus.mkdir(parents=True)
    (corpus / "trace-fixture.txt").write_text(document, encoding="utf-8")

    out = tmp_path / "out"
    summary = run(_config(tmp_path / "corpus", out))
    assert summary.records_out_rule == 1
    assert summary.records_out_llm == 1
    (rule_record,) = _read_jsonl(out / "cases_rule.jsonl")
    (llm_record,) = _read_jsonl(out / "cases_llm.jsonl")

    for record, path_label in ((rule_record, "rule"), (llm_record, "llm")):
        assert record["provenance"]["extraction_path"] == path_label
        spatial = record["spatial"]
        assert spatial["city"] == "Culpeper"
        assert spatial["state"] == "Virginia"
        assert spatial["postal_code"] == "22701"
        assert (spatial["lat"], spatial["lon"]) == (38.47, -77.996)
        assert spatial["geocode_plausible"] is True
        assert record["temporal"]["last_seen_ts"] == "2023-06-14T09:30:00-05:00"
        assert record["narrative_osint"]["circumstances"] is not None
        assert validate(record, SCHEMA).valid

    # Same field structure on both paths; values differ only inside
    # provenance, which records how each path got there.
    rule_flat = flatten_leaves(rule_record)
    llm_flat = flatten_leaves(llm_record)
    origins = "provenance.field_origins"
    assert {k for k in rule_flat if not k.startswith(origins)} == {
        k for k in llm_flat if not k.startswith(origins)
    }
    for key, value in rule_flat.items():
        if not key.startswith("provenance."):
            assert llm_flat[key] == value
