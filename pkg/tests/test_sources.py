from __future__ import annotations

import pytest

from casepipe.config import ConfigError, write_jsonl
from casepipe.sources import (
    DEFAULT_MIN_MARKERS,
    SourceSignature,
    detect_source,
    load_signatures,
)

REGISTRY_SIG = SourceSignature(
    source_label="missing_persons_registry",
    family="registry_form",
    markers=("MISSING PERSONS REGISTRY", "Date of Last Contact", "Registry Case Number"),
    min_markers=2,
    priority=10,
)
BULLETIN_SIG = SourceSignature(
    source_label="police_bulletin",
    family="bulletin",
    markers=("MISSING PERSON BULLETIN", r"^MISSING:", r"^LAST SEEN:"),
    min_markers=2,
    priority=20,
)

REGISTRY_TEXT = (
    "MISSING PERSONS REGISTRY - CASE REPORT\n"
    "Registry Case Number: MP102335\n"
    "Date of Last Contact: 07/01/2023\n"
)


class TestDetection:
    def test_registry_detected(self):
        result = detect_source(REGISTRY_TEXT, [REGISTRY_SIG, BULLETIN_SIG])
        assert result.source_label == "missing_persons_registry"
        assert result.family == "registry_form"
        assert result.score == 3

    def test_score_counts_distinct_markers(self):
        text = "Date of Last Contact: 1/1/2020\nDate of Last Contact: 2/2/2020\n"
        result = detect_source(text + "MISSING PERSONS REGISTRY", [REGISTRY_SIG])
        assert result.score == 2

    def test_below_min_markers_is_unknown(self):
        result = detect_source("Date of Last Contact: 07/01/2023", [REGISTRY_SIG])
        assert result.is_unknown
        assert result.score == 0
        assert result.matched_markers == ()

    def test_no_hits_is_unknown(self):
        result = detect_source("nothing relevant here", [REGISTRY_SIG, BULLETIN_SIG])
        assert result.source_label == "unknown"
        assert result.family == "unknown"

    def test_markers_case_insensitive_by_default(self):
        text = "missing persons registry\nregistry case number: 5\n"
        result = detect_source(text, [REGISTRY_SIG])
        assert result.source_label == "missing_persons_registry"

    def test_case_sensitive_override(self):
        sig = SourceSignature(
            source_label="strict",
            family="bulletin",
            markers=("BULLETIN", "ALERT"),
            min_markers=1,
            case_sensitive=True,
        )
        assert detect_source("bulletin alert", [sig]).is_unknown
        assert detect_source("BULLETIN", [sig]).source_label == "strict"

    def test_tie_breaks_on_priority_then_label(self):
        a = SourceSignature("alpha", "bulletin", ("one", "two"), 2, priority=50)
        b = SourceSignature("beta", "bulletin", ("one", "two"), 2, priority=10)
        text = "one two"
        assert detect_source(text, [a, b]).source_label == "beta"
        c = SourceSignature("beta2", "bulletin", ("one", "two"), 2, priority=10)
        winner = detect_source(text, [c, b])
        assert winner.source_label == "beta"

    def test_matched_marker_offsets(self):
        result = detect_source(REGISTRY_TEXT, [REGISTRY_SIG])
        for index, offset in result.matched_markers:
            marker_re = REGISTRY_SIG.markers[index]
            assert REGISTRY_TEXT[offset:].upper().startswith(
                marker_re.upper().lstrip("^")
            )


class TestSignatureConfig:
    def test_defaults(self):
        sig = SourceSignature("x", "bulletin", ("a", "b", "c"))
        assert sig.min_markers == DEFAULT_MIN_MARKERS

    def test_min_markers_bounds(self):
        with pytest.raises(ConfigError):
            SourceSignature("x", "bulletin", ("a",), min_markers=2)
        with pytest.raises(ConfigError):
            SourceSignature("x", "bulletin", ("a",), min_markers=0)

    def test_empty_markers_rejected(self):
        with pytest.raises(ConfigError):
            SourceSignature("x", "bulletin", ())

    def test_bad_regex_rejected(self):
        with pytest.raises(ConfigError):
            SourceSignature("x", "bulletin", ("(", "b"))

    def test_reserved_label_rejected(self):
        with pytest.raises(ConfigError):
            SourceSignature("unknown", "bulletin", ("a", "b"))

    def test_load_signatures(self, tmp_path):
        path = tmp_path / "signatures.jsonl"
        write_jsonl(
            path,
            [
                {
                    "source_label": "a",
                    "family": "bulletin",
                    "markers": ["x", "y"],
                    "min_markers": 1,
                    "priority": 5,
                }
            ],
        )
        sigs = load_signatures(path)
        assert len(sigs) == 1
        assert sigs[0].priority == 5

    def test_load_rejects_duplicate_labels(self, tmp_path):
        path = tmp_path / "signatures.jsonl"
        rec = {"source_label": "a", "family": "bulletin", "markers": ["x", "y"]}
        write_jsonl(path, [rec, rec])
        with pytest.raises(ConfigError):
            load_signatures(path)
