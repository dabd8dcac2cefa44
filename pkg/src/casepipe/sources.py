"""Source detection: decide which publisher family a document came from.

A signature is a labeled bag of marker regexes. A signature qualifies when at
least ``min_markers`` distinct markers hit; among qualifying signatures the
highest distinct-marker count wins, with ties broken by lower priority value
and then lexicographic label so detection is deterministic. No qualifying
signature means the source is unknown; downstream routing decides what to do
with that (model path when enabled, generic rules with a warning otherwise).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from casepipe.config import ConfigError, read_jsonl
from casepipe.schema import SOURCE_FAMILIES

UNKNOWN_LABEL = "unknown"
UNKNOWN_FAMILY = "unknown"

DEFAULT_MIN_MARKERS = 2


@dataclass(frozen=True)
class SourceSignature:
    source_label: str
    family: str
    markers: tuple[str, ...]
    min_markers: int = DEFAULT_MIN_MARKERS
    priority: int = 100
    case_sensitive: bool = False

    def __post_init__(self) -> None:
        if not self.source_label or self.source_label == UNKNOWN_LABEL:
            raise ConfigError(f"bad signature label {self.source_label!r}")
        if self.family not in SOURCE_FAMILIES or self.family == UNKNOWN_FAMILY:
            raise ConfigError(f"{self.source_label}: bad family {self.family!r}")
        if not self.markers:
            raise ConfigError(f"{self.source_label}: signature has no markers")
        if not 1 <= self.min_markers <= len(self.markers):
            raise ConfigError(
                f"{self.source_label}: min_markers must be in 1..{len(self.markers)}"
            )
        flags = 0 if self.case_sensitive else re.IGNORECASE
        compiled = []
        for marker in self.markers:
            try:
                compiled.append(re.compile(marker, flags | re.MULTILINE))
            except re.error as exc:
                raise ConfigError(
                    f"{self.source_label}: bad marker {marker!r}: {exc}"
                ) from exc
        object.__setattr__(self, "_compiled", tuple(compiled))

    def match(self, text: str) -> list[tuple[int, int]]:
        """Distinct markers that hit: (marker index, offset of first hit)."""
        hits = []
        for index, pattern in enumerate(self._compiled):  # type: ignore[attr-defined]
            m = pattern.search(text)
            if m is not None:
                hits.append((index, m.start()))
        return hits


@dataclass(frozen=True)
class DetectionResult:
    source_label: str
    family: str
    matched_markers: tuple[tuple[int, int], ...]
    score: int

    @property
    def is_unknown(self) -> bool:
        return self.source_label == UNKNOWN_LABEL


UNKNOWN_DETECTION = DetectionResult(UNKNOWN_LABEL, UNKNOWN_FAMILY, (), 0)


def load_signatures(path: str | Path) -> list[SourceSignature]:
    signatures = []
    labels = set()
    for rec in read_jsonl(path):
        sig = SourceSignature(
            source_label=rec.get("source_label", ""),
            family=rec.get("family", ""),
            markers=tuple(rec.get("markers", ())),
            min_markers=int(rec.get("min_markers", DEFAULT_MIN_MARKERS)),
            priority=int(rec.get("priority", 100)),
            case_sensitive=bool(rec.get("case_sensitive", False)),
        )
        if sig.source_label in labels:
            raise ConfigError(f"duplicate signature label {sig.source_label!r}")
        labels.add(sig.source_label)
        signatures.append(sig)
    if not signatures:
        raise ConfigError(f"no signatures in {path}")
    return signatures


def detect_source(text: str, signatures: Iterable[SourceSignature]) -> DetectionResult:
    """Pick the best-matching signature for a piece of document text."""
    best: tuple[int, int, str] | None = None
    best_result: DetectionResult | None = None
    for sig in signatures:
        hits = sig.match(text)
        score = len(hits)
        if score < sig.min_markers:
            continue
        # Highest score first, then lowest priority value, then label.
        rank = (-score, sig.priority, sig.source_label)
        if best is None or rank < best:
            best = rank
            best_result = DetectionResult(
                source_label=sig.source_label,
                family=sig.family,
                matched_markers=tuple(hits),
                score=score,
            )
    return best_result if best_result is not None else UNKNOWN_DETECTION


def signatures_by_label(
    signatures: Iterable[SourceSignature],
) -> Mapping[str, SourceSignature]:
    return {sig.source_label: sig for sig in signatures}
