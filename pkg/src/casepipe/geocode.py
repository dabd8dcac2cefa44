"""Offline place resolution with a persistent cache and plausibility checks.

Both extraction paths call this module with the same gazetteer and the same
cache file, so coordinate behavior can never differ between them. The
gazetteer is a local line-oriented file; there is no network geocoder and no
fuzzy matching. Every query outcome, including a miss, is cached so a warm
second run touches the gazetteer zero times.

Plausibility is a coarse sanity check, not a guarantee: coordinates must be
non-null, not at the (0, 0) null island, and inside the expected region's
bounding box (the min/max extent of that region's gazetteer entries plus a
fixed margin).
"""

from __future__ import annotations

import json
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

from casepipe.config import ConfigError, read_jsonl
from casepipe.schema import LAT_RANGE, LON_RANGE, SchemaDefinition, resolve_path

WarnFn = Callable[[str, str], None]

DEFAULT_BOX_MARGIN = 0.25
_ZERO_EPS = 1e-6
_TOKEN_RE = re.compile(r"[0-9a-z]+")
_POSTAL_TOKEN_RE = re.compile(r"^\d{5}$")

RegionBoxes = Mapping[str, tuple[float, float, float, float]]


def normalize_place(raw: str) -> str:
    """Canonical query key: casefold, punctuation to separators, "|"-joined."""
    tokens = _TOKEN_RE.findall(raw.casefold())
    if not tokens:
        raise ValueError(f"empty place query: {raw!r}")
    return "|".join(tokens)


@dataclass(frozen=True)
class GazetteerEntry:
    place: str
    region: str
    postal_codes: tuple[str, ...]
    lat: float
    lon: float

    def __post_init__(self) -> None:
        if not (LAT_RANGE[0] <= self.lat <= LAT_RANGE[1]):
            raise ValueError(f"latitude out of range for {self.place!r}: {self.lat}")
        if not (LON_RANGE[0] <= self.lon <= LON_RANGE[1]):
            raise ValueError(f"longitude out of range for {self.place!r}: {self.lon}")


@dataclass(frozen=True)
class GeocodeQuery:
    normalized_key: str
    bias_region: str | None = None

    def __post_init__(self) -> None:
        if not self.normalized_key:
            raise ValueError("normalized_key must be non-empty")


@dataclass(frozen=True)
class GeocodeResult:
    lat: float | None
    lon: float | None
    matched_place: str | None
    cache_hit: bool
    plausible: bool | None

    def __post_init__(self) -> None:
        coords = [self.lat is None, self.lon is None, self.matched_place is None]
        if len(set(coords)) != 1:
            raise ValueError("lat, lon, and matched_place must be null together")
        if (self.plausible is None) != (self.lat is None):
            raise ValueError("plausible must be set exactly when coordinates are")

    @property
    def matched(self) -> bool:
        return self.lat is not None


class Gazetteer:
    """In-memory place table with postal, place+region, and place indices.

    ``lookup_count`` counts resolution attempts against the indices; cache
    tests rely on it staying flat during warm runs.
    """

    def __init__(self, entries: list[GazetteerEntry]):
        if not entries:
            raise ConfigError("gazetteer has no entries")
        self.entries = tuple(entries)
        self._by_postal: dict[str, list[GazetteerEntry]] = {}
        self._by_place_region: dict[tuple[str, str], GazetteerEntry] = {}
        self._by_place: dict[str, list[GazetteerEntry]] = {}
        self._lock = threading.Lock()
        self._lookups = 0
        for entry in entries:
            place_key = normalize_place(entry.place)
            region_key = normalize_place(entry.region)
            pr = (place_key, region_key)
            if pr in self._by_place_region:
                raise ConfigError(f"duplicate gazetteer entry: {entry.place}, {entry.region}")
            self._by_place_region[pr] = entry
            self._by_place.setdefault(place_key, []).append(entry)
            for code in entry.postal_codes:
                self._by_postal.setdefault(code, []).append(entry)

    @classmethod
    def load(cls, path: str | Path) -> "Gazetteer":
        entries = []
        for row in read_jsonl(path):
            try:
                entries.append(
                    GazetteerEntry(
                        place=row["place"],
                        region=row["region"],
                        postal_codes=tuple(row.get("postal_codes", [])),
                        lat=float(row["lat"]),
                        lon=float(row["lon"]),
                    )
                )
            except KeyError as exc:
                raise ConfigError(f"{path}: gazetteer row missing {exc}") from exc
        return cls(entries)

    @property
    def lookup_count(self) -> int:
        return self._lookups

    def region_boxes(self, margin: float = DEFAULT_BOX_MARGIN) -> dict[str, tuple[float, float, float, float]]:
        """Bounding box per region key: (lat_min, lat_max, lon_min, lon_max)."""
        boxes: dict[str, tuple[float, float, float, float]] = {}
        for entry in self.entries:
            key = normalize_place(entry.region)
            if key in boxes:
                lat_min, lat_max, lon_min, lon_max = boxes[key]
                boxes[key] = (
                    min(lat_min, entry.lat - margin),
                    max(lat_max, entry.lat + margin),
                    min(lon_min, entry.lon - margin),
                    max(lon_max, entry.lon + margin),
                )
            else:
                boxes[key] = (
                    entry.lat - margin,
                    entry.lat + margin,
                    entry.lon - margin,
                    entry.lon + margin,
                )
        return boxes

    def resolve(
        self,
        normalized_key: str,
        bias_region: str | None,
        on_warning: WarnFn | None = None,
    ) -> GazetteerEntry | None:
        """Match order: postal code, place+in-string region, bias region, unique place."""
        with self._lock:
            self._lookups += 1
        warn = on_warning if on_warning is not None else (lambda code, msg: None)
        tokens = normalized_key.split("|")

        for token in tokens:
            if _POSTAL_TOKEN_RE.match(token):
                hits = self._by_postal.get(token, [])
                if len(hits) == 1:
                    return hits[0]
                if len(hits) > 1:
                    warn("ambiguous_place", f"postal code {token} maps to several places")
                    return None

        place_key, region_key = self._split_region(tokens)
        if region_key is not None:
            entry = self._by_place_region.get((place_key, region_key))
            if entry is not None:
                return entry

        if bias_region is not None:
            bias_key = normalize_place(bias_region)
            entry = self._by_place_region.get((place_key, bias_key))
            if entry is not None:
                return entry

        hits = self._by_place.get(place_key, [])
        if len(hits) == 1:
            return hits[0]
        if len(hits) > 1:
            warn(
                "ambiguous_place",
                f"{place_key!r} exists in several regions and no region was given",
            )
        return None

    def _split_region(self, tokens: list[str]) -> tuple[str, str | None]:
        """Split trailing region tokens off a query, if a known region matches."""
        plain = [t for t in tokens if not _POSTAL_TOKEN_RE.match(t)]
        regions = {normalize_place(e.region) for e in self.entries}
        for cut in range(1, len(plain)):
            suffix = "|".join(plain[cut:])
            if suffix in regions:
                return "|".join(plain[:cut]), suffix
        return "|".join(plain), None


class GeocodeCache:
    """Persistent key -> (lat, lon, matched_place) map with negative entries.

    The file is append-only JSONL; reloading replays it in order so the last
    write for a key wins. Missing files mean an empty cache.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._data: dict[str, tuple[float, float, str] | None] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        if self.path is not None and self.path.is_file():
            for row in read_jsonl(self.path):
                key = row.get("key")
                if key is None:
                    raise ConfigError(f"{self.path}: cache row without key")
                if row.get("lat") is None:
                    self._data[key] = None
                else:
                    self._data[key] = (row["lat"], row["lon"], row["matched_place"])

    def __len__(self) -> int:
        return len(self._data)

    def contains(self, key: str) -> bool:
        return key in self._data

    def get(self, key: str) -> tuple[float, float, str] | None:
        return self._data.get(key)

    def lookup(self, key: str) -> tuple[bool, tuple[float, float, str] | None]:
        """Like get, but distinguishes absent keys and counts hit/miss."""
        with self._lock:
            if key in self._data:
                self.hits += 1
                return True, self._data[key]
            self.misses += 1
            return False, None

    def put(self, key: str, value: tuple[float, float, str] | None) -> None:
        with self._lock:
            self._data[key] = value
            if self.path is None:
                return
            if value is None:
                row: dict[str, Any] = {"key": key, "lat": None, "lon": None, "matched_place": None}
            else:
                row = {"key": key, "lat": value[0], "lon": value[1], "matched_place": value[2]}
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8", newline="\n") as fh:
                fh.write(json.dumps(row, ensure_ascii=False))
                fh.write("\n")


def plausible_coords(
    lat: float,
    lon: float,
    expected_region: str | None,
    region_boxes: RegionBoxes,
) -> bool:
    """Non-zero coordinates that fall inside the expected region's box."""
    if abs(lat) <= _ZERO_EPS and abs(lon) <= _ZERO_EPS:
        return False
    if expected_region is None:
        return True
    box = region_boxes.get(normalize_place(expected_region))
    if box is None:
        return False
    lat_min, lat_max, lon_min, lon_max = box
    return lat_min <= lat <= lat_max and lon_min <= lon <= lon_max


def plausibility(
    result: GeocodeResult,
    expected_region: str | None,
    region_boxes: RegionBoxes,
) -> bool:
    if result.lat is None or result.lon is None:
        return False
    return plausible_coords(result.lat, result.lon, expected_region, region_boxes)


def _cache_key(query: GeocodeQuery) -> str:
    if query.bias_region is None:
        return query.normalized_key
    return f"{query.normalized_key}@{normalize_place(query.bias_region)}"


def geocode(
    query: GeocodeQuery,
    gazetteer: Gazetteer,
    cache: GeocodeCache,
    on_warning: WarnFn | None = None,
) -> GeocodeResult:
    """Resolve one query, consulting and feeding the cache."""
    key = _cache_key(query)
    present, cached = cache.lookup(key)
    boxes = gazetteer.region_boxes()
    if present:
        if cached is None:
            return GeocodeResult(None, None, None, cache_hit=True, plausible=None)
        lat, lon, place = cached
        return GeocodeResult(
            lat,
            lon,
            place,
            cache_hit=True,
            plausible=plausible_coords(lat, lon, query.bias_region, boxes),
        )

    entry = gazetteer.resolve(query.normalized_key, query.bias_region, on_warning)
    if entry is None:
        cache.put(key, None)
        return GeocodeResult(None, None, None, cache_hit=False, plausible=None)
    cache.put(key, (entry.lat, entry.lon, entry.place))
    return GeocodeResult(
        entry.lat,
        entry.lon,
        entry.place,
        cache_hit=False,
        plausible=plausible_coords(entry.lat, entry.lon, query.bias_region, boxes),
    )


def apply_geocode(
    record: dict,
    gazetteer: Gazetteer,
    cache: GeocodeCache,
    on_warning: WarnFn | None = None,
    schema: SchemaDefinition | None = None,
) -> None:
    """Fill spatial coordinates on a record in place, when a place is known.

    Records that already carry coordinates bypass resolution entirely and are
    marked source_provided. Records with no usable place text are left
    untouched (method stays "none", coordinates stay null).
    """
    del schema  # reserved for schema-specific spatial layouts
    spatial = record.get("spatial")
    if not isinstance(spatial, dict):
        return
    if spatial.get("lat") is not None and spatial.get("lon") is not None:
        if spatial.get("geocode_method") in (None, "none"):
            spatial["geocode_method"] = "source_provided"
        return

    state = resolve_path(record, "spatial.state")
    raw_place = resolve_path(record, "spatial.last_seen_location")
    if raw_place is None:
        parts = [
            resolve_path(record, "spatial.city"),
            state,
            resolve_path(record, "spatial.postal_code"),
        ]
        raw_place = " ".join(p for p in parts if p)
    if not raw_place or not _TOKEN_RE.search(raw_place.casefold()):
        return

    query = GeocodeQuery(normalize_place(raw_place), bias_region=state)
    result = geocode(query, gazetteer, cache, on_warning)
    if not result.matched:
        return
    spatial["lat"] = result.lat
    spatial["lon"] = result.lon
    spatial["geocode_method"] = "gazetteer"
    spatial["geocode_plausible"] = result.plausible


__all__ = [
    "DEFAULT_BOX_MARGIN",
    "Gazetteer",
    "GazetteerEntry",
    "GeocodeCache",
    "GeocodeQuery",
    "GeocodeResult",
    "apply_geocode",
    "geocode",
    "normalize_place",
    "plausibility",
    "plausible_coords",
]
