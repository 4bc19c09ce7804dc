"""UJIIndoorLoc-format corpora: loading, filtering, normalization, partitioning.

A corpus row is one WiFi fingerprint: 520 per-WAP RSS readings (integer dBm in
[-110, 0], or the sentinel 100 meaning "not detected") plus position and
provenance metadata. This module owns everything between the CSV files and the
numeric matrices the training code consumes: schema validation, feature and
target normalization, the three client partitioning axes, and the construction
of cross-device / cross-time domain scenarios.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from .seeding import derive_seed

N_WAPS = 520
RSS_NOT_DETECTED = 100
RSS_MIN = -110
RSS_MAX = 0
FLOOR_MIN, FLOOR_MAX = 0, 4
BUILDING_MIN, BUILDING_MAX = 0, 2
DEFAULT_RSS_FLOOR = -105.0

WAP_COLUMNS = tuple(f"WAP{i:03d}" for i in range(1, N_WAPS + 1))
META_COLUMNS = (
    "LONGITUDE",
    "LATITUDE",
    "FLOOR",
    "BUILDINGID",
    "SPACEID",
    "RELATIVEPOSITION",
    "USERID",
    "PHONEID",
    "TIMESTAMP",
)
EXPECTED_COLUMNS = WAP_COLUMNS + META_COLUMNS

PROVENANCES = ("training", "validation", "derived")
# Row ids are unique across the (training, validation) file pair so that
# disjointness of derived subsets can be checked by plain set algebra.
_ROW_ID_BASE = {"training": 0, "validation": 1 << 32, "derived": 1 << 33}

PARTITION_AXES = ("by_phone", "by_floor", "uniform_random", "pooled")
SCENARIO_KINDS = ("device", "time")


class CorpusFormatError(ValueError):
    """A corpus file violates the 529-column UJIIndoorLoc schema."""


@dataclass(frozen=True)
class FingerprintRecord:
    """One fingerprint: the 520-element RSS vector plus its metadata."""

    rss: np.ndarray
    longitude: float
    latitude: float
    floor: int
    building_id: int
    space_id: int
    relative_position: int
    user_id: int
    phone_id: int
    timestamp: int


_ARRAY_FIELDS = (
    "rss",
    "longitude",
    "latitude",
    "floor",
    "building_id",
    "space_id",
    "relative_position",
    "user_id",
    "phone_id",
    "timestamp",
    "row_ids",
)


@dataclass(frozen=True, eq=False)
class FingerprintSet:
    """An ordered, immutable collection of fingerprints (column arrays).

    `row_ids` are stable identifiers assigned at load time and preserved by
    every subset operation; derived sets carry a human-readable `description`
    of how they were produced.
    """

    rss: np.ndarray
    longitude: np.ndarray
    latitude: np.ndarray
    floor: np.ndarray
    building_id: np.ndarray
    space_id: np.ndarray
    relative_position: np.ndarray
    user_id: np.ndarray
    phone_id: np.ndarray
    timestamp: np.ndarray
    row_ids: np.ndarray
    provenance: str = "derived"
    description: str = ""

    def __post_init__(self) -> None:
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.rss.ndim != 2 or self.rss.shape[1] != N_WAPS:
            raise ValueError(f"rss must have shape (n, {N_WAPS}), got {self.rss.shape}")
        n = self.rss.shape[0]
        for name in _ARRAY_FIELDS[1:]:
            arr = getattr(self, name)
            if arr.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},), got {arr.shape}")
        for name in _ARRAY_FIELDS:
            getattr(self, name).setflags(write=False)

    def __len__(self) -> int:
        return int(self.rss.shape[0])

    def record(self, i: int) -> FingerprintRecord:
        return FingerprintRecord(
            rss=self.rss[i],
            longitude=float(self.longitude[i]),
            latitude=float(self.latitude[i]),
            floor=int(self.floor[i]),
            building_id=int(self.building_id[i]),
            space_id=int(self.space_id[i]),
            relative_position=int(self.relative_position[i]),
            user_id=int(self.user_id[i]),
            phone_id=int(self.phone_id[i]),
            timestamp=int(self.timestamp[i]),
        )

    def subset(self, indices: Sequence[int] | np.ndarray, description: str) -> FingerprintSet:
        idx = np.asarray(indices, dtype=np.int64)
        fields = {name: getattr(self, name)[idx] for name in _ARRAY_FIELDS}
        return FingerprintSet(**fields, provenance="derived", description=description)

    def phone_counts(self) -> dict[int, int]:
        phones, counts = np.unique(self.phone_id, return_counts=True)
        return {int(p): int(c) for p, c in zip(phones, counts)}

    def floor_values(self) -> tuple[int, ...]:
        return tuple(int(f) for f in np.unique(self.floor))

    def coordinates(self) -> np.ndarray:
        """(n, 2) array of [longitude, latitude] in meters."""
        return np.column_stack([self.longitude, self.latitude])


def concat_sets(parts: Sequence[FingerprintSet], description: str) -> FingerprintSet:
    """Concatenate sets (typically holdout fragments) into one derived set."""
    if not parts:
        raise ValueError("concat_sets needs at least one part")
    fields = {
        name: np.concatenate([getattr(p, name) for p in parts]) for name in _ARRAY_FIELDS
    }
    return FingerprintSet(**fields, provenance="derived", description=description)


def _first_bad_row(mask: np.ndarray) -> int | None:
    idx = np.flatnonzero(mask)
    return int(idx[0]) if idx.size else None


def _require_integral(path: str, name: str, values: np.ndarray) -> None:
    bad = _first_bad_row(~np.isfinite(values) | (values != np.round(values)))
    if bad is not None:
        raise CorpusFormatError(f"{path}: line {bad + 2}: {name} is not an integer ({values[bad]!r})")


def load_csv(path: str, provenance: str = "training") -> FingerprintSet:
    """Load a 529-column UJIIndoorLoc CSV into a validated FingerprintSet.

    Structural problems (wrong header, wrong column count) and out-of-range
    field values raise CorpusFormatError naming the offending file line.
    A missing file raises FileNotFoundError. Row order is preserved.
    """
    if provenance not in ("training", "validation", "derived"):
        raise ValueError(f"unknown provenance {provenance!r}")
    path = str(path)

    # Structural pass with the csv module: exact header, uniform column count.
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise CorpusFormatError(f"{path}: empty file")
        header = [c.strip() for c in header]
        if tuple(header) != EXPECTED_COLUMNS:
            if len(header) != len(EXPECTED_COLUMNS):
                raise CorpusFormatError(
                    f"{path}: header has {len(header)} columns, expected {len(EXPECTED_COLUMNS)}"
                )
            diff = next(i for i, (a, b) in enumerate(zip(header, EXPECTED_COLUMNS)) if a != b)
            raise CorpusFormatError(
                f"{path}: header column {diff + 1} is {header[diff]!r}, expected {EXPECTED_COLUMNS[diff]!r}"
            )
        n_rows = 0
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(EXPECTED_COLUMNS):
                raise CorpusFormatError(
                    f"{path}: line {lineno} has {len(row)} columns, expected {len(EXPECTED_COLUMNS)}"
                )
            n_rows += 1
    if n_rows == 0:
        raise CorpusFormatError(f"{path}: no data rows")

    try:
        frame = pd.read_csv(path, dtype=np.float64)
    except (ValueError, pd.errors.ParserError) as exc:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for lineno, row in enumerate(reader, start=2):
                for name, cell in zip(EXPECTED_COLUMNS, row):
                    try:
                        float(cell)
                    except ValueError:
                        raise CorpusFormatError(
                            f"{path}: line {lineno}: {name} value {cell!r} is not numeric"
                        ) from exc
        raise CorpusFormatError(f"{path}: {exc}") from exc
    rss = frame.iloc[:, :N_WAPS].to_numpy()

    nonint = ~np.isfinite(rss) | (rss != np.round(rss))
    bad = _first_bad_row(nonint.any(axis=1))
    if bad is not None:
        col = int(np.flatnonzero(nonint[bad])[0])
        raise CorpusFormatError(
            f"{path}: line {bad + 2}: {WAP_COLUMNS[col]} value {rss[bad, col]!r} is not an integer"
        )
    detected = rss != RSS_NOT_DETECTED
    out_of_range = detected & ((rss < RSS_MIN) | (rss > RSS_MAX))
    bad = _first_bad_row(out_of_range.any(axis=1))
    if bad is not None:
        col = int(np.flatnonzero(out_of_range[bad])[0])
        raise CorpusFormatError(
            f"{path}: line {bad + 2}: {WAP_COLUMNS[col]} value {rss[bad, col]:g} outside "
            f"[{RSS_MIN}, {RSS_MAX}] and not the sentinel {RSS_NOT_DETECTED}"
        )

    def column(name: str) -> np.ndarray:
        return frame[name].to_numpy()

    for name in ("LONGITUDE", "LATITUDE"):
        bad = _first_bad_row(~np.isfinite(column(name)))
        if bad is not None:
            raise CorpusFormatError(f"{path}: line {bad + 2}: {name} is not finite")

    int_fields = {}
    for name in ("FLOOR", "BUILDINGID", "SPACEID", "RELATIVEPOSITION", "USERID", "PHONEID", "TIMESTAMP"):
        values = column(name)
        _require_integral(path, name, values)
        int_fields[name] = values.astype(np.int64)

    floor = int_fields["FLOOR"]
    bad = _first_bad_row((floor < FLOOR_MIN) | (floor > FLOOR_MAX))
    if bad is not None:
        raise CorpusFormatError(
            f"{path}: line {bad + 2}: FLOOR {floor[bad]} outside [{FLOOR_MIN}, {FLOOR_MAX}]"
        )
    building = int_fields["BUILDINGID"]
    bad = _first_bad_row((building < BUILDING_MIN) | (building > BUILDING_MAX))
    if bad is not None:
        raise CorpusFormatError(
            f"{path}: line {bad + 2}: BUILDINGID {building[bad]} outside [{BUILDING_MIN}, {BUILDING_MAX}]"
        )
    timestamp = int_fields["TIMESTAMP"]
    bad = _first_bad_row(timestamp < 0)
    if bad is not None:
        raise CorpusFormatError(f"{path}: line {bad + 2}: TIMESTAMP {timestamp[bad]} is negative")

    n = len(frame)
    return FingerprintSet(
        rss=rss.astype(np.int16),
        longitude=column("LONGITUDE").astype(np.float64),
        latitude=column("LATITUDE").astype(np.float64),
        floor=floor,
        building_id=building,
        space_id=int_fields["SPACEID"],
        relative_position=int_fields["RELATIVEPOSITION"],
        user_id=int_fields["USERID"],
        phone_id=int_fields["PHONEID"],
        timestamp=timestamp,
        row_ids=np.arange(n, dtype=np.int64) + _ROW_ID_BASE[provenance],
        provenance=provenance,
        description=f"load({path})",
    )


def filter_records(s: FingerprintSet, building: int | None = None, floor: int | None = None) -> FingerprintSet:
    """Order-preserving restriction to one building and/or floor.

    An empty result is legal; an empty input is not.
    """
    if len(s) == 0:
        raise ValueError("filter_records over an empty set")
    mask = np.ones(len(s), dtype=bool)
    if building is not None:
        mask &= s.building_id == building
    if floor is not None:
        mask &= s.floor == floor
    return s.subset(np.flatnonzero(mask), f"{s.description};filter(building={building}, floor={floor})")


# ---------------------------------------------------------------------------
# Normalization


@dataclass(frozen=True)
class NormalizationSpec:
    """Affine maps taking raw RSS to [0, 1] and coordinates to ~[0, 1].

    target_offsets are per-coordinate minima of the fitting data and
    target_scales the corresponding ranges (a zero range is replaced by 1 so
    the map stays invertible). The coordinate round trip is exact to float64.
    """

    rss_floor: float = DEFAULT_RSS_FLOOR
    target_offsets: tuple[float, float] = (0.0, 0.0)
    target_scales: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self) -> None:
        if not self.rss_floor < 0:
            raise ValueError(f"rss_floor must be negative, got {self.rss_floor}")
        if any(not np.isfinite(v) for v in self.target_offsets):
            raise ValueError("target_offsets must be finite")
        if any(not (np.isfinite(v) and v > 0) for v in self.target_scales):
            raise ValueError("target_scales must be positive")


def normalize_rss(raw: float | np.ndarray, rss_floor: float = DEFAULT_RSS_FLOOR):
    """Map raw readings to [0, 1]: sentinel 100 -> 0.0, else clamp to
    [rss_floor, 0] and rescale affinely (stronger signal -> larger value)."""
    if not rss_floor < 0:
        raise ValueError(f"rss_floor must be negative, got {rss_floor}")
    arr = np.asarray(raw, dtype=np.float64)
    out = np.where(arr == RSS_NOT_DETECTED, 0.0, 1.0 - np.clip(arr, rss_floor, 0.0) / rss_floor)
    return float(out) if np.ndim(raw) == 0 else out


def rss_features(s: FingerprintSet, rss_floor: float = DEFAULT_RSS_FLOOR) -> np.ndarray:
    """(n, 520) float64 feature matrix."""
    return normalize_rss(s.rss, rss_floor)


def fit_target_normalization(train: FingerprintSet, rss_floor: float = DEFAULT_RSS_FLOOR) -> NormalizationSpec:
    """Min-offset / range-scale coordinate normalization fitted on training data."""
    if len(train) == 0:
        raise ValueError("cannot fit normalization on an empty set")
    lon, lat = train.longitude, train.latitude
    offsets = (float(lon.min()), float(lat.min()))
    scales = tuple(float(r) if r > 0 else 1.0 for r in (np.ptp(lon), np.ptp(lat)))
    return NormalizationSpec(rss_floor=rss_floor, target_offsets=offsets, target_scales=scales)


def normalize_targets(s: FingerprintSet, spec: NormalizationSpec) -> np.ndarray:
    """(n, 2) normalized [longitude, latitude] targets."""
    xy = s.coordinates()
    return (xy - np.asarray(spec.target_offsets)) / np.asarray(spec.target_scales)


def denormalize_targets(xy01: np.ndarray, spec: NormalizationSpec) -> np.ndarray:
    """Inverse of normalize_targets, back to meters."""
    return np.asarray(xy01, dtype=np.float64) * np.asarray(spec.target_scales) + np.asarray(
        spec.target_offsets
    )


# ---------------------------------------------------------------------------
# Client partitioning


@dataclass(frozen=True, eq=False)
class ClientAssignment:
    """Map client id -> local FingerprintSet, plus the partition axis.

    client_tags records the phone (by_phone) or floor (by_floor) each client
    owns; client record sets are pairwise disjoint by construction.
    """

    clients: dict[int, FingerprintSet]
    axis: str
    client_tags: dict[int, int] | None = None

    def __post_init__(self) -> None:
        if self.axis not in PARTITION_AXES:
            raise ValueError(f"unknown partition axis {self.axis!r}")
        if not self.clients:
            raise ValueError("assignment must have at least one client")

    def client_ids(self) -> list[int]:
        return sorted(self.clients)

    def total_records(self) -> int:
        return sum(len(c) for c in self.clients.values())

    def pooled(self, description: str = "pooled") -> FingerprintSet:
        return concat_sets([self.clients[i] for i in self.client_ids()], description)


def verify_partition(
    assignment: ClientAssignment,
    parent: FingerprintSet,
    expected_row_ids: np.ndarray | None = None,
) -> None:
    """Check pairwise disjointness and exact union coverage; raise ValueError."""
    ids = [assignment.clients[i].row_ids for i in assignment.client_ids()]
    all_ids = np.concatenate(ids) if ids else np.empty(0, dtype=np.int64)
    if np.unique(all_ids).size != all_ids.size:
        raise ValueError("client record sets overlap")
    expected = parent.row_ids if expected_row_ids is None else expected_row_ids
    if not np.array_equal(np.sort(all_ids), np.sort(np.asarray(expected))):
        raise ValueError("client union does not match the expected record set")


def partition_by_phone(s: FingerprintSet, n_clients: int) -> ClientAssignment:
    """One client per phone, keeping the n_clients phones with the most
    records (ties broken toward the smaller phone id; client 0 = largest)."""
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    counts = s.phone_counts()
    if len(counts) < n_clients:
        raise ValueError(
            f"need {n_clients} distinct phones, corpus has {len(counts)}"
        )
    ranked = sorted(counts, key=lambda p: (-counts[p], p))[:n_clients]
    clients, tags = {}, {}
    for cid, phone in enumerate(ranked):
        idx = np.flatnonzero(s.phone_id == phone)
        clients[cid] = s.subset(idx, f"{s.description};phone={phone}")
        tags[cid] = phone
    return ClientAssignment(clients=clients, axis="by_phone", client_tags=tags)


def partition_by_floor(s: FingerprintSet, clients_per_floor: int, seed: int = 0) -> ClientAssignment:
    """clients_per_floor single-floor clients per distinct floor (seeded
    shuffle, then a near-equal split), ordered floor-major."""
    if clients_per_floor < 1:
        raise ValueError("clients_per_floor must be >= 1")
    floors = s.floor_values()
    if not floors:
        raise ValueError("partition_by_floor over an empty set")
    clients, tags = {}, {}
    for pos, f in enumerate(floors):
        idx = np.flatnonzero(s.floor == f)
        if idx.size < clients_per_floor:
            raise ValueError(
                f"floor {f} has {idx.size} records, fewer than clients_per_floor={clients_per_floor}"
            )
        rng = np.random.default_rng(derive_seed(seed, "by_floor", int(f)))
        perm = rng.permutation(idx)
        for j, chunk in enumerate(np.array_split(perm, clients_per_floor)):
            cid = pos * clients_per_floor + j
            clients[cid] = s.subset(np.sort(chunk), f"{s.description};floor={f};shard={j}")
            tags[cid] = int(f)
    return ClientAssignment(clients=clients, axis="by_floor", client_tags=tags)


def partition_uniform(s: FingerprintSet, n_clients: int, seed: int = 0) -> ClientAssignment:
    """Seeded shuffle then near-equal contiguous split; sizes differ by <= 1."""
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if len(s) < n_clients:
        raise ValueError(f"cannot split {len(s)} records into {n_clients} clients")
    rng = np.random.default_rng(derive_seed(seed, "uniform"))
    perm = rng.permutation(len(s))
    clients = {
        cid: s.subset(np.sort(chunk), f"{s.description};uniform_shard={cid}")
        for cid, chunk in enumerate(np.array_split(perm, n_clients))
    }
    return ClientAssignment(clients=clients, axis="uniform_random")


def pool_records(s: FingerprintSet) -> ClientAssignment:
    """Single-client assignment holding every record; the centralized baseline
    is federated training over this degenerate partition."""
    if len(s) == 0:
        raise ValueError("cannot pool an empty record set")
    sub = s.subset(np.arange(len(s)), f"{s.description};pooled")
    return ClientAssignment(clients={0: sub}, axis="pooled", client_tags={0: "pooled"})


def subsample_records(s: FingerprintSet, rho: float, seed: int) -> tuple[FingerprintSet, FingerprintSet]:
    """Seeded rho-fraction subsample; returns (picked, remainder), both in
    original record order. rho in (0, 1]; at least one record is picked.
    For a fixed seed the picked sets are nested across rho values."""
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"rho must be in (0, 1], got {rho}")
    n = len(s)
    if n == 0:
        raise ValueError("subsample over an empty set")
    if rho == 1.0:
        return (
            s.subset(np.arange(n), f"{s.description};subsample(rho=1, seed={seed})"),
            s.subset(np.empty(0, dtype=np.int64), f"{s.description};subsample-remainder(rho=1)"),
        )
    k = min(n, max(1, int(round(rho * n))))
    rng = np.random.default_rng(derive_seed(seed, "subsample"))
    # One permutation per seed; rho only sets the kept prefix length, so for a
    # fixed seed the picked sets nest as rho grows.
    perm = rng.permutation(n)
    picked = np.sort(perm[:k])
    rest = np.sort(perm[k:])
    return (
        s.subset(picked, f"{s.description};subsample(rho={rho:g}, seed={seed})"),
        s.subset(rest, f"{s.description};subsample-remainder(rho={rho:g}, seed={seed})"),
    )


# ---------------------------------------------------------------------------
# Domain scenarios


@dataclass(frozen=True, eq=False)
class DomainScenario:
    """A source federation, a target federation, and a held-out evaluation set.

    kind="device": the target clients are phones that also participate in the
    source federation (with their trainable records only); kind="time": source
    and target are split by a timestamp threshold and are fully disjoint. In
    both kinds the holdout is disjoint from every trainable record.
    """

    kind: str
    source: ClientAssignment
    target: ClientAssignment
    target_ratio: float
    holdout: FingerprintSet
    seed: int
    description: str
    target_phones: tuple[int, ...] | None = None
    split_time: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if not 0.0 < self.target_ratio <= 1.0:
            raise ValueError(f"target_ratio must be in (0, 1], got {self.target_ratio}")
        trainable = [c.row_ids for a in (self.source, self.target) for c in a.clients.values()]
        train_ids = np.concatenate(trainable) if trainable else np.empty(0, dtype=np.int64)
        if np.intersect1d(train_ids, self.holdout.row_ids).size:
            raise ValueError("holdout overlaps trainable records")
        if self.kind == "time":
            src = np.concatenate([c.row_ids for c in self.source.clients.values()])
            tgt_parts = [c.row_ids for c in self.target.clients.values()]
            tgt = np.concatenate(tgt_parts) if tgt_parts else np.empty(0, dtype=np.int64)
            if np.intersect1d(src, tgt).size:
                raise ValueError("time scenario source and target overlap")


def _empty_like(s: FingerprintSet, description: str) -> FingerprintSet:
    return s.subset(np.empty(0, dtype=np.int64), description)


def build_device_scenario(
    s: FingerprintSet,
    target_phone: int | Sequence[int] | None,
    n_clients: int,
    rho: float,
    seed: int,
    validation: FingerprintSet | None = None,
) -> DomainScenario:
    """Cross-device scenario over a single-floor corpus.

    The source federation is the by-phone partition of `s`; each target phone
    contributes only its rho-subsample to training (source and target alike),
    and the rest of its records plus its validation rows form the holdout.
    target_phone=None picks the selected phone with the fewest records.
    """
    base = partition_by_phone(s, n_clients)
    tags = base.client_tags or {}
    phone_to_cid = {p: c for c, p in tags.items()}
    if target_phone is None:
        targets = [min(tags.values(), key=lambda p: (len(base.clients[phone_to_cid[p]]), p))]
    elif isinstance(target_phone, (int, np.integer)):
        targets = [int(target_phone)]
    else:
        targets = [int(p) for p in target_phone]
    missing = [p for p in targets if p not in phone_to_cid]
    if missing:
        raise ValueError(f"target phone(s) {missing} not among the selected phones {sorted(phone_to_cid)}")
    targets = sorted(set(targets), key=lambda p: phone_to_cid[p])

    source_clients = dict(base.clients)
    target_clients: dict[int, FingerprintSet] = {}
    target_tags: dict[int, int] = {}
    holdout_parts: list[FingerprintSet] = []
    for i, phone in enumerate(targets):
        cid = phone_to_cid[phone]
        trainable, remainder = subsample_records(base.clients[cid], rho, derive_seed(seed, "device", phone))
        source_clients[cid] = trainable
        target_clients[i] = trainable
        target_tags[i] = phone
        if len(remainder):
            holdout_parts.append(remainder)
    if validation is not None:
        val_idx = np.flatnonzero(np.isin(validation.phone_id, targets))
        if val_idx.size:
            holdout_parts.append(
                validation.subset(val_idx, f"{validation.description};phones={targets}")
            )
    description = (
        f"device(target_phones={targets}, n_clients={n_clients}, rho={rho:g}, seed={seed})"
    )
    holdout = concat_sets(holdout_parts, f"holdout;{description}") if holdout_parts else _empty_like(
        s, f"holdout;{description}"
    )
    return DomainScenario(
        kind="device",
        source=ClientAssignment(clients=source_clients, axis="by_phone", client_tags=tags),
        target=ClientAssignment(clients=target_clients, axis="by_phone", client_tags=target_tags),
        target_ratio=rho,
        holdout=holdout,
        seed=seed,
        description=description,
        target_phones=tuple(targets),
    )


def build_time_scenario(
    s: FingerprintSet,
    split_time: int,
    n_clients: int,
    rho: float,
    seed: int,
    validation: FingerprintSet | None = None,
    target_clients: int | None = None,
) -> DomainScenario:
    """Cross-time scenario: records before split_time form the by-phone source
    federation; later records are rho-subsampled into a by-phone target
    federation (one client per phone present unless target_clients caps it).

    When validation records are given the holdout is exactly the validation
    rows at/after the split, so every rho shares one fixed evaluation set;
    otherwise it is the unsampled later records (rho < 1 required then)."""
    early = np.flatnonzero(s.timestamp < split_time)
    late = np.flatnonzero(s.timestamp >= split_time)
    if early.size == 0:
        raise ValueError(f"split_time {split_time} is at or below the corpus minimum timestamp")
    if late.size == 0:
        raise ValueError(f"split_time {split_time} is above the corpus maximum timestamp")
    early_set = s.subset(early, f"{s.description};ts<{split_time}")
    late_set = s.subset(late, f"{s.description};ts>={split_time}")

    source = partition_by_phone(early_set, n_clients)
    trainable, remainder = subsample_records(late_set, rho, derive_seed(seed, "time"))
    n_target = len(trainable.phone_counts())
    if target_clients is not None:
        n_target = min(n_target, target_clients)
    target = partition_by_phone(trainable, n_target)

    description = f"time(split={split_time}, n_clients={n_clients}, rho={rho:g}, seed={seed})"
    if validation is not None:
        val_idx = np.flatnonzero(validation.timestamp >= split_time)
        if val_idx.size == 0:
            raise ValueError(f"no validation records at or after split_time {split_time}")
        holdout = validation.subset(val_idx, f"holdout;{description}")
    elif len(remainder):
        holdout = remainder.subset(np.arange(len(remainder)), f"holdout;{description}")
    else:
        raise ValueError("rho=1 with no validation records leaves an empty holdout")
    return DomainScenario(
        kind="time",
        source=source,
        target=target,
        target_ratio=rho,
        holdout=holdout,
        seed=seed,
        description=description,
        split_time=int(split_time),
    )


def largest_gap_split_time(s: FingerprintSet) -> int:
    """Default split threshold: midpoint of the largest gap between
    consecutive distinct timestamps."""
    ts = np.unique(s.timestamp)
    if ts.size < 2:
        raise ValueError("need at least two distinct timestamps to split")
    gaps = np.diff(ts)
    i = int(np.argmax(gaps))
    return int((int(ts[i]) + int(ts[i + 1])) // 2)


def median_phase_gap_seconds(s: FingerprintSet, split_time: int) -> float:
    """|median(late timestamps) - median(early timestamps)|, for sanity checks."""
    early = s.timestamp[s.timestamp < split_time]
    late = s.timestamp[s.timestamp >= split_time]
    if early.size == 0 or late.size == 0:
        raise ValueError("split_time leaves one side empty")
    return float(abs(np.median(late) - np.median(early)))
