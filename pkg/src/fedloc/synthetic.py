"""Deterministic synthetic corpus generator in the UJIIndoorLoc file format.

The real multi-building WiFi fingerprint corpus is not redistributable with
this package, so tests and demos run on a generated stand-in with the same
schema and the statistical structure the studies need:

* log-distance path loss from fixed access points, per-floor slab attenuation,
  inter-building walls, and a detection threshold (sentinel 100 below it);
* per-phone gain and per-(phone, AP) response offsets, so readings are
  device-heterogeneous;
* two collection phases ~1 month apart, with AP-level level shifts and a few
  APs disappearing or appearing in the later phase, so the signal map drifts
  over time;
* one building with four floors whose middle floor has imbalanced per-phone
  record counts, mirroring the corpus region the localization studies use.

Everything is derived from a single profile seed; identical profiles produce
byte-identical CSV files.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .dataset import META_COLUMNS, N_WAPS, WAP_COLUMNS
from .seeding import derive_seed

DEFAULT_PROFILE_SEED = 613

# Imbalanced per-phone sampling shares for the main study floor (building 1,
# floor 1): ten phones, the smallest contributing ~2% of rows.
FLOOR1_PHONE_WEIGHTS = (0.19, 0.17, 0.14, 0.12, 0.10, 0.09, 0.07, 0.06, 0.04, 0.02)

SECONDS_PER_DAY = 86400


@dataclass(frozen=True)
class CorpusProfile:
    """Generator knobs. The defaults are the ones the bundled tests pin."""

    seed: int = DEFAULT_PROFILE_SEED
    path_loss_exponent: float = 3.0
    tx_power_range: tuple[float, float] = (-33.0, -24.0)
    floor_height_m: float = 3.7
    floor_attenuation_db: float = 5.0
    inter_building_wall_db: float = 30.0
    detection_floor_dbm: float = -92.0
    dropout_rate: float = 0.02
    noise_sigma_db: float = 1.6
    # Shadowing common to one measurement: body, hand, and orientation move
    # every AP's reading together, so it does not average out across APs.
    row_offset_sigma_db: float = 2.0
    # Multipath fading: per-AP spatially correlated gain, fixed per world.
    # This is what keeps nearby-but-distinct positions from having nearly
    # identical fingerprints and bounds achievable accuracy.
    fading_sigma_db: float = 10.0
    fading_lengthscale_m: float = 9.0
    fading_vertical_lengthscale_m: float = 4.0
    fading_components: int = 16
    device_gain_span_db: float = 12.0
    device_response_sigma_db: float = 3.5
    # Per-phone affine RSS response: reported = pivot + slope * (true - pivot).
    # Slope spread is the systematic cross-device miscalibration that makes
    # models trained on other phones biased on an unseen one.
    device_slope_span: float = 0.7
    device_slope_pivot_dbm: float = -55.0
    drift_fraction: float = 0.45
    drift_sigma_db: float = 5.0
    ap_off_fraction: float = 0.08
    ap_new_fraction: float = 0.05
    base_epoch: int = 1370044800  # 2013-06-01T00:00:00Z
    source_days: tuple[float, float] = (3.0, 28.0)
    target_days: tuple[float, float] = (42.0, 52.0)
    target_phase_share: float = 0.30
    validation_target_share: float = 0.50


@dataclass(frozen=True)
class _BuildingPlan:
    building_id: int
    n_floors: int
    origin: tuple[float, float]  # (longitude, latitude) of the corner, meters
    size: tuple[float, float]
    ap_range: tuple[int, int]  # global WAP indices [start, stop)
    phones: tuple[int, ...]
    train_rows: tuple[int, ...]  # per floor
    val_rows: tuple[int, ...]
    # per-floor phone sampling weights; None -> uniform over `phones`
    phone_weights: tuple[tuple[float, ...] | None, ...]


_BUILDINGS = (
    _BuildingPlan(
        building_id=0,
        n_floors=4,
        origin=(-7695.0, 4864748.0),
        size=(105.0, 62.0),
        ap_range=(0, 140),
        phones=(8, 9, 10, 11, 12, 13),
        train_rows=(280, 280, 280, 280),
        val_rows=(30, 30, 30, 30),
        phone_weights=(None, None, None, None),
    ),
    _BuildingPlan(
        building_id=1,
        n_floors=4,
        origin=(-7552.0, 4864840.0),
        size=(110.0, 68.0),
        ap_range=(140, 290),
        phones=(0, 1, 2, 3, 4, 5, 6, 7, 8, 9),
        train_rows=(560, 880, 560, 560),
        val_rows=(80, 260, 80, 80),
        phone_weights=(None, FLOOR1_PHONE_WEIGHTS, None, None),
    ),
    _BuildingPlan(
        building_id=2,
        n_floors=5,
        origin=(-7404.0, 4864935.0),
        size=(100.0, 60.0),
        ap_range=(290, 440),
        phones=(12, 13, 14, 15, 16, 17),
        train_rows=(260, 260, 260, 260, 260),
        val_rows=(26, 26, 26, 26, 26),
        phone_weights=(None, None, None, None, None),
    ),
)

_N_PHONES = 18


@dataclass(frozen=True)
class CorpusPaths:
    training_csv: str
    validation_csv: str
    manifest: str


def default_split_time(profile: CorpusProfile = CorpusProfile()) -> int:
    """Timestamp between the two collection phases (day 35 for the defaults)."""
    boundary_day = (profile.source_days[1] + profile.target_days[0]) / 2.0
    return profile.base_epoch + int(boundary_day * SECONDS_PER_DAY)


class _World:
    """Fixed infrastructure shared by every generated row."""

    def __init__(self, profile: CorpusProfile):
        self.profile = profile
        rng = np.random.default_rng(derive_seed(profile.seed, "world"))
        self.ap_xy = np.zeros((N_WAPS, 2))
        self.ap_floor = np.zeros(N_WAPS, dtype=np.int64)
        self.ap_building = np.full(N_WAPS, -1, dtype=np.int64)
        self.tx_power = np.full(N_WAPS, -1000.0)
        off_target: list[int] = []
        target_only: list[int] = []
        for plan in _BUILDINGS:
            start, stop = plan.ap_range
            idx = np.arange(start, stop)
            n = idx.size
            lon0, lat0 = plan.origin
            w, d = plan.size
            self.ap_xy[idx, 0] = lon0 + rng.uniform(0.0, w, n)
            self.ap_xy[idx, 1] = lat0 + rng.uniform(0.0, d, n)
            self.ap_floor[idx] = rng.integers(0, plan.n_floors, n)
            self.ap_building[idx] = plan.building_id
            self.tx_power[idx] = rng.uniform(*profile.tx_power_range, n)
            churn = rng.permutation(idx)
            n_off = int(round(profile.ap_off_fraction * n))
            n_new = int(round(profile.ap_new_fraction * n))
            off_target.extend(churn[:n_off])
            target_only.extend(churn[n_off : n_off + n_new])
        active = self.ap_building >= 0
        self.source_available = active.copy()
        self.target_available = active.copy()
        self.source_available[np.asarray(target_only, dtype=np.int64)] = False
        self.target_available[np.asarray(off_target, dtype=np.int64)] = False

        self.phone_gain = rng.uniform(
            -profile.device_gain_span_db / 2.0, profile.device_gain_span_db / 2.0, _N_PHONES
        )
        self.phone_response = rng.normal(0.0, profile.device_response_sigma_db, (_N_PHONES, N_WAPS))
        self.phone_slope = rng.uniform(
            1.0 - profile.device_slope_span / 2.0, 1.0 + profile.device_slope_span / 2.0, _N_PHONES
        )
        drift_mask = rng.random(N_WAPS) < profile.drift_fraction
        self.drift_shift = np.where(drift_mask, rng.normal(0.0, profile.drift_sigma_db, N_WAPS), 0.0)

        # Static multipath field per AP: a smooth random function of the
        # measurement position (random Fourier features of an RBF process).
        # Fixed once per world, shared by both time phases.
        k = profile.fading_components
        scale = np.zeros(3)
        if profile.fading_lengthscale_m > 0:
            scale[:2] = 1.0 / profile.fading_lengthscale_m
        if profile.fading_vertical_lengthscale_m > 0:
            scale[2] = 1.0 / profile.fading_vertical_lengthscale_m
        self.fading_freq = rng.normal(0.0, 1.0, (N_WAPS, k, 3)) * scale[None, None, :]
        self.fading_phase = rng.uniform(0.0, 2.0 * np.pi, (N_WAPS, k))


def _rss_block(
    world: _World,
    xy: np.ndarray,
    floors: np.ndarray,
    building_id: int,
    phones: np.ndarray,
    is_target_phase: bool,
    rng: np.random.Generator,
) -> np.ndarray:
    p = world.profile
    dx = xy[:, 0:1] - world.ap_xy[None, :, 0]
    dy = xy[:, 1:2] - world.ap_xy[None, :, 1]
    dz = (floors[:, None] - world.ap_floor[None, :]) * p.floor_height_m
    dist = np.maximum(np.sqrt(dx * dx + dy * dy + dz * dz), 1.0)
    rss = world.tx_power[None, :] - 10.0 * p.path_loss_exponent * np.log10(dist)
    rss -= p.floor_attenuation_db * np.abs(floors[:, None] - world.ap_floor[None, :])
    rss -= p.inter_building_wall_db * (world.ap_building[None, :] != building_id)
    if p.fading_sigma_db > 0.0:
        pos = np.column_stack([xy, floors * p.floor_height_m])
        angles = np.einsum("nd,akd->nak", pos, world.fading_freq) + world.fading_phase[None, :, :]
        rss += p.fading_sigma_db * np.sqrt(2.0 / p.fading_components) * np.cos(angles).sum(axis=2)
    pivot = p.device_slope_pivot_dbm
    rss = pivot + world.phone_slope[phones, None] * (rss - pivot)
    rss += world.phone_gain[phones, None] + world.phone_response[phones, :]
    if is_target_phase:
        rss = rss + world.drift_shift[None, :]
    rss += rng.normal(0.0, p.noise_sigma_db, rss.shape)
    if p.row_offset_sigma_db > 0.0:
        rss += rng.normal(0.0, p.row_offset_sigma_db, (rss.shape[0], 1))

    available = world.target_available if is_target_phase else world.source_available
    visible = available[None, :] & (rss >= p.detection_floor_dbm)
    visible &= rng.random(rss.shape) >= p.dropout_rate
    readings = np.clip(np.rint(rss), -104.0, -20.0)
    return np.where(visible, readings, 100.0).astype(np.int16)


def _phase_counts(n: int, target_share: float) -> tuple[int, int]:
    n_target = int(round(n * target_share))
    return n - n_target, n_target


def generate_frames(profile: CorpusProfile = CorpusProfile()) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Build the (training, validation) DataFrames in corpus column order."""
    world = _World(profile)
    frames: dict[str, list[pd.DataFrame]] = {"training": [], "validation": []}
    for provenance in ("training", "validation"):
        target_share = (
            profile.target_phase_share if provenance == "training" else profile.validation_target_share
        )
        for plan in _BUILDINGS:
            lon0, lat0 = plan.origin
            width, depth = plan.size
            rows_per_floor = plan.train_rows if provenance == "training" else plan.val_rows
            for floor in range(plan.n_floors):
                # Imbalanced phone shares only shape the training data; the
                # validation draw is uniform so every phone has holdout rows.
                weights = plan.phone_weights[floor] if provenance == "training" else None
                for phase, n_rows in zip(("source", "target"), _phase_counts(rows_per_floor[floor], target_share)):
                    if n_rows == 0:
                        continue
                    rng = np.random.default_rng(
                        derive_seed(profile.seed, "rows", provenance, plan.building_id, floor, phase)
                    )
                    x = lon0 + rng.uniform(0.0, width, n_rows)
                    y = lat0 + rng.uniform(0.0, depth, n_rows)
                    phones = rng.choice(np.asarray(plan.phones), size=n_rows, p=weights)
                    floors = np.full(n_rows, floor, dtype=np.int64)
                    is_target = phase == "target"
                    day_lo, day_hi = profile.target_days if is_target else profile.source_days
                    ts = profile.base_epoch + (
                        rng.uniform(day_lo, day_hi, n_rows) * SECONDS_PER_DAY
                    ).astype(np.int64)
                    rss = _rss_block(world, np.column_stack([x, y]), floors, plan.building_id, phones, is_target, rng)

                    block = pd.DataFrame(rss, columns=list(WAP_COLUMNS))
                    block["LONGITUDE"] = np.round(x, 6)
                    block["LATITUDE"] = np.round(y, 6)
                    block["FLOOR"] = floors
                    block["BUILDINGID"] = plan.building_id
                    block["SPACEID"] = 1 + ((x - lon0) // 8.0).astype(np.int64) + 16 * (
                        (y - lat0) // 8.0
                    ).astype(np.int64)
                    block["RELATIVEPOSITION"] = rng.integers(1, 3, n_rows)
                    block["USERID"] = phones + 30
                    block["PHONEID"] = phones
                    block["TIMESTAMP"] = ts
                    frames[provenance].append(block)

    out = []
    for provenance in ("training", "validation"):
        frame = pd.concat(frames[provenance], ignore_index=True)
        shuffle = np.random.default_rng(derive_seed(profile.seed, "shuffle", provenance))
        frame = frame.iloc[shuffle.permutation(len(frame))].reset_index(drop=True)
        out.append(frame[list(WAP_COLUMNS) + list(META_COLUMNS)])
    return out[0], out[1]


def _profile_fingerprint(profile: CorpusProfile) -> dict:
    # JSON round trip so tuples compare equal against a reloaded manifest.
    return json.loads(json.dumps(dataclasses.asdict(profile)))


def write_corpus(out_dir: str, profile: CorpusProfile = CorpusProfile()) -> CorpusPaths:
    """Generate and write trainingData.csv / validationData.csv plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, val = generate_frames(profile)
    paths = CorpusPaths(
        training_csv=str(out / "trainingData.csv"),
        validation_csv=str(out / "validationData.csv"),
        manifest=str(out / "corpus_manifest.json"),
    )
    train.to_csv(paths.training_csv, index=False)
    val.to_csv(paths.validation_csv, index=False)
    manifest = {
        "generator": "fedloc-synthetic-v1",
        "profile": _profile_fingerprint(profile),
        "n_training": int(len(train)),
        "n_validation": int(len(val)),
        "split_time": default_split_time(profile),
    }
    with open(paths.manifest, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths


def ensure_corpus(out_dir: str, profile: CorpusProfile = CorpusProfile()) -> CorpusPaths:
    """write_corpus, unless a corpus with the same profile is already there."""
    out = Path(out_dir)
    paths = CorpusPaths(
        training_csv=str(out / "trainingData.csv"),
        validation_csv=str(out / "validationData.csv"),
        manifest=str(out / "corpus_manifest.json"),
    )
    if all(Path(p).exists() for p in (paths.training_csv, paths.validation_csv, paths.manifest)):
        with open(paths.manifest) as fh:
            manifest = json.load(fh)
        if manifest.get("profile") == _profile_fingerprint(profile):
            return paths
    return write_corpus(out_dir, profile)
