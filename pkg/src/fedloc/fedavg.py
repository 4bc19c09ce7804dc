"""Federated averaging: broadcast, local SGD, weighted aggregation, traces.

One round = the server broadcasts the global parameter vector, every selected
client runs local SGD on its own records, and the server replaces the global
vector with the sample-count-weighted mean of the client results. Everything
is simulated in-process and deterministically: client selection and per-client
shuffling are derived from (config seed, round index, client id), and the
aggregation always sums in ascending client-id order, so a fixed configuration
reproduces bit-identical training runs.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dataset import (
    DEFAULT_RSS_FLOOR,
    ClientAssignment,
    FingerprintSet,
    NormalizationSpec,
    denormalize_targets,
    normalize_targets,
    rss_features,
)
from .model import (
    DivergenceError,
    MlpArchitecture,
    TrainingHyperparams,
    forward,
    train_local,
)
from .seeding import derive_seed

METRICS = ("mae_meters", "accuracy")


@dataclass(frozen=True)
class FederationConfig:
    """Round count, participation, local recipe, evaluation cadence, seed."""

    rounds: int
    hp: TrainingHyperparams
    participation_fraction: float = 1.0
    eval_every: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if not 0.0 < self.participation_fraction <= 1.0:
            raise ValueError(
                f"participation_fraction must be in (0, 1], got {self.participation_fraction}"
            )
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")


@dataclass(eq=False)
class ClientHandle:
    """One simulated client: id, prepared matrices, optional source records."""

    client_id: int
    features: np.ndarray
    targets: np.ndarray
    local_data: FingerprintSet | None = None

    def __post_init__(self) -> None:
        if self.features.ndim != 2 or self.targets.ndim != 2:
            raise ValueError("features and targets must be 2-d")
        if self.features.shape[0] != self.targets.shape[0]:
            raise ValueError("features and targets disagree on the sample count")
        if self.features.shape[0] == 0:
            raise ValueError(f"client {self.client_id} has no records")

    @property
    def n_k(self) -> int:
        return int(self.features.shape[0])


def regression_clients(
    assignment: ClientAssignment, norm: NormalizationSpec
) -> list[ClientHandle]:
    """Clients with normalized RSS features and normalized coordinate targets."""
    return [
        ClientHandle(
            client_id=cid,
            features=rss_features(s, norm.rss_floor),
            targets=normalize_targets(s, norm),
            local_data=s,
        )
        for cid, s in ((cid, assignment.clients[cid]) for cid in assignment.client_ids())
    ]


def one_hot_floors(s: FingerprintSet, class_floors: Sequence[int]) -> np.ndarray:
    """(n, L) one-hot floor targets; every record's floor must be listed."""
    class_floors = tuple(class_floors)
    index = {f: i for i, f in enumerate(class_floors)}
    unknown = set(s.floor_values()) - set(class_floors)
    if unknown:
        raise ValueError(f"records on floors {sorted(unknown)} not covered by classes {class_floors}")
    out = np.zeros((len(s), len(class_floors)), dtype=np.float64)
    out[np.arange(len(s)), [index[int(f)] for f in s.floor]] = 1.0
    return out


def classification_clients(
    assignment: ClientAssignment,
    class_floors: Sequence[int],
    rss_floor: float = DEFAULT_RSS_FLOOR,
) -> list[ClientHandle]:
    """Clients with one-hot floor targets for the softmax head."""
    return [
        ClientHandle(
            client_id=cid,
            features=rss_features(assignment.clients[cid], rss_floor),
            targets=one_hot_floors(assignment.clients[cid], class_floors),
            local_data=assignment.clients[cid],
        )
        for cid in assignment.client_ids()
    ]


@dataclass(eq=False)
class RoundResult:
    round_index: int
    global_params: np.ndarray | None
    participants: tuple[int, ...]
    eval_metric: float | None = None
    metric_name: str | None = None
    wall_seconds: float = 0.0


@dataclass(eq=False)
class TrainingTrace:
    """Per-round results plus run metadata; rounds strictly increase."""

    results: list[RoundResult] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    final_params: np.ndarray | None = None
    incomplete: bool = False

    def evaluated(self) -> list[tuple[int, float]]:
        return [(r.round_index, r.eval_metric) for r in self.results if r.eval_metric is not None]

    def final_metric(self) -> float:
        points = self.evaluated()
        if not points:
            raise ValueError("trace has no evaluated rounds")
        return points[-1][1]

    def round_indices(self) -> list[int]:
        return [r.round_index for r in self.results]

    def export_csv(self, path: str, extra_columns: dict[str, object] | None = None) -> None:
        """Write the round table; a JSON metadata sidecar lands next to it."""
        extra = extra_columns or {}
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["round", "metric_name", "metric_value", "participating_clients", "wall_seconds"]
                + list(extra)
            )
            for r in self.results:
                writer.writerow(
                    [
                        r.round_index,
                        r.metric_name or "",
                        repr(float(r.eval_metric)) if r.eval_metric is not None else "",
                        ";".join(str(c) for c in r.participants),
                        f"{r.wall_seconds:.6f}",
                    ]
                    + [extra[k] for k in extra]
                )
        with open(path + ".meta.json", "w") as fh:
            json.dump(self.metadata, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")


def aggregate(client_params: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Weighted mean with weights normalized first; summation in the given
    (ascending client id) order for bit-reproducibility."""
    if len(client_params) == 0:
        raise ValueError("aggregate needs at least one client")
    if len(client_params) != len(weights):
        raise ValueError(f"{len(client_params)} parameter vectors but {len(weights)} weights")
    w = np.asarray(weights, dtype=np.float64)
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("weights must be finite and non-negative")
    total = w.sum()
    if not total > 0:
        raise ValueError("weights must not all be zero")
    shape = np.asarray(client_params[0]).shape
    for p in client_params[1:]:
        if np.asarray(p).shape != shape:
            raise ValueError("client parameter vectors differ in shape")
    wn = w / total
    acc = np.asarray(client_params[0], dtype=np.float64) * wn[0]
    for p, wi in zip(client_params[1:], wn[1:]):
        acc += np.asarray(p, dtype=np.float64) * wi
    return acc


def select_participants(client_ids: Sequence[int], cfg: FederationConfig, round_index: int) -> tuple[int, ...]:
    """ceil(fraction * K) clients, drawn from a seeded per-round stream,
    returned in ascending id order. Full participation never consumes RNG."""
    ids = sorted(client_ids)
    k = len(ids)
    m = int(np.ceil(cfg.participation_fraction * k))
    if m >= k:
        return tuple(ids)
    rng = np.random.default_rng(derive_seed(cfg.seed, "participation", round_index))
    chosen = rng.choice(k, size=m, replace=False)
    return tuple(sorted(ids[i] for i in chosen))


def run_round(
    global_params: np.ndarray,
    clients: Sequence[ClientHandle],
    cfg: FederationConfig,
    round_index: int,
    arch: MlpArchitecture,
    frozen_mask: np.ndarray | None = None,
    pos_weight: float = 1.0,
) -> RoundResult:
    """Broadcast -> local training -> upload -> aggregate, one round.

    Each client's shuffle seed is derive_seed(cfg.seed, round, client id), so
    the result does not depend on the order client updates are computed in.
    """
    by_id = {c.client_id: c for c in clients}
    if len(by_id) != len(clients):
        raise ValueError("duplicate client ids")
    participants = select_participants(list(by_id), cfg, round_index)
    updates, weights = [], []
    for cid in participants:
        client = by_id[cid]
        hp = replace(cfg.hp, seed=derive_seed(cfg.seed, round_index, cid))
        try:
            updated = train_local(
                global_params, arch, client.features, client.targets, hp, frozen_mask, pos_weight
            )
        except DivergenceError as exc:
            raise DivergenceError(f"client {cid} diverged in round {round_index}: {exc}") from exc
        updates.append(updated)
        weights.append(client.n_k)
    new_params = aggregate(updates, weights)
    if frozen_mask is not None and frozen_mask.any():
        # clients never move frozen coordinates, but the weighted mean of
        # identical values is not bit-exact; reimpose them to keep the
        # frozen block bit-invariant
        new_params[frozen_mask] = global_params[frozen_mask]
    if not np.all(np.isfinite(new_params)):
        raise DivergenceError(f"aggregate in round {round_index} is non-finite")
    return RoundResult(round_index=round_index, global_params=new_params, participants=participants)


def evaluate(
    params: np.ndarray,
    arch: MlpArchitecture,
    holdout: FingerprintSet,
    metric: str,
    norm: NormalizationSpec | None = None,
    class_floors: Sequence[int] | None = None,
    rss_floor: float | None = None,
) -> float:
    """Denormalized holdout metric: mean Euclidean position error in meters,
    or the fraction of correctly classified floors."""
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    if len(holdout) == 0:
        raise ValueError("evaluate needs a nonempty holdout set")
    if metric == "mae_meters":
        if norm is None:
            raise ValueError("mae_meters needs a NormalizationSpec")
        feats = rss_features(holdout, norm.rss_floor)
        pred = denormalize_targets(forward(params, arch, feats), norm)
        return mean_position_error(pred, holdout.coordinates())
    if class_floors is None:
        raise ValueError("accuracy needs class_floors")
    feats = rss_features(holdout, DEFAULT_RSS_FLOOR if rss_floor is None else rss_floor)
    probs = forward(params, arch, feats)
    pred = np.asarray(class_floors)[np.argmax(probs, axis=1)]
    return float(np.mean(pred == holdout.floor))


def mean_position_error(predicted_xy: np.ndarray, true_xy: np.ndarray) -> float:
    """Mean Euclidean distance in meters between prediction and truth."""
    diff = np.asarray(predicted_xy, dtype=np.float64) - np.asarray(true_xy, dtype=np.float64)
    if diff.ndim != 2 or diff.shape[1] != 2:
        raise ValueError("expected (n, 2) coordinate arrays")
    return float(np.mean(np.sqrt((diff**2).sum(axis=1))))


def run_training(
    init: np.ndarray,
    arch: MlpArchitecture,
    clients: Sequence[ClientHandle],
    cfg: FederationConfig,
    eval_set: FingerprintSet | None = None,
    metric: str = "mae_meters",
    norm: NormalizationSpec | None = None,
    class_floors: Sequence[int] | None = None,
    rss_floor: float = DEFAULT_RSS_FLOOR,
    start_round: int = 1,
    frozen_mask: np.ndarray | None = None,
    pos_weight: float = 1.0,
    metadata: dict | None = None,
    keep_round_params: bool = False,
) -> TrainingTrace:
    """cfg.rounds rounds starting at round index start_round.

    The holdout metric is evaluated at rounds divisible by cfg.eval_every and
    at the final round of the run. On divergence the partial trace is attached
    to the raised DivergenceError (attribute partial_trace) and flagged
    incomplete.
    """
    if not clients:
        raise ValueError("run_training needs at least one client")
    if eval_set is not None and len(eval_set) == 0:
        raise ValueError("evaluation set is empty")
    trace = TrainingTrace(metadata=dict(metadata or {}))
    trace.metadata.setdefault("arch", arch.fingerprint())
    trace.metadata.setdefault("seed", cfg.seed)
    trace.metadata.setdefault("metric", metric)

    eval_feats = eval_tgt_xy = eval_floors = None
    if eval_set is not None:
        if metric == "mae_meters":
            if norm is None:
                raise ValueError("mae_meters needs a NormalizationSpec")
            eval_feats = rss_features(eval_set, norm.rss_floor)
            eval_tgt_xy = eval_set.coordinates()
        else:
            if class_floors is None:
                raise ValueError("accuracy needs class_floors")
            eval_feats = rss_features(eval_set, rss_floor)
            eval_floors = np.asarray(eval_set.floor)

    params = np.array(init, dtype=np.float64, copy=True)
    last_round = start_round + cfg.rounds - 1
    for round_index in range(start_round, last_round + 1):
        tick = time.perf_counter()
        try:
            result = run_round(params, clients, cfg, round_index, arch, frozen_mask, pos_weight)
        except DivergenceError as exc:
            trace.incomplete = True
            exc.partial_trace = trace
            raise
        params = result.global_params
        value = None
        if eval_feats is not None and (
            round_index % cfg.eval_every == 0 or round_index == last_round
        ):
            out = forward(params, arch, eval_feats)
            if metric == "mae_meters":
                value = mean_position_error(denormalize_targets(out, norm), eval_tgt_xy)
            else:
                pred = np.asarray(class_floors)[np.argmax(out, axis=1)]
                value = float(np.mean(pred == eval_floors))
        result.wall_seconds = time.perf_counter() - tick
        result.eval_metric = value
        result.metric_name = metric if value is not None else None
        if not keep_round_params and round_index != last_round:
            result.global_params = None
        trace.results.append(result)
    trace.final_params = params
    return trace
