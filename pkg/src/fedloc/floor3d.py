"""Two-step 3D localization: a federated floor classifier feeding per-floor
2D regressors.

The floor stage comes in two flavors:

* a single softmax-head model trained by plain FedAvg over floor labels, and
* a one-vs-all ensemble: one sigmoid-head binary model per floor, where every
  client trains all members each round on its own relabeled data and the
  server aggregates each member separately.

The one-vs-all route exists because plain FedAvg degrades when every client
holds a single floor's data; the binary members tolerate one-sided labels.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .dataset import (
    DEFAULT_RSS_FLOOR,
    ClientAssignment,
    FingerprintSet,
    NormalizationSpec,
    fit_target_normalization,
    rss_features,
)
from .fedavg import (
    ClientHandle,
    FederationConfig,
    RoundResult,
    TrainingTrace,
    regression_clients,
    run_round,
    run_training,
)
from .model import MlpArchitecture, forward, init_params, load_params, save_params
from .seeding import derive_seed

ENSEMBLE_MANIFEST = "ensemble_manifest.json"


# ---------------------------------------------------------------------------
# One-vs-all relabeling

@dataclass(eq=False)
class OvaLabeling:
    """Binary view of a record set: label 1 iff the record lies on
    target_floor. Features are untouched."""

    target_floor: int
    source: FingerprintSet
    labels: np.ndarray

    def __post_init__(self) -> None:
        if self.labels.shape != (len(self.source), 1):
            raise ValueError(f"labels must be ({len(self.source)}, 1), got {self.labels.shape}")

    def positive_count(self) -> int:
        return int(self.labels.sum())


def relabel_ova(s: FingerprintSet, target_floor: int) -> OvaLabeling:
    """Label each record 1 if it sits on target_floor, else 0."""
    labels = (np.asarray(s.floor) == target_floor).astype(np.float64).reshape(-1, 1)
    return OvaLabeling(target_floor=int(target_floor), source=s, labels=labels)


def _ova_clients(assignment: ClientAssignment, target_floor: int, rss_floor: float) -> list[ClientHandle]:
    out = []
    for cid in assignment.client_ids():
        s = assignment.clients[cid]
        out.append(
            ClientHandle(
                client_id=cid,
                features=rss_features(s, rss_floor),
                targets=relabel_ova(s, target_floor).labels,
                local_data=s,
            )
        )
    return out


# ---------------------------------------------------------------------------
# Ensemble container

@dataclass(eq=False)
class FloorClassifierEnsemble:
    """L binary floor models sharing one sigmoid-head architecture; member i
    scores membership of floors[i]."""

    arch: MlpArchitecture
    floors: tuple[int, ...]
    members: list[np.ndarray]

    def __post_init__(self) -> None:
        if len(self.floors) < 2:
            raise ValueError("an ensemble needs at least two floors")
        if len(self.members) != len(self.floors):
            raise ValueError(
                f"{len(self.members)} members for {len(self.floors)} floors"
            )
        if self.arch.output_head != "sigmoid" or self.arch.layer_widths[-1] != 1:
            raise ValueError("ensemble members must be width-1 sigmoid models")
        for i, m in enumerate(self.members):
            if m.shape != (self.arch.n_params,):
                raise ValueError(f"member {i} has shape {m.shape}, expected ({self.arch.n_params},)")

    @property
    def n_floors(self) -> int:
        return len(self.floors)

    def save(self, directory: str) -> None:
        """One parameter file per member plus a manifest mapping floors to
        files."""
        os.makedirs(directory, exist_ok=True)
        file_map = {}
        for f, params in zip(self.floors, self.members):
            name = f"member_floor{f}.npz"
            save_params(os.path.join(directory, name), params, self.arch)
            file_map[str(f)] = name
        manifest = {
            "n_floors": self.n_floors,
            "arch": self.arch.fingerprint(),
            "hidden_widths": list(self.arch.layer_widths[1:-1]),
            "input_width": self.arch.layer_widths[0],
            "hidden_activation": self.arch.hidden_activation,
            "floor_files": file_map,
        }
        with open(os.path.join(directory, ENSEMBLE_MANIFEST), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, directory: str) -> "FloorClassifierEnsemble":
        path = os.path.join(directory, ENSEMBLE_MANIFEST)
        with open(path) as fh:
            manifest = json.load(fh)
        arch = MlpArchitecture(
            tuple([manifest["input_width"], *manifest["hidden_widths"], 1]),
            manifest["hidden_activation"],
            "sigmoid",
        )
        if arch.fingerprint() != manifest["arch"]:
            raise ValueError(
                f"manifest architecture {manifest['arch']!r} does not match {arch.fingerprint()!r}"
            )
        floors = sorted(int(f) for f in manifest["floor_files"])
        members = [
            load_params(os.path.join(directory, manifest["floor_files"][str(f)]), arch)[0]
            for f in floors
        ]
        return cls(arch=arch, floors=tuple(floors), members=members)


def floor_scores(ensemble: FloorClassifierEnsemble, features: np.ndarray) -> np.ndarray:
    """(n, L) matrix of member probabilities, column i for floors[i]."""
    return np.column_stack(
        [forward(m, ensemble.arch, features)[:, 0] for m in ensemble.members]
    )


def predict_floor(ensemble: FloorClassifierEnsemble, features: np.ndarray) -> np.ndarray:
    """Most probable floor per row; ties resolve to the lowest floor index."""
    scores = floor_scores(ensemble, features)
    return np.asarray(ensemble.floors)[np.argmax(scores, axis=1)]


# ---------------------------------------------------------------------------
# Floor-stage training

@dataclass(eq=False)
class FedOvaResult:
    ensemble: FloorClassifierEnsemble
    member_traces: dict[int, TrainingTrace]
    accuracy_trace: TrainingTrace


def train_fedova(
    assignment: ClientAssignment,
    class_floors: list[int],
    cfg: FederationConfig,
    hidden_widths: tuple[int, ...] = (128, 64),
    hidden_activation: str = "relu",
    rss_floor: float = DEFAULT_RSS_FLOOR,
    pos_weight: float = 1.0,
    eval_set: FingerprintSet | None = None,
) -> FedOvaResult:
    """One-vs-all federated training: every round, each participating client
    updates all L binary members on its relabeled local data, and each member
    is aggregated separately with the usual record-count weights.

    All members share the round's participant selection and local batch
    order (they see the same local passes, only the labels differ); member
    initializations differ by floor. The accuracy trace scores the assembled
    ensemble on eval_set at the configured stride.
    """
    floors = sorted(int(f) for f in class_floors)
    if len(floors) < 2:
        raise ValueError("need at least two floors")
    arch = MlpArchitecture((520, *hidden_widths, 1), hidden_activation, "sigmoid")
    member_clients = {f: _ova_clients(assignment, f, rss_floor) for f in floors}
    params = {f: init_params(arch, derive_seed(cfg.seed, "ova", f)) for f in floors}
    member_traces = {f: TrainingTrace(metadata={"member_floor": f, "arch": arch.fingerprint(), "seed": cfg.seed}) for f in floors}
    acc_trace = TrainingTrace(metadata={"method": "FedOVA", "arch": arch.fingerprint(), "seed": cfg.seed, "metric": "accuracy"})

    eval_feats = eval_floors = None
    if eval_set is not None:
        if len(eval_set) == 0:
            raise ValueError("evaluation set is empty")
        eval_feats = rss_features(eval_set, rss_floor)
        eval_floors = np.asarray(eval_set.floor)

    for round_index in range(1, cfg.rounds + 1):
        tick = time.perf_counter()
        participants = None
        for f in floors:
            result = run_round(
                params[f], member_clients[f], cfg, round_index, arch, pos_weight=pos_weight
            )
            params[f] = result.global_params
            participants = result.participants
            member_traces[f].results.append(
                RoundResult(round_index=round_index, global_params=None, participants=result.participants)
            )
        value = None
        if eval_feats is not None and (
            round_index % cfg.eval_every == 0 or round_index == cfg.rounds
        ):
            scores = np.column_stack(
                [forward(params[f], arch, eval_feats)[:, 0] for f in floors]
            )
            pred = np.asarray(floors)[np.argmax(scores, axis=1)]
            value = float(np.mean(pred == eval_floors))
        acc_trace.results.append(
            RoundResult(
                round_index=round_index,
                global_params=None,
                participants=participants,
                eval_metric=value,
                metric_name="accuracy" if value is not None else None,
                wall_seconds=time.perf_counter() - tick,
            )
        )
    for f in floors:
        member_traces[f].final_params = params[f]
    ensemble = FloorClassifierEnsemble(arch=arch, floors=tuple(floors), members=[params[f] for f in floors])
    return FedOvaResult(ensemble=ensemble, member_traces=member_traces, accuracy_trace=acc_trace)


def train_fl_multiclass(
    assignment: ClientAssignment,
    class_floors: list[int],
    cfg: FederationConfig,
    hidden_widths: tuple[int, ...] = (128, 64),
    hidden_activation: str = "relu",
    rss_floor: float = DEFAULT_RSS_FLOOR,
    eval_set: FingerprintSet | None = None,
) -> tuple[np.ndarray, TrainingTrace, MlpArchitecture]:
    """Plain FedAvg floor classifier: one softmax model over all L floors."""
    from .fedavg import classification_clients

    floors = sorted(int(f) for f in class_floors)
    if len(floors) < 2:
        raise ValueError("need at least two floors")
    arch = MlpArchitecture((520, *hidden_widths, len(floors)), hidden_activation, "softmax")
    clients = classification_clients(assignment, floors, rss_floor)
    init = init_params(arch, derive_seed(cfg.seed, "multiclass"))
    trace = run_training(
        init, arch, clients, cfg,
        eval_set=eval_set, metric="accuracy", class_floors=floors, rss_floor=rss_floor,
        metadata={"method": "FL-multiclass"},
    )
    return trace.final_params, trace, arch


# ---------------------------------------------------------------------------
# Per-floor 2D stage and the assembled 3D model

def train_per_floor_2d(
    assignment: ClientAssignment,
    class_floors: list[int],
    cfg: FederationConfig,
    hidden_widths: tuple[int, ...] = (128, 64),
    hidden_activation: str = "relu",
    rss_floor: float = DEFAULT_RSS_FLOOR,
) -> tuple[dict[int, np.ndarray], dict[int, NormalizationSpec], MlpArchitecture, dict[int, TrainingTrace]]:
    """One independent federated regression per floor, over each client's
    records on that floor, with per-floor coordinate normalization."""
    floors = sorted(int(f) for f in class_floors)
    arch = MlpArchitecture((520, *hidden_widths, 2), hidden_activation, "linear")
    models: dict[int, np.ndarray] = {}
    norms: dict[int, NormalizationSpec] = {}
    traces: dict[int, TrainingTrace] = {}
    for f in floors:
        shards = {}
        for cid in assignment.client_ids():
            s = assignment.clients[cid]
            idx = np.flatnonzero(np.asarray(s.floor) == f)
            if idx.size:
                shards[len(shards)] = s.subset(idx, f"{s.description};floor={f}")
        if not shards:
            raise ValueError(f"no records on floor {f}; cannot train its 2D model")
        floor_assignment = ClientAssignment(
            clients=shards, axis=assignment.axis,
            client_tags={cid: f"floor{f}:{cid}" for cid in shards},
        )
        pooled = floor_assignment.pooled()
        norm = fit_target_normalization(pooled, rss_floor=rss_floor)
        clients = regression_clients(floor_assignment, norm)
        init = init_params(arch, derive_seed(cfg.seed, "floor2d", f))
        trace = run_training(
            init, arch, clients, cfg,
            eval_set=None, norm=norm,
            metadata={"method": "per-floor-2d", "floor": f},
        )
        models[f] = trace.final_params
        norms[f] = norm
        traces[f] = trace
    return models, norms, arch, traces


@dataclass(eq=False)
class ThreeDModel:
    """Floor stage plus one 2D regressor per floor."""

    floor_stage: FloorClassifierEnsemble | tuple[np.ndarray, MlpArchitecture]
    floors: tuple[int, ...]
    per_floor_2d: dict[int, np.ndarray]
    per_floor_norm: dict[int, NormalizationSpec]
    arch_2d: MlpArchitecture
    rss_floor: float = DEFAULT_RSS_FLOOR

    def __post_init__(self) -> None:
        missing = [f for f in self.floors if f not in self.per_floor_2d]
        if missing:
            raise ValueError(f"per-floor 2D models missing floors {missing}")

    def classify(self, features: np.ndarray) -> np.ndarray:
        if isinstance(self.floor_stage, FloorClassifierEnsemble):
            return predict_floor(self.floor_stage, features)
        params, arch = self.floor_stage
        out = forward(params, arch, features)
        return np.asarray(self.floors)[np.argmax(out, axis=1)]


def predict_3d(model: ThreeDModel, features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Predicted floor per row, then the 2D position from that floor's
    regressor (meters). A misclassified floor deliberately routes the row to
    the wrong regressor; the error shows up in the metrics."""
    from .dataset import denormalize_targets

    pred_floor = model.classify(features)
    xy = np.zeros((features.shape[0], 2), dtype=np.float64)
    for f in model.floors:
        rows = np.flatnonzero(pred_floor == f)
        if rows.size == 0:
            continue
        out = forward(model.per_floor_2d[f], model.arch_2d, features[rows])
        xy[rows] = denormalize_targets(out, model.per_floor_norm[f])
    return pred_floor, xy


def evaluate_3d(model: ThreeDModel, holdout: FingerprintSet) -> dict[str, float]:
    """Floor accuracy plus mean 2D error in meters (all rows, routed through
    the predicted floor's regressor)."""
    if len(holdout) == 0:
        raise ValueError("empty holdout")
    features = rss_features(holdout, model.rss_floor)
    pred_floor, xy = predict_3d(model, features)
    true_floor = np.asarray(holdout.floor)
    err = np.sqrt(((xy - holdout.coordinates()) ** 2).sum(axis=1))
    correct = pred_floor == true_floor
    metrics = {
        "floor_accuracy": float(np.mean(correct)),
        "mae_meters": float(err.mean()),
    }
    if correct.any():
        metrics["mae_meters_correct_floor"] = float(err[correct].mean())
    return metrics
