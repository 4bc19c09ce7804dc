"""Two-stage federated transfer for cross-domain localization.

Three methods over a DomainScenario share one initial parameter vector and
matched round seeds:

* fedloc        -- federate the source clients for the whole horizon.
* n_fedloc      -- federate only the target clients, from scratch.
* h_fedtloc     -- federate the source clients up to a hand-over round, copy
                   the model, then keep federating the target clients only
                   (optionally with leading layers frozen).

All three evaluate on the scenario holdout, so their traces are directly
comparable round for round.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .dataset import DomainScenario, NormalizationSpec
from .fedavg import FederationConfig, TrainingTrace, regression_clients, run_training
from .model import MlpArchitecture, _layer_slices, init_params
from .seeding import derive_seed

METHOD_TAGS = ("H-FedTLoc", "FedLoc", "N-FedLoc")


@dataclass(frozen=True)
class TransferConfig:
    """Stage layout for the two-stage pipeline.

    The two FederationConfig values act as per-stage templates (step size,
    batch recipe, participation, evaluation stride, seed); their own round
    counts are ignored and the horizons come from transfer_round and
    total_rounds instead. transfer_round == total_rounds is the degenerate
    layout whose hand-over stage is empty.
    """

    transfer_round: int
    total_rounds: int
    global_cfg: FederationConfig
    subglobal_cfg: FederationConfig
    freeze_prefix: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.transfer_round <= self.total_rounds:
            raise ValueError(
                f"transfer_round must be in [1, total_rounds={self.total_rounds}], "
                f"got {self.transfer_round}"
            )
        if self.freeze_prefix < 0:
            raise ValueError(f"freeze_prefix must be >= 0, got {self.freeze_prefix}")


@dataclass(eq=False)
class StageTrace:
    """Joined record of one method run: the pre-hand-over trace, the
    post-hand-over trace, and which method produced them. For single-stage
    methods the unused trace is empty."""

    method_tag: str
    global_trace: TrainingTrace
    subglobal_trace: TrainingTrace
    scenario: DomainScenario
    transfer_round: int | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.method_tag not in METHOD_TAGS:
            raise ValueError(f"unknown method_tag {self.method_tag!r}")

    def results(self):
        return self.global_trace.results + self.subglobal_trace.results

    def round_indices(self) -> list[int]:
        return [r.round_index for r in self.results()]

    def evaluated(self) -> list[tuple[int, float]]:
        return self.global_trace.evaluated() + self.subglobal_trace.evaluated()

    def final_metric(self) -> float:
        points = self.evaluated()
        if not points:
            raise ValueError("trace has no evaluated rounds")
        return points[-1][1]

    def final_params(self) -> np.ndarray:
        if self.subglobal_trace.final_params is not None:
            return self.subglobal_trace.final_params
        if self.global_trace.final_params is None:
            raise ValueError("trace carries no final parameters")
        return self.global_trace.final_params

    def export_csv(self, path: str, extra_columns: dict[str, object] | None = None) -> None:
        """One CSV covering both stages; adds method_tag / stage /
        transfer_round / rho columns to the base trace format."""
        import csv
        import json

        extra = dict(extra_columns or {})
        base_cols = ["round", "metric_name", "metric_value", "participating_clients", "wall_seconds"]
        stage_cols = ["method_tag", "stage", "transfer_round", "rho"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(base_cols + stage_cols + list(extra))
            for stage_name, trace in (("global", self.global_trace), ("subglobal", self.subglobal_trace)):
                for r in trace.results:
                    writer.writerow(
                        [
                            r.round_index,
                            r.metric_name or "",
                            repr(float(r.eval_metric)) if r.eval_metric is not None else "",
                            ";".join(str(c) for c in r.participants),
                            f"{r.wall_seconds:.6f}",
                            self.method_tag,
                            stage_name,
                            self.transfer_round if self.transfer_round is not None else "",
                            repr(float(self.scenario.target_ratio)),
                        ]
                        + [extra[k] for k in extra]
                    )
        meta = {
            "method_tag": self.method_tag,
            "scenario": self.scenario.description,
            "transfer_round": self.transfer_round,
            "rho": self.scenario.target_ratio,
            "global": self.global_trace.metadata,
            "subglobal": self.subglobal_trace.metadata,
        }
        meta.update(extra)
        with open(path + ".meta.json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")


def _empty_trace(tag: str) -> TrainingTrace:
    return TrainingTrace(results=[], metadata={"stage": tag, "empty": True})


def _initial_params(arch: MlpArchitecture, tc: TransferConfig, initial: np.ndarray | None) -> np.ndarray:
    if initial is not None:
        if initial.shape != (arch.n_params,):
            raise ValueError(f"initial params have shape {initial.shape}, expected ({arch.n_params},)")
        return np.array(initial, dtype=np.float64, copy=True)
    return init_params(arch, derive_seed(tc.global_cfg.seed, "init"))


def transfer_model(global_params: np.ndarray, arch: MlpArchitecture, tc: TransferConfig) -> tuple[np.ndarray, np.ndarray]:
    """Hand-over step: exact copy of the trained vector plus a boolean mask
    marking the first freeze_prefix layers' weights and biases non-trainable."""
    if not np.all(np.isfinite(global_params)):
        raise ValueError("cannot transfer non-finite parameters")
    if tc.freeze_prefix >= arch.n_layers:
        raise ValueError(
            f"freeze_prefix {tc.freeze_prefix} must be below the layer count {arch.n_layers}"
        )
    copied = np.array(global_params, dtype=np.float64, copy=True)
    mask = np.zeros(arch.n_params, dtype=bool)
    for w_sl, b_sl, _, _ in _layer_slices(arch)[: tc.freeze_prefix]:
        mask[w_sl] = True
        mask[b_sl] = True
    return copied, mask


def run_fedloc(
    scenario: DomainScenario,
    tc: TransferConfig,
    arch: MlpArchitecture,
    norm: NormalizationSpec,
    metric: str = "mae_meters",
    initial_params: np.ndarray | None = None,
) -> StageTrace:
    """Source-only baseline: no hand-over, full horizon on the source clients."""
    init = _initial_params(arch, tc, initial_params)
    clients = regression_clients(scenario.source, norm)
    cfg = dataclasses.replace(tc.global_cfg, rounds=tc.total_rounds)
    trace = run_training(
        init, arch, clients, cfg,
        eval_set=scenario.holdout, metric=metric, norm=norm,
        metadata={"method": "FedLoc", "scenario": scenario.description},
    )
    return StageTrace(
        method_tag="FedLoc",
        global_trace=trace,
        subglobal_trace=_empty_trace("subglobal"),
        scenario=scenario,
        transfer_round=None,
    )


def run_n_fedloc(
    scenario: DomainScenario,
    tc: TransferConfig,
    arch: MlpArchitecture,
    norm: NormalizationSpec,
    metric: str = "mae_meters",
    initial_params: np.ndarray | None = None,
) -> StageTrace:
    """Target-only baseline: fresh start on the target clients, full horizon,
    same step-size recipe as the source federation."""
    if scenario.target.total_records() == 0:
        raise ValueError("target trainable set is empty")
    init = _initial_params(arch, tc, initial_params)
    clients = regression_clients(scenario.target, norm)
    cfg = dataclasses.replace(tc.global_cfg, rounds=tc.total_rounds)
    trace = run_training(
        init, arch, clients, cfg,
        eval_set=scenario.holdout, metric=metric, norm=norm,
        metadata={"method": "N-FedLoc", "scenario": scenario.description},
    )
    return StageTrace(
        method_tag="N-FedLoc",
        global_trace=_empty_trace("global"),
        subglobal_trace=trace,
        scenario=scenario,
        transfer_round=None,
    )


def run_h_fedtloc(
    scenario: DomainScenario,
    tc: TransferConfig,
    arch: MlpArchitecture,
    norm: NormalizationSpec,
    metric: str = "mae_meters",
    initial_params: np.ndarray | None = None,
) -> StageTrace:
    """Two-stage method: source federation to the hand-over round, exact model
    copy (with optional frozen prefix), then target-only federation for the
    remaining rounds. One continuous round numbering, one holdout."""
    if scenario.target.total_records() == 0:
        raise ValueError("target trainable set is empty")
    init = _initial_params(arch, tc, initial_params)
    source_clients = regression_clients(scenario.source, norm)
    target_clients = regression_clients(scenario.target, norm)

    stage1_cfg = dataclasses.replace(tc.global_cfg, rounds=tc.transfer_round)
    stage1 = run_training(
        init, arch, source_clients, stage1_cfg,
        eval_set=scenario.holdout, metric=metric, norm=norm,
        metadata={"method": "H-FedTLoc", "stage": "global", "scenario": scenario.description},
    )

    copied, frozen_mask = transfer_model(stage1.final_params, arch, tc)
    remaining = tc.total_rounds - tc.transfer_round
    if remaining == 0:
        subglobal = _empty_trace("subglobal")
    else:
        stage2_cfg = dataclasses.replace(tc.subglobal_cfg, rounds=remaining)
        subglobal = run_training(
            copied, arch, target_clients, stage2_cfg,
            eval_set=scenario.holdout, metric=metric, norm=norm,
            start_round=tc.transfer_round + 1,
            frozen_mask=frozen_mask if tc.freeze_prefix > 0 else None,
            metadata={"method": "H-FedTLoc", "stage": "subglobal", "scenario": scenario.description},
        )
    return StageTrace(
        method_tag="H-FedTLoc",
        global_trace=stage1,
        subglobal_trace=subglobal,
        scenario=scenario,
        transfer_round=tc.transfer_round,
    )


METHOD_RUNNERS = {
    "FedLoc": run_fedloc,
    "N-FedLoc": run_n_fedloc,
    "H-FedTLoc": run_h_fedtloc,
}
