"""Config-driven experiment runner.

Ties scenarios, methods and metrics together: a JSON config names one of the
five experiment kinds, the runner executes every (grid point, seed, method)
cell and writes plot-ready CSV tables plus per-run traces and checkpoints.
All outputs are deterministic functions of the resolved config.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import floor3d
from .dataset import (
    DEFAULT_RSS_FLOOR,
    FingerprintSet,
    build_device_scenario,
    build_time_scenario,
    filter_records,
    fit_target_normalization,
    largest_gap_split_time,
    load_csv,
    partition_by_floor,
    partition_by_phone,
    partition_uniform,
    pool_records,
)
from .fedavg import FederationConfig, regression_clients, run_training
from .model import (
    HIDDEN_ACTIVATIONS,
    MlpArchitecture,
    TrainingHyperparams,
    init_params,
    save_params,
)
from .seeding import derive_seed
from .transfer import METHOD_TAGS, TransferConfig, METHOD_RUNNERS

EXPERIMENT_KINDS = (
    "transfer_device",
    "transfer_time",
    "floor3d_a",
    "floor3d_b",
    "baseline_2d",
)
_TRANSFER_KINDS = ("transfer_device", "transfer_time")
_FLOOR_KINDS = ("floor3d_a", "floor3d_b")

METRIC_UNITS = ("meters", "fraction")

DATASET_ROOT_ENV = "FEDLOC_DATASET_ROOT"

RESULTS_CSV = "results.csv"
SUMMARY_CSV = "summary.csv"
CONFIG_SNAPSHOT = "config.resolved"

_RESULT_COLUMNS = ("experiment_id", "method_tag", "seed", "round", "metric", "value", "units")
_SUMMARY_COLUMNS = (
    "experiment_id",
    "kind",
    "method_tag",
    "reference",
    "metric",
    "units",
    "final_round",
    "n_seeds",
    "mean",
    "std",
    "value",
)


class ConfigError(ValueError):
    """Raised for unknown keys, range violations, or missing inputs."""


# ---------------------------------------------------------------------------
# Config schema


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved experiment description.

    Every field is concrete (defaults already applied); `resolved()` renders
    the nested snapshot form that `validate_config` accepts back, which is
    the reproducibility contract for `config.resolved`.
    """

    experiment: str
    training_csv: str
    validation_csv: str
    building: int
    floor: int | None
    hidden_widths: tuple[int, ...]
    hidden_activation: str
    n_clients: int
    clients_per_floor: int
    rounds: int
    eval_every: int
    participation_fraction: float
    learning_rate: float
    batch_size: int
    local_epochs: int
    transfer_round: int
    freeze_prefix: int
    rho_grid: tuple[float, ...]
    target_phone: int | None
    split_time: int | None
    subglobal_learning_rate: float
    with_2d_stage: bool
    regression_rounds: int
    positive_weight: float
    seeds: tuple[int, ...]
    output_dir: str
    meta: dict = field(default_factory=dict)

    def resolved(self) -> dict:
        return {
            "experiment": self.experiment,
            "dataset": {
                "training_csv": self.training_csv,
                "validation_csv": self.validation_csv,
                "building": self.building,
                "floor": self.floor,
            },
            "model": {
                "hidden_widths": list(self.hidden_widths),
                "hidden_activation": self.hidden_activation,
            },
            "federation": {
                "n_clients": self.n_clients,
                "clients_per_floor": self.clients_per_floor,
                "rounds": self.rounds,
                "eval_every": self.eval_every,
                "participation_fraction": self.participation_fraction,
            },
            "training": {
                "learning_rate": self.learning_rate,
                "batch_size": self.batch_size,
                "local_epochs": self.local_epochs,
            },
            "transfer": {
                "transfer_round": self.transfer_round,
                "freeze_prefix": self.freeze_prefix,
                "rho_grid": list(self.rho_grid),
                "target_phone": self.target_phone,
                "split_time": self.split_time,
                "subglobal_learning_rate": self.subglobal_learning_rate,
            },
            "floor3d": {
                "with_2d_stage": self.with_2d_stage,
                "regression_rounds": self.regression_rounds,
                "positive_weight": self.positive_weight,
            },
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "meta": dict(self.meta),
        }


def _fail(path: str, message: str) -> ConfigError:
    return ConfigError(f"{path}: {message}")


def _as_int(value, path: str, lo: int | None = None, hi: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise _fail(path, f"expected an integer, got {value!r}")
    if lo is not None and value < lo:
        raise _fail(path, f"must be >= {lo}, got {value}")
    if hi is not None and value > hi:
        raise _fail(path, f"must be <= {hi}, got {value}")
    return value


def _as_float(value, path: str, lo: float | None = None, hi: float | None = None,
              lo_open: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise _fail(path, f"expected a number, got {value!r}")
    v = float(value)
    if not np.isfinite(v):
        raise _fail(path, f"must be finite, got {value!r}")
    if lo is not None and (v <= lo if lo_open else v < lo):
        op = ">" if lo_open else ">="
        raise _fail(path, f"must be {op} {lo}, got {value}")
    if hi is not None and v > hi:
        raise _fail(path, f"must be <= {hi}, got {value}")
    return v


def _as_bool(value, path: str) -> bool:
    if not isinstance(value, bool):
        raise _fail(path, f"expected true/false, got {value!r}")
    return value


def _as_str(value, path: str, choices: tuple[str, ...] | None = None) -> str:
    if not isinstance(value, str) or not value:
        raise _fail(path, f"expected a nonempty string, got {value!r}")
    if choices is not None and value not in choices:
        raise _fail(path, f"must be one of {list(choices)}, got {value!r}")
    return value


def _section(raw: dict, name: str) -> dict:
    sub = raw.pop(name, {})
    if sub is None:
        sub = {}
    if not isinstance(sub, dict):
        raise _fail(name, f"expected an object, got {sub!r}")
    return dict(sub)


def _reject_unknown(section: dict, prefix: str) -> None:
    if section:
        key = sorted(section)[0]
        path = f"{prefix}.{key}" if prefix else key
        raise ConfigError(f"unknown key {path!r}")


def resolve_dataset_path(path: str, base_dir: str | None = None) -> str:
    """Absolute paths pass through; relative paths resolve against
    FEDLOC_DATASET_ROOT when set, else against base_dir (or the cwd)."""
    if os.path.isabs(path):
        return path
    root = os.environ.get(DATASET_ROOT_ENV)
    if root:
        return os.path.abspath(os.path.join(root, path))
    return os.path.abspath(os.path.join(base_dir or os.getcwd(), path))


def validate_config(raw: dict | str, base_dir: str | None = None) -> ExperimentConfig:
    """Parse, strictly check, and default a config.

    Unknown keys are rejected by dotted path; range violations name the
    field. Dataset paths must exist at validation time. The returned config
    is fully resolved: serializing it back with `resolved()` and validating
    again is the identity.
    """
    if isinstance(raw, str):
        try:
            raw = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be an object, got {type(raw).__name__}")
    raw = json.loads(json.dumps(raw))  # deep copy; also rejects non-JSON values

    if "experiment" not in raw:
        raise ConfigError("missing required key 'experiment'")
    kind = _as_str(raw.pop("experiment"), "experiment", EXPERIMENT_KINDS)
    is_floor = kind in _FLOOR_KINDS

    ds = _section(raw, "dataset")
    if "training_csv" not in ds:
        raise ConfigError("missing required key 'dataset.training_csv'")
    if "validation_csv" not in ds:
        raise ConfigError("missing required key 'dataset.validation_csv'")
    training_csv = resolve_dataset_path(_as_str(ds.pop("training_csv"), "dataset.training_csv"), base_dir)
    validation_csv = resolve_dataset_path(_as_str(ds.pop("validation_csv"), "dataset.validation_csv"), base_dir)
    for label, p in (("dataset.training_csv", training_csv), ("dataset.validation_csv", validation_csv)):
        if not os.path.isfile(p):
            raise _fail(label, f"file does not exist: {p}")
    building = _as_int(ds.pop("building", 1), "dataset.building", lo=0)
    floor_default = None if is_floor else 1
    floor = ds.pop("floor", floor_default)
    if floor is not None:
        floor = _as_int(floor, "dataset.floor", lo=0)
        if is_floor:
            raise _fail("dataset.floor", f"{kind} uses every floor of the building; set it to null")
    elif not is_floor:
        raise _fail("dataset.floor", f"{kind} runs on a single floor; give a floor index")
    _reject_unknown(ds, "dataset")

    md = _section(raw, "model")
    widths_raw = md.pop("hidden_widths", [128, 64])
    if not isinstance(widths_raw, list) or not widths_raw:
        raise _fail("model.hidden_widths", f"expected a nonempty list, got {widths_raw!r}")
    hidden_widths = tuple(
        _as_int(w, f"model.hidden_widths[{i}]", lo=1) for i, w in enumerate(widths_raw)
    )
    hidden_activation = _as_str(
        md.pop("hidden_activation", "relu"), "model.hidden_activation", HIDDEN_ACTIVATIONS
    )
    _reject_unknown(md, "model")

    fed = _section(raw, "federation")
    n_clients = _as_int(fed.pop("n_clients", 16 if is_floor else 8), "federation.n_clients", lo=1)
    clients_per_floor = _as_int(fed.pop("clients_per_floor", 4), "federation.clients_per_floor", lo=1)
    rounds = _as_int(fed.pop("rounds", 400), "federation.rounds", lo=1)
    eval_every = _as_int(fed.pop("eval_every", 10), "federation.eval_every", lo=1)
    participation_fraction = _as_float(
        fed.pop("participation_fraction", 0.5 if is_floor else 1.0),
        "federation.participation_fraction", lo=0.0, hi=1.0, lo_open=True,
    )
    _reject_unknown(fed, "federation")

    tr = _section(raw, "training")
    learning_rate = _as_float(tr.pop("learning_rate", 0.6), "training.learning_rate", lo=0.0)
    batch_size = _as_int(tr.pop("batch_size", 32), "training.batch_size", lo=1)
    local_epochs = _as_int(tr.pop("local_epochs", 1), "training.local_epochs", lo=1)
    _reject_unknown(tr, "training")

    tf = _section(raw, "transfer")
    transfer_round = _as_int(tf.pop("transfer_round", min(200, rounds)), "transfer.transfer_round", lo=1)
    if transfer_round > rounds:
        raise _fail(
            "transfer.transfer_round", f"must be <= federation.rounds ({rounds}), got {transfer_round}"
        )
    freeze_prefix = _as_int(tf.pop("freeze_prefix", 0), "transfer.freeze_prefix", lo=0)
    grid_default = [0.25, 0.5, 1.0] if kind == "transfer_time" else [1.0]
    grid_raw = tf.pop("rho_grid", grid_default)
    if not isinstance(grid_raw, list) or not grid_raw:
        raise _fail("transfer.rho_grid", f"expected a nonempty list, got {grid_raw!r}")
    rho_grid = tuple(
        _as_float(r, f"transfer.rho_grid[{i}]", lo=0.0, hi=1.0, lo_open=True)
        for i, r in enumerate(grid_raw)
    )
    if len(set(rho_grid)) != len(rho_grid):
        raise _fail("transfer.rho_grid", f"values must be distinct, got {list(rho_grid)}")
    target_phone = tf.pop("target_phone", None)
    if target_phone is not None:
        target_phone = _as_int(target_phone, "transfer.target_phone", lo=0)
    split_time = tf.pop("split_time", None)
    if split_time is not None:
        split_time = _as_int(split_time, "transfer.split_time", lo=0)
    subglobal_learning_rate = _as_float(
        tf.pop("subglobal_learning_rate", 0.15), "transfer.subglobal_learning_rate", lo=0.0
    )
    _reject_unknown(tf, "transfer")

    f3 = _section(raw, "floor3d")
    with_2d_stage = _as_bool(f3.pop("with_2d_stage", False), "floor3d.with_2d_stage")
    regression_rounds = _as_int(f3.pop("regression_rounds", 200), "floor3d.regression_rounds", lo=1)
    positive_weight = _as_float(
        f3.pop("positive_weight", 1.0), "floor3d.positive_weight", lo=0.0, lo_open=True
    )
    _reject_unknown(f3, "floor3d")

    seeds_raw = raw.pop("seeds", [1, 2, 3])
    if not isinstance(seeds_raw, list) or not seeds_raw:
        raise _fail("seeds", f"expected a nonempty list, got {seeds_raw!r}")
    seeds = tuple(_as_int(s, f"seeds[{i}]", lo=0) for i, s in enumerate(seeds_raw))
    if len(set(seeds)) != len(seeds):
        raise _fail("seeds", f"values must be distinct, got {list(seeds)}")

    output_dir = _as_str(raw.pop("output_dir", f"runs/{kind}"), "output_dir")

    meta = raw.pop("meta", {})
    if not isinstance(meta, dict):
        raise _fail("meta", f"expected an object, got {meta!r}")
    _reject_unknown(raw, "")

    return ExperimentConfig(
        experiment=kind,
        training_csv=training_csv,
        validation_csv=validation_csv,
        building=building,
        floor=floor,
        hidden_widths=hidden_widths,
        hidden_activation=hidden_activation,
        n_clients=n_clients,
        clients_per_floor=clients_per_floor,
        rounds=rounds,
        eval_every=eval_every,
        participation_fraction=participation_fraction,
        learning_rate=learning_rate,
        batch_size=batch_size,
        local_epochs=local_epochs,
        transfer_round=transfer_round,
        freeze_prefix=freeze_prefix,
        rho_grid=rho_grid,
        target_phone=target_phone,
        split_time=split_time,
        subglobal_learning_rate=subglobal_learning_rate,
        with_2d_stage=with_2d_stage,
        regression_rounds=regression_rounds,
        positive_weight=positive_weight,
        seeds=seeds,
        output_dir=output_dir,
        meta=dict(meta),
    )


def load_config(path: str) -> ExperimentConfig:
    """Read a JSON config file; relative dataset paths resolve against the
    config file's directory unless FEDLOC_DATASET_ROOT overrides."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc
    return validate_config(text, base_dir=os.path.dirname(os.path.abspath(path)))


# ---------------------------------------------------------------------------
# Result rows


@dataclass(frozen=True)
class MetricRow:
    """One point of one curve: (experiment, method, seed, round) -> value."""

    experiment_id: str
    method_tag: str
    seed: int
    round: int
    metric: str
    value: float
    units: str

    def __post_init__(self) -> None:
        if self.units not in METRIC_UNITS:
            raise ValueError(f"units must be one of {METRIC_UNITS}, got {self.units!r}")
        if not np.isfinite(self.value):
            raise ValueError(f"value must be finite, got {self.value!r}")

    def key(self) -> tuple:
        return (self.experiment_id, self.method_tag, self.seed, self.round, self.metric)


class ResultTable:
    """Append-only row store enforcing key uniqueness; the single appender
    through which every run's rows are serialized."""

    def __init__(self) -> None:
        self.rows: list[MetricRow] = []
        self._keys: set[tuple] = set()

    def append(self, row: MetricRow) -> None:
        k = row.key()
        if k in self._keys:
            raise ValueError(f"duplicate metric row key {k}")
        self._keys.add(k)
        self.rows.append(row)

    def extend(self, rows) -> None:
        for row in rows:
            self.append(row)


def write_results_csv(rows: list[MetricRow], path: str) -> None:
    """Flat table, repr floats (shortest round trip), no timing columns: the
    file is the byte-identity artifact for reproducibility checks."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_RESULT_COLUMNS)
        for r in rows:
            writer.writerow(
                [r.experiment_id, r.method_tag, r.seed, r.round, r.metric, repr(float(r.value)), r.units]
            )


def read_results_csv(path: str) -> list[MetricRow]:
    rows: list[MetricRow] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in _RESULT_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ConfigError(f"{path}: missing result columns {missing}")
        for rec in reader:
            rows.append(
                MetricRow(
                    experiment_id=rec["experiment_id"],
                    method_tag=rec["method_tag"],
                    seed=int(rec["seed"]),
                    round=int(rec["round"]),
                    metric=rec["metric"],
                    value=float(rec["value"]),
                    units=rec["units"],
                )
            )
    return rows


# ---------------------------------------------------------------------------
# Summaries


def _final_points(rows: list[MetricRow]) -> dict[tuple, dict]:
    """Per (experiment, method, metric): each seed's last-round value."""
    groups: dict[tuple, dict] = {}
    for r in rows:
        g = groups.setdefault(
            (r.experiment_id, r.method_tag, r.metric),
            {"units": r.units, "finals": {}, "final_round": 0},
        )
        last_round, _ = g["finals"].get(r.seed, (-1, None))
        if r.round >= last_round:
            g["finals"][r.seed] = (r.round, r.value)
        g["final_round"] = max(g["final_round"], r.round)
    return groups


def summarize(rows: list[MetricRow]) -> list[dict]:
    """Final-round means/stds per method plus pairwise comparisons.

    For error metrics the comparison is the relative improvement
    (reference - method) / reference, positive iff the method's final error
    is lower. For accuracy metrics it is the gap in percentage points
    (method - reference). Everything here is recomputable from the raw rows.
    """
    if not rows:
        raise ValueError("no rows to summarize")
    groups = _final_points(rows)
    out: list[dict] = []
    for (exp_id, method, metric), g in sorted(groups.items()):
        finals = np.array([v for _, v in g["finals"].values()], dtype=np.float64)
        out.append(
            {
                "experiment_id": exp_id,
                "kind": "final",
                "method_tag": method,
                "reference": "",
                "metric": metric,
                "units": g["units"],
                "final_round": g["final_round"],
                "n_seeds": finals.size,
                "mean": float(finals.mean()),
                "std": float(finals.std()),
                "value": "",
            }
        )

    def mean_of(exp_id: str, method: str, metric: str) -> float | None:
        g = groups.get((exp_id, method, metric))
        if g is None:
            return None
        return float(np.mean([v for _, v in g["finals"].values()]))

    comparison_pairs = (
        ("relative_improvement", "H-FedTLoc", "FedLoc"),
        ("relative_improvement", "H-FedTLoc", "N-FedLoc"),
        ("point_gap", "fedova", "multiclass-fl"),
        ("point_gap", "multiclass-fl", "centralized"),
    )
    seen = {(exp_id, metric) for (exp_id, _, metric) in groups}
    for exp_id, metric in sorted(seen):
        for kind, method, reference in comparison_pairs:
            a = mean_of(exp_id, method, metric)
            b = mean_of(exp_id, reference, metric)
            if a is None or b is None:
                continue
            units = groups[(exp_id, method, metric)]["units"]
            if kind == "relative_improvement":
                if units != "meters" or b == 0.0:
                    continue
                value = (b - a) / b
            else:
                if units != "fraction":
                    continue
                value = (a - b) * 100.0
            out.append(
                {
                    "experiment_id": exp_id,
                    "kind": kind,
                    "method_tag": method,
                    "reference": reference,
                    "metric": metric,
                    "units": units,
                    "final_round": groups[(exp_id, method, metric)]["final_round"],
                    "n_seeds": len(groups[(exp_id, method, metric)]["finals"]),
                    "mean": "",
                    "std": "",
                    "value": float(value),
                }
            )
    return out


def write_summary_csv(summary_rows: list[dict], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_SUMMARY_COLUMNS)
        for row in summary_rows:
            writer.writerow(
                [
                    row[c] if not isinstance(row[c], float) else repr(row[c])
                    for c in _SUMMARY_COLUMNS
                ]
            )


# ---------------------------------------------------------------------------
# Run plumbing


@dataclass
class RunArtifacts:
    """Everything one run_experiment call produced."""

    output_dir: str
    rows: list[MetricRow]
    summary: list[dict]
    resolved_config: dict
    checkpoints: list[str]
    failures: list[str]


def _fed_config(cfg: ExperimentConfig, seed: int, lr: float | None = None,
                rounds: int | None = None) -> FederationConfig:
    hp = TrainingHyperparams(
        learning_rate=cfg.learning_rate if lr is None else lr,
        batch_size=cfg.batch_size,
        local_epochs=cfg.local_epochs,
        seed=0,
    )
    return FederationConfig(
        rounds=cfg.rounds if rounds is None else rounds,
        hp=hp,
        participation_fraction=cfg.participation_fraction,
        eval_every=cfg.eval_every,
        seed=seed,
    )


def _trace_rows(exp_id: str, method: str, seed: int, evaluated, metric: str, units: str):
    return [
        MetricRow(exp_id, method, seed, rnd, metric, float(val), units)
        for rnd, val in evaluated
    ]


def _run_transfer(cfg: ExperimentConfig, ctx: "_RunContext") -> None:
    train = filter_records(ctx.train, cfg.building, cfg.floor)
    val = filter_records(ctx.val, cfg.building, cfg.floor)
    norm = fit_target_normalization(train)
    arch = MlpArchitecture((520, *cfg.hidden_widths, 2), cfg.hidden_activation, "linear")
    split = cfg.split_time
    if cfg.experiment == "transfer_time" and split is None:
        split = largest_gap_split_time(train)

    for rho in cfg.rho_grid:
        exp_id = f"{cfg.experiment}[rho={rho:g}]"
        for seed in cfg.seeds:
            try:
                if cfg.experiment == "transfer_device":
                    scenario = build_device_scenario(
                        train, cfg.target_phone, cfg.n_clients, rho, seed, validation=val
                    )
                else:
                    scenario = build_time_scenario(
                        train, split, cfg.n_clients, rho, seed, validation=val
                    )
            except Exception as exc:  # noqa: BLE001 - recorded and skipped per spec
                ctx.failures.append(f"{exp_id}/scenario/seed{seed}: {type(exc).__name__}: {exc}")
                continue
            tc = TransferConfig(
                transfer_round=cfg.transfer_round,
                total_rounds=cfg.rounds,
                global_cfg=_fed_config(cfg, seed),
                subglobal_cfg=_fed_config(cfg, seed, lr=cfg.subglobal_learning_rate),
                freeze_prefix=cfg.freeze_prefix,
            )
            for method in METHOD_TAGS:
                unit = f"{exp_id}/{method}/seed{seed}"
                try:
                    trace = METHOD_RUNNERS[method](scenario, tc, arch, norm)
                    ctx.table.extend(
                        _trace_rows(exp_id, method, seed, trace.evaluated(), "holdout_mae", "meters")
                    )
                    stem = f"{cfg.experiment}_rho{rho:g}_{method}_seed{seed}"
                    trace.export_csv(
                        os.path.join(ctx.traces_dir, f"{stem}.csv"), {"seed": seed}
                    )
                    ckpt = os.path.join(ctx.checkpoints_dir, f"{stem}.npz")
                    save_params(ckpt, trace.final_params(), arch)
                    ctx.checkpoints.append(os.path.relpath(ckpt, ctx.output_dir))
                except Exception as exc:  # noqa: BLE001 - recorded and skipped per spec
                    ctx.failures.append(f"{unit}: {type(exc).__name__}: {exc}")


def _run_baseline_2d(cfg: ExperimentConfig, ctx: "_RunContext") -> None:
    train = filter_records(ctx.train, cfg.building, cfg.floor)
    val = filter_records(ctx.val, cfg.building, cfg.floor)
    norm = fit_target_normalization(train)
    arch = MlpArchitecture((520, *cfg.hidden_widths, 2), cfg.hidden_activation, "linear")
    exp_id = cfg.experiment
    for seed in cfg.seeds:
        unit = f"{exp_id}/fedloc/seed{seed}"
        try:
            assignment = partition_by_phone(train, cfg.n_clients)
            clients = regression_clients(assignment, norm)
            fed = _fed_config(cfg, seed)
            init = init_params(arch, derive_seed(seed, "init"))
            trace = run_training(
                init, arch, clients, fed,
                eval_set=val, metric="mae_meters", norm=norm,
                metadata={"method": "fedloc", "experiment": exp_id, "seed": seed},
            )
            ctx.table.extend(
                _trace_rows(exp_id, "fedloc", seed, trace.evaluated(), "holdout_mae", "meters")
            )
            stem = f"{exp_id}_fedloc_seed{seed}"
            trace.export_csv(os.path.join(ctx.traces_dir, f"{stem}.csv"), {"seed": seed})
            ckpt = os.path.join(ctx.checkpoints_dir, f"{stem}.npz")
            save_params(ckpt, trace.final_params, arch)
            ctx.checkpoints.append(os.path.relpath(ckpt, ctx.output_dir))
        except Exception as exc:  # noqa: BLE001
            ctx.failures.append(f"{unit}: {type(exc).__name__}: {exc}")


def _floor_methods(cfg: ExperimentConfig):
    if cfg.experiment == "floor3d_a":
        return ("centralized", "multiclass-fl")
    return ("multiclass-fl", "fedova")


def _floor_assignment(cfg: ExperimentConfig, train: FingerprintSet, method: str, seed: int):
    if method == "centralized":
        return pool_records(train)
    if cfg.experiment == "floor3d_a":
        return partition_uniform(train, cfg.n_clients, seed=derive_seed(seed, "uniform"))
    return partition_by_floor(train, cfg.clients_per_floor, seed=derive_seed(seed, "byfloor"))


def _run_floor3d(cfg: ExperimentConfig, ctx: "_RunContext") -> None:
    train = filter_records(ctx.train, cfg.building)
    val = filter_records(ctx.val, cfg.building)
    floors = sorted(int(f) for f in set(train.floor.tolist()))
    exp_id = cfg.experiment

    for seed in cfg.seeds:
        stage_models: dict[str, object] = {}
        for method in _floor_methods(cfg):
            unit = f"{exp_id}/{method}/seed{seed}"
            try:
                assignment = _floor_assignment(cfg, train, method, seed)
                fed = _fed_config(cfg, seed)
                if method == "fedova":
                    result = floor3d.train_fedova(
                        assignment, floors, fed,
                        hidden_widths=cfg.hidden_widths,
                        hidden_activation=cfg.hidden_activation,
                        pos_weight=cfg.positive_weight,
                        eval_set=val,
                    )
                    evaluated = result.accuracy_trace.evaluated()
                    stem = f"{exp_id}_{method}_seed{seed}"
                    result.accuracy_trace.export_csv(
                        os.path.join(ctx.traces_dir, f"{stem}.csv"),
                        {"method_tag": method, "seed": seed},
                    )
                    ensemble_dir = os.path.join(ctx.checkpoints_dir, stem)
                    result.ensemble.save(ensemble_dir)
                    ctx.checkpoints.append(os.path.relpath(ensemble_dir, ctx.output_dir))
                    stage_models[method] = result.ensemble
                else:
                    params, trace, arch = floor3d.train_fl_multiclass(
                        assignment, floors, fed,
                        hidden_widths=cfg.hidden_widths,
                        hidden_activation=cfg.hidden_activation,
                        eval_set=val,
                    )
                    evaluated = trace.evaluated()
                    stem = f"{exp_id}_{method}_seed{seed}"
                    trace.export_csv(
                        os.path.join(ctx.traces_dir, f"{stem}.csv"),
                        {"method_tag": method, "seed": seed},
                    )
                    ckpt = os.path.join(ctx.checkpoints_dir, f"{stem}.npz")
                    save_params(ckpt, params, arch)
                    ctx.checkpoints.append(os.path.relpath(ckpt, ctx.output_dir))
                    stage_models[method] = (params, arch)
                ctx.table.extend(
                    _trace_rows(exp_id, method, seed, evaluated, "holdout_accuracy", "fraction")
                )
            except Exception as exc:  # noqa: BLE001
                ctx.failures.append(f"{unit}: {type(exc).__name__}: {exc}")

        if not cfg.with_2d_stage or not stage_models:
            continue
        unit = f"{exp_id}/2d-stage/seed{seed}"
        try:
            reg_assignment = _floor_assignment(cfg, train, "2d", seed)
            reg_fed = _fed_config(cfg, seed, rounds=cfg.regression_rounds)
            models, norms, arch2d, reg_traces = floor3d.train_per_floor_2d(
                reg_assignment, floors, reg_fed,
                hidden_widths=cfg.hidden_widths,
                hidden_activation=cfg.hidden_activation,
            )
            for f, reg_trace in reg_traces.items():
                reg_trace.export_csv(
                    os.path.join(ctx.traces_dir, f"{exp_id}_2d_floor{f}_seed{seed}.csv"),
                    {"seed": seed},
                )
            for f, params in models.items():
                ckpt = os.path.join(ctx.checkpoints_dir, f"{exp_id}_2d_floor{f}_seed{seed}.npz")
                save_params(ckpt, params, arch2d)
                ctx.checkpoints.append(os.path.relpath(ckpt, ctx.output_dir))
            for method, stage in stage_models.items():
                model3d = floor3d.ThreeDModel(
                    floor_stage=stage,
                    floors=tuple(floors),
                    per_floor_2d=models,
                    per_floor_norm=norms,
                    arch_2d=arch2d,
                )
                metrics = floor3d.evaluate_3d(model3d, val)
                for name, value in sorted(metrics.items()):
                    units = "fraction" if name == "floor_accuracy" else "meters"
                    ctx.table.append(
                        MetricRow(exp_id, method, seed, cfg.rounds, f"3d_{name}", float(value), units)
                    )
        except Exception as exc:  # noqa: BLE001
            ctx.failures.append(f"{unit}: {type(exc).__name__}: {exc}")


@dataclass
class _RunContext:
    train: FingerprintSet
    val: FingerprintSet
    table: ResultTable
    output_dir: str
    traces_dir: str
    checkpoints_dir: str
    checkpoints: list[str]
    failures: list[str]


_KIND_RUNNERS = {
    "transfer_device": _run_transfer,
    "transfer_time": _run_transfer,
    "floor3d_a": _run_floor3d,
    "floor3d_b": _run_floor3d,
    "baseline_2d": _run_baseline_2d,
}


def run_experiment(cfg: ExperimentConfig) -> RunArtifacts:
    """Execute every cell of the experiment and write the artifact set.

    Layout under cfg.output_dir: `config.resolved` (written first, before
    any training), `results.csv`, `summary.csv`, `traces/` per-run round
    tables, `checkpoints/` final parameters. Per-cell failures are recorded
    in the returned artifacts and skipped; completed cells still land in the
    tables.
    """
    out_dir = cfg.output_dir
    traces_dir = os.path.join(out_dir, "traces")
    checkpoints_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(traces_dir, exist_ok=True)
    os.makedirs(checkpoints_dir, exist_ok=True)

    resolved = cfg.resolved()
    with open(os.path.join(out_dir, CONFIG_SNAPSHOT), "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")

    ctx = _RunContext(
        train=load_csv(cfg.training_csv, "training"),
        val=load_csv(cfg.validation_csv, "validation"),
        table=ResultTable(),
        output_dir=out_dir,
        traces_dir=traces_dir,
        checkpoints_dir=checkpoints_dir,
        checkpoints=[],
        failures=[],
    )
    try:
        _KIND_RUNNERS[cfg.experiment](cfg, ctx)
    except Exception as exc:  # noqa: BLE001 - whole-experiment failures still produce artifacts
        ctx.failures.append(f"{cfg.experiment}: {type(exc).__name__}: {exc}")

    write_results_csv(ctx.table.rows, os.path.join(out_dir, RESULTS_CSV))
    summary = summarize(ctx.table.rows) if ctx.table.rows else []
    write_summary_csv(summary, os.path.join(out_dir, SUMMARY_CSV))
    return RunArtifacts(
        output_dir=out_dir,
        rows=ctx.table.rows,
        summary=summary,
        resolved_config=resolved,
        checkpoints=ctx.checkpoints,
        failures=ctx.failures,
    )
