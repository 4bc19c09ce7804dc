"""Federated position regression on one floor, next to its pooled twin.

Six phones on building 1 / floor 1 each keep their own fingerprints. The
federation averages their local SGD updates once per round; the pooled run
trains one model on all records at once. At equal step budgets the two end
up close, which is the point: averaging loses little here, and nobody ships
raw scans.

Run: python demos/demo_federated_regression.py
"""

import os
import tempfile

from fedloc.dataset import (
    filter_records,
    fit_target_normalization,
    load_csv,
    partition_by_phone,
    pool_records,
)
from fedloc.fedavg import (
    ClientHandle,
    FederationConfig,
    derive_seed,
    regression_clients,
    run_training,
)
from fedloc.model import MlpArchitecture, TrainingHyperparams, init_params
from fedloc.synthetic import ensure_corpus


def corpus_dir() -> str:
    root = os.environ.get("FEDLOC_DATASET_ROOT")
    if root and os.path.exists(os.path.join(root, "trainingData.csv")):
        return root
    out = os.path.join(tempfile.gettempdir(), "fedloc-demo-corpus")
    print(f"generating the bundled synthetic corpus under {out} (first run only)")
    ensure_corpus(out)
    return out


def main() -> None:
    root = corpus_dir()
    train = filter_records(load_csv(os.path.join(root, "trainingData.csv")), building=1, floor=1)
    holdout = filter_records(load_csv(os.path.join(root, "validationData.csv")), building=1, floor=1)
    print(f"building 1 / floor 1: {len(train)} training records, {len(holdout)} holdout")

    norm = fit_target_normalization(train)
    arch = MlpArchitecture((520, 64, 64, 2), "relu", "linear")
    hp = TrainingHyperparams(learning_rate=0.6, batch_size=32, local_epochs=1, seed=0)
    cfg = FederationConfig(rounds=60, hp=hp, eval_every=10, seed=1)
    init = init_params(arch, derive_seed(cfg.seed, "init"))

    assignment = partition_by_phone(train, 6)
    sizes = {cid: len(c) for cid, c in assignment.clients.items()}
    print(f"6 clients by phone, shard sizes {sizes}")

    federated = run_training(
        init, arch, regression_clients(assignment, norm), cfg,
        eval_set=holdout, metric="mae_meters", norm=norm,
    )
    pooled = run_training(
        init, arch, regression_clients(pool_records(train), norm), cfg,
        eval_set=holdout, metric="mae_meters", norm=norm,
    )

    print("\nround   federated MAE (m)   pooled MAE (m)")
    pooled_at = dict(pooled.evaluated())
    for rnd, mae in federated.evaluated():
        print(f"{rnd:>5}   {mae:>17.2f}   {pooled_at[rnd]:>14.2f}")
    gap = federated.final_metric() - pooled.final_metric()
    print(f"\nfinal gap federated - pooled: {gap:+.2f} m")


if __name__ == "__main__":
    main()
