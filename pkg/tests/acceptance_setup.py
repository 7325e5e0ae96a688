"""Shared configuration and caching for the long-running acceptance checks.

The trained artifacts (ensemble pool members, hyperparameter-sweep cells,
cached per-member predictions) are expensive, so they live in a cache
directory keyed entirely by the deterministic seeds below.  Any process that
runs these helpers with the same constants reproduces or reuses the same
files, which lets the suite resume after interruption.
"""

import os

import numpy as np

from uqdenoise.ensembles import hyperparameter_sweep, materialize_member
from uqdenoise.graphs import GraphHyperparams
from uqdenoise.model import Model, QuantileField, TrainConfig, train
from uqdenoise.seeding import substream_seed
from uqdenoise.synthetic import SynthConfig, make_dataset

CACHE = os.path.join(os.path.dirname(os.path.abspath(__file__)), "_acceptance_cache")
POOL_DIR = os.path.join(CACHE, "pool")
SWEEP_DIR = os.path.join(CACHE, "sweep_cells")
FIELDS_PATH = os.path.join(CACHE, "pool_fields.npz")

MASTER_SEED = 42
POOL_SIZE = 25
QUANTILES = (0.05, 0.5, 0.95)

POOL_HP = GraphHyperparams(depth=25, alpha=0.0, gamma=0.75, channels=4, seed=0)
POOL_EPOCHS = 50

SWEEP_BASE_HP = GraphHyperparams(depth=5, alpha=0.0, gamma=0.0, channels=3, seed=0)
SWEEP_GRID = dict(alphas=[0.0, 1.5], gammas=[0.0, 1.5], depths=[5, 15, 25],
                  per_cell=5)
SWEEP_EPOCHS = 50


def benchmark_dataset():
    """The 8/8/8 synthetic benchmark used by all trained-model criteria."""
    return make_dataset(SynthConfig(seed=1, n_images=8))


def pool_member_path(i):
    return os.path.join(POOL_DIR, f"member_{i:02d}.model")


def ensure_pool_member(i, train_pairs):
    """Load pool member ``i``, training and caching it on first use."""
    path = pool_member_path(i)
    if os.path.exists(path):
        return Model.load(path)
    os.makedirs(POOL_DIR, exist_ok=True)
    gseed = substream_seed(MASTER_SEED, "pool-graph", i)
    wseed = substream_seed(MASTER_SEED, "pool-weights", i)
    model = materialize_member(POOL_HP, gseed, wseed, in_channels=1)
    cfg = TrainConfig(epochs=POOL_EPOCHS,
                      task_switch_seed=substream_seed(MASTER_SEED, "pool-tasks", i))
    train(model, train_pairs, cfg)
    model.save(path)
    return model


def pool_fields(dataset):
    """Per-member quantile predictions on the calibration and test splits.

    Returns a list (one entry per pool member) of dicts with 'calibration'
    and 'test' lists of QuantileFields, in the layout evaluate_ensemble and
    ensemble_size_sweep expect.  Cached as one npz file.
    """
    splits = ("calibration", "test")
    if os.path.exists(FIELDS_PATH):
        with np.load(FIELDS_PATH) as z:
            return [
                {split: [QuantileField(z[f"{i}_{split}_{j}_lower"],
                                       z[f"{i}_{split}_{j}_median"],
                                       z[f"{i}_{split}_{j}_upper"],
                                       QUANTILES)
                         for j in range(len(dataset[split]))]
                 for split in splits}
                for i in range(POOL_SIZE)
            ]
    members = []
    arrays = {}
    for i in range(POOL_SIZE):
        model = ensure_pool_member(i, dataset["train"])
        entry = {}
        for split in splits:
            fields = [model.predict_quantiles(x) for x, _ in dataset[split]]
            entry[split] = fields
            for j, f in enumerate(fields):
                arrays[f"{i}_{split}_{j}_lower"] = f.lower
                arrays[f"{i}_{split}_{j}_median"] = f.median
                arrays[f"{i}_{split}_{j}_upper"] = f.upper
        members.append(entry)
    os.makedirs(CACHE, exist_ok=True)
    np.savez_compressed(FIELDS_PATH + ".tmp.npz", **arrays)
    os.replace(FIELDS_PATH + ".tmp.npz", FIELDS_PATH)
    return members


def run_hyperparameter_sweep(dataset):
    """The reduced phase-transition sweep, resumable via per-cell checkpoints."""
    os.makedirs(SWEEP_DIR, exist_ok=True)
    return hyperparameter_sweep(
        train_pairs=dataset["train"],
        test_pairs=dataset["test"],
        base_hyperparams=SWEEP_BASE_HP,
        train_cfg=TrainConfig(epochs=SWEEP_EPOCHS),
        seed=MASTER_SEED,
        model_kwargs={"in_channels": 1},
        checkpoint_dir=SWEEP_DIR,
        **SWEEP_GRID,
    )
