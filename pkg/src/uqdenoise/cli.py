"""Command-line pipeline driver.

Every subcommand reads a JSON config file, applies dotted-path overrides
given with ``--set``, writes the fully resolved config beside its outputs,
and derives all randomness from one master seed through named substreams.
Re-running a subcommand from its snapshot reproduces byte-identical files.

Exit codes: 0 success, 2 configuration or validation failure, 1 runtime
failure. Errors go to stderr with the prefix ``uqdenoise-error``.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import os
import sys

import numpy as np

from . import conformal, ensembles, latent
from .autodiff import ShapeError
from .conformal import CalibrationSetTooSmall
from .graphs import GraphError, GraphHyperparams, graph_stats, sample_graph
from .latent import LatentError
from .model import Model, TrainConfig, TrainingError, train
from .seeding import substream_seed
from .synthetic import SynthConfig, load_dataset, make_dataset, save_dataset
from .tensorio import ContainerError, atomic_write, read_tensor, write_tensor
from .tiling import TilingError, extract_patches, stitch

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_VALIDATION = 2
ERROR_PREFIX = "uqdenoise-error"

VALIDATION_ERRORS = (ValueError, ShapeError, GraphError, TilingError,
                     ContainerError, LatentError, CalibrationSetTooSmall,
                     FileNotFoundError, KeyError, TypeError)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config plumbing


DEFAULTS = {
    "synth": {
        "seed": 0,
        "synth": {"size": [64, 64], "order": 4, "tau": 0.0, "kappa": 2.0,
                  "sigma": 1.0, "n_images": 8},
    },
    "netgen": {
        "seed": 0,
        "count": 10,
        "graph": {"depth": 15, "alpha": 0.0, "gamma": 0.0, "p_il": 0.2,
                  "p_lo": 0.2, "p_io": True, "dilation_choices": [1, 2, 3, 4, 5],
                  "channels": 4, "degree_clamp": None},
        "in_channels": 1,
        "latent_dim": 8,
    },
    "train": {
        "seed": 0,
        "data_dir": "",
        "members": 2,
        "workers": 1,
        "graph": {"depth": 15, "alpha": 0.0, "gamma": 0.0, "p_il": 0.2,
                  "p_lo": 0.2, "p_io": True, "dilation_choices": [1, 2, 3, 4, 5],
                  "channels": 4, "degree_clamp": None},
        "model": {"latent_dim": 8, "head_width": None, "clamp_range": None},
        "train": {"epochs": 50, "learning_rate": 1e-3, "batch_size": 1,
                  "q_lo": 0.05, "q_hi": 0.95},
    },
    "calibrate": {
        "seed": 0,
        "data_dir": "",
        "ensemble_dir": "",
        "alpha": 0.1,
    },
    "infer": {
        "seed": 0,
        "ensemble_dir": "",
        "input": "",
        "calibration": None,
        "patch": None,            # spatial patch extents; null = whole image
        "overlap": None,
        "threshold": None,
        "threshold_channel": 0,
    },
    "sweep": {
        "seed": 0,
        "data_dir": "",
        "mode": "ensemble_size",
        "alpha": 0.1,
        "graph": {"depth": 25, "alpha": 0.0, "gamma": 0.75, "p_il": 0.2,
                  "p_lo": 0.2, "p_io": True, "dilation_choices": [1, 2, 3, 4, 5],
                  "channels": 4, "degree_clamp": None},
        "model": {"latent_dim": 8, "head_width": None, "clamp_range": None},
        "train": {"epochs": 50, "learning_rate": 1e-3, "batch_size": 1,
                  "q_lo": 0.05, "q_hi": 0.95},
        "ensemble_size": {"pool": 25, "sizes": [1, 2, 5, 10, 25], "repeats": 5},
        "hyperparams": {"alphas": [0.0, 1.5], "gammas": [0.0, 1.5],
                        "depths": [5, 15, 25], "per_cell": 5},
    },
    "tokenize": {
        "seed": 0,
        "ensemble_dir": "",
        "input": "",
        "rank": 3,
        "k": 6,
        "oversample": 10,
        "power_iters": 2,
        "chunk_cols": 65536,
        "intensity_channel": 0,
        "bins": 50,
    },
    "report": {
        "input": "",
        "kind": "auto",           # auto | ensemble_size | hyperparams
    },
}


def deep_update(base, update):
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            deep_update(base[key], value)
        else:
            base[key] = value
    return base


def set_dotted(cfg, assignment):
    """Apply one 'a.b.c=value' override; values parse as JSON, else string."""
    if "=" not in assignment:
        raise ConfigError(f"override '{assignment}' is not of the form key=value")
    path, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    keys = path.split(".")
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override path '{path}' descends into a scalar")
    node[keys[-1]] = value


def resolve_config(command, config_path, overrides):
    cfg = copy.deepcopy(DEFAULTS[command])
    if config_path:
        try:
            with open(config_path) as f:
                loaded = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {config_path} is not valid JSON: {e}")
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {config_path} must hold a JSON object")
        deep_update(cfg, loaded)
    for assignment in overrides or []:
        set_dotted(cfg, assignment)
    return cfg


def write_snapshot(out_dir, command, cfg):
    os.makedirs(out_dir, exist_ok=True)
    doc = {"command": command, "config": cfg}
    atomic_write(os.path.join(out_dir, f"{command}_config.json"),
                 (json.dumps(doc, sort_keys=True, indent=2) + "\n").encode())


def _graph_hyperparams(section, seed):
    d = dict(section)
    d["dilation_choices"] = tuple(d.get("dilation_choices", (1, 2, 3, 4, 5)))
    clamp = d.get("degree_clamp")
    d["degree_clamp"] = tuple(clamp) if clamp else None
    d["seed"] = seed
    return GraphHyperparams(**d)


def _train_config(section, task_seed):
    return TrainConfig(epochs=section["epochs"],
                       learning_rate=section["learning_rate"],
                       batch_size=section["batch_size"],
                       q_lo=section["q_lo"], q_hi=section["q_hi"],
                       task_switch_seed=task_seed)


def _load_ensemble(ensemble_dir):
    path = os.path.join(ensemble_dir, "ensemble.json")
    if not os.path.exists(path):
        raise ConfigError(f"no ensemble manifest at {path}")
    with open(path) as f:
        manifest = ensembles.EnsembleManifest.from_json(f.read())
    models = [Model.load(os.path.join(ensemble_dir, p)) for p in manifest.model_paths]
    return manifest, models


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg, out_dir, overwrite):
    manifest_path = os.path.join(out_dir, "manifest.json")
    if os.path.exists(manifest_path) and not overwrite:
        raise ConfigError(f"dataset already exists at {out_dir}; use --overwrite")
    section = dict(cfg["synth"])
    section["size"] = tuple(section["size"])
    scfg = SynthConfig(seed=cfg["seed"], **section)
    dataset = make_dataset(scfg)
    save_dataset(dataset, scfg, out_dir)
    print(f"wrote {sum(len(v) for v in dataset.values())} image pairs to {out_dir}")


def cmd_netgen(cfg, out_dir, overwrite):
    rows = []
    for i in range(cfg["count"]):
        hp = _graph_hyperparams(cfg["graph"], substream_seed(cfg["seed"], "graph", i))
        spec = sample_graph(hp)
        spec_path = os.path.join(out_dir, f"spec_{i:03d}.json")
        if os.path.exists(spec_path) and not overwrite:
            raise ConfigError(f"{spec_path} exists; use --overwrite")
        atomic_write(spec_path, spec.to_json().encode())
        stats = graph_stats(spec, cfg["in_channels"], cfg["latent_dim"])
        rows.append({"index": i, "seed": hp.seed, "edges": len(spec.edges),
                     "parameter_count": stats.parameter_count,
                     "longest_path": stats.longest_path,
                     "avg_degree": stats.avg_degree})
    ensembles.write_csv(os.path.join(out_dir, "netgen_stats.csv"), rows,
                        ["index", "seed", "edges", "parameter_count",
                         "longest_path", "avg_degree"])
    print(f"wrote {cfg['count']} network specs to {out_dir}")


def _train_one_member(args):
    """Train a single member and save it; safe to call from a worker process."""
    (graph_section, model_section, train_section, gseed, wseed, tseed,
     pairs, in_channels, model_path) = args
    hp = _graph_hyperparams(graph_section, gseed)
    clamp = model_section.get("clamp_range")
    model = ensembles.materialize_member(
        hp, gseed, wseed, in_channels=in_channels,
        latent_dim=model_section["latent_dim"],
        head_width=model_section.get("head_width"),
        clamp_range=tuple(clamp) if clamp else None)
    tcfg = _train_config(train_section, tseed)
    history = train(model, pairs, tcfg)
    model.save(model_path)
    return history


def cmd_train(cfg, out_dir, overwrite):
    if not os.path.isdir(cfg["data_dir"]):
        raise ConfigError(f"dataset directory not found: {cfg['data_dir']}")
    dataset, _ = load_dataset(cfg["data_dir"])
    pairs = dataset["train"]
    in_channels = pairs[0][0].shape[0]
    n = cfg["members"]
    seed = cfg["seed"]

    hp = _graph_hyperparams(cfg["graph"], seed)
    clamp = cfg["model"].get("clamp_range")
    manifest = ensembles.EnsembleManifest(
        hyperparams=hp, member_seeds=[], in_channels=in_channels,
        out_channels=in_channels, latent_dim=cfg["model"]["latent_dim"],
        model_paths=[f"member_{i:02d}.model" for i in range(n)])

    jobs, pending = [], []
    for i in range(n):
        gseed = substream_seed(seed, "graph", i)
        wseed = substream_seed(seed, "weights", i)
        tseed = substream_seed(seed, "tasks", i)
        manifest.member_seeds.append((gseed, wseed))
        model_path = os.path.join(out_dir, manifest.model_paths[i])
        if os.path.exists(model_path) and not overwrite:
            continue  # resume: finished members stay untouched
        jobs.append((cfg["graph"], cfg["model"], cfg["train"], gseed, wseed,
                     tseed, pairs, in_channels, model_path))
        pending.append(i)

    histories = {}
    workers = cfg.get("workers", 1)
    if workers > 1 and jobs:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for i, hist in zip(pending, pool.map(_train_one_member, jobs)):
                histories[i] = hist
    else:
        for i, job in zip(pending, jobs):
            try:
                histories[i] = _train_one_member(job)
            except TrainingError as e:
                raise TrainingError(f"member {i}: {e}") from e

    loss_rows = [dict(member=i, **rec) for i in sorted(histories)
                 for rec in histories[i]]
    if loss_rows:
        ensembles.write_csv(os.path.join(out_dir, "loss_history.csv"), loss_rows,
                            ["member", "epoch", "batch", "task", "loss"])
    atomic_write(os.path.join(out_dir, "ensemble.json"), manifest.to_json().encode())
    print(f"trained {len(pending)} of {n} members into {out_dir} "
          f"({n - len(pending)} already present)")


def cmd_calibrate(cfg, out_dir, overwrite):
    manifest, models = _load_ensemble(cfg["ensemble_dir"])
    dataset, _ = load_dataset(cfg["data_dir"])
    calib_pairs = dataset["calibration"]
    alpha = cfg["alpha"]

    agg = [ensembles.aggregate([m.predict_quantiles(x) for m in models],
                               manifest.aggregation)
           for x, _ in calib_pairs]
    channels = agg[0].median.shape[0]
    per_channel = [[] for _ in range(channels)]
    for fld, (_, target) in zip(agg, calib_pairs):
        s = conformal.nonconformity_scores(fld, target)
        for c in range(channels):
            per_channel[c].append(s[c].ravel())
    records = [conformal.calibrate(np.concatenate(per_channel[c]), alpha)
               for c in range(channels)]
    for c, r in enumerate(records):
        if not math.isfinite(r.correction):
            need = math.ceil((1 - alpha) * (r.n + 1))
            raise ConfigError(
                f"calibration set too small for alpha={alpha} on channel {c}: "
                f"{r.n} scores give rank {need} > {r.n}; add calibration data "
                f"or raise alpha above {1 - r.n / (r.n + 1):.3g}")
    path = os.path.join(out_dir, "calibration.json")
    if os.path.exists(path) and not overwrite:
        raise ConfigError(f"{path} exists; use --overwrite")
    atomic_write(path, conformal.records_to_json(
        records, extra={"ensemble_dir": cfg["ensemble_dir"]}).encode())
    print(f"calibrated {channels} channel(s) at alpha={alpha}: "
          f"corrections {[round(r.correction, 6) for r in records]}")


def cmd_infer(cfg, out_dir, overwrite):
    manifest, models = _load_ensemble(cfg["ensemble_dir"])
    image = read_tensor(cfg["input"])
    records = None
    if cfg.get("calibration"):
        with open(cfg["calibration"]) as f:
            records = conformal.records_from_json(f.read())

    spatial = image.shape[1:]
    patch = cfg.get("patch")
    if patch is None or all(p >= s for p, s in zip(patch, spatial)):
        fields = [m.predict_quantiles(image) for m in models]
        field = ensembles.aggregate(fields, manifest.aggregation)
        grid = None
    else:
        overlap = cfg.get("overlap") or [p // 4 for p in patch]
        patches, grid = extract_patches(image, patch, overlap)
        parts = {"lower": [], "median": [], "upper": []}
        for p in patches:
            f = ensembles.aggregate([m.predict_quantiles(p) for m in models],
                                    manifest.aggregation)
            parts["lower"].append(f.lower)
            parts["median"].append(f.median)
            parts["upper"].append(f.upper)
        from .model import QuantileField
        field = QuantileField(
            stitch(np.stack(parts["lower"]), grid),
            stitch(np.stack(parts["median"]), grid),
            stitch(np.stack(parts["upper"]), grid),
            tuple(manifest.quantiles))
    if records is not None:
        field = conformal.apply_correction(field, records)

    for name in ("lower", "median", "upper"):
        path = os.path.join(out_dir, f"{name}.bt")
        if os.path.exists(path) and not overwrite:
            raise ConfigError(f"{path} exists; use --overwrite")
        write_tensor(path, getattr(field, name))
    if grid is not None:
        atomic_write(os.path.join(out_dir, "grid.json"), grid.to_json().encode())
    if cfg.get("threshold") is not None:
        mask = ensembles.exceedance_map(field, cfg["threshold"],
                                        cfg.get("threshold_channel", 0))
        write_tensor(os.path.join(out_dir, "exceedance.bt"),
                     mask.astype(np.int32))
    print(f"wrote quantile maps ({image.shape[0]} channel(s), "
          f"spatial {tuple(spatial)}) to {out_dir}")


def _predict_split_fields(model, dataset):
    return {split: [model.predict_quantiles(x) for x, _ in dataset[split]]
            for split in ("calibration", "test")}


def cmd_sweep(cfg, out_dir, overwrite):
    if not os.path.isdir(cfg["data_dir"]):
        raise ConfigError(f"dataset directory not found: {cfg['data_dir']}")
    dataset, _ = load_dataset(cfg["data_dir"])
    seed = cfg["seed"]
    mode = cfg["mode"]
    in_channels = dataset["train"][0][0].shape[0]
    model_kwargs = {
        "in_channels": in_channels,
        "latent_dim": cfg["model"]["latent_dim"],
        "head_width": cfg["model"].get("head_width"),
    }
    clamp = cfg["model"].get("clamp_range")
    if clamp:
        model_kwargs["clamp_range"] = tuple(clamp)

    if mode == "ensemble_size":
        pool_dir = os.path.join(out_dir, "pool")
        os.makedirs(pool_dir, exist_ok=True)
        params = cfg["ensemble_size"]
        pool_fields = []
        for i in range(params["pool"]):
            model_path = os.path.join(pool_dir, f"member_{i:02d}.model")
            if os.path.exists(model_path):
                model = Model.load(model_path)
            else:
                job = (cfg["graph"], cfg["model"], cfg["train"],
                       substream_seed(seed, "graph", i),
                       substream_seed(seed, "weights", i),
                       substream_seed(seed, "tasks", i),
                       dataset["train"], in_channels, model_path)
                _train_one_member(job)
                model = Model.load(model_path)
            pool_fields.append(_predict_split_fields(model, dataset))
        rows = ensembles.ensemble_size_sweep(
            pool_fields, dataset["calibration"], dataset["test"],
            params["sizes"], params["repeats"], alpha=cfg["alpha"],
            seed=substream_seed(seed, "subsets"))
        out_csv = os.path.join(out_dir, "ensemble_size_sweep.csv")
        ensembles.write_csv(out_csv, rows, ensembles.SIZE_SWEEP_COLUMNS)
    elif mode == "hyperparams":
        params = cfg["hyperparams"]
        cells_dir = os.path.join(out_dir, "cells")
        os.makedirs(cells_dir, exist_ok=True)
        base = _graph_hyperparams(cfg["graph"], 0)
        rows = ensembles.hyperparameter_sweep(
            params["alphas"], params["gammas"], params["depths"],
            params["per_cell"], dataset["train"], dataset["test"], base,
            _train_config(cfg["train"], 0), seed=seed,
            model_kwargs=model_kwargs, checkpoint_dir=cells_dir)
        out_csv = os.path.join(out_dir, "hyperparameter_sweep.csv")
        ensembles.write_csv(out_csv, rows, ensembles.HYPER_SWEEP_COLUMNS)
    else:
        raise ConfigError(f"unknown sweep mode '{mode}'")
    print(f"wrote {len(rows)} sweep rows to {out_csv}")


def cmd_tokenize(cfg, out_dir, overwrite):
    _, models = _load_ensemble(cfg["ensemble_dir"])
    image = read_tensor(cfg["input"])
    from .autodiff import no_grad
    with no_grad():
        maps = [m.encode(image).data for m in models]
    stack = latent.stack_latents(maps, chunk_cols=cfg["chunk_cols"])
    tokens = latent.tokenize(stack, cfg["rank"], cfg["k"],
                             seed=substream_seed(cfg["seed"], "tokenize"),
                             oversample=cfg["oversample"],
                             power_iters=cfg["power_iters"])
    path = os.path.join(out_dir, "token_map.bt")
    if os.path.exists(path) and not overwrite:
        raise ConfigError(f"{path} exists; use --overwrite")
    write_tensor(path, tokens.labels.astype(np.int32))
    atomic_write(os.path.join(out_dir, "token_map.json"),
                 latent.tokenmap_to_json(tokens, cfg["seed"], cfg["k"]).encode())
    hist = latent.token_histogram(tokens, image[cfg["intensity_channel"]],
                                  bins=cfg["bins"])
    rows = [{"token": h["token"], "mean": h["mean"], "count": h["count"],
             "bin_edges": " ".join(f"{e:.6g}" for e in h["bin_edges"]),
             "counts": " ".join(str(c) for c in h["counts"])} for h in hist]
    ensembles.write_csv(os.path.join(out_dir, "token_histograms.csv"), rows,
                        ["token", "mean", "count", "bin_edges", "counts"])
    print(f"wrote token map with k={cfg['k']} clusters to {out_dir}")


def cmd_report(cfg, out_dir, overwrite):
    import csv as csv_mod
    path = cfg["input"]
    if not os.path.exists(path):
        raise ConfigError(f"sweep CSV not found: {path}")
    with open(path, newline="") as f:
        rows = list(csv_mod.DictReader(f))
    if not rows:
        raise ConfigError(f"sweep CSV {path} is empty")
    kind = cfg["kind"]
    if kind == "auto":
        kind = "ensemble_size" if "size" in rows[0] else "hyperparams"

    if kind == "ensemble_size":
        by_size = {}
        for r in rows:
            by_size.setdefault(int(r["size"]), []).append(r)
        out_rows = []
        for size in sorted(by_size):
            group = by_size[size]
            row = {"size": size, "repeats": len(group)}
            for col in ("cc", "width_ratio", "coverage"):
                vals = np.array([float(r[col]) for r in group])
                row[f"{col}_median"] = float(np.median(vals))
                row[f"{col}_q25"] = float(np.quantile(vals, 0.25))
                row[f"{col}_q75"] = float(np.quantile(vals, 0.75))
            out_rows.append(row)
        columns = ["size", "repeats"] + [f"{c}_{s}" for c in
                                         ("cc", "width_ratio", "coverage")
                                         for s in ("median", "q25", "q75")]
        out_csv = os.path.join(out_dir, "ensemble_size_summary.csv")
    else:
        by_cell = {}
        for r in rows:
            key = (float(r["alpha"]), float(r["gamma"]), int(r["depth"]))
            by_cell.setdefault(key, []).append(r)
        out_rows = []
        for key in sorted(by_cell):
            group = by_cell[key]
            ccs = np.array([float(r["cc"]) for r in group])
            params = np.array([float(r["parameter_count"]) for r in group])
            out_rows.append({
                "alpha": key[0], "gamma": key[1], "depth": key[2],
                "n": len(group),
                "cc_median": float(np.median(ccs)),
                "cc_min": float(ccs.min()), "cc_max": float(ccs.max()),
                "parameter_count_median": float(np.median(params)),
            })
        columns = ["alpha", "gamma", "depth", "n", "cc_median", "cc_min",
                   "cc_max", "parameter_count_median"]
        out_csv = os.path.join(out_dir, "hyperparameter_summary.csv")
    if os.path.exists(out_csv) and not overwrite:
        raise ConfigError(f"{out_csv} exists; use --overwrite")
    ensembles.write_csv(out_csv, out_rows, columns)
    print(f"wrote {len(out_rows)} summary rows to {out_csv}")


# ---------------------------------------------------------------------------
# entry point


COMMANDS = {
    "synth": (cmd_synth, "generate the synthetic benchmark dataset"),
    "netgen": (cmd_netgen, "sample random sparse network specs"),
    "train": (cmd_train, "train an ensemble of quantile models"),
    "calibrate": (cmd_calibrate, "fit conformal corrections on held-out data"),
    "infer": (cmd_infer, "run tiled ensemble inference on one image"),
    "sweep": (cmd_sweep, "run the ensemble-size or hyperparameter sweep"),
    "tokenize": (cmd_tokenize, "cluster ensemble latents into a token map"),
    "report": (cmd_report, "summarize a sweep CSV"),
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="uqdenoise",
        description="Ensemble denoising with calibrated quantile bounds.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", dest="overrides",
                       metavar="KEY=VALUE",
                       help="dotted-path config override, e.g. train.epochs=5")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--overwrite", action="store_true",
                       help="replace existing outputs")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    func = COMMANDS[args.command][0]
    try:
        cfg = resolve_config(args.command, args.config, args.overrides)
        write_snapshot(args.out, args.command, cfg)
        func(cfg, args.out, args.overwrite)
    except VALIDATION_ERRORS as e:
        print(f"{ERROR_PREFIX} kind=validation command={args.command} "
              f"msg={e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:
        print(f"{ERROR_PREFIX} kind=runtime command={args.command} "
              f"msg={e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
