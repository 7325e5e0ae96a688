"""Ensembles of independently wired models: construction, aggregation,
evaluation metrics, and the two desk-scale sweep experiments.

Aggregation is the elementwise median across members for each of the three
quantile maps, which preserves the non-crossing property. Conformal
calibration is applied to the aggregated field (calibration after
aggregation).
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import conformal
from .autodiff import ShapeError
from .graphs import GraphHyperparams, bin_by_quantiles, graph_stats, sample_graph
from .model import Model, QuantileField, TrainConfig, train
from .seeding import substream, substream_seed


@dataclass
class EnsembleManifest:
    hyperparams: GraphHyperparams
    member_seeds: list              # (graph_seed, weight_seed) per member
    in_channels: int = 1
    out_channels: int = 1
    latent_dim: int = 8
    quantiles: tuple = (0.05, 0.5, 0.95)
    aggregation: str = "median"
    model_paths: list = field(default_factory=list)
    calibration_ref: str | None = None

    def to_json(self):
        return json.dumps({
            "hyperparams": self.hyperparams.to_dict(),
            "member_seeds": [list(s) for s in self.member_seeds],
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "latent_dim": self.latent_dim,
            "quantiles": list(self.quantiles),
            "aggregation": self.aggregation,
            "model_paths": self.model_paths,
            "calibration_ref": self.calibration_ref,
        }, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(
            hyperparams=GraphHyperparams.from_dict(d["hyperparams"]),
            member_seeds=[tuple(s) for s in d["member_seeds"]],
            in_channels=d["in_channels"], out_channels=d["out_channels"],
            latent_dim=d["latent_dim"], quantiles=tuple(d["quantiles"]),
            aggregation=d["aggregation"], model_paths=d.get("model_paths", []),
            calibration_ref=d.get("calibration_ref"),
        )


def build_ensemble(n, h: GraphHyperparams, master_seed, **model_kwargs):
    """Sample and materialize ``n`` independent members; returns (manifest, models)."""
    if n < 1:
        raise ValueError("ensemble size must be >= 1")
    manifest = EnsembleManifest(
        hyperparams=h,
        member_seeds=[],
        in_channels=model_kwargs.get("in_channels", 1),
        out_channels=model_kwargs.get("out_channels")
        or model_kwargs.get("in_channels", 1),
        latent_dim=model_kwargs.get("latent_dim", 8),
        quantiles=tuple(model_kwargs.get("quantiles", (0.05, 0.5, 0.95))),
    )
    models = []
    for i in range(n):
        gseed = substream_seed(master_seed, "graph", i)
        wseed = substream_seed(master_seed, "weights", i)
        manifest.member_seeds.append((gseed, wseed))
        models.append(materialize_member(h, gseed, wseed, **model_kwargs))
    return manifest, models


def materialize_member(h: GraphHyperparams, graph_seed, weight_seed,
                       in_channels=1, latent_dim=8, out_channels=None,
                       head_width=None, spatial_rank=2, clamp_range=None,
                       quantiles=(0.05, 0.5, 0.95)):
    hp = GraphHyperparams(**{**h.to_dict(), "seed": graph_seed})
    hp.dilation_choices = tuple(hp.dilation_choices)
    spec = sample_graph(hp)
    return Model(spec, in_channels, latent_dim, out_channels=out_channels,
                 head_width=head_width, spatial_rank=spatial_rank,
                 clamp_range=clamp_range, quantiles=quantiles,
                 weight_seed=weight_seed)


def aggregate(fields, rule="median") -> QuantileField:
    """Combine member QuantileFields elementwise; default rule is the median."""
    if not fields:
        raise ValueError("no fields to aggregate")
    shape = fields[0].median.shape
    levels = fields[0].levels
    for f in fields[1:]:
        if f.median.shape != shape:
            raise ShapeError(f"aggregate: mixed field shapes {f.median.shape} vs {shape}")
    if rule == "median":
        combine = lambda stack: np.median(stack, axis=0)
    elif rule == "mean":
        combine = lambda stack: np.mean(stack, axis=0)
    else:
        raise ValueError(f"unknown aggregation rule '{rule}'")
    return QuantileField(
        combine(np.stack([f.lower for f in fields])),
        combine(np.stack([f.median for f in fields])),
        combine(np.stack([f.upper for f in fields])),
        levels,
    )


def correlation(pred, truth) -> float:
    """Pearson correlation over all elements."""
    pred = np.asarray(pred, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if pred.shape != truth.shape:
        raise ShapeError("correlation: shapes differ")
    sp, st = pred.std(), truth.std()
    if sp == 0 or st == 0:
        raise ValueError("correlation undefined for zero-variance input")
    return float(np.corrcoef(pred, truth)[0, 1])


def exceedance_map(field: QuantileField, threshold, channel=0):
    """True where the (calibrated) lower bound meets or exceeds the threshold."""
    if not 0 <= channel < field.lower.shape[0]:
        raise IndexError(f"channel {channel} out of range")
    return field.lower[channel] >= threshold


# ---------------------------------------------------------------------------
# evaluation over datasets


def predict_fields(model, images):
    return [model.predict_quantiles(img) for img in images]


def ensemble_field(member_fields, rule="median"):
    """member_fields: per-member list of QuantileFields for one image."""
    return aggregate(member_fields, rule)


def evaluate_ensemble(per_model_fields, calib_pairs, test_pairs, alpha=0.1,
                      rule="median", clamp_range=None):
    """Aggregate member predictions, conformalize on the calibration split,
    and report CC / width ratio / coverage on the test split.

    ``per_model_fields`` maps each member to a dict with 'calibration' and
    'test' lists of QuantileFields (one per image, same order as the pairs).
    """
    n_calib = len(calib_pairs)
    agg_calib = [aggregate([m["calibration"][i] for m in per_model_fields], rule)
                 for i in range(n_calib)]
    agg_test = [aggregate([m["test"][i] for m in per_model_fields], rule)
                for i in range(len(test_pairs))]

    channels = agg_calib[0].median.shape[0]
    scores = [[] for _ in range(channels)]
    for fld, (_, target) in zip(agg_calib, calib_pairs):
        s = conformal.nonconformity_scores(fld, target)
        for c in range(channels):
            scores[c].append(s[c].ravel())
    records = [conformal.calibrate(np.concatenate(scores[c]), alpha)
               for c in range(channels)]

    corrected = [conformal.apply_correction(f, records, clamp_range) for f in agg_test]
    truths = np.concatenate([np.asarray(t, float).ravel() for _, t in test_pairs])
    preds = np.concatenate([f.median.ravel() for f in corrected])
    cov = float(np.mean([(conformal.coverage(f, t)) for f, (_, t) in
                         zip(corrected, test_pairs)]))
    mean_width = float(np.mean([f.width().mean() for f in corrected]))
    spread = float(np.quantile(truths, 0.95) - np.quantile(truths, 0.05))
    return {
        "cc": correlation(preds, truths),
        "coverage": cov,
        "width_ratio": spread / mean_width,
        "corrections": [r.correction for r in records],
        "fields": corrected,
    }


# ---------------------------------------------------------------------------
# sweeps


SIZE_SWEEP_COLUMNS = ["size", "repeat", "member_indices", "cc", "width_ratio", "coverage"]


def ensemble_size_sweep(pool_fields, calib_pairs, test_pairs, sizes, repeats,
                        alpha=0.1, seed=0, rule="median"):
    """Subsample a pre-trained pool at each ensemble size and measure metrics.

    ``pool_fields`` is the per-member prediction cache as used by
    ``evaluate_ensemble``. Subsets are drawn without replacement per repeat.
    """
    pool = len(pool_fields)
    if max(sizes) > pool:
        raise ValueError(f"pool of {pool} members cannot supply size {max(sizes)}")
    rows = []
    for size in sizes:
        for rep in range(repeats):
            rng = substream(seed, "subset", size, rep)
            idx = sorted(rng.choice(pool, size=size, replace=False).tolist())
            res = evaluate_ensemble([pool_fields[i] for i in idx],
                                    calib_pairs, test_pairs, alpha, rule)
            rows.append({
                "size": size, "repeat": rep,
                "member_indices": " ".join(map(str, idx)),
                "cc": res["cc"], "width_ratio": res["width_ratio"],
                "coverage": res["coverage"],
            })
    return rows


HYPER_SWEEP_COLUMNS = ["alpha", "gamma", "depth", "net_index", "graph_seed",
                       "weight_seed", "parameter_count", "longest_path",
                       "avg_degree", "cc", "cc_bin"]


def hyperparameter_sweep(alphas, gammas, depths, per_cell, train_pairs,
                         test_pairs, base_hyperparams, train_cfg: TrainConfig,
                         seed=0, model_kwargs=None, checkpoint_dir=None,
                         progress=None):
    """Train ``per_cell`` independently wired models per (alpha, gamma, depth)
    cell, recording emergent graph statistics and the final test CC.

    With ``checkpoint_dir`` set, each finished cell entry is persisted as a
    JSON file and skipped on resume.
    """
    model_kwargs = model_kwargs or {}
    rows = []
    for a in alphas:
        for g in gammas:
            for depth in depths:
                for i in range(per_cell):
                    tag = f"a{a}_g{g}_d{depth}_n{i}"
                    ck = os.path.join(checkpoint_dir, tag + ".json") if checkpoint_dir else None
                    if ck and os.path.exists(ck):
                        with open(ck) as f:
                            rows.append(json.load(f))
                        continue
                    hp = GraphHyperparams(**{**base_hyperparams.to_dict(),
                                             "alpha": a, "gamma": g, "depth": depth})
                    hp.dilation_choices = tuple(hp.dilation_choices)
                    gseed = substream_seed(seed, "graph", tag)
                    wseed = substream_seed(seed, "weights", tag)
                    model = materialize_member(hp, gseed, wseed, **model_kwargs)
                    cfg = TrainConfig(**{**train_cfg.__dict__,
                                         "task_switch_seed": substream_seed(seed, "tasks", tag)})
                    train(model, train_pairs, cfg)
                    preds = np.concatenate(
                        [model.predict_quantiles(x).median.ravel() for x, _ in test_pairs])
                    truths = np.concatenate(
                        [np.asarray(t, float).ravel() for _, t in test_pairs])
                    stats = graph_stats(
                        model.spec, model.in_channels, model.latent_dim,
                        out_channels=model.out_channels,
                        spatial_rank=model.spatial_rank,
                        head_width=model.head_width)
                    row = {
                        "alpha": a, "gamma": g, "depth": depth, "net_index": i,
                        "graph_seed": gseed, "weight_seed": wseed,
                        "parameter_count": stats.parameter_count,
                        "longest_path": stats.longest_path,
                        "avg_degree": stats.avg_degree,
                        "cc": correlation(preds, truths),
                    }
                    rows.append(row)
                    if ck:
                        tmp = ck + ".tmp"
                        with open(tmp, "w") as f:
                            json.dump(row, f)
                        os.replace(tmp, ck)
                    if progress:
                        progress(row)
    ccs = [r["cc"] for r in rows]
    for r, label in zip(rows, bin_by_quantiles(ccs)):
        r["cc_bin"] = label
    return rows


def write_csv(path, rows, columns):
    tmp = str(path) + ".tmp"
    with open(tmp, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    os.replace(tmp, path)
