"""Materialization, inference and training of randomly wired encoder networks.

A ``Model`` executes its DAG in topological order: every edge applies a
(dilated) convolution followed by ReLU, every node concatenates its incoming
feature maps along the channel axis, and the sink's concatenation is mapped
by a 1x1 projection to a d-dimensional latent map. Three per-pixel MLP heads
turn the latent map into median, lower and upper quantile predictions, the
outer two as softplus-positive offsets around the median so the quantiles
can never cross.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .graphs import INPUT, OUTPUT, NetworkSpec, node_channel_counts, topological_order
from .optim import AdamState
from .seeding import substream
from .tensorio import atomic_write, tensor_from_bytes, tensor_to_bytes

MODEL_MAGIC = b"BNMODEL1"

TASKS = ("lower", "median", "upper")


@dataclass
class QuantileField:
    """Per-pixel (lower, median, upper) maps, each (C, *spatial)."""

    lower: np.ndarray
    median: np.ndarray
    upper: np.ndarray
    levels: tuple = (0.05, 0.5, 0.95)

    @property
    def shape(self):
        return self.median.shape

    def width(self):
        return self.upper - self.lower

    def check_ordering(self):
        return bool(np.all(self.lower <= self.median) and np.all(self.median <= self.upper))


@dataclass
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 1e-3
    batch_size: int = 1
    q_lo: float = 0.05
    q_hi: float = 0.95
    task_switch_seed: int = 0
    clamp_range: tuple | None = None
    shuffle: bool = True

    def validate(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 < self.q_lo < 0.5 < self.q_hi < 1.0:
            raise ValueError(f"need 0 < q_lo < 0.5 < q_hi < 1, got ({self.q_lo}, {self.q_hi})")


class Model:
    """Weights for one encoder plus its three quantile projection heads."""

    def __init__(self, spec: NetworkSpec, in_channels, latent_dim=8,
                 out_channels=None, head_width=None, spatial_rank=2,
                 clamp_range=None, quantiles=(0.05, 0.5, 0.95), weight_seed=0):
        self.spec = spec
        self.in_channels = in_channels
        self.out_channels = in_channels if out_channels is None else out_channels
        self.latent_dim = latent_dim
        self.head_width = latent_dim if head_width is None else head_width
        self.spatial_rank = spatial_rank
        self.clamp_range = tuple(clamp_range) if clamp_range is not None else None
        self.quantiles = tuple(quantiles)
        self.weight_seed = weight_seed
        self._init_weights(substream(weight_seed, "weights"))

    def _init_weights(self, rng):
        """Kaiming fan-in scaled normal weights, zero biases."""
        counts = node_channel_counts(self.spec, self.in_channels)
        self.node_channels = counts
        self.edge_weights = []
        for e in self.spec.edges:
            cin = counts[e.src]
            taps = e.kernel ** self.spatial_rank
            shape = (e.channels, cin) + (e.kernel,) * self.spatial_rank
            std = np.sqrt(2.0 / (taps * cin))
            k = Tensor(rng.normal(0.0, std, shape).astype(np.float32), requires_grad=True,
                       name=f"edge[{e.src}->{e.dst}].kernel")
            b = Tensor(np.zeros(e.channels, np.float32), requires_grad=True,
                       name=f"edge[{e.src}->{e.dst}].bias")
            self.edge_weights.append((k, b))
        c_sink = counts[OUTPUT]
        self.latent_proj = (
            Tensor(rng.normal(0.0, np.sqrt(2.0 / c_sink),
                              (self.latent_dim, c_sink)).astype(np.float32),
                   requires_grad=True, name="latent_proj.weight"),
            Tensor(np.zeros(self.latent_dim, np.float32), requires_grad=True,
                   name="latent_proj.bias"),
        )
        self.heads = {}
        dims = [self.latent_dim, self.head_width, self.head_width, self.out_channels]
        for task in ("median", "lower", "upper"):
            layers = []
            for i, (cin, cout) in enumerate(zip(dims, dims[1:])):
                w = Tensor(rng.normal(0.0, np.sqrt(2.0 / cin), (cout, cin)).astype(np.float32),
                           requires_grad=True, name=f"head_{task}.{i}.weight")
                b = Tensor(np.zeros(cout, np.float32), requires_grad=True,
                           name=f"head_{task}.{i}.bias")
                layers.append((w, b))
            self.heads[task] = layers

    # -- parameter groups ---------------------------------------------------

    def encoder_params(self):
        out = []
        for (k, b), e in zip(self.edge_weights, self.spec.edges):
            out.append((k.name, k))
            out.append((b.name, b))
        w, b = self.latent_proj
        out.extend([(w.name, w), (b.name, b)])
        return out

    def head_params(self, task):
        out = []
        for w, b in self.heads[task]:
            out.extend([(w.name, w), (b.name, b)])
        return out

    def all_params(self):
        out = self.encoder_params()
        for task in ("median", "lower", "upper"):
            out.extend(self.head_params(task))
        return out

    # -- forward ------------------------------------------------------------

    def encode(self, image, track_cache=False):
        """Run the DAG on (C_in, *spatial) input, yielding a (d, *spatial) latent map.

        Node feature maps are cached only while some not-yet-executed node
        still consumes them. Returns the latent Tensor; with
        ``track_cache=True`` also returns {'peak_channels', 'total_channels'}.
        """
        x = image if isinstance(image, Tensor) else Tensor(np.asarray(image))
        if x.data.ndim != self.spatial_rank + 1:
            raise ShapeError(
                f"encode: expected rank {self.spatial_rank + 1} input, got {x.data.ndim}")
        if x.shape[0] != self.in_channels:
            raise ShapeError(
                f"encode: input has {x.shape[0]} channels, model expects {self.in_channels}",
                axis=0)
        order = self.spec.topo_order or topological_order(self.spec)
        remaining = {n: len(self.spec.out_edges(n)) for n in order}
        weights = dict(zip(self.spec.edges, self.edge_weights))
        cache = {INPUT: x}
        peak = self.node_channels[INPUT]

        for n in order:
            if n == INPUT:
                continue
            feats = []
            for e in self.spec.in_edges(n):
                k, b = weights[e]
                y = ad.conv(cache[e.src], k, b, dilation=e.dilation,
                            spatial_rank=self.spatial_rank)
                feats.append(ad.relu(y))
                remaining[e.src] -= 1
                if remaining[e.src] == 0:
                    del cache[e.src]
            cache[n] = feats[0] if len(feats) == 1 else ad.concat(feats, axis=0)
            live = sum(self.node_channels[m] for m in cache)
            peak = max(peak, live)

        w, b = self.latent_proj
        latent = ad.affine(cache[OUTPUT], w, b)
        if track_cache:
            total = sum(self.node_channels[n] for n in order)
            return latent, {"peak_channels": peak, "total_channels": total}
        return latent

    def _head_forward(self, task, latent):
        h = latent
        last = len(self.heads[task]) - 1
        for i, (w, b) in enumerate(self.heads[task]):
            h = ad.affine(h, w, b)
            if i != last:
                h = ad.relu(h)
        return h

    def _quantile_tensors(self, latent, detach_median=False):
        median = self._head_forward("median", latent)
        med_for_offsets = median.detach() if detach_median else median
        lower = ad.sub(med_for_offsets, ad.softplus(self._head_forward("lower", latent)))
        upper = ad.add(med_for_offsets, ad.softplus(self._head_forward("upper", latent)))
        if self.clamp_range is not None:
            lo, hi = self.clamp_range
            median = ad.clamp(median, lo, hi)
            lower = ad.clamp(lower, lo, hi)
            upper = ad.clamp(upper, lo, hi)
        return lower, median, upper

    def predict_quantiles(self, image) -> QuantileField:
        with ad.no_grad():
            latent = self.encode(image)
            lower, median, upper = self._quantile_tensors(latent)
        return QuantileField(lower.data, median.data, upper.data, self.quantiles)

    # -- persistence --------------------------------------------------------

    def save(self, path):
        header = {
            "spec": json.loads(self.spec.to_json()),
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "latent_dim": self.latent_dim,
            "head_width": self.head_width,
            "spatial_rank": self.spatial_rank,
            "clamp_range": list(self.clamp_range) if self.clamp_range else None,
            "quantiles": list(self.quantiles),
            "weight_seed": self.weight_seed,
        }
        hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        blob = [MODEL_MAGIC, struct.pack("<Q", len(hjson)), hjson]
        for name, p in self.all_params():
            blob.append(tensor_to_bytes(np.ascontiguousarray(p.data)))
        atomic_write(path, b"".join(blob))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            data = f.read()
        if data[:8] != MODEL_MAGIC:
            raise IOError("bad magic: not a model file")
        (hlen,) = struct.unpack_from("<Q", data, 8)
        if len(data) < 16 + hlen:
            raise IOError("truncated model file header")
        header = json.loads(data[16:16 + hlen].decode())
        spec = NetworkSpec.from_json(json.dumps(header["spec"]))
        model = cls(
            spec, header["in_channels"], header["latent_dim"],
            out_channels=header["out_channels"], head_width=header["head_width"],
            spatial_rank=header["spatial_rank"],
            clamp_range=header["clamp_range"], quantiles=tuple(header["quantiles"]),
            weight_seed=header["weight_seed"],
        )
        offset = 16 + hlen
        for name, p in model.all_params():
            try:
                sub = tensor_from_bytes_at(data, offset)
            except Exception as exc:
                raise IOError(f"truncated model file at parameter '{name}': {exc}") from exc
            arr, offset = sub
            if arr.shape != p.data.shape:
                raise IOError(f"parameter '{name}' shape {arr.shape} != {p.data.shape}")
            p.data = arr
        return model


def tensor_from_bytes_at(blob, offset):
    """Parse one tensor container at ``offset``; returns (array, next_offset)."""
    tag, rank = struct.unpack_from("<BB", blob, offset + 8)
    shape = struct.unpack_from(f"<{rank}Q", blob, offset + 10)
    itemsize = {0: 4, 1: 8, 2: 4}[tag]
    end = offset + 10 + 8 * rank + int(np.prod(shape)) * itemsize
    return tensor_from_bytes(blob[offset:end]), end


class TrainingError(RuntimeError):
    pass


def train(model: Model, pairs, cfg: TrainConfig):
    """Quantile-regression training with batch-wise stochastic task switching.

    ``pairs`` is a sequence of (noisy, target) arrays. Per batch one task is
    drawn uniformly from {lower, median, upper}; only that task's head (plus
    the shared encoder) receives gradients and an optimizer step. Fully
    deterministic given the config seeds and data order.

    Returns a loss history: list of dicts with epoch/batch/task/loss.
    """
    cfg.validate()
    model.clamp_range = cfg.clamp_range if cfg.clamp_range else model.clamp_range
    task_rng = substream(cfg.task_switch_seed, "tasks")
    shuffle_rng = substream(cfg.task_switch_seed, "shuffle")
    q_for = {"lower": cfg.q_lo, "median": 0.5, "upper": cfg.q_hi}

    opt_encoder = AdamState(model.encoder_params(), lr=cfg.learning_rate)
    opt_heads = {t: AdamState(model.head_params(t), lr=cfg.learning_rate)
                 for t in TASKS}

    history = []
    n = len(pairs)
    if n == 0:
        raise ValueError("dataset must be nonempty")
    for epoch in range(cfg.epochs):
        order = np.arange(n)
        if cfg.shuffle:
            shuffle_rng.shuffle(order)
        for bstart in range(0, n, cfg.batch_size):
            batch = order[bstart:bstart + cfg.batch_size]
            task = TASKS[int(task_rng.integers(3))]
            loss = None
            for idx in batch:
                noisy, target = pairs[idx]
                latent = model.encode(np.asarray(noisy, np.float32))
                lower, median, upper = model._quantile_tensors(
                    latent, detach_median=task != "median")
                pred = {"lower": lower, "median": median, "upper": upper}[task]
                contrib = ad.pinball_loss(pred, np.asarray(target, np.float32), q_for[task])
                loss = contrib if loss is None else ad.add(loss, contrib)
            if len(batch) > 1:
                loss = ad.scale(loss, 1.0 / len(batch))
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {bstart // cfg.batch_size}")
            loss.backward()
            opt_encoder.step()
            opt_heads[task].step()
            opt_encoder.zero_grad()
            for t in TASKS:
                opt_heads[t].zero_grad()
            history.append({"epoch": epoch, "batch": bstart // cfg.batch_size,
                            "task": task, "loss": value})
    return history
