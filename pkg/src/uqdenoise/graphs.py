"""Random single-source/single-sink DAG generation and graph statistics.

Graphs are built over nodes {I, 1..D, O}. Intermediate out-degrees follow a
truncated exponential law with sparsity parameter gamma; edge targets are
biased toward short skips by alpha. Edges touching the input or output node
are 1x1 convolutions; intermediate edges are 3x3 with a randomly drawn
dilation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

INPUT = "I"
OUTPUT = "O"

QUANTILE_EDGES = [0.0, 0.10, 0.30, 0.70, 0.90, 1.0]
QUANTILE_LABELS = ["low", "mid-low", "mid", "mid-high", "high"]


class GraphError(ValueError):
    pass


@dataclass
class GraphHyperparams:
    """Knobs of the stochastic graph generator.

    ``channels`` may be a single int (fixed per-edge output channels) or a
    list to sample from per edge. ``degree_clamp`` restricts sampled
    out-degrees to [a, min(b, D-k)] near the sink.
    """

    depth: int = 15
    alpha: float = 0.0
    gamma: float = 0.0
    p_il: float = 0.2
    p_lo: float = 0.2
    p_io: bool = True
    dilation_choices: tuple = (1, 2, 3, 4, 5)
    channels: object = 4
    degree_clamp: tuple | None = None
    seed: int = 0

    def validate(self):
        if self.depth < 1:
            raise GraphError(f"depth must be >= 1, got {self.depth}")
        for name in ("p_il", "p_lo"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise GraphError(f"{name} must lie in [0,1], got {p}")
        if self.alpha < 0 or self.gamma < 0:
            raise GraphError("alpha and gamma must be >= 0")
        if not self.dilation_choices or any(d < 1 for d in self.dilation_choices):
            raise GraphError("dilation_choices must be nonempty positive ints")
        if self.degree_clamp is not None:
            a, b = self.degree_clamp
            if not 1 <= a <= b:
                raise GraphError(f"bad degree_clamp {self.degree_clamp}")

    def to_dict(self):
        return {
            "depth": self.depth, "alpha": self.alpha, "gamma": self.gamma,
            "p_il": self.p_il, "p_lo": self.p_lo, "p_io": self.p_io,
            "dilation_choices": list(self.dilation_choices),
            "channels": self.channels if isinstance(self.channels, int) else list(self.channels),
            "degree_clamp": list(self.degree_clamp) if self.degree_clamp else None,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["dilation_choices"] = tuple(d.get("dilation_choices", (1, 2, 3, 4, 5)))
        if d.get("degree_clamp"):
            d["degree_clamp"] = tuple(d["degree_clamp"])
        return cls(**d)


@dataclass(frozen=True)
class Edge:
    src: object
    dst: object
    dilation: int
    kernel: int
    channels: int


@dataclass
class NetworkSpec:
    """A materializable SS-DAG: nodes, typed edges, and execution order."""

    hyperparams: GraphHyperparams
    edges: list
    topo_order: list = field(default_factory=list)

    @property
    def depth(self):
        return self.hyperparams.depth

    @property
    def nodes(self):
        return [INPUT] + list(range(1, self.depth + 1)) + [OUTPUT]

    def in_edges(self, node):
        return [e for e in self.edges if e.dst == node]

    def out_edges(self, node):
        return [e for e in self.edges if e.src == node]

    def validate(self):
        order = self.topo_order or topological_order(self)
        index = {n: i for i, n in enumerate(order)}
        if order[0] != INPUT or order[-1] != OUTPUT:
            raise GraphError("topo order must start at I and end at O")
        for e in self.edges:
            if index[e.src] >= index[e.dst]:
                raise GraphError(f"edge {e.src}->{e.dst} violates topological order")
            touches_io = e.src == INPUT or e.dst == OUTPUT
            if touches_io and (e.kernel != 1 or e.dilation != 1):
                raise GraphError(f"edge {e.src}->{e.dst} must be 1x1 with dilation 1")
            if not touches_io and e.kernel != 3:
                raise GraphError(f"intermediate edge {e.src}->{e.dst} must have kernel 3")
        if self.in_edges(INPUT):
            raise GraphError("input node has incoming edges")
        if self.out_edges(OUTPUT):
            raise GraphError("output node has outgoing edges")
        for k in range(1, self.depth + 1):
            if not self.in_edges(k):
                raise GraphError(f"node {k} has no incoming edges")
            if not self.out_edges(k):
                raise GraphError(f"node {k} has no outgoing edges")

    def to_json(self):
        doc = {
            "hyperparams": self.hyperparams.to_dict(),
            "nodes": [str(n) for n in self.nodes],
            "edges": [
                {"src": str(e.src), "dst": str(e.dst), "dilation": e.dilation,
                 "kernel": e.kernel, "channels": e.channels}
                for e in self.edges
            ],
            "topo_order": [str(n) for n in (self.topo_order or topological_order(self))],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)

        def node(s):
            return s if s in (INPUT, OUTPUT) else int(s)

        h = GraphHyperparams.from_dict(doc["hyperparams"])
        edges = [
            Edge(node(e["src"]), node(e["dst"]), e["dilation"], e["kernel"], e["channels"])
            for e in doc["edges"]
        ]
        return cls(h, edges, [node(s) for s in doc["topo_order"]])


@dataclass
class GraphStats:
    parameter_count: int
    longest_path: int
    avg_degree: float


def _degree_distribution(span, gamma, clamp):
    """P(d) on {lo..hi} proportional to exp(-gamma*d), truncated by the clamp."""
    lo, hi = 1, span
    if clamp is not None:
        a, b = clamp
        lo, hi = min(a, span), min(b, span)
    degrees = np.arange(lo, hi + 1)
    w = np.exp(-gamma * degrees.astype(float))
    return degrees, w / w.sum()


def sample_graph(h: GraphHyperparams) -> NetworkSpec:
    """Sample an SS-DAG per the six-step procedure; deterministic given seed."""
    h.validate()
    rng = np.random.default_rng(h.seed)
    d = h.depth
    raw_edges = set()

    # step 1: intermediate-to-intermediate edges
    for k in range(1, d):
        span = d - k
        degrees, p = _degree_distribution(span, h.gamma, h.degree_clamp)
        dk = int(rng.choice(degrees, p=p))
        targets = np.arange(k + 1, d + 1)
        w = np.exp(-h.alpha * (targets - k).astype(float))
        chosen = rng.choice(targets, size=dk, replace=False, p=w / w.sum())
        for t in sorted(int(t) for t in chosen):
            raw_edges.add((k, t))

    # step 2: input-to-intermediate
    raw_edges.add((INPUT, 1))
    for k in range(2, d + 1):
        if rng.random() < h.p_il:
            raw_edges.add((INPUT, k))

    # step 3: intermediate-to-output
    raw_edges.add((d, OUTPUT))
    for k in range(1, d):
        if rng.random() < h.p_lo:
            raw_edges.add((k, OUTPUT))

    # step 4: optional direct skip
    if h.p_io:
        raw_edges.add((INPUT, OUTPUT))

    # step 5: isolation fixes
    for k in range(1, d + 1):
        if not any(dst == k for _, dst in raw_edges):
            raw_edges.add((INPUT, k))
        if not any(src == k for src, _ in raw_edges):
            raw_edges.add((k, OUTPUT))

    # step 6: assign dilations, kernel sizes and channel counts in a canonical
    # edge order so draws are reproducible
    def order_key(edge):
        src, dst = edge
        s = -1 if src == INPUT else src
        t = d + 1 if dst == OUTPUT else dst
        return (s, t)

    edges = []
    for src, dst in sorted(raw_edges, key=order_key):
        if isinstance(h.channels, int):
            ch = h.channels
        else:
            ch = int(rng.choice(np.asarray(h.channels)))
        if src == INPUT or dst == OUTPUT:
            edges.append(Edge(src, dst, 1, 1, ch))
        else:
            dil = int(rng.choice(np.asarray(h.dilation_choices)))
            edges.append(Edge(src, dst, dil, 3, ch))

    spec = NetworkSpec(h, edges)
    spec.topo_order = topological_order(spec)
    return spec


def topological_order(spec: NetworkSpec):
    """Kahn's algorithm; ties broken by ascending node id (I first, O last)."""
    nodes = spec.nodes

    def key(n):
        if n == INPUT:
            return -1
        if n == OUTPUT:
            return spec.depth + 1
        return n

    indeg = {n: 0 for n in nodes}
    succ = {n: [] for n in nodes}
    for e in spec.edges:
        indeg[e.dst] += 1
        succ[e.src].append(e.dst)
    ready = sorted([n for n in nodes if indeg[n] == 0], key=key)
    order = []
    while ready:
        n = ready.pop(0)
        order.append(n)
        changed = False
        for m in succ[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                ready.append(m)
                changed = True
        if changed:
            ready.sort(key=key)
    if len(order) != len(nodes):
        stuck = [n for n in nodes if indeg[n] > 0]
        back = next((e for e in spec.edges if e.dst in stuck and e.src in stuck), None)
        raise GraphError(f"cycle detected involving edge {back}")
    return order


def node_channel_counts(spec: NetworkSpec, in_channels: int):
    """Channel count of each node's concatenated feature map."""
    counts = {INPUT: in_channels}
    for n in spec.topo_order or topological_order(spec):
        if n == INPUT:
            continue
        counts[n] = sum(e.channels for e in spec.in_edges(n))
    return counts


def graph_stats(spec: NetworkSpec, in_channels: int, latent_dim: int,
                out_channels: int | None = None, spatial_rank: int = 2,
                head_width: int | None = None) -> GraphStats:
    """Exact parameter count (encoder + latent projection + heads), longest
    I->O path length in edges, and average degree |E| / (D + 2)."""
    if out_channels is None:
        out_channels = in_channels
    if head_width is None:
        head_width = latent_dim
    counts = node_channel_counts(spec, in_channels)
    params = 0
    for e in spec.edges:
        taps = e.kernel ** spatial_rank
        params += taps * counts[e.src] * e.channels + e.channels
    # 1x1 projection of the sink's concatenated features to the latent dim
    params += counts[OUTPUT] * latent_dim + latent_dim
    # three heads: latent -> width -> width -> out_channels
    per_head = (latent_dim * head_width + head_width
                + head_width * head_width + head_width
                + head_width * out_channels + out_channels)
    params += 3 * per_head

    order = spec.topo_order or topological_order(spec)
    dist = {n: (0 if n == INPUT else -10 ** 9) for n in order}
    for n in order:
        for e in spec.out_edges(n):
            dist[e.dst] = max(dist[e.dst], dist[n] + 1)
    return GraphStats(
        parameter_count=int(params),
        longest_path=int(dist[OUTPUT]),
        avg_degree=len(spec.edges) / (spec.depth + 2),
    )


def bin_by_quantiles(values, bin_edges=QUANTILE_EDGES, labels=None):
    """Label each value by the quantile bin its empirical rank falls in.

    Ranks are (number of strictly smaller values) / n, so ties share the
    rank of their first occurrence and fall in the lower bin. Bins are
    left-closed, right-open; the last bin is closed.
    """
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("values must be nonempty")
    edges = list(bin_edges)
    if edges[0] != 0.0 or edges[-1] != 1.0 or any(
            b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bin edges must be strictly increasing from 0 to 1")
    if labels is None:
        labels = QUANTILE_LABELS if len(edges) == 6 else [
            f"bin{i}" for i in range(len(edges) - 1)]
    if len(labels) != len(edges) - 1:
        raise ValueError("need one label per bin")
    order = np.argsort(values, kind="stable")
    sorted_vals = values[order]
    # rank of v = index of first occurrence of v in sorted order
    first_idx = np.searchsorted(sorted_vals, values, side="left")
    ranks = first_idx / values.size
    out = []
    for r in ranks:
        i = int(np.searchsorted(edges, r, side="right")) - 1
        out.append(labels[min(i, len(labels) - 1)])
    return out
