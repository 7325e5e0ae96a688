"""Latent-space analysis: stacking, randomized SVD, partial projectors,
k-means token maps, and token-conditioned histograms.

The stack holds concatenated per-pixel latent vectors across ensemble
members as rows (d_total = sum of member latent dims) and flattened spatial
positions as columns. The randomized SVD traverses the stack in column
chunks so the code path scales past memory-resident matrices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri


class LatentError(ValueError):
    pass


@dataclass
class LatentStack:
    matrix: np.ndarray          # (d_total, T)
    blocks: list                # member -> (row_lo, row_hi)
    spatial_shape: tuple
    chunk_cols: int = 65536

    @property
    def d_total(self):
        return self.matrix.shape[0]

    @property
    def positions(self):
        return self.matrix.shape[1]

    def column_chunks(self):
        for lo in range(0, self.positions, self.chunk_cols):
            yield lo, self.matrix[:, lo:lo + self.chunk_cols]


@dataclass
class TokenMap:
    labels: np.ndarray          # per-position cluster id, spatial shape
    centroids: np.ndarray       # (k, r)
    rank: int
    inertia: float

    @property
    def k(self):
        return self.centroids.shape[0]


def stack_latents(latent_maps, chunk_cols=65536) -> LatentStack:
    """Stack member latent maps (each (d_i, *spatial)) into one (d_total, T) matrix."""
    spatial = None
    rows, blocks, offset = [], [], 0
    for m in latent_maps:
        m = np.asarray(m)
        if spatial is None:
            spatial = m.shape[1:]
        elif m.shape[1:] != spatial:
            raise LatentError(
                f"latent map spatial extents {m.shape[1:]} != {spatial}")
        d = m.shape[0]
        rows.append(m.reshape(d, -1))
        blocks.append((offset, offset + d))
        offset += d
    return LatentStack(np.concatenate(rows, axis=0), blocks, spatial, chunk_cols)


def _omega_rows(seed, lo, n, ell):
    """Gaussian test-matrix rows for global columns [lo, lo+n), independent of
    how the traversal is chunked. Philox counters advance in blocks of four
    doubles, so each row consumes a padded multiple of four draws."""
    words = 4 * ((ell + 3) // 4)
    bg = np.random.Philox(key=seed).advance(lo * (words // 4))
    u = np.random.Generator(bg).random((n, words))
    return ndtri(u[:, :ell])


def randomized_svd(stack, rank, oversample=10, power_iters=2, seed=0):
    """Truncated randomized SVD of the (d_total, T) stack, streamed by column
    chunks. Returns (U, S, V) with U (d_total, r), S (r,), V (T, r)."""
    if isinstance(stack, np.ndarray):
        stack = LatentStack(stack, [(0, stack.shape[0])], (stack.shape[1],))
    d, t = stack.d_total, stack.positions
    if rank > min(d, t):
        raise LatentError(f"rank {rank} exceeds min matrix dimension {min(d, t)}")
    ell = min(rank + oversample, min(d, t))

    # range finder: Y = X @ Omega accumulated chunkwise; Omega rows are a
    # pure function of (seed, column index) so chunking cannot change them
    y = np.zeros((d, ell))
    for lo, chunk in stack.column_chunks():
        y += chunk @ _omega_rows(seed, lo, chunk.shape[1], ell)
    q, _ = np.linalg.qr(y)
    for _ in range(power_iters):
        z = np.zeros((t, q.shape[1]))
        for lo, chunk in stack.column_chunks():
            z[lo:lo + chunk.shape[1]] = chunk.T @ q
        z, _ = np.linalg.qr(z)
        y = np.zeros((d, q.shape[1]))
        for lo, chunk in stack.column_chunks():
            y += chunk @ z[lo:lo + chunk.shape[1]]
        q, _ = np.linalg.qr(y)

    # project: B = Q^T X, small (ell x T), assembled chunkwise
    b = np.empty((q.shape[1], t))
    for lo, chunk in stack.column_chunks():
        b[:, lo:lo + chunk.shape[1]] = q.T @ chunk
    ub, s, vt = np.linalg.svd(b, full_matrices=False)
    u = q @ ub[:, :rank]
    return u, s[:rank], vt[:rank].T


def partial_projectors(v, s, blocks):
    """Per-block projectors P_j = V_j diag(S)^-1 for a partition of V's rows.

    For X = U S V^T with blocks partitioning X's columns (equivalently V's
    rows), sum_j X[:, block_j] @ P_j reconstructs U exactly.
    """
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0):
        raise LatentError("singular values within the rank must be strictly positive")
    inv = 1.0 / s
    projectors = []
    for lo, hi in blocks:
        projectors.append(v[lo:hi] * inv[None, :])
    return projectors


def member_projection(stack: LatentStack, rank, oversample=10, power_iters=2, seed=0):
    """Distributed projection of per-member latent blocks into a shared subspace.

    Decomposes the position-by-channel matrix X^T = U' S V'^T, partitions V'
    by member row blocks, and reconstructs the shared per-position basis as
    sum_j X_j^T P_j. Returns (features (T, r), singular values, projectors).
    """
    xt = LatentStack(stack.matrix.T.copy(), [(0, stack.positions)],
                     (stack.d_total,), stack.chunk_cols)
    u, s, v = randomized_svd(xt, rank, oversample, power_iters, seed)
    projectors = partial_projectors(v, s, stack.blocks)
    features = np.zeros((stack.positions, rank))
    for (lo, hi), p in zip(stack.blocks, projectors):
        features += stack.matrix[lo:hi].T @ p
    return features, s, projectors


def kmeans(features, k, seed=0, max_iters=100):
    """Deterministic k-means with k-means++ seeding and Lloyd iterations.

    Stops at an assignment fixpoint or max_iters; inertia is checked to be
    nonincreasing every iteration. Empty clusters are reseeded from the
    point farthest from its assigned centroid.
    """
    x = np.asarray(features, dtype=float)
    n = x.shape[0]
    if k > n:
        raise LatentError(f"k={k} exceeds number of points {n}")
    rng = np.random.default_rng(seed)

    # k-means++ seeding
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total == 0:
            centroids[i] = x[rng.integers(n)]
        else:
            centroids[i] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((x - centroids[i]) ** 2, axis=1))

    labels = None
    prev_inertia = np.inf
    for _ in range(max_iters):
        dists = _sq_dists(x, centroids)
        new_labels = dists.argmin(axis=1)
        inertia = float(dists[np.arange(n), new_labels].sum())
        assert inertia <= prev_inertia + 1e-8 * max(1.0, abs(prev_inertia)), \
            "k-means inertia increased"
        if labels is not None and np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
        prev_inertia = inertia
        point_d2 = dists[np.arange(n), labels]
        for c in range(k):
            members = labels == c
            if members.any():
                centroids[c] = x[members].mean(axis=0)
            else:
                far = int(point_d2.argmax())
                centroids[c] = x[far]
                point_d2[far] = 0.0
    dists = _sq_dists(x, centroids)
    labels = dists.argmin(axis=1)
    inertia = float(dists[np.arange(n), labels].sum())
    return labels, centroids, inertia


def _sq_dists(x, centroids):
    # ||x - c||^2 expanded; clip tiny negatives from cancellation
    d = (np.sum(x ** 2, axis=1)[:, None] - 2.0 * x @ centroids.T
         + np.sum(centroids ** 2, axis=1)[None, :])
    return np.maximum(d, 0.0)


def tokenize(stack: LatentStack, rank, k, seed=0, oversample=10,
             power_iters=2, max_iters=100, standardize=True) -> TokenMap:
    """SVD-project positions to rank-r coordinates, standardize per component,
    and cluster with k-means into a spatial token map."""
    if rank > stack.d_total:
        raise LatentError(f"rank {rank} exceeds stacked latent dim {stack.d_total}")
    features, s, _ = member_projection(stack, rank, oversample, power_iters, seed)
    if standardize:
        std = features.std(axis=0)
        std[std == 0] = 1.0
        features = (features - features.mean(axis=0)) / std
    labels, centroids, inertia = kmeans(features, k, seed=seed, max_iters=max_iters)
    return TokenMap(labels.reshape(stack.spatial_shape).astype(np.int32),
                    centroids, rank, inertia)


def token_histogram(tokens: TokenMap, intensity, bins=50):
    """Per-token intensity histograms, ordered by decreasing mean intensity.

    Returns a list of dicts: {token, mean, count, bin_edges, counts}.
    """
    intensity = np.asarray(intensity)
    if intensity.shape != tokens.labels.shape:
        raise LatentError(
            f"intensity shape {intensity.shape} != token map shape {tokens.labels.shape}")
    lo, hi = float(intensity.min()), float(intensity.max())
    if lo == hi:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    rows = []
    for tok in range(tokens.k):
        mask = tokens.labels == tok
        vals = intensity[mask]
        counts, _ = np.histogram(vals, bins=edges)
        rows.append({
            "token": tok,
            "mean": float(vals.mean()) if vals.size else float("nan"),
            "count": int(vals.size),
            "bin_edges": edges,
            "counts": counts,
        })
    rows.sort(key=lambda r: (-(r["mean"]) if np.isfinite(r["mean"]) else np.inf))
    return rows


def tokenmap_to_json(tokens: TokenMap, seed, k):
    return json.dumps({
        "k": int(tokens.k), "rank": int(tokens.rank), "seed": int(seed),
        "inertia": tokens.inertia,
        "centroids": tokens.centroids.tolist(),
    }, sort_keys=True, separators=(",", ":"))
