"""Synthetic benchmark generator.

Band-limited random Fourier surfaces, warped by a logistic modifier, then
corrupted with additive plus signal-dependent folded-normal noise. Training
pairs are (observed, warped surface): the learning target is the warped
surface, not the raw one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .seeding import substream


@dataclass
class SynthConfig:
    size: tuple = (64, 64)
    order: int = 4
    tau: float = 0.0
    kappa: float = 2.0
    sigma: float = 1.0
    seed: int = 0
    n_images: int = 8  # per split

    def validate(self):
        if self.order < 0:
            raise ValueError("order must be >= 0")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.order >= min(self.size) // 2:
            raise ValueError(
                f"order {self.order} too large for grid {self.size}")

    def to_dict(self):
        return {"size": list(self.size), "order": self.order, "tau": self.tau,
                "kappa": self.kappa, "sigma": self.sigma, "seed": self.seed,
                "n_images": self.n_images}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["size"] = tuple(d["size"])
        return cls(**d)


def random_surface(cfg: SynthConfig, rng=None, return_imag_residue=False):
    """Zero-mean, unit-variance band-limited surface via Hermitian Fourier draws."""
    cfg.validate()
    rng = rng if rng is not None else substream(cfg.seed, "surface")
    h, w = cfg.size
    c = rng.normal(size=(h, w)) + 1j * rng.normal(size=(h, w))

    ky = np.fft.fftfreq(h, d=1.0 / h).reshape(-1, 1)
    kx = np.fft.fftfreq(w, d=1.0 / w).reshape(1, -1)
    c[ky ** 2 + kx ** 2 > cfg.order ** 2] = 0.0

    # enforce c[-k,-l] = conj(c[k,l]); self-conjugate entries become real
    flipped = np.roll(np.flip(c, axis=(0, 1)), 1, axis=(0, 1))
    c = 0.5 * (c + np.conj(flipped))

    s = np.fft.ifft2(c)
    imag_residue = float(np.abs(s.imag).max())
    s = s.real
    s = s - s.mean()
    var = s.var()
    if var > 0:
        s = s / np.sqrt(var)
    if return_imag_residue:
        return s, imag_residue
    return s


def modifier(x, tau, kappa):
    """Logistic warp 1 / (1 + exp(-kappa * (x - tau)))."""
    return 1.0 / (1.0 + np.exp(-kappa * (np.asarray(x, dtype=float) - tau)))


def corrupt(surface, cfg: SynthConfig, rng=None):
    """Warp then add noise: O = S~ + e1 + |S~| * |e2| * M(S~); returns (S~, O)."""
    rng = rng if rng is not None else substream(cfg.seed, "noise")
    s = np.asarray(surface, dtype=float)
    warped = s * modifier(s, cfg.tau, cfg.kappa)
    e1 = rng.normal(0.0, cfg.sigma, s.shape) if cfg.sigma > 0 else np.zeros_like(s)
    e2 = rng.normal(0.0, cfg.sigma, s.shape) if cfg.sigma > 0 else np.zeros_like(s)
    # sqrt(e2^2) taken literally: the folded-normal |e2|
    observed = warped + e1 + np.abs(warped) * np.sqrt(e2 ** 2) * modifier(
        warped, cfg.tau, cfg.kappa)
    return warped, observed


def make_image_pair(cfg: SynthConfig, split, index):
    """One (observed, target) pair from the (split, index) substream."""
    rng_surface = substream(cfg.seed, "surface", split, index)
    rng_noise = substream(cfg.seed, "noise", split, index)
    s = random_surface(cfg, rng=rng_surface)
    warped, observed = corrupt(s, cfg, rng=rng_noise)
    # channels-first single-channel images
    return observed[None].astype(np.float32), warped[None].astype(np.float32)


def make_dataset(cfg: SynthConfig):
    """Three disjoint splits of (observed, target) pairs, each 'n_images' long."""
    cfg.validate()
    return {
        split: [make_image_pair(cfg, split, i) for i in range(cfg.n_images)]
        for split in ("train", "calibration", "test")
    }


def dataset_manifest(cfg: SynthConfig):
    return json.dumps(
        {"config": cfg.to_dict(), "splits": ["train", "calibration", "test"],
         "pairs_per_split": cfg.n_images, "format": "BNTENSR1"},
        sort_keys=True, separators=(",", ":"))


def save_dataset(dataset, cfg: SynthConfig, directory):
    """Write every pair as tensor containers plus a JSON manifest."""
    import os

    from .tensorio import atomic_write, write_tensor

    os.makedirs(directory, exist_ok=True)
    for split, pairs in dataset.items():
        for i, (observed, target) in enumerate(pairs):
            write_tensor(os.path.join(directory, f"{split}_{i:02d}_observed.bt"), observed)
            write_tensor(os.path.join(directory, f"{split}_{i:02d}_target.bt"), target)
    atomic_write(os.path.join(directory, "manifest.json"),
                 dataset_manifest(cfg).encode())


def load_dataset(directory):
    """Inverse of save_dataset; returns (dataset dict, SynthConfig)."""
    import os

    from .tensorio import read_tensor

    with open(os.path.join(directory, "manifest.json")) as f:
        manifest = json.load(f)
    cfg = SynthConfig.from_dict(manifest["config"])
    dataset = {}
    for split in manifest["splits"]:
        pairs = []
        for i in range(manifest["pairs_per_split"]):
            observed = read_tensor(os.path.join(directory, f"{split}_{i:02d}_observed.bt"))
            target = read_tensor(os.path.join(directory, f"{split}_{i:02d}_target.bt"))
            pairs.append((observed, target))
        dataset[split] = pairs
    return dataset, cfg
