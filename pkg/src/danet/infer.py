"""Test-time separation.

Attractors come from one of three places: K-means over the mixture's
embeddings, a codebook of attractor sets collected on training data, or
(diagnostic only) the true source dominance pattern.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import attractor as att
from . import net
from . import signal as sig
from .data import membership
from .tensorio import FormatError, load_tensors, save_tensors

STRATEGIES = ("kmeans", "fixed", "oracle")
# bins this far below the loudest bin carry no usable embedding and are left out of clustering
CLUSTER_FLOOR_DB = 40.0


class SeparationError(ValueError):
    pass


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    history: list  # within-cluster sum of squares after each Lloyd iteration


def _sq_dists(x, c):
    return np.maximum((x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :], 0.0)


def _kmeanspp(x, k, rng):
    centers = [x[rng.integers(len(x))]]
    d2 = _sq_dists(x, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(len(x))
        else:
            idx = rng.choice(len(x), p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, _sq_dists(x, x[idx][None])[:, 0])
    return np.array(centers)


def _lloyd(x, centers, max_iter, tol):
    history = []
    labels = None
    for _ in range(max_iter):
        d2 = _sq_dists(x, centers)
        labels = d2.argmin(axis=1)
        new = centers.copy()
        for j in range(len(centers)):
            members = labels == j
            if members.any():
                new[j] = x[members].mean(axis=0)
        # inertia of the updated centers with the current assignment
        inertia = float(sum(((x[labels == j] - new[j]) ** 2).sum() for j in range(len(new))))
        history.append(inertia)
        shift = np.abs(new - centers).max()
        centers = new
        if shift <= tol:
            break
    labels = _sq_dists(x, centers).argmin(axis=1)
    inertia = float(sum(((x[labels == j] - centers[j]) ** 2).sum() for j in range(len(centers))))
    return centers, labels, inertia, history


def kmeans_fit(v, C: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6,
               restarts: int = 10) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding, best of ``restarts`` runs.

    Clusters are ordered by descending size (ties by first member index).
    """
    x = np.asarray(v, dtype=np.float64)
    if x.shape[0] < C:
        raise SeparationError(f"cannot form {C} clusters from {x.shape[0]} points")
    if np.allclose(x, x[0]) and C > 1:
        raise SeparationError("no cluster structure: all embeddings are identical")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        centers, labels, inertia, hist = _lloyd(x, _kmeanspp(x, C, rng), max_iter, tol)
        if best is None or inertia < best.inertia - 1e-12:
            best = KMeansResult(centers, labels, inertia, hist)
    sizes = np.bincount(best.labels, minlength=C)
    first = [np.flatnonzero(best.labels == j)[0] if sizes[j] else len(x) for j in range(C)]
    order = sorted(range(C), key=lambda j: (-sizes[j], first[j]))
    remap = np.empty(C, dtype=int)
    remap[order] = np.arange(C)
    return KMeansResult(best.centroids[order], remap[best.labels], best.inertia, best.history)


def kmeans(v, C: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6,
           restarts: int = 10) -> np.ndarray:
    """Attractors (C, K) as K-means centroids of the embeddings."""
    return kmeans_fit(v, C, seed, max_iter, tol, restarts).centroids


@dataclass
class AttractorCodebook:
    entries: list  # each C x K
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.entries:
            raise SeparationError("codebook needs at least one entry")
        if len({e.shape[1] for e in self.entries}) != 1:
            raise SeparationError("codebook entries disagree in embedding dimension")

    def save(self, path):
        tensors = {f"entry{i:03d}": e for i, e in enumerate(self.entries)}
        save_tensors(path, tensors, {"kind": "codebook", "provenance": self.provenance})

    @classmethod
    def load(cls, path):
        tensors, meta = load_tensors(path)
        if meta.get("kind") != "codebook":
            raise FormatError(f"{path}: DANET1 file is not an attractor codebook")
        entries = [tensors[k].astype(np.float64) for k in sorted(tensors)]
        return cls(entries, meta.get("provenance", {}))


def cluster_attractor_sets(attractor_sets, n_clusters: int = 2, seed: int = 0):
    """Cluster per-mixture attractor sets into ``n_clusters`` representative sets.

    Every source ordering of each set is included, so the population is
    symmetric under relabelling.
    """
    sets = [np.asarray(a, dtype=np.float64) for a in attractor_sets]
    if not sets:
        raise SeparationError("no attractor sets to cluster")
    C, K = sets[0].shape
    pop = np.array([a[list(p)].reshape(-1) for a in sets
                    for p in itertools.permutations(range(C))])
    n = min(n_clusters, len(np.unique(pop.round(12), axis=0)))
    if n == 1:
        centers = pop.mean(axis=0, keepdims=True)
    else:
        centers = kmeans(pop, n, seed=seed)
    return [c.reshape(C, K) for c in centers]


def oracle_attractors(v, source_mags, mixture_mag, threshold_pct=0.0):
    y = membership(source_mags)
    w = att.salience_weights(np.log(np.asarray(mixture_mag) + sig.LOG_FLOOR), threshold_pct)
    return att.estimate_attractors(v, y, w)


@dataclass
class Model:
    params: dict
    cfg: net.NetConfig
    norm_stats: tuple

    @classmethod
    def load(cls, path):
        params, cfg, stats = net.load_checkpoint(path)
        return cls(params, cfg, stats)

    def embed(self, X: sig.ComplexSpectrogram):
        feats = sig.log_magnitude_features(X, self.norm_stats).values
        v, _ = net.forward(self.params, feats, self.cfg)
        return v.astype(np.float64)


def build_codebook(model: Model, records, n_clusters: int = 2, seed: int = 0,
                   dataset_id: str = "") -> AttractorCodebook:
    """Codebook from the true-label attractors of training mixtures."""
    sets = []
    for rec in records:
        X = sig.stft(rec.mixture)
        S = np.stack([np.abs(sig.stft(s).bins) for s in rec.sources], axis=-1)
        try:
            sets.append(oracle_attractors(model.embed(X), S, np.abs(X.bins),
                                          model.cfg.threshold_pct))
        except att.EmptySourceError:
            continue
    entries = cluster_attractor_sets(sets, n_clusters, seed)
    return AttractorCodebook(entries, {"dataset": dataset_id, "n_mixtures": len(sets),
                                       "n_clusters": n_clusters, "seed": seed,
                                       "method": "kmeans over permutation-symmetrized sets"})


@dataclass
class SeparationResult:
    sources: list
    masks: np.ndarray  # F x T x C
    attractors: np.ndarray
    strategy: str
    embeddings: np.ndarray | None = None


def _active_rows(X: sig.ComplexSpectrogram, threshold_pct: float = 0.0):
    """Bins used for clustering: within the dB floor of the loudest bin and,
    for a model trained with a salience threshold, above that threshold too."""
    mag = np.abs(X.bins)
    logmag = att.to_rows(20.0 * np.log10(mag + sig.LOG_FLOOR))
    keep = logmag >= logmag.max() - CLUSTER_FLOOR_DB
    if threshold_pct > 0:
        keep &= att.salience_weights(np.log(mag + sig.LOG_FLOOR), threshold_pct).astype(bool)
    return keep


def separate(model: Model, mixture: sig.Waveform, C: int, strategy: str = "kmeans",
             codebook: AttractorCodebook | None = None, references=None,
             seed: int = 0) -> SeparationResult:
    if strategy not in STRATEGIES:
        raise SeparationError(f"unknown strategy {strategy!r}")
    if mixture.sample_rate != sig.SAMPLE_RATE:
        raise SeparationError(f"mixture must be sampled at {sig.SAMPLE_RATE} Hz")
    if not np.any(mixture.samples):
        raise SeparationError("mixture is silent")
    X = sig.stft(mixture)
    v = model.embed(X)
    head = model.cfg.head
    if strategy == "kmeans":
        keep = _active_rows(X, model.cfg.threshold_pct)
        a = kmeans(v[keep] if keep.sum() >= C else v, C, seed=seed)
    elif strategy == "fixed":
        if codebook is None:
            raise SeparationError("fixed strategy requires a codebook")
        fits = [e for e in codebook.entries if e.shape[0] >= C]
        if not fits:
            raise SeparationError(f"codebook entries hold fewer than {C} attractors")
        # entry whose masks are most confident on average
        scores = [att.mask_rows(v, e[:C], head).max(axis=1).mean() for e in fits]
        a = fits[int(np.argmax(scores))][:C]
    else:
        if references is None or len(references) != C:
            raise SeparationError("oracle strategy requires one reference per source")
        S = np.stack([np.abs(sig.stft(r).bins) for r in references], axis=-1)
        a = oracle_attractors(v, S, np.abs(X.bins), model.cfg.threshold_pct)
    m = att.masks(v, a, head, X.n_freq, X.n_frames)
    outs = []
    for c in range(C):
        est = sig.ComplexSpectrogram(m[:, :, c] * X.bins, X.hop, X.window_len, X.sample_rate)
        outs.append(sig.Waveform(sig.istft(est).samples[:len(mixture)], mixture.sample_rate))
    return SeparationResult(outs, m, a, strategy, v)
