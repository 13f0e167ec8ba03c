"""Separation metrics and embedding-geometry export.

SDR is measured as scale-invariant SNR. SIR and SAR come from a
projection decomposition of each estimate onto its matched reference and
onto the span of all references. Aggregates (GNSDR, GSAR, GSIR) are
length-weighted means over every source of every mixture.
"""
from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np

CAP_DB = 120.0


class MetricError(ValueError):
    pass


def _samples(x):
    return np.asarray(getattr(x, "samples", x), dtype=np.float64)


def _ratio_db(num, den):
    if den <= 0:
        return CAP_DB
    if num <= 0:
        return -CAP_DB
    return float(np.clip(10.0 * np.log10(num / den), -CAP_DB, CAP_DB))


def si_snr(estimate, reference) -> float:
    est = _samples(estimate)
    ref = _samples(reference)
    if est.shape != ref.shape:
        raise MetricError(f"length mismatch: {est.shape} vs {ref.shape}")
    est = est - est.mean()
    ref = ref - ref.mean()
    energy = ref @ ref
    if energy == 0:
        raise MetricError("reference is silent")
    target = (est @ ref) / energy * ref
    noise = est - target
    return _ratio_db(target @ target, noise @ noise)


def decompose(estimate, references, j: int):
    """Split ``estimate`` into (s_target, e_interf, e_artif) w.r.t. reference ``j``."""
    est = _samples(estimate)
    est = est - est.mean()
    refs = np.stack([_samples(r) - _samples(r).mean() for r in references])
    ref = refs[j]
    s_target = (est @ ref) / (ref @ ref) * ref
    coef, *_ = np.linalg.lstsq(refs.T, est, rcond=None)
    in_span = refs.T @ coef
    return s_target, in_span - s_target, est - in_span


def _check_references(refs):
    gram = refs @ refs.T
    eig = np.linalg.eigvalsh(gram)
    if eig.min() <= 1e-10 * max(eig.max(), 1e-300):
        raise MetricError("degenerate reference set: references are linearly dependent")


@dataclass
class MixtureMetrics:
    id: str
    length: int
    si_snr: list
    sir: list
    sar: list
    baseline_si_snr: list  # unprocessed mixture vs each reference
    permutation: tuple

    @property
    def nsdr(self):
        return [a - b for a, b in zip(self.si_snr, self.baseline_si_snr)]


def bss_metrics(estimates, references):
    """Per-source (si_snr, sir, sar) under the permutation maximizing mean SI-SNR.

    Returns ``(si_snr, sir, sar, perm)`` where estimate ``j`` is matched to
    reference ``perm[j]``; the lists are indexed by reference.
    """
    ests = [_samples(e) for e in estimates]
    refs = [_samples(r) for r in references]
    C = len(refs)
    if C < 2 or len(ests) != C:
        raise MetricError("need C >= 2 estimates and as many references")
    if len({len(x) for x in ests + refs}) != 1:
        raise MetricError("all signals must share one length")
    centered = np.stack([r - r.mean() for r in refs])
    _check_references(centered)
    table = np.array([[si_snr(e, r) for r in refs] for e in ests])
    best_perm = max(itertools.permutations(range(C)),
                    key=lambda p: np.mean([table[j, p[j]] for j in range(C)]))
    sdr = [0.0] * C
    sir = [0.0] * C
    sar = [0.0] * C
    for j, c in enumerate(best_perm):
        st, ei, ea = decompose(ests[j], refs, c)
        sdr[c] = float(table[j, c])
        sir[c] = _ratio_db(st @ st, ei @ ei)
        sar[c] = _ratio_db((st + ei) @ (st + ei), ea @ ea)
    return sdr, sir, sar, tuple(best_perm)


def evaluate_mixture(estimates, references, mixture, mix_id="") -> MixtureMetrics:
    sdr, sir, sar, perm = bss_metrics(estimates, references)
    base = [si_snr(mixture, r) for r in references]
    return MixtureMetrics(mix_id, len(_samples(mixture)), sdr, sir, sar, base, perm)


def aggregate(reports) -> dict:
    """Length-weighted GNSDR/GSAR/GSIR (plus mean SI-SNR) over all sources."""
    reports = list(reports)
    if not reports:
        raise MetricError("cannot aggregate an empty report list")
    w, nsdr, sar, sir, sdr = [], [], [], [], []
    for r in reports:
        for c in range(len(r.si_snr)):
            w.append(r.length)
            nsdr.append(r.nsdr[c])
            sar.append(r.sar[c])
            sir.append(r.sir[c])
            sdr.append(r.si_snr[c])
    w = np.asarray(w, dtype=np.float64)

    def wmean(vals):
        return float(np.sum(w * np.asarray(vals)) / w.sum())

    return {"gnsdr": wmean(nsdr), "gsar": wmean(sar), "gsir": wmean(sir),
            "mean_si_snr": wmean(sdr), "n_mixtures": len(reports), "n_sources": len(w)}


def write_report_csv(path, reports, summary: dict, extra: dict | None = None):
    """One row per mixture-source, then an aggregate row."""
    cols = ["mixture", "source", "estimate", "length", "si_snr_db", "nsdr_db", "sir_db",
            "sar_db"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(cols)
        for r in reports:
            inv = {c: j for j, c in enumerate(r.permutation)}
            for c in range(len(r.si_snr)):
                wr.writerow([r.id, c, inv[c], r.length, f"{r.si_snr[c]:.6f}",
                             f"{r.nsdr[c]:.6f}", f"{r.sir[c]:.6f}", f"{r.sar[c]:.6f}"])
        wr.writerow(["AGGREGATE", "", "", "", f"{summary['mean_si_snr']:.6f}",
                     f"{summary['gnsdr']:.6f}", f"{summary['gsir']:.6f}",
                     f"{summary['gsar']:.6f}"])
    if extra:
        with open(path, "a", encoding="utf-8") as fh:
            for k, v in extra.items():
                fh.write(f"# {k}={v}\n")


def read_report_summary(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    agg = [r for r in rows if r["mixture"] == "AGGREGATE"]
    if not agg:
        raise MetricError(f"{path}: no aggregate row")
    a = agg[0]
    return {"gnsdr": float(a["nsdr_db"]), "gsir": float(a["sir_db"]),
            "gsar": float(a["sar_db"]), "mean_si_snr": float(a["si_snr_db"])}


# --- PCA -------------------------------------------------------------------

def jacobi_eigh(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns eigenvalues in descending order and matching eigenvector columns.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    vecs = np.eye(n)
    scale = max(np.sum(a * a), 1e-300)
    for _ in range(max_sweeps):
        off = np.sum(a * a) - np.sum(np.diag(a) ** 2)
        if off <= tol * tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-18 * (abs(a[p, p]) + abs(a[q, q])) or apq == 0:
                    a[p, q] = a[q, p] = 0.0
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0:
                    t = 1.0
                elif abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot_p = c * a[:, p] - s * a[:, q]
                rot_q = s * a[:, p] + c * a[:, q]
                a[:, p], a[:, q] = rot_p, rot_q
                rot_p = c * a[p, :] - s * a[q, :]
                rot_q = s * a[p, :] + c * a[q, :]
                a[p, :], a[q, :] = rot_p, rot_q
                vp = c * vecs[:, p] - s * vecs[:, q]
                vq = s * vecs[:, p] + c * vecs[:, q]
                vecs[:, p], vecs[:, q] = vp, vq
    vals = np.diag(a).copy()
    order = np.argsort(vals)[::-1]
    return vals[order], vecs[:, order]


@dataclass
class PcaProjection:
    components: np.ndarray  # K x 3
    projected: np.ndarray  # N x 3
    explained_variance: np.ndarray  # 3
    mean: np.ndarray = field(default=None)

    def transform(self, points):
        return (np.asarray(points, dtype=np.float64) - self.mean) @ self.components


def pca_project(points, n_components: int = 3) -> PcaProjection:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 4:
        raise MetricError("PCA needs at least 4 points")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (x.shape[0] - 1)
    vals, vecs = jacobi_eigh(cov)
    k = min(n_components, x.shape[1])
    comps = vecs[:, :k].copy()
    for j in range(k):
        if comps[np.argmax(np.abs(comps[:, j])), j] < 0:
            comps[:, j] *= -1
    ev = np.maximum(vals[:k], 0.0)
    if k < n_components:
        comps = np.hstack([comps, np.zeros((x.shape[1], n_components - k))])
        ev = np.concatenate([ev, np.zeros(n_components - k)])
    return PcaProjection(comps, xc @ comps, ev, mean)


def export_embedding_csv(v, y, attractors, pca: PcaProjection | None, path):
    """Plot-ready rows for every bin and every attractor.

    ``y`` is a membership matrix (or dominant-source indices). When ``pca``
    is None it is fitted on the embeddings.
    """
    v = np.asarray(v, dtype=np.float64)
    a = np.asarray(attractors, dtype=np.float64)
    y = np.asarray(y)
    dom = y.argmax(axis=1) if y.ndim == 2 else y.astype(int)
    if dom.shape[0] != v.shape[0]:
        raise MetricError("membership and embeddings disagree in row count")
    if pca is None:
        pca = pca_project(v)
    pv = pca.transform(v)
    pa = pca.transform(a)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["pc1", "pc2", "pc3", "dominant_source", "is_attractor"])
        for p, d in zip(pv, dom):
            wr.writerow([f"{p[0]:.9g}", f"{p[1]:.9g}", f"{p[2]:.9g}", int(d), 0])
        for c, p in enumerate(pa):
            wr.writerow([f"{p[0]:.9g}", f"{p[1]:.9g}", f"{p[2]:.9g}", c, 1])
    return pca


def read_embedding_csv(path):
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    pts = np.array([[float(r["pc1"]), float(r["pc2"]), float(r["pc3"])] for r in rows])
    dom = np.array([int(r["dominant_source"]) for r in rows])
    flag = np.array([int(r["is_attractor"]) for r in rows])
    return pts, dom, flag
