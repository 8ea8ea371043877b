"""Exact tSNE: perplexity calibration by bisection, KL objective, and
momentum gradient descent with early exaggeration.

Deliberately the O(n^2) formulation: desk-scale sample counts make the
exact gradient affordable and keep every quantity directly testable.
Distances are squared Euclidean; the low-dimensional kernel is Student-t
with one degree of freedom.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from echodx.seeding import stream

_P_FLOOR = 1e-12


@dataclass
class AffinityMatrix:
    p: np.ndarray          # symmetrized joint probabilities, zero diagonal
    perplexity: float
    sigmas: np.ndarray     # per-point Gaussian bandwidths
    entropies: np.ndarray  # per-point conditional entropy, bits


@dataclass
class Embedding:
    points: np.ndarray  # (n,2)
    labels: np.ndarray
    source: str = "features"
    kl_initial: float = float("nan")
    kl_final: float = float("nan")


def pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances with an exactly zero diagonal."""
    x = np.asarray(x, dtype=np.float64)
    sq = (x * x).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def _conditional_row(dists: np.ndarray, beta: float, i: int):
    """(p_{j|i}, entropy in bits) for one point at precision beta."""
    w = np.exp(-dists * beta)
    w[i] = 0.0
    total = w.sum()
    if total <= 0.0:
        return w, np.inf
    p = w / total
    nz = p[p > 0]
    h = float(-(nz * np.log2(nz)).sum())
    return p, h


def calibrate_affinities(x: np.ndarray, perplexity: float = 30.0,
                         tol: float = 1e-4, max_iter: int = 64) -> AffinityMatrix:
    """Find per-point bandwidths so each conditional entropy hits
    log2(perplexity) within tol bits, then symmetrize to joint P."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < 3:
        raise ValueError(f"need at least 3 points, got {n}")
    if not 1 < perplexity < n:
        raise ValueError(f"perplexity must lie in (1,{n}), got {perplexity}")
    d = pairwise_sq_dists(x)
    target = np.log2(perplexity)
    cond = np.zeros((n, n))
    betas = np.zeros(n)
    entropies = np.zeros(n)
    for i in range(n):
        row = d[i]
        beta, lo, hi = 1.0, 0.0, np.inf
        p, h = _conditional_row(row, beta, i)
        for _ in range(max_iter):
            if abs(h - target) <= tol:
                break
            if h > target:  # too spread out: sharpen
                lo = beta
                beta = beta * 2.0 if np.isinf(hi) else (lo + hi) / 2.0
            else:
                hi = beta
                beta = (lo + hi) / 2.0
            p, h = _conditional_row(row, beta, i)
        if abs(h - target) > tol:
            raise RuntimeError(
                f"entropy calibration did not converge for point {i} "
                f"(|H - target| = {abs(h - target):.3g} bits); the distance "
                "row is likely degenerate (all-identical points)"
            )
        cond[i] = p
        betas[i] = beta
        entropies[i] = h
    p_joint = (cond + cond.T) / (2.0 * n)
    np.fill_diagonal(p_joint, 0.0)
    return AffinityMatrix(p_joint, perplexity, np.sqrt(1.0 / (2.0 * betas)),
                          entropies)


def _student_t(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(Q, unnormalized kernel) from embedding coordinates."""
    d = pairwise_sq_dists(y)
    num = 1.0 / (1.0 + d)
    np.fill_diagonal(num, 0.0)
    q = num / num.sum()
    return q, num


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """sum_{i != j} P log(P/Q) with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    mask = p > 0
    return float((p[mask] * np.log(p[mask] / np.maximum(q[mask], _P_FLOOR))).sum())


def tsne_optimize(aff: AffinityMatrix, seed: int, iters: int = 1000,
                  learning_rate: float = 200.0, early_exaggeration: float = 12.0,
                  exaggeration_iters: int = 250, momentum_low: float = 0.5,
                  momentum_high: float = 0.8) -> tuple[np.ndarray, float, float]:
    """Momentum gradient descent on the KL objective.

    Init is a seeded Gaussian with sigma 1e-4. The first
    ``exaggeration_iters`` iterations use momentum_low and multiply P by the
    exaggeration factor; afterwards momentum_high and plain P. Returns
    (points, kl_initial, kl_final) where both KL values use unexaggerated P.
    """
    p = aff.p
    n = p.shape[0]
    rng = stream(seed, "tsne-init")
    y = rng.normal(0.0, 1e-4, size=(n, 2))
    vel = np.zeros_like(y)
    q, _ = _student_t(y)
    kl_initial = kl_divergence(p, q)
    for it in range(iters):
        exaggerating = it < exaggeration_iters
        p_eff = p * early_exaggeration if exaggerating else p
        q, num = _student_t(y)
        pq = (p_eff - q) * num
        grad = 4.0 * (pq.sum(axis=1)[:, None] * y - pq @ y)
        if not np.isfinite(grad).all():
            raise RuntimeError(f"non-finite tSNE gradient at iteration {it}")
        mom = momentum_low if exaggerating else momentum_high
        vel = mom * vel - learning_rate * grad
        y = y + vel
        y = y - y.mean(axis=0)
    q, _ = _student_t(y)
    kl_final = kl_divergence(p, q)
    return y, kl_initial, kl_final


def embed_points(x: np.ndarray, labels, seed: int, source: str,
                 perplexity: float = 30.0, iters: int = 1000,
                 learning_rate: float = 200.0) -> Embedding:
    """Calibrate affinities and optimize a 2-D embedding of row vectors."""
    aff = calibrate_affinities(x, perplexity)
    pts, kl0, kl1 = tsne_optimize(aff, seed, iters, learning_rate)
    return Embedding(pts, np.asarray(labels), source, kl0, kl1)


def write_embedding_tsv(path, emb: Embedding, sample_ids) -> None:
    lines = ["# sample_id\tx\ty\tlabel"]
    for sid, (px, py), lab in zip(sample_ids, emb.points, emb.labels):
        lines.append(f"{sid}\t{px:.6f}\t{py:.6f}\t{int(lab)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
