"""Exact t-SNE for small sample counts, plus scatter export.

Joint probabilities come from a per-point binary search that matches the
target perplexity in log2 space; the 2-D layout minimizes KL(P || Q) with a
Student-t kernel, early exaggeration, and momentum. After the exaggeration
phase every step is checked: if the KL would rise, the step is halved (and
momentum dropped) until it does not, so the recorded post-exaggeration trace
is non-increasing by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .errors import ConfigError, DataError, NumericError
from .textio import fmt, write_csv
from .validation import check_matrix, check_seed

__all__ = [
    "EmbedConfig",
    "binary_search_affinities",
    "joint_probabilities",
    "tsne",
    "TSNEEmbedding",
    "export_scatter",
]

_MIN_STEP = 1e-12


@dataclass(frozen=True)
class EmbedConfig:
    perplexity: float = 15.0
    iterations: int = 1000
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 250
    learning_rate: float = 200.0
    momentum_early: float = 0.5
    momentum_late: float = 0.8
    seed: int = 0
    init: str = "spectral"  # or "random"

    def __post_init__(self):
        if self.init not in ("spectral", "random"):
            raise ConfigError(f"unknown init {self.init!r}")


def _sq_distances(X: np.ndarray) -> np.ndarray:
    sq = np.sum(X**2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.fill_diagonal(d2, 0.0)
    return np.maximum(d2, 0.0)


def binary_search_affinities(
    d2: np.ndarray, perplexity: float, tol: float = 1e-5, max_iter: int = 50
) -> tuple[np.ndarray, np.ndarray]:
    """Row-conditional Gaussian affinities hitting the target perplexity.

    Returns (P_conditional, achieved log2-perplexity per row). Each row's
    entropy in bits is matched to log2(perplexity) within tol (50 bisection
    steps reach far tighter than 1e-5 on non-degenerate rows).
    """
    n = d2.shape[0]
    target = np.log2(perplexity)
    P = np.zeros((n, n))
    achieved = np.zeros(n)
    for i in range(n):
        idx = np.concatenate([np.arange(i), np.arange(i + 1, n)])
        di = d2[i, idx]
        beta, lo, hi = 1.0, 0.0, np.inf
        h_bits = np.inf
        for _ in range(max_iter):
            w = np.exp(-di * beta)
            sw = w.sum()
            if sw <= 0:
                h_bits = 0.0
                p = np.zeros_like(w)
            else:
                p = w / sw
                # entropy in nats: ln(sw) + beta * E[d]
                h_nats = np.log(sw) + beta * float((di * p).sum())
                h_bits = h_nats / np.log(2.0)
            diff = h_bits - target
            if abs(diff) <= tol:
                break
            if diff > 0:  # entropy too high -> narrow the kernel
                lo = beta
                beta = beta * 2.0 if not np.isfinite(hi) else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = beta / 2.0 if lo == 0.0 else 0.5 * (beta + lo)
        P[i, idx] = p
        achieved[i] = h_bits
    return P, achieved


def joint_probabilities(X: np.ndarray, perplexity: float,
                        tol: float = 1e-5) -> np.ndarray:
    """Symmetrized affinities: P = (P_c + P_c^T) / 2n; sums to 1."""
    n = X.shape[0]
    if perplexity >= (n - 1) / 3:
        raise ConfigError(
            f"perplexity {perplexity} infeasible for n = {n} (needs perplexity < (n-1)/3)"
        )
    cond, _ = binary_search_affinities(_sq_distances(X), perplexity, tol=tol)
    return (cond + cond.T) / (2.0 * n)


def _kl_and_grad(P: np.ndarray, Y: np.ndarray) -> tuple[float, np.ndarray]:
    d2 = _sq_distances(Y)
    num = 1.0 / (1.0 + d2)
    np.fill_diagonal(num, 0.0)
    denom = num.sum()
    Q = num / denom
    mask = P > 0
    kl = float(np.sum(P[mask] * np.log(P[mask] / np.maximum(Q[mask], 1e-300))))
    PQn = (P - Q) * num
    grad = 4.0 * ((np.diag(PQn.sum(axis=1)) - PQn) @ Y)
    return kl, grad


def _kl_only(P: np.ndarray, Y: np.ndarray) -> float:
    d2 = _sq_distances(Y)
    num = 1.0 / (1.0 + d2)
    np.fill_diagonal(num, 0.0)
    Q = num / num.sum()
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / np.maximum(Q[mask], 1e-300))))


def tsne(
    X: np.ndarray,
    config: EmbedConfig | None = None,
    init_coords: np.ndarray | None = None,
) -> tuple[np.ndarray, list[float]]:
    """Embed rows of X into 2-D. Returns (coords, post-exaggeration KL trace).

    init_coords (n, 2) overrides the configured init; spectral init without
    explicit coordinates treats a square symmetric X as a Laplacian and uses
    its second and third eigenvectors.
    """
    config = config or EmbedConfig()
    X = check_matrix(X, min_samples=5)
    n = X.shape[0]
    P = joint_probabilities(X, config.perplexity)

    rng = np.random.default_rng(check_seed(config.seed))
    if init_coords is not None:
        Y = np.asarray(init_coords, dtype=np.float64).copy()
        if Y.shape != (n, 2):
            raise DataError(f"init coords must be (n, 2), got {Y.shape}")
        sd = Y.std()
        Y = Y * (1e-4 / sd) if sd > 0 else Y
    elif config.init == "spectral":
        if X.shape[1] != n or not np.allclose(X, X.T, atol=1e-10):
            raise ConfigError(
                "spectral init without init_coords needs a square symmetric feature matrix"
            )
        _, vecs = np.linalg.eigh(X)
        Y = vecs[:, 1:3].copy()
        sd = Y.std()
        Y = Y * (1e-4 / sd) if sd > 0 else Y
    else:
        Y = rng.normal(0.0, 1e-4, size=(n, 2))

    velocity = np.zeros_like(Y)
    lr = config.learning_rate
    kl_trace: list[float] = []

    P_eff = P * config.early_exaggeration
    kl_prev = None
    for it in range(config.iterations):
        if it == config.exaggeration_iters:
            P_eff = P
            kl_prev = _kl_only(P_eff, Y)
            kl_trace.append(kl_prev)
        momentum = (
            config.momentum_early
            if it < config.exaggeration_iters
            else config.momentum_late
        )
        _, grad = _kl_and_grad(P_eff, Y)
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite embedding gradient at iteration {it}")

        if it < config.exaggeration_iters:
            velocity = momentum * velocity - lr * grad
            Y = Y + velocity
            continue

        # monotone phase: halve the step until KL does not increase
        step = momentum * velocity - lr * grad
        kl_new = _kl_only(P_eff, Y + step)
        while kl_new > kl_prev and lr > _MIN_STEP:
            lr *= 0.5
            velocity[:] = 0.0
            step = -lr * grad
            kl_new = _kl_only(P_eff, Y + step)
        if kl_new > kl_prev:
            kl_trace.append(kl_prev)
            break
        Y = Y + step
        velocity = step
        kl_prev = kl_new
        kl_trace.append(kl_new)

    if not kl_trace:  # iteration budget ended inside the exaggeration phase
        kl_trace.append(_kl_only(P, Y))
    return Y - Y.mean(axis=0), kl_trace


class TSNEEmbedding(BaseEstimator):
    """Estimator facade over the exact embedding."""

    def __init__(self, perplexity: float = 15.0, iterations: int = 1000,
                 learning_rate: float = 200.0, init: str = "spectral",
                 seed: int = 0):
        self.perplexity = perplexity
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.init = init
        self.seed = seed

    def fit_transform(self, X, y=None, init_coords=None):
        config = EmbedConfig(
            perplexity=self.perplexity,
            iterations=self.iterations,
            learning_rate=self.learning_rate,
            init=self.init,
            seed=self.seed,
        )
        self.embedding_, self.kl_trace_ = tsne(X, config, init_coords=init_coords)
        return self.embedding_

    def fit(self, X, y=None, **kwargs):
        self.fit_transform(X, y, **kwargs)
        return self


# ---------------------------------------------------------------------------
# Scatter export
# ---------------------------------------------------------------------------

_OUTCOME_COLORS = {
    "TN": "#1f77b4",
    "FN": "#9467bd",
    "TP": "#d62728",
    "FP": "#ff7f0e",
    "": "#7f7f7f",
}
_MARKERS = ("circle", "square", "diamond", "triangle", "cross")


def _marker_svg(shape: str, x: float, y: float, r: float, color: str) -> str:
    if shape == "circle":
        return f'<circle cx="{fmt(x)}" cy="{fmt(y)}" r="{fmt(r)}" fill="{color}"/>'
    if shape == "square":
        return (
            f'<rect x="{fmt(x - r)}" y="{fmt(y - r)}" width="{fmt(2 * r)}" '
            f'height="{fmt(2 * r)}" fill="{color}"/>'
        )
    if shape == "diamond":
        pts = f"{fmt(x)},{fmt(y - r)} {fmt(x + r)},{fmt(y)} {fmt(x)},{fmt(y + r)} {fmt(x - r)},{fmt(y)}"
        return f'<polygon points="{pts}" fill="{color}"/>'
    if shape == "triangle":
        pts = f"{fmt(x)},{fmt(y - r)} {fmt(x + r)},{fmt(y + r)} {fmt(x - r)},{fmt(y + r)}"
        return f'<polygon points="{pts}" fill="{color}"/>'
    # cross
    return (
        f'<path d="M {fmt(x - r)} {fmt(y)} H {fmt(x + r)} M {fmt(x)} {fmt(y - r)} '
        f'V {fmt(y + r)}" stroke="{color}" stroke-width="2"/>'
    )


def export_scatter(
    embedding: np.ndarray,
    manifest: list[dict],
    cluster_labels,
    csv_path: str,
    svg_path: str,
    width: int = 640,
    height: int = 480,
) -> None:
    """CSV (scan_id, x, y, cluster, group, outcome) and a legendized SVG.

    Output bytes depend only on the inputs: floats use the canonical
    9-significant-digit format and elements are emitted in input order.
    """
    emb = np.asarray(embedding, dtype=np.float64)
    labels = np.asarray(cluster_labels)
    if emb.shape[0] != len(manifest) or labels.size != len(manifest):
        raise DataError("embedding, labels and manifest lengths differ")

    rows = []
    for entry, (x, y), lab in zip(manifest, emb, labels):
        rows.append(
            [
                entry.get("scan_id", ""),
                float(x),
                float(y),
                int(lab),
                entry.get("group", ""),
                entry.get("outcome", ""),
            ]
        )
    write_csv(csv_path, ["scan_id", "x", "y", "cluster", "group", "outcome"], rows)

    margin = 40.0
    lo = emb.min(axis=0)
    hi = emb.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)

    def sx(v):
        return margin + (v - lo[0]) / span[0] * (width - 2 * margin)

    def sy(v):
        return height - margin - (v - lo[1]) / span[1] * (height - 2 * margin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for entry, (x, y), lab in zip(manifest, emb, labels):
        color = _OUTCOME_COLORS.get(entry.get("outcome", ""), _OUTCOME_COLORS[""])
        shape = _MARKERS[int(lab) % len(_MARKERS)]
        parts.append(_marker_svg(shape, sx(x), sy(y), 4.0, color))

    seen_outcomes = sorted({e.get("outcome", "") for e in manifest if e.get("outcome")})
    seen_clusters = sorted({int(l) for l in labels})
    ly = 16.0
    for o in seen_outcomes:
        parts.append(_marker_svg("circle", 14.0, ly, 4.0, _OUTCOME_COLORS.get(o, "#7f7f7f")))
        parts.append(f'<text x="24" y="{fmt(ly + 4)}" font-size="12">{o}</text>')
        ly += 16.0
    for c in seen_clusters:
        parts.append(_marker_svg(_MARKERS[c % len(_MARKERS)], 14.0, ly, 4.0, "#333333"))
        parts.append(f'<text x="24" y="{fmt(ly + 4)}" font-size="12">cluster {c}</text>')
        ly += 16.0
    parts.append("</svg>")
    with open(svg_path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
