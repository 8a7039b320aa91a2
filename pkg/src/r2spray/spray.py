"""Spectral clustering of relevance heatmaps.

Heatmaps (optionally warped into a common template space) are downsampled to
an isotropic grid, flattened and L1-normalized into a sample-by-feature
matrix. A Gaussian k-NN affinity graph over the rows feeds the normalized
symmetric Laplacian L = I - D^-1/2 W D^-1/2; the eigengap picks the cluster
count and k-means on the row-normalized leading eigenvectors assigns labels.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.cluster import KMeans

from .errors import ConfigError, DataError, GridMismatchError, NumericError
from .textio import write_csv
from .validation import check_matrix, check_seed
from .volume import AffineTransform, DisplacementField, Volume3D, apply_displacement, downsample_grid, resample

__all__ = [
    "DataMatrix",
    "AffinityGraph",
    "SpectralDecomposition",
    "ClusterResult",
    "prepare_heatmaps",
    "build_affinity",
    "spectral_decompose",
    "eigengap_select",
    "spectral_cluster",
    "cluster_mean_heatmaps",
    "SpectralHeatmapClustering",
]

OUTCOMES = ("TP", "FP", "TN", "FN")
GROUPS = ("NC", "AD")


@dataclass(frozen=True)
class DataMatrix:
    """Flattened, downsampled, L1-normalized heatmaps with their manifest.

    kept_indices maps rows back to positions in the original heatmap list
    (zero-mass heatmaps are dropped); row_grid describes the grid a row
    reshapes to (Fortran order).
    """

    X: np.ndarray
    manifest: tuple[dict, ...]
    space: str
    excluded: tuple[dict, ...] = ()
    kept_indices: tuple[int, ...] = ()
    row_grid: Volume3D | None = None

    def __post_init__(self):
        if self.X.shape[0] != len(self.manifest):
            raise DataError("matrix rows do not align with the manifest")

    def row_volume(self, row: int) -> Volume3D:
        if self.row_grid is None:
            raise DataError("matrix carries no grid information")
        return self.row_grid.with_data(
            self.X[row].reshape(self.row_grid.dims, order="F")
        )


@dataclass(frozen=True)
class AffinityGraph:
    weights: np.ndarray
    k: int

    def __post_init__(self):
        W = self.weights
        if not np.allclose(W, W.T, atol=1e-12):
            raise DataError("affinity matrix must be symmetric")
        if np.any(np.diag(W) != 0):
            raise DataError("affinity diagonal must be zero")
        if W.min() < 0:
            raise DataError("affinity weights must be nonnegative")


@dataclass(frozen=True)
class SpectralDecomposition:
    eigenvalues: np.ndarray  # ascending
    eigenvectors: np.ndarray  # columns, orthonormal
    laplacian: np.ndarray


@dataclass(frozen=True)
class ClusterResult:
    k: int
    labels: np.ndarray
    eigengap: float
    composition: tuple[dict, ...] = ()  # one dict per cluster


def prepare_heatmaps(
    heatmaps: list[Volume3D],
    manifest: list[dict],
    space: str = "native",
    target_spacing: float = 2.0,
    transforms: list[AffineTransform] | None = None,
    displacements: list[DisplacementField] | None = None,
    template: Volume3D | None = None,
) -> DataMatrix:
    """Rows are flattened downsampled heatmaps, each scaled to unit L1 mass.

    space="native" downsamples each map on its own grid; space="warped"
    first carries it into template space via the per-sample affine and/or
    displacement field. Zero-mass heatmaps are excluded and reported.
    """
    if space not in ("native", "warped"):
        raise ConfigError(f"space must be native or warped, got {space!r}")
    if len(heatmaps) != len(manifest):
        raise DataError("heatmap list does not align with the manifest")
    if space == "warped" and transforms is None and displacements is None:
        raise ConfigError("warped space needs transforms or displacement fields")

    reference = template if template is not None else heatmaps[0]
    target_dims, target_affine = downsample_grid(reference, target_spacing)
    spacing3 = (target_spacing,) * 3

    rows = []
    kept: list[dict] = []
    kept_idx: list[int] = []
    excluded: list[dict] = []
    row_grid = Volume3D(
        data=np.zeros(target_dims), spacing=spacing3, affine=target_affine
    )
    for i, hm in enumerate(heatmaps):
        if space == "warped":
            vol = hm
            if displacements is not None:
                vol = apply_displacement(vol, displacements[i])
            tr = transforms[i] if transforms is not None else AffineTransform.identity()
            low = resample(vol, target_dims, spacing3, target_affine, transform=tr)
        else:
            dims_i, affine_i = downsample_grid(hm, target_spacing)
            if dims_i != target_dims:
                raise GridMismatchError(
                    f"heatmap {i} downsamples to {dims_i}, expected {target_dims}"
                )
            low = resample(hm, dims_i, spacing3, affine_i)
        row = low.ravel()
        mass = np.abs(row).sum()
        if mass <= 0.0:
            entry = dict(manifest[i])
            entry["reason"] = "zero relevance"
            excluded.append(entry)
            continue
        rows.append(row / mass)
        kept.append(dict(manifest[i]))
        kept_idx.append(i)
    if not rows:
        raise DataError("no usable heatmaps after exclusion")
    return DataMatrix(
        X=np.asarray(rows),
        manifest=tuple(kept),
        space=space,
        excluded=tuple(excluded),
        kept_indices=tuple(kept_idx),
        row_grid=row_grid,
    )


def build_affinity(X: np.ndarray, k: int = 10) -> AffinityGraph:
    """Gaussian k-NN graph, sigma = median k-th neighbor distance,
    symmetrized with max(W, W^T)."""
    X = check_matrix(X, min_samples=2)
    n = X.shape[0]
    if n < k + 1:
        raise DataError(f"need at least k+1 = {k + 1} samples, got {n}")
    sq = np.sum(X**2, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (X @ X.T), 0.0)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")
    knn = order[:, :k]
    kth = np.sqrt(d2[np.arange(n), order[:, k - 1]])
    sigma = float(np.median(kth))

    W = np.zeros((n, n))
    rows = np.repeat(np.arange(n), k)
    cols = knn.ravel()
    if sigma == 0.0:
        warnings.warn("duplicate rows give sigma = 0; falling back to binary weights")
        W[rows, cols] = 1.0
    else:
        W[rows, cols] = np.exp(-d2[rows, cols] / sigma**2)
    W = np.maximum(W, W.T)
    np.fill_diagonal(W, 0.0)
    return AffinityGraph(weights=W, k=k)


def spectral_decompose(graph: AffinityGraph | np.ndarray,
                       sample_ids: list[str] | None = None) -> SpectralDecomposition:
    """All eigenpairs of the normalized symmetric Laplacian, ascending."""
    W = graph.weights if isinstance(graph, AffinityGraph) else np.asarray(graph, dtype=np.float64)
    degrees = W.sum(axis=1)
    isolated = np.where(degrees <= 0)[0]
    if isolated.size:
        ids = (
            [sample_ids[i] for i in isolated]
            if sample_ids is not None
            else isolated.tolist()
        )
        raise DataError(f"isolated vertices (zero degree): {ids}")
    dinv = 1.0 / np.sqrt(degrees)
    lsym = np.eye(W.shape[0]) - (dinv[:, None] * W * dinv[None, :])
    lsym = 0.5 * (lsym + lsym.T)
    eigenvalues, eigenvectors = np.linalg.eigh(lsym)
    return SpectralDecomposition(
        eigenvalues=eigenvalues, eigenvectors=eigenvectors, laplacian=lsym
    )


def eigengap_select(eigenvalues, k_max: int = 10) -> int:
    """Largest gap between consecutive ascending eigenvalues, searched over
    k = 2..k_max; ties break to the smallest k."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    if lam.size < k_max + 1:
        raise DataError(f"need at least k_max+1 = {k_max + 1} eigenvalues, got {lam.size}")
    upper = min(k_max, lam.size - 1)
    gaps = lam[2 : upper + 1] - lam[1:upper]  # gap at k = index+2
    return int(np.argmax(gaps)) + 2


def _compose(labels: np.ndarray, manifest: tuple[dict, ...], k: int) -> tuple[dict, ...]:
    tables = []
    for c in range(k):
        counts = {g: {o: 0 for o in OUTCOMES} for g in GROUPS}
        size = 0
        for lab, entry in zip(labels, manifest):
            if lab != c:
                continue
            size += 1
            g = entry.get("group")
            o = entry.get("outcome")
            if g in counts and o in counts[g]:
                counts[g][o] += 1
        tables.append({"cluster": c, "size": size, "counts": counts})
    return tuple(tables)


def spectral_cluster(
    decomp: SpectralDecomposition,
    k: int,
    seed: int = 0,
    manifest: tuple[dict, ...] | None = None,
) -> ClusterResult:
    """k-means over the L2-row-normalized first k eigenvectors."""
    if k < 2:
        raise ConfigError("k must be >= 2")
    U = decomp.eigenvectors[:, :k].copy()
    norms = np.linalg.norm(U, axis=1)
    nz = norms > 0
    U[nz] /= norms[nz, None]
    km = KMeans(
        n_clusters=k,
        init="k-means++",
        n_init=50,
        max_iter=300,
        tol=1e-10,
        random_state=check_seed(seed),
    )
    labels = km.fit_predict(U)
    counts = np.bincount(labels, minlength=k)
    if np.any(counts == 0):
        raise NumericError(f"empty cluster after k-means (sizes {counts.tolist()})")
    lam = decomp.eigenvalues
    gap = float(lam[k] - lam[k - 1]) if k < lam.size else 0.0
    composition = _compose(labels, manifest, k) if manifest is not None else ()
    return ClusterResult(k=k, labels=labels, eigengap=gap, composition=composition)


def cluster_mean_heatmaps(
    heatmaps: list[Volume3D], labels
) -> tuple[list[Volume3D], list[int]]:
    """Elementwise mean per cluster on the common grid; returns (means, sizes)."""
    labels = np.asarray(labels)
    if len(heatmaps) != labels.size:
        raise DataError("labels do not align with heatmaps")
    first = heatmaps[0]
    for hm in heatmaps[1:]:
        if not first.same_grid(hm):
            raise GridMismatchError("heatmaps must share one grid for cluster means")
    means = []
    sizes = []
    for c in range(int(labels.max()) + 1):
        idx = np.where(labels == c)[0]
        sizes.append(int(idx.size))
        if idx.size == 0:
            means.append(first.with_data(np.zeros(first.dims)))
            continue
        acc = np.zeros(first.dims)
        for i in idx:
            acc += heatmaps[i].data
        means.append(first.with_data(acc / idx.size))
    return means, sizes


class SpectralHeatmapClustering(BaseEstimator, ClusterMixin):
    """Estimator facade: affinity graph, Laplacian spectrum, eigengap model
    selection and k-means assignment in one fit."""

    def __init__(self, n_neighbors: int = 10, n_clusters=None, k_max: int = 10,
                 seed: int = 0):
        self.n_neighbors = n_neighbors
        self.n_clusters = n_clusters  # None -> eigengap selection
        self.k_max = k_max
        self.seed = seed

    def fit(self, X, y=None, manifest=None):
        X = check_matrix(X, min_samples=3)
        graph = build_affinity(X, k=self.n_neighbors)
        decomp = spectral_decompose(graph)
        if self.n_clusters is None:
            k_max = min(self.k_max, X.shape[0] - 1)
            k = eigengap_select(decomp.eigenvalues, k_max=k_max)
        else:
            k = int(self.n_clusters)
        result = spectral_cluster(
            decomp, k, seed=self.seed,
            manifest=tuple(manifest) if manifest is not None else None,
        )
        self.affinity_ = graph.weights
        self.laplacian_ = decomp.laplacian
        self.eigenvalues_ = decomp.eigenvalues
        self.eigenvectors_ = decomp.eigenvectors
        self.n_clusters_ = result.k
        self.eigengap_ = result.eigengap
        self.labels_ = result.labels
        self.composition_ = result.composition
        return self

    def fit_predict(self, X, y=None, **kwargs):
        return self.fit(X, y, **kwargs).labels_


def write_spray_outputs(out_dir: str, matrix: DataMatrix, model:
                        SpectralHeatmapClustering,
                        means: list[Volume3D] | None = None) -> None:
    """CSV artifacts: eigenvalues, labels, composition (+ lsym features)."""
    import os

    from .nifti import write_nifti

    os.makedirs(out_dir, exist_ok=True)
    write_csv(
        os.path.join(out_dir, "eigenvalues.csv"),
        ["index", "eigenvalue"],
        [[i, float(v)] for i, v in enumerate(model.eigenvalues_)],
    )
    rows = []
    for entry, lab in zip(matrix.manifest, model.labels_):
        rows.append(
            [
                entry.get("scan_id", ""),
                int(lab),
                entry.get("group", ""),
                entry.get("outcome", ""),
            ]
        )
    write_csv(os.path.join(out_dir, "labels.csv"),
              ["scan_id", "cluster", "group", "outcome"], rows)
    comp_rows = []
    for table in model.composition_:
        for g in GROUPS:
            for o in OUTCOMES:
                comp_rows.append(
                    [table["cluster"], g, o, table["counts"][g][o]]
                )
    write_csv(os.path.join(out_dir, "composition.csv"),
              ["cluster", "group", "outcome", "count"], comp_rows)
    np.save(os.path.join(out_dir, "lsym.npy"), model.laplacian_)
    np.save(os.path.join(out_dir, "eigenvectors.npy"), model.eigenvectors_)
    if means is not None:
        for i, vol in enumerate(means):
            write_nifti(vol, os.path.join(out_dir, f"cluster_mean_{i}.nii"))
