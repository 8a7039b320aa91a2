"""R2* relaxometry, 3D CNN classification, relevance heatmapping and
spectral heatmap clustering on synthetic phantoms."""

from .cohort import (
    Metrics,
    SplitPlan,
    SubjectRecord,
    aggregate_runs,
    compute_metrics,
    make_splits,
    propensity_match,
)
from .embedding import EmbedConfig, TSNEEmbedding, tsne
from .network import ConvNet3D, TrainConfig, VolumeNetClassifier, parameter_count
from .nifti import read_nifti, read_nifti_stack, write_nifti, write_nifti_stack
from .relaxometry import (
    MultiEchoSeries,
    PhantomSpec,
    R2StarMap,
    fit_r2star_map,
    fit_r2star_voxel,
    generate_phantom,
)
from .relevance import Heatmap, RelevanceConfig, lrp_heatmap, relevance_guided_loss
from .spray import (
    SpectralHeatmapClustering,
    build_affinity,
    eigengap_select,
    prepare_heatmaps,
    spectral_cluster,
    spectral_decompose,
)
from .volume import (
    AffineTransform,
    DisplacementField,
    Volume3D,
    apply_displacement,
    resample,
    trilinear_sample,
)

__version__ = "0.1.0"

__all__ = [
    "AffineTransform",
    "ConvNet3D",
    "DisplacementField",
    "EmbedConfig",
    "Heatmap",
    "Metrics",
    "MultiEchoSeries",
    "PhantomSpec",
    "R2StarMap",
    "RelevanceConfig",
    "SpectralHeatmapClustering",
    "SplitPlan",
    "SubjectRecord",
    "TSNEEmbedding",
    "TrainConfig",
    "Volume3D",
    "VolumeNetClassifier",
    "aggregate_runs",
    "apply_displacement",
    "build_affinity",
    "compute_metrics",
    "eigengap_select",
    "fit_r2star_map",
    "fit_r2star_voxel",
    "generate_phantom",
    "lrp_heatmap",
    "make_splits",
    "parameter_count",
    "prepare_heatmaps",
    "propensity_match",
    "read_nifti",
    "read_nifti_stack",
    "relevance_guided_loss",
    "resample",
    "spectral_cluster",
    "spectral_decompose",
    "trilinear_sample",
    "tsne",
    "write_nifti",
    "write_nifti_stack",
]
