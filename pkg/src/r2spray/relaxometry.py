"""Voxelwise mono-exponential decay fitting and synthetic phantom generation.

The decay model is S[i] = S[0] * exp(-t[i] * R2*) per voxel. Fitting uses
weighted log-linear least squares (weights S^2, which undoes the variance
distortion of the log transform), with an optional Levenberg-Marquardt
refinement seeded from the closed-form solution.

Phantoms are ellipsoidal "heads" with two symmetric deep-gray ellipsoids
whose decay rate is raised for one class, plus an optional class-conditional
decay offset in a non-brain shell (a planted shortcut feature).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, GridMismatchError, NumericError
from .volume import AffineTransform, Volume3D

__all__ = [
    "MultiEchoSeries",
    "R2StarMap",
    "RoiEllipsoid",
    "ConfoundSpec",
    "PhantomSpec",
    "PhantomSubject",
    "fit_r2star_voxel",
    "fit_r2star_map",
    "generate_phantom",
    "default_echo_times",
]


def default_echo_times(n_echoes: int = 6, spacing_s: float = 0.00492) -> tuple[float, ...]:
    """Echo times t[i] = (i+1) * spacing, in seconds (first echo = spacing)."""
    return tuple(spacing_s * (i + 1) for i in range(n_echoes))


@dataclass(frozen=True)
class MultiEchoSeries:
    """Echo-time-indexed signal volumes on a shared grid."""

    echo_times: tuple[float, ...]
    volumes: tuple[Volume3D, ...]

    def __post_init__(self):
        te = tuple(float(t) for t in self.echo_times)
        if len(te) < 2:
            raise DataError("a series needs at least 2 echoes")
        if any(b <= a for a, b in zip(te, te[1:])):
            raise DataError(f"echo times must be strictly increasing, got {te}")
        vols = tuple(self.volumes)
        if len(vols) != len(te):
            raise DataError(f"{len(vols)} volumes for {len(te)} echo times")
        for v in vols[1:]:
            if not vols[0].same_grid(v):
                raise GridMismatchError("echo volumes must share one grid")
        object.__setattr__(self, "echo_times", te)
        object.__setattr__(self, "volumes", vols)

    @property
    def grid(self) -> Volume3D:
        return self.volumes[0]

    def signal_array(self) -> np.ndarray:
        """Signals as (nx, ny, nz, n_echoes)."""
        return np.stack([v.data for v in self.volumes], axis=3)


@dataclass(frozen=True)
class R2StarMap:
    """Fitted decay-rate map with per-voxel diagnostics."""

    r2star: Volume3D
    s0: Volume3D
    r_squared: Volume3D
    valid_mask: Volume3D

    def __post_init__(self):
        for v in (self.s0, self.r_squared, self.valid_mask):
            if not self.r2star.same_grid(v):
                raise GridMismatchError("map components must share one grid")
        valid = self.valid_mask.data > 0.5
        if not np.all(np.isfinite(self.r2star.data[valid])):
            raise DataError("non-finite r2star on valid voxels")
        rsq = self.r_squared.data[valid]
        if rsq.size and (rsq.min() < -1e-12 or rsq.max() > 1 + 1e-12):
            raise DataError("r_squared outside [0, 1] on valid voxels")


def _check_echo_times(echo_times) -> np.ndarray:
    te = np.asarray(echo_times, dtype=np.float64)
    if te.size < 2:
        raise DataError("need at least 2 echoes")
    if np.ptp(te) == 0.0:
        raise NumericError("degenerate echo spacing: all echo times equal")
    return te


def _weighted_loglinear(signals: np.ndarray, te: np.ndarray):
    """Closed-form weighted fit of ln S on t for stacked voxels.

    signals: (n_voxels, n_echoes), all entries > 0.
    Returns (s0, r2star, r_squared) arrays of length n_voxels.
    """
    y = np.log(signals)
    w = signals**2
    sw = w.sum(axis=1)
    swt = (w * te).sum(axis=1)
    swtt = (w * te**2).sum(axis=1)
    swy = (w * y).sum(axis=1)
    swty = (w * te * y).sum(axis=1)
    denom = sw * swtt - swt**2
    slope = (sw * swty - swt * swy) / denom
    intercept = (swy - slope * swt) / sw

    fitted = intercept[:, None] + slope[:, None] * te
    ss_res = (w * (y - fitted) ** 2).sum(axis=1)
    ybar = swy / sw
    ss_tot = (w * (y - ybar[:, None]) ** 2).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        rsq = np.where(
            ss_tot > 1e-300,
            1.0 - ss_res / ss_tot,
            np.where(ss_res <= 1e-20, 1.0, 0.0),
        )
    return np.exp(intercept), -slope, np.clip(rsq, 0.0, 1.0)


def fit_r2star_voxel(signal, echo_times):
    """Fit one voxel. Returns (s0, r2star, r_squared, valid).

    A non-positive sample anywhere in the decay invalidates the voxel
    (the log transform is undefined); the estimates are then NaN.
    """
    te = _check_echo_times(echo_times)
    s = np.asarray(signal, dtype=np.float64)
    if s.shape != te.shape:
        raise DataError(f"signal length {s.size} != {te.size} echoes")
    if np.any(s <= 0.0) or not np.all(np.isfinite(s)):
        return float("nan"), float("nan"), float("nan"), False
    s0, r2, rsq = _weighted_loglinear(s[None, :], te)
    return float(s0[0]), float(r2[0]), float(rsq[0]), True


def _lm_refine(signals: np.ndarray, te: np.ndarray, s0: np.ndarray, r2: np.ndarray):
    from scipy.optimize import least_squares

    out_s0 = s0.copy()
    out_r2 = r2.copy()
    for i in range(signals.shape[0]):
        y = signals[i]

        def resid(p, y=y):
            return p[0] * np.exp(-te * p[1]) - y

        sol = least_squares(resid, x0=[s0[i], r2[i]], method="lm")
        out_s0[i], out_r2[i] = sol.x
    return out_s0, out_r2


def fit_r2star_map(
    series: MultiEchoSeries, mask: Volume3D | None = None, refine: bool = False
) -> R2StarMap:
    """Fit every voxel inside the mask (or all voxels when mask is None).

    Outside-mask voxels are zero-filled with valid_mask false. The fit is
    vectorized; results do not depend on any partitioning of the voxel set.
    """
    grid = series.grid
    if mask is not None and not grid.same_grid(mask):
        raise GridMismatchError("mask grid differs from series grid")
    te = _check_echo_times(series.echo_times)

    sig = series.signal_array().reshape(-1, te.size)
    inside = (
        np.ones(sig.shape[0], dtype=bool)
        if mask is None
        else (mask.data.reshape(-1) > 0.5)
    )
    positive = np.all(sig > 0.0, axis=1) & np.all(np.isfinite(sig), axis=1)
    fit_idx = inside & positive

    s0 = np.zeros(sig.shape[0])
    r2 = np.zeros(sig.shape[0])
    rsq = np.zeros(sig.shape[0])
    if fit_idx.any():
        f_s0, f_r2, f_rsq = _weighted_loglinear(sig[fit_idx], te)
        if refine:
            f_s0, f_r2 = _lm_refine(sig[fit_idx], te, f_s0, f_r2)
        s0[fit_idx], r2[fit_idx], rsq[fit_idx] = f_s0, f_r2, f_rsq

    shape = grid.dims
    return R2StarMap(
        r2star=grid.with_data(r2.reshape(shape)),
        s0=grid.with_data(s0.reshape(shape)),
        r_squared=grid.with_data(rsq.reshape(shape)),
        valid_mask=grid.with_data(fit_idx.reshape(shape).astype(np.float64)),
    )


# ---------------------------------------------------------------------------
# Phantom generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RoiEllipsoid:
    """Ellipsoid ROI: center/radii in mm relative to the volume centre.

    class_delta is added to the decay rate for the affected class.
    """

    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    r2star: float
    class_delta: float = 0.0

    def __post_init__(self):
        if any(r <= 0 for r in self.radii):
            raise ConfigError(f"ellipsoid radii must be positive, got {self.radii}")


@dataclass(frozen=True)
class ConfoundSpec:
    """Class-conditional decay offset in the non-brain shell.

    The shell is the region between inner_scale and outer_scale times the
    brain radii. It shifts the fitted map intensity outside the brain for
    the affected class, planting a shortcut feature.
    """

    r2star_offset: float = 25.0
    inner_scale: float = 1.05
    outer_scale: float = 1.35
    affected_class: str = "AD"


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (32, 32, 32)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    echo_times: tuple[float, ...] = field(default_factory=default_echo_times)
    s0_value: float = 1000.0
    background_r2star: float = 20.0
    outside_r2star: float = 10.0
    brain_radii_frac: tuple[float, float, float] = (0.36, 0.38, 0.34)
    roi_ellipsoids: tuple[RoiEllipsoid, ...] = ()
    noise_sigma: float = 0.0
    confound: ConfoundSpec | None = None
    pose_jitter_mm: float = 0.0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not self.roi_ellipsoids:
            object.__setattr__(self, "roi_ellipsoids", default_ganglia(self))

    def brain_radii_mm(self) -> tuple[float, float, float]:
        extent = [self.dims[a] * self.spacing[a] for a in range(3)]
        return tuple(self.brain_radii_frac[a] * extent[a] for a in range(3))


def default_ganglia(spec: PhantomSpec) -> tuple[RoiEllipsoid, RoiEllipsoid]:
    """Two ellipsoids mirrored about the x mid-plane, deep inside the brain."""
    rx, ry, rz = spec.brain_radii_mm()
    offset = 0.40 * rx
    radii = (0.28 * rx, 0.30 * ry, 0.30 * rz)
    value = spec.background_r2star + 10.0
    return (
        RoiEllipsoid(center=(-offset, 0.0, 0.0), radii=radii, r2star=value, class_delta=15.0),
        RoiEllipsoid(center=(+offset, 0.0, 0.0), radii=radii, r2star=value, class_delta=15.0),
    )


@dataclass(frozen=True)
class PhantomSubject:
    """One synthetic scan with ground truth and masks."""

    series: MultiEchoSeries
    truth: R2StarMap
    brain_mask: Volume3D
    guidance_mask: Volume3D
    template_transform: AffineTransform
    class_label: str
    confound_present: bool


def _ellipsoid_mask(coords: np.ndarray, center, radii) -> np.ndarray:
    d = (coords - np.asarray(center)) / np.asarray(radii)
    return (d**2).sum(axis=-1) <= 1.0


def generate_phantom(spec: PhantomSpec, class_label: str, seed: int) -> PhantomSubject:
    """Synthesize one subject. Deterministic given (spec, class_label, seed)."""
    if class_label not in ("NC", "AD"):
        raise ConfigError(f"class_label must be NC or AD, got {class_label!r}")
    rng = np.random.default_rng(seed)

    dims = tuple(int(n) for n in spec.dims)
    spacing = tuple(float(s) for s in spec.spacing)
    affine = np.diag([spacing[0], spacing[1], spacing[2], 1.0])
    grid = Volume3D(data=np.zeros(dims), spacing=spacing, affine=affine)

    # mm coordinates of voxel centres relative to the volume centre
    axes = [
        (np.arange(dims[a]) - (dims[a] - 1) / 2.0) * spacing[a] for a in range(3)
    ]
    xs, ys, zs = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([xs, ys, zs], axis=-1)

    jitter = np.zeros(3)
    if spec.pose_jitter_mm > 0:
        jitter = rng.uniform(-spec.pose_jitter_mm, spec.pose_jitter_mm, size=3)
    coords = coords - jitter  # shifts the whole head by +jitter in world space

    brain_radii = spec.brain_radii_mm()
    brain = _ellipsoid_mask(coords, (0.0, 0.0, 0.0), brain_radii)

    r2star = np.full(dims, spec.outside_r2star)
    r2star[brain] = spec.background_r2star

    delta_on = class_label == "AD"
    for roi in spec.roi_ellipsoids:
        m = _ellipsoid_mask(coords, roi.center, roi.radii)
        if not m.any():
            raise ConfigError(f"ROI at {roi.center} lies outside the volume")
        r2star[m] = roi.r2star + (roi.class_delta if delta_on else 0.0)

    confound_present = False
    if spec.confound is not None and class_label == spec.confound.affected_class:
        c = spec.confound
        outer = _ellipsoid_mask(coords, (0, 0, 0), [r * c.outer_scale for r in brain_radii])
        inner = _ellipsoid_mask(coords, (0, 0, 0), [r * c.inner_scale for r in brain_radii])
        shell = outer & ~inner
        r2star[shell] += c.r2star_offset
        confound_present = True

    s0 = np.full(dims, float(spec.s0_value))
    te = _check_echo_times(spec.echo_times)
    volumes = []
    for t in te:
        signal = s0 * np.exp(-t * r2star)
        if spec.noise_sigma > 0:
            signal = signal + rng.normal(0.0, spec.noise_sigma, size=dims)
        volumes.append(grid.with_data(signal))

    ones = grid.with_data(np.ones(dims))
    truth = R2StarMap(
        r2star=grid.with_data(r2star),
        s0=grid.with_data(s0),
        r_squared=ones,
        valid_mask=ones,
    )
    brain_vol = grid.with_data(brain.astype(np.float64))
    # template transform undoes the pose jitter (subject -> template world)
    transform = AffineTransform.translation(-jitter)
    return PhantomSubject(
        series=MultiEchoSeries(echo_times=tuple(te), volumes=tuple(volumes)),
        truth=truth,
        brain_mask=brain_vol,
        guidance_mask=brain_vol,
        template_transform=transform,
        class_label=class_label,
        confound_present=confound_present,
    )


def shell_mask(spec: PhantomSpec) -> np.ndarray | None:
    """Confound shell region on the unjittered grid, or None when disabled."""
    if spec.confound is None:
        return None
    dims = tuple(int(n) for n in spec.dims)
    axes = [
        (np.arange(dims[a]) - (dims[a] - 1) / 2.0) * spec.spacing[a] for a in range(3)
    ]
    xs, ys, zs = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([xs, ys, zs], axis=-1)
    radii = spec.brain_radii_mm()
    c = spec.confound
    outer = _ellipsoid_mask(coords, (0, 0, 0), [r * c.outer_scale for r in radii])
    inner = _ellipsoid_mask(coords, (0, 0, 0), [r * c.inner_scale for r in radii])
    return outer & ~inner
