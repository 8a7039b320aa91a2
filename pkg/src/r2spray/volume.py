"""3D scalar volumes on regular grids: sampling, resampling, warping.

A volume couples a dense data block with voxel spacing and a grid-to-world
affine. Data is held as an (nx, ny, nz) array; flattened views use x-fastest
(Fortran) order so file I/O stays copy-free.

All operations are pure: they never mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, GridMismatchError

__all__ = [
    "Volume3D",
    "AffineTransform",
    "DisplacementField",
    "trilinear_sample",
    "resample",
    "apply_displacement",
]

_DET_EPS = 1e-12


@dataclass(frozen=True)
class Volume3D:
    """A scalar grid with spacing (mm) and a 4x4 grid-to-world affine."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise DataError(f"volume data must be 3-D, got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise DataError(f"spacing must be 3 positive reals, got {self.spacing}")
        if self.affine is None:
            affine = np.diag([spacing[0], spacing[1], spacing[2], 1.0])
        else:
            affine = np.asarray(self.affine, dtype=np.float64)
        if affine.shape != (4, 4):
            raise DataError(f"affine must be 4x4, got {affine.shape}")
        if abs(np.linalg.det(affine)) <= _DET_EPS:
            raise DataError("grid-to-world affine is not invertible")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", affine)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def with_data(self, data: np.ndarray) -> "Volume3D":
        """Same grid, new values."""
        return Volume3D(data=data, spacing=self.spacing, affine=self.affine)

    def same_grid(self, other: "Volume3D", tol: float = 1e-9) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=tol)
            and np.allclose(self.affine, other.affine, atol=tol)
        )

    def ravel(self) -> np.ndarray:
        """Flat copy in x-fastest order."""
        return self.data.ravel(order="F")

    def world_coords(self) -> np.ndarray:
        """World coordinates of every voxel centre, shape (n_voxels, 3), x-fastest."""
        ii, jj, kk = np.meshgrid(
            np.arange(self.dims[0]),
            np.arange(self.dims[1]),
            np.arange(self.dims[2]),
            indexing="ij",
        )
        ijk = np.stack(
            [ii.ravel(order="F"), jj.ravel(order="F"), kk.ravel(order="F")], axis=1
        ).astype(np.float64)
        return ijk @ self.affine[:3, :3].T + self.affine[:3, 3]


@dataclass(frozen=True)
class AffineTransform:
    """World-to-world affine map (mm), last row [0, 0, 0, 1]."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise DataError(f"transform matrix must be 4x4, got {m.shape}")
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=1e-12):
            raise DataError("transform last row must be [0, 0, 0, 1]")
        if abs(np.linalg.det(m)) <= _DET_EPS:
            raise DataError("transform is not invertible")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(4))

    @classmethod
    def translation(cls, offset) -> "AffineTransform":
        m = np.eye(4)
        m[:3, 3] = np.asarray(offset, dtype=np.float64)
        return cls(m)

    def inverse(self) -> "AffineTransform":
        return AffineTransform(np.linalg.inv(self.matrix))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts @ self.matrix[:3, :3].T + self.matrix[:3, 3]


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel world-space displacement (mm) defined on the target grid."""

    dx: Volume3D
    dy: Volume3D
    dz: Volume3D

    def __post_init__(self):
        if not (self.dx.same_grid(self.dy) and self.dx.same_grid(self.dz)):
            raise GridMismatchError("displacement components must share one grid")

    @property
    def grid(self) -> Volume3D:
        return self.dx

    def vectors(self) -> np.ndarray:
        """Displacements per voxel, shape (n_voxels, 3), x-fastest order."""
        return np.stack([self.dx.ravel(), self.dy.ravel(), self.dz.ravel()], axis=1)


def _world_to_grid(vol: Volume3D, world_points: np.ndarray) -> np.ndarray:
    inv = np.linalg.inv(vol.affine)
    pts = np.atleast_2d(np.asarray(world_points, dtype=np.float64))
    return pts @ inv[:3, :3].T + inv[:3, 3]


def _sample_grid(vol: Volume3D, grid_points: np.ndarray, oob_value: float) -> np.ndarray:
    """Trilinear interpolation at fractional grid coordinates.

    Points outside the node hull [0, n-1] in any axis return oob_value.
    """
    g = np.atleast_2d(grid_points)
    nx, ny, nz = vol.dims
    upper = np.array([nx - 1, ny - 1, nz - 1], dtype=np.float64)
    inside = np.all((g >= 0.0) & (g <= upper), axis=1)

    out = np.full(g.shape[0], float(oob_value), dtype=np.float64)
    if not inside.any():
        return out

    p = g[inside]
    # clip the base corner so exact upper-edge points interpolate with frac 1.0
    i0 = np.minimum(np.floor(p).astype(np.intp), np.maximum(upper - 1, 0).astype(np.intp))
    f = p - i0
    i1 = np.minimum(i0 + 1, upper.astype(np.intp))

    d = vol.data
    x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
    x1, y1, z1 = i1[:, 0], i1[:, 1], i1[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]

    c00 = d[x0, y0, z0] * (1 - fx) + d[x1, y0, z0] * fx
    c01 = d[x0, y0, z1] * (1 - fx) + d[x1, y0, z1] * fx
    c10 = d[x0, y1, z0] * (1 - fx) + d[x1, y1, z0] * fx
    c11 = d[x0, y1, z1] * (1 - fx) + d[x1, y1, z1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    out[inside] = c0 * (1 - fz) + c1 * fz
    return out


def trilinear_sample(vol: Volume3D, world_points, oob_value: float = 0.0):
    """Sample the volume at world-space points (mm).

    Accepts one (3,) point or an (n, 3) array; returns a scalar or (n,) array.
    Out-of-hull points return ``oob_value``.
    """
    pts = np.asarray(world_points, dtype=np.float64)
    single = pts.ndim == 1
    values = _sample_grid(vol, _world_to_grid(vol, pts), oob_value)
    return float(values[0]) if single else values


def resample(
    vol: Volume3D,
    target_dims,
    target_spacing,
    target_affine=None,
    transform: AffineTransform | None = None,
    oob_value: float = 0.0,
) -> Volume3D:
    """Pull-resample onto a target grid through an optional world-to-world transform.

    Output voxel v takes the source value at transform^-1 (target_affine @ v).
    No anti-alias prefilter is applied.
    """
    target = Volume3D(
        data=np.zeros(tuple(int(n) for n in target_dims)),
        spacing=tuple(float(s) for s in target_spacing),
        affine=target_affine,
    )
    world = target.world_coords()
    if transform is not None:
        world = transform.inverse().apply(world)
    values = _sample_grid(vol, _world_to_grid(vol, world), oob_value)
    return target.with_data(values.reshape(target.dims, order="F"))


def downsample_grid(vol: Volume3D, target_spacing: float) -> tuple[tuple[int, int, int], np.ndarray]:
    """Grid covering the same world extent at isotropic target_spacing.

    Returns (dims, affine); spacing is (t, t, t). The new grid keeps the source
    orientation and origin, scaling each axis by spacing ratio.
    """
    t = float(target_spacing)
    dims = tuple(
        max(1, int(np.ceil(vol.dims[a] * vol.spacing[a] / t))) for a in range(3)
    )
    scale = np.diag([t / vol.spacing[0], t / vol.spacing[1], t / vol.spacing[2], 1.0])
    affine = vol.affine @ scale
    return dims, affine


def apply_displacement(
    vol: Volume3D, field: DisplacementField, oob_value: float = 0.0
) -> Volume3D:
    """Warp: output voxel v is sampled at world(v) + displacement(v).

    The field lives on the output grid.
    """
    grid = field.grid
    world = grid.world_coords() + field.vectors()
    values = _sample_grid(vol, _world_to_grid(vol, world), oob_value)
    return grid.with_data(values.reshape(grid.dims, order="F"))
