"""3D scalar volumes on affine grids, plus the finite-difference machinery.

A :class:`Volume` couples a 3D data array with a 4x4 voxel-to-world affine
(in mm). All reconstruction code treats volumes as immutable values; the
operations here are pure functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .validation import check_affine, check_dims

__all__ = [
    "Volume",
    "GridSpec",
    "GradientField",
    "gradient",
    "gradient_adjoint",
    "gradient_raw",
    "gradient_adjoint_raw",
    "resample",
    "world_bounding_grid",
]


def _voxel_size(affine: np.ndarray) -> np.ndarray:
    """Per-axis voxel size in mm (column norms of the linear part)."""
    return np.sqrt((affine[:3, :3] ** 2).sum(axis=0))


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a 3D sampling lattice: shape plus voxel-to-world affine."""

    shape: tuple[int, int, int]
    affine: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        check_dims(self.shape)
        affine = check_affine(self.affine)
        affine.flags.writeable = False
        object.__setattr__(self, "affine", affine)

    @property
    def voxel_size(self) -> np.ndarray:
        return _voxel_size(self.affine)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.shape))

    def voxel_centers_world(self) -> np.ndarray:
        """World coordinates of all voxel centers, shape (n_voxels, 3)."""
        idx = np.indices(self.shape).reshape(3, -1)
        homo = np.vstack([idx, np.ones((1, idx.shape[1]))])
        return (self.affine @ homo)[:3].T

    def is_isotropic(self, spacing: float = 1.0, tol: float = 1e-6) -> bool:
        return bool(np.all(np.abs(self.voxel_size - spacing) <= tol))

    def same_geometry(self, other: "GridSpec", tol: float = 1e-6) -> bool:
        return self.shape == other.shape and np.allclose(
            self.affine, other.affine, atol=tol, rtol=0.0
        )


@dataclass(frozen=True)
class Volume:
    """A 3D scalar image with voxel-to-world geometry.

    ``data`` is stored as a read-only float64 array; construct a new Volume
    instead of mutating in place.
    """

    data: np.ndarray
    affine: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume data contains non-finite values")
        data = np.ascontiguousarray(data)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        affine = check_affine(self.affine)
        affine.flags.writeable = False
        object.__setattr__(self, "affine", affine)
        check_dims(self.shape)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_size(self) -> np.ndarray:
        return _voxel_size(self.affine)

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.shape, self.affine)

    def with_data(self, data: np.ndarray) -> "Volume":
        """Same geometry, new samples."""
        return Volume(data, self.affine)

    def allclose(self, other: "Volume", rtol: float = 1e-7, atol: float = 0.0) -> bool:
        return self.grid.same_geometry(other.grid) and np.allclose(
            self.data, other.data, rtol=rtol, atol=atol
        )


@dataclass(frozen=True)
class GradientField:
    """Per-voxel forward-difference 3-vectors, in intensity per mm.

    ``values`` has shape (3, nx, ny, nz); component order follows the volume
    axes. The far slice along each axis carries a zero difference (replicate
    boundary).
    """

    values: np.ndarray
    voxel_size: tuple[float, float, float]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 4 or values.shape[0] != 3:
            raise ValueError(f"gradient field must have shape (3, nx, ny, nz), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("gradient field contains non-finite values")
        values = np.ascontiguousarray(values)
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "voxel_size", tuple(float(v) for v in self.voxel_size))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape[1:]

    def magnitude(self) -> np.ndarray:
        return np.sqrt((self.values ** 2).sum(axis=0))


def gradient_raw(data: np.ndarray, voxel_size) -> np.ndarray:
    """Forward differences scaled by 1/voxel_size, zero at the far boundary.

    Operates on a bare array; shape out is (3,) + data.shape.
    """
    out = np.zeros((3,) + data.shape, dtype=np.float64)
    out[0, :-1, :, :] = np.diff(data, axis=0) / voxel_size[0]
    out[1, :, :-1, :] = np.diff(data, axis=1) / voxel_size[1]
    out[2, :, :, :-1] = np.diff(data, axis=2) / voxel_size[2]
    return out


def gradient_adjoint_raw(values: np.ndarray, voxel_size) -> np.ndarray:
    """Exact adjoint of :func:`gradient_raw` (a negative divergence).

    For each axis the adjoint of the forward difference with replicate
    boundary is (g[i-1] - g[i]) / h in the interior, -g[0]/h at the near
    face and +g[n-2]/h at the far face.
    """
    out = np.zeros(values.shape[1:], dtype=np.float64)
    for axis in range(3):
        g = values[axis]
        h = voxel_size[axis]
        n = g.shape[axis]
        if n == 1:
            continue
        sl_head = [slice(None)] * 3
        sl_head[axis] = slice(0, n - 1)
        sl_tail = [slice(None)] * 3
        sl_tail[axis] = slice(1, n)
        out[tuple(sl_head)] -= g[tuple(sl_head)] / h
        out[tuple(sl_tail)] += g[tuple(sl_head)] / h
    return out


def gradient(v: Volume) -> GradientField:
    """Finite forward-difference gradient of a volume, in intensity/mm."""
    vs = v.voxel_size
    return GradientField(gradient_raw(v.data, vs), tuple(vs))


def gradient_adjoint(g: GradientField) -> Volume:
    """Adjoint of :func:`gradient` under the standard inner products.

    The returned volume lives on an implicit grid with the field's voxel
    size on a unit affine; callers holding the source geometry should
    prefer :func:`gradient_adjoint_raw`.
    """
    data = gradient_adjoint_raw(g.values, g.voxel_size)
    affine = np.diag(list(g.voxel_size) + [1.0])
    return Volume(data, affine)


_RESAMPLE_ORDERS = {"trilinear": 1, "cubic-bspline": 3}


def voxel_map(source_affine: np.ndarray, target: GridSpec) -> np.ndarray:
    """Coordinates of target voxel centers in source voxel space, (3, *shape)."""
    m = np.linalg.solve(source_affine, np.asarray(target.affine, dtype=np.float64))
    idx = np.indices(target.shape, dtype=np.float64)
    coords = np.einsum("ij,j...->i...", m[:3, :3], idx)
    return coords + m[:3, 3].reshape(3, 1, 1, 1)


def resample(v: Volume, target: GridSpec, method: str = "trilinear") -> Volume:
    """Interpolate a volume onto another grid; out-of-field voxels become 0."""
    if method not in _RESAMPLE_ORDERS:
        raise ValueError(f"unknown resampling method {method!r}")
    coords = voxel_map(v.affine, target)
    data = ndimage.map_coordinates(
        v.data,
        coords,
        order=_RESAMPLE_ORDERS[method],
        mode="grid-constant",
        cval=0.0,
        prefilter=method == "cubic-bspline",
    )
    return Volume(data, target.affine)


def in_field_mask(v: Volume, target: GridSpec) -> np.ndarray:
    """Target voxels whose centers fall inside v's sample lattice."""
    coords = voxel_map(v.affine, target)
    mask = np.ones(target.shape, dtype=bool)
    for axis in range(3):
        mask &= (coords[axis] >= 0.0) & (coords[axis] <= v.shape[axis] - 1.0)
    return mask


def world_bounding_grid(volumes, spacing: float = 1.0) -> GridSpec:
    """Smallest axis-aligned grid at the given spacing covering all inputs.

    The grid is aligned with the world axes; orientation of the inputs is
    handled by resampling, not by the reconstruction lattice.
    """
    if not volumes:
        raise ValueError("need at least one volume to derive a grid")
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for v in volumes:
        nx, ny, nz = v.shape
        corners = np.array(
            [
                [x, y, z, 1.0]
                for x in (-0.5, nx - 0.5)
                for y in (-0.5, ny - 0.5)
                for z in (-0.5, nz - 0.5)
            ]
        ).T
        world = (np.asarray(v.affine) @ corners)[:3]
        lo = np.minimum(lo, world.min(axis=1))
        hi = np.maximum(hi, world.max(axis=1))
    dims = np.maximum(1, np.ceil((hi - lo) / spacing - 1e-9).astype(int))
    affine = np.eye(4)
    affine[0, 0] = affine[1, 1] = affine[2, 2] = spacing
    affine[:3, 3] = lo + 0.5 * spacing
    return GridSpec(tuple(dims), affine)
