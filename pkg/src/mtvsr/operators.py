"""Forward model mapping a high-resolution volume to a thick-sliced scan.

The projection is the chain: rigid pull-resampling of the HR volume onto an
intermediate grid aligned with the LR scan (subdivided along the slice
axis), 1D convolution with the slice-selection profile, and decimation onto
the LR lattice. Resampling weights are precomputed as a sparse matrix and
the blur/decimation is applied as strided kernel taps, so the adjoint is
exact by construction: transposed weights, correlation, zero-insertion.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .validation import check_affine, check_dims, check_positive, check_same_grid
from .volume import GridSpec, Volume, voxel_map

__all__ = [
    "AcquisitionMeta",
    "SliceProfile",
    "ProjectionOperator",
    "make_slice_profile",
    "make_projection",
    "apply",
    "apply_adjoint",
    "simulate_lr",
    "meta_from_volume",
    "downsample_meta",
]

_AXES = {"x": 0, "y": 1, "z": 2}

# FWHM = 2*sqrt(2*ln 2)*sigma
_FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))


@dataclass(frozen=True)
class SliceProfile:
    """1D slice-selection kernel sampled on the intermediate lattice."""

    kind: str
    weights: np.ndarray
    half_width: int
    spacing_mm: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size != 2 * self.half_width + 1:
            raise ValueError("profile weights must have length 2*half_width + 1")
        if np.any(w < 0):
            raise ValueError("profile weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("profile weights must sum to 1")
        if not np.allclose(w, w[::-1], rtol=0.0, atol=1e-12):
            raise ValueError("profile must be symmetric about its center")
        w = np.ascontiguousarray(w)
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)


def make_slice_profile(kind: str, thickness_mm: float, spacing_mm: float) -> SliceProfile:
    """Build a normalized slice profile.

    ``gaussian`` uses FWHM = slice thickness, truncated at 4 sigma;
    ``rect`` is a boxcar of the given width with fractional edge bins.
    """
    thickness_mm = check_positive("thickness_mm", thickness_mm)
    spacing_mm = check_positive("spacing_mm", spacing_mm)
    if kind == "gaussian":
        sigma = thickness_mm * _FWHM_TO_SIGMA
        half = max(1, int(np.ceil(4.0 * sigma / spacing_mm - 1e-9)))
        offsets = np.arange(-half, half + 1) * spacing_mm
        weights = np.exp(-0.5 * (offsets / sigma) ** 2)
    elif kind == "rect":
        half_cells = thickness_mm / (2.0 * spacing_mm)
        half = max(0, int(np.ceil(half_cells - 0.5 - 1e-12)))
        k = np.arange(-half, half + 1, dtype=np.float64)
        weights = np.clip(
            np.minimum(k + 0.5, half_cells) - np.maximum(k - 0.5, -half_cells), 0.0, None
        )
    else:
        raise ValueError(f"unknown profile kind {kind!r}")
    weights = weights / weights.sum()
    return SliceProfile(kind, weights, half, float(spacing_mm))


@dataclass(frozen=True)
class AcquisitionMeta:
    """Geometry of one LR acquisition: grid, slice axis and thickness."""

    slice_axis: str
    slice_thickness_mm: float
    in_plane_voxel_mm: tuple[float, float]
    lr_to_world: np.ndarray
    lr_dims: tuple[int, int, int]

    def __post_init__(self):
        if self.slice_axis not in _AXES:
            raise ValueError(f"slice_axis must be one of x/y/z, got {self.slice_axis!r}")
        check_positive("slice_thickness_mm", self.slice_thickness_mm)
        for v in self.in_plane_voxel_mm:
            check_positive("in_plane_voxel_mm", v)
        affine = check_affine(self.lr_to_world)
        affine.flags.writeable = False
        object.__setattr__(self, "lr_to_world", affine)
        object.__setattr__(self, "lr_dims", check_dims(self.lr_dims))
        object.__setattr__(
            self, "in_plane_voxel_mm", tuple(float(v) for v in self.in_plane_voxel_mm)
        )

    @property
    def axis_index(self) -> int:
        return _AXES[self.slice_axis]

    @property
    def lr_grid(self) -> GridSpec:
        return GridSpec(self.lr_dims, self.lr_to_world)


def _snap(coords: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    rounded = np.round(coords)
    near = np.abs(coords - rounded) < tol
    coords[near] = rounded[near]
    return coords


def trilinear_pull_matrix(source_shape, coords: np.ndarray) -> sparse.csr_matrix:
    """Sparse interpolation matrix: rows are points, columns source voxels.

    ``coords`` is (3, n_points) in source voxel space. Corners falling
    outside the lattice are dropped (zero-fill convention).
    """
    coords = _snap(np.array(coords, dtype=np.float64).reshape(3, -1))
    n_pts = coords.shape[1]
    base = np.floor(coords).astype(np.int64)
    frac = coords - base
    dims = np.asarray(source_shape, dtype=np.int64).reshape(3, 1)

    rows, cols, vals = [], [], []
    for corner in itertools.product((0, 1), repeat=3):
        idx = base + np.asarray(corner, dtype=np.int64).reshape(3, 1)
        w = np.ones(n_pts)
        for ax in range(3):
            w *= frac[ax] if corner[ax] else 1.0 - frac[ax]
        valid = np.all((idx >= 0) & (idx < dims), axis=0) & (w > 0)
        rows.append(np.nonzero(valid)[0])
        cols.append(np.ravel_multi_index(tuple(idx[:, valid]), source_shape))
        vals.append(w[valid])
    mat = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_pts, int(np.prod(source_shape))),
    )
    return mat.tocsr()


class ProjectionOperator:
    """Linear map from an HR grid to one LR grid, with an exact adjoint.

    Instances are immutable after construction; ``apply_raw``/``adjoint_raw``
    are pure and safe to call concurrently.
    """

    def __init__(self, hr_grid: GridSpec, meta: AcquisitionMeta, profile: SliceProfile):
        self.hr_grid = hr_grid
        self.meta = meta
        self.profile = profile
        self.axis = meta.axis_index

        lr_spacing = meta.lr_grid.voxel_size
        hr_spacing = float(np.min(hr_grid.voxel_size))
        self.subdiv = max(1, int(np.ceil(lr_spacing[self.axis] / hr_spacing - 1e-9)))
        self.pad = profile.half_width

        n_lr = meta.lr_dims[self.axis]
        int_shape = list(meta.lr_dims)
        int_shape[self.axis] = (n_lr - 1) * self.subdiv + 1 + 2 * self.pad
        self.int_shape = tuple(int_shape)

        step = np.eye(4)
        step[self.axis, self.axis] = 1.0 / self.subdiv
        step[self.axis, 3] = -self.pad / self.subdiv
        int_affine = meta.lr_to_world @ step
        self.int_grid = GridSpec(self.int_shape, int_affine)

        coords = voxel_map(hr_grid.affine, self.int_grid)
        self._pull = trilinear_pull_matrix(hr_grid.shape, coords)
        self._push = self._pull.T.tocsr()

    @property
    def lr_grid(self) -> GridSpec:
        return self.meta.lr_grid

    def _taps(self, n_lr: int):
        span = self.subdiv * (n_lr - 1) + 1
        for j, w in enumerate(self.profile.weights):
            sl = [slice(None)] * 3
            sl[self.axis] = slice(j, j + span, self.subdiv)
            yield w, tuple(sl)

    def apply_raw(self, data: np.ndarray) -> np.ndarray:
        t = (self._pull @ data.ravel()).reshape(self.int_shape)
        out = np.zeros(self.meta.lr_dims)
        for w, sl in self._taps(self.meta.lr_dims[self.axis]):
            out += w * t[sl]
        return out

    def adjoint_raw(self, data: np.ndarray) -> np.ndarray:
        t = np.zeros(self.int_shape)
        for w, sl in self._taps(self.meta.lr_dims[self.axis]):
            t[sl] += w * data
        return (self._push @ t.ravel()).reshape(self.hr_grid.shape)

    def normal_raw(self, data: np.ndarray) -> np.ndarray:
        """A^T A in one call (the CG workhorse)."""
        return self.adjoint_raw(self.apply_raw(data))


def make_projection(
    hr_grid: GridSpec, meta: AcquisitionMeta, profile_kind: str = "gaussian"
) -> ProjectionOperator:
    """Assemble the projection operator for one acquisition.

    The slice profile is sampled at the intermediate-grid spacing along the
    slice axis (the LR slice spacing divided by the subdivision factor).
    """
    lr_spacing = meta.lr_grid.voxel_size[meta.axis_index]
    hr_spacing = float(np.min(hr_grid.voxel_size))
    subdiv = max(1, int(np.ceil(lr_spacing / hr_spacing - 1e-9)))
    profile = make_slice_profile(profile_kind, meta.slice_thickness_mm, lr_spacing / subdiv)
    return ProjectionOperator(hr_grid, meta, profile)


def apply(op: ProjectionOperator, y: Volume) -> Volume:
    """Project an HR volume to the operator's LR grid."""
    check_same_grid(y, op.hr_grid, "projection input")
    return Volume(op.apply_raw(y.data), op.meta.lr_to_world)


def apply_adjoint(op: ProjectionOperator, x: Volume) -> Volume:
    """Exact adjoint of :func:`apply`."""
    check_same_grid(x, op.lr_grid, "adjoint input")
    return Volume(op.adjoint_raw(x.data), op.hr_grid.affine)


def simulate_lr(
    y: Volume,
    meta: AcquisitionMeta,
    profile_kind: str = "gaussian",
    noise_percent: float = 0.0,
    seed: int = 0,
) -> Volume:
    """Degrade an HR volume to a thick-sliced scan with Rician noise.

    The noise scale is ``noise_percent/100 * max(y)``; the magnitude of the
    noisy complex signal is returned. Deterministic for a fixed seed.
    """
    if noise_percent < 0:
        raise ValueError("noise_percent must be >= 0")
    op = make_projection(y.grid, meta, profile_kind)
    clean = op.apply_raw(y.data)
    if noise_percent == 0:
        return Volume(np.abs(clean), meta.lr_to_world)
    sigma = noise_percent / 100.0 * float(y.data.max())
    rng = np.random.default_rng(seed)
    real = clean + sigma * rng.standard_normal(clean.shape)
    imag = sigma * rng.standard_normal(clean.shape)
    return Volume(np.hypot(real, imag), meta.lr_to_world)


def meta_from_volume(lr: Volume, slice_thickness_mm: float | None = None) -> AcquisitionMeta:
    """Derive acquisition metadata from a scan's header geometry.

    The slice axis is the voxel axis with the largest spacing; thickness
    defaults to the slice spacing (no gap).
    """
    spacing = lr.voxel_size
    axis = int(np.argmax(spacing))
    in_plane = tuple(float(spacing[a]) for a in range(3) if a != axis)
    return AcquisitionMeta(
        slice_axis="xyz"[axis],
        slice_thickness_mm=float(slice_thickness_mm or spacing[axis]),
        in_plane_voxel_mm=in_plane,
        lr_to_world=lr.affine,
        lr_dims=lr.shape,
    )


def downsample_meta(
    hr_grid: GridSpec,
    axis: str,
    factor: float,
    thickness_mm: float | None = None,
    shift_mm: float = 0.0,
) -> AcquisitionMeta:
    """Acquisition metadata for simulating a factor-N thick-sliced scan.

    The LR lattice keeps the HR in-plane sampling and groups ``factor`` HR
    slices per LR slice; ``shift_mm`` translates the stack along the slice
    direction in world space.
    """
    factor = check_positive("factor", factor)
    a = _AXES[axis]
    scale = np.eye(4)
    scale[a, a] = factor
    scale[a, 3] = (factor - 1) / 2.0
    lr_to_world = np.asarray(hr_grid.affine) @ scale
    if shift_mm:
        direction = lr_to_world[:3, a]
        direction = direction / np.linalg.norm(direction)
        lr_to_world = lr_to_world.copy()
        lr_to_world[:3, 3] += shift_mm * direction
    dims = list(hr_grid.shape)
    dims[a] = max(1, int(dims[a] / factor + 1e-9))
    spacing = GridSpec(tuple(dims), lr_to_world).voxel_size
    in_plane = tuple(float(spacing[i]) for i in range(3) if i != a)
    return AcquisitionMeta(
        slice_axis=axis,
        slice_thickness_mm=float(thickness_mm or spacing[a]),
        in_plane_voxel_mm=in_plane,
        lr_to_world=lr_to_world,
        lr_dims=tuple(dims),
    )
