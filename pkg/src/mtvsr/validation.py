"""Small input-validation helpers shared across the package."""

from __future__ import annotations

import numpy as np

__all__ = ["check_affine", "check_dims", "check_positive", "check_same_grid"]


def check_affine(affine) -> np.ndarray:
    """Validate a 4x4 voxel-to-world transform and return a float64 copy."""
    a = np.array(affine, dtype=np.float64)
    if a.shape != (4, 4):
        raise ValueError(f"affine must be 4x4, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("affine contains non-finite values")
    if not np.allclose(a[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
        raise ValueError("affine last row must be (0, 0, 0, 1)")
    if abs(np.linalg.det(a[:3, :3])) <= 1e-12:
        raise ValueError("affine upper 3x3 block is singular")
    return a


def check_dims(shape) -> tuple[int, int, int]:
    if len(shape) != 3:
        raise ValueError(f"expected 3 dimensions, got {shape}")
    if any(int(n) < 1 for n in shape):
        raise ValueError(f"all dimensions must be >= 1, got {shape}")
    return tuple(int(n) for n in shape)


def check_positive(name: str, value: float) -> float:
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be positive and finite, got {value}")
    return value


def check_same_grid(a, b, what: str = "volumes", tol: float = 1e-6):
    """Raise if two Volume/GridSpec-like objects live on different lattices."""
    grid_a = a.grid if hasattr(a, "grid") else a
    grid_b = b.grid if hasattr(b, "grid") else b
    if not grid_a.same_geometry(grid_b, tol=tol):
        raise ValueError(
            f"{what} must share one grid: {grid_a.shape} vs {grid_b.shape} "
            "or affines differ"
        )
