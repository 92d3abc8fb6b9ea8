"""3-vector / 3x3-matrix numerics used by the frame construction.

Everything operates on plain float64 numpy arrays: vectors have shape (3,),
matrices shape (3, 3). The symmetric eigensolver runs cyclic Jacobi sweeps,
which stay accurate for degenerate spectra where the closed-form cubic loses
digits. All functions are pure and deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Asymmetry allowed in sym_eig3 inputs; callers symmetrize first.
SYM_TOL = 1e-9
# Relative eigenvalue gap below which a spectrum is reported degenerate.
EIG_TIE_REL = 1e-10

_JACOBI_OFF_TOL = 1e-14
_JACOBI_MAX_SWEEPS = 50
_SINGULAR_DET = 1e-12


def _as_mat3(m, name: str = "matrix") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.shape != (3, 3):
        raise ValueError(f"{name} must be 3x3, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError("non-finite matrix")
    return a


@dataclass(frozen=True)
class SymEig3:
    """Eigendecomposition of a symmetric 3x3 matrix.

    Eigenvalues ascend; eigenvector columns match the eigenvalue order and
    carry a canonical sign (largest-magnitude component non-negative, first
    index winning exact magnitude ties). `degenerate` is set when any two
    eigenvalues agree to EIG_TIE_REL relative to max(1, ||m||_F).
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    degenerate: bool


def sym_eig3(m) -> SymEig3:
    """Diagonalize a symmetric 3x3 matrix with cyclic Jacobi rotations."""
    a = _as_mat3(m).copy()
    if np.abs(a - a.T).max() > SYM_TOL:
        raise ValueError("matrix is not symmetric")
    scale = float(np.linalg.norm(a))
    a = 0.5 * (a + a.T)
    vecs = np.eye(3)
    if scale > 0.0:
        for _ in range(_JACOBI_MAX_SWEEPS):
            off = math.sqrt(2.0 * (a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2))
            if off <= _JACOBI_OFF_TOL * scale:
                break
            for p, q in ((0, 1), (0, 2), (1, 2)):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = 0.5 * (a[q, q] - a[p, p]) / apq
                # Smaller-magnitude root of t^2 + 2t*theta - 1 = 0: stable rotation.
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(1.0 + theta * theta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                rot = np.eye(3)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                vecs = vecs @ rot

    vals = np.diagonal(a).copy()
    order = np.argsort(vals, kind="stable")
    vals = vals[order]
    vecs = vecs[:, order]
    for k in range(3):
        col = vecs[:, k]
        lead = int(np.argmax(np.abs(col)))
        if col[lead] < 0.0:
            vecs[:, k] = -col
    tie = EIG_TIE_REL * max(1.0, scale)
    degenerate = bool(vals[1] - vals[0] <= tie or vals[2] - vals[1] <= tie)
    return SymEig3(eigenvalues=vals, eigenvectors=vecs, degenerate=degenerate)


def cross(a, b) -> np.ndarray:
    """Right-handed cross product of two 3-vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.array(
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    )


def orthonormalize(m) -> np.ndarray:
    """Project a 3x3 matrix with independent columns onto SO(3).

    Gram-Schmidt in column order: column 1 is normalized, column 2 is
    orthogonalized against it, column 3 is their cross product, so the result
    is always a proper rotation (det +1), never a reflection.
    """
    a = _as_mat3(m)
    if abs(float(np.linalg.det(a))) <= _SINGULAR_DET:
        raise ValueError("degenerate basis")
    x = a[:, 0]
    x = x / np.linalg.norm(x)
    y = a[:, 1] - (x @ a[:, 1]) * x
    ny = float(np.linalg.norm(y))
    if ny <= _SINGULAR_DET:
        raise ValueError("degenerate basis")
    y = y / ny
    z = cross(x, y)
    return np.column_stack((x, y, z))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation matrix via a normalized Gaussian quaternion."""
    q = rng.normal(size=4)
    q = q / np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    )
