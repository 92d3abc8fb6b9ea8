"""Charge-weighted PCA local frames.

Each atom gets an orthonormal right-handed basis built from its neighbourhood:
the z-axis is the least-variance direction of the |Z|-weighted displacement
covariance, oriented along the weighted mean displacement; the x-axis is the
weighted mean projected into the plane orthogonal to z; y completes the
right-handed set. The construction is translation invariant and rotation
equivariant away from its documented fallbacks.

Degeneracies (isolated atoms, collinear neighbourhoods, vanishing mean, an
unstable orientation test) never raise: the frame is still a proper rotation
and the condition is reported on the Frame record, so downstream equivariance
checks can account for atoms whose frames are not geometrically pinned down.
Any neighbourhood of fewer than three non-collinear points is degenerate by
construction (the covariance cannot reach rank 2).
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .linalg3 import cross, orthonormalize, sym_eig3
from .molgraph import Graph, Molecule


class Fallback(enum.Enum):
    NONE = "none"
    MU_SMALL = "mu_small"
    SIGN_UNSTABLE = "sign_unstable"
    X_PARALLEL_Z = "x_parallel_z"
    ISOLATED = "isolated"


@dataclass(frozen=True)
class FrameConfig:
    """Thresholds for the fallback chain.

    eps_mu: minimum |mu| (Angstrom) for mu to seed the x-axis (and for the
    projection of the seed onto the plane orthogonal to z to count as
    non-degenerate). eps_sign: relative floor on |z~.mu| below which the
    orientation test is treated as unstable. eps_gap: relative eigenvalue
    gap (against tr C) below which the z-direction is flagged degenerate.
    """

    eps_mu: float = 1e-6
    eps_sign: float = 1e-6
    eps_gap: float = 1e-6

    def __post_init__(self) -> None:
        if self.eps_mu <= 0 or self.eps_sign <= 0 or self.eps_gap <= 0:
            raise ValueError("frame thresholds must be positive")


DEFAULT_FRAME_CONFIG = FrameConfig()


@dataclass(frozen=True)
class Frame:
    """Per-atom basis: columns of `matrix` are (x, y, z), det +1."""

    matrix: np.ndarray
    degenerate: bool
    fallback: Fallback


@dataclass(frozen=True)
class FrameSummary:
    fallback_counts: Counter
    n_degenerate: int

    @property
    def n_fallback(self) -> int:
        return sum(c for k, c in self.fallback_counts.items() if k != Fallback.NONE)


def weighted_moments(mol: Molecule, graph: Graph, i: int) -> tuple[np.ndarray, np.ndarray]:
    """|Z|-weighted mean displacement and covariance of atom i's neighbours."""
    sel = graph.edge_range(i)
    disp = graph.disp[sel]
    if disp.shape[0] == 0:
        raise ValueError(f"atom {i} has no neighbors")
    w = np.abs(mol.atomic_numbers[graph.ej[sel]]).astype(np.float64)
    total = float(w.sum())
    mu = (w @ disp) / total
    cov = (disp.T * w) @ disp / total - np.outer(mu, mu)
    return mu, cov


def build_frame(
    mol: Molecule, graph: Graph, i: int, cfg: FrameConfig = DEFAULT_FRAME_CONFIG
) -> Frame:
    """Total function: every atom gets a proper rotation plus diagnostics."""
    if graph.indptr[i + 1] == graph.indptr[i]:
        return Frame(np.eye(3), degenerate=True, fallback=Fallback.ISOLATED)

    mu, cov = weighted_moments(mol, graph, i)
    eig = sym_eig3(0.5 * (cov + cov.T))
    evecs = eig.eigenvectors
    mu_norm = float(np.linalg.norm(mu))
    fallback = Fallback.NONE

    z = evecs[:, 0]
    orient = float(z @ mu)
    if abs(orient) > cfg.eps_sign * mu_norm:
        if orient < 0.0:
            z = -z
    else:
        fallback = Fallback.SIGN_UNSTABLE

    if mu_norm > cfg.eps_mu:
        seed = mu
    else:
        seed = evecs[:, 2]
        fallback = Fallback.MU_SMALL

    x = seed - (seed @ z) * z
    xn = float(np.linalg.norm(x))
    if xn <= cfg.eps_mu:
        seed = evecs[:, 1]
        fallback = Fallback.X_PARALLEL_Z
        x = seed - (seed @ z) * z
        xn = float(np.linalg.norm(x))
    x = x / xn

    y = cross(z, x)
    y = y / np.linalg.norm(y)
    matrix = orthonormalize(np.column_stack((x, y, z)))

    evals = eig.eigenvalues
    gap_degenerate = evals[1] - evals[0] <= cfg.eps_gap * float(np.trace(cov))
    return Frame(matrix, degenerate=bool(gap_degenerate), fallback=fallback)


def relative_rotation(fi: Frame | np.ndarray, fj: Frame | np.ndarray) -> np.ndarray:
    """Rotation carrying sender-frame coordinates into the receiver frame."""
    mi = fi.matrix if isinstance(fi, Frame) else np.asarray(fi, dtype=np.float64)
    mj = fj.matrix if isinstance(fj, Frame) else np.asarray(fj, dtype=np.float64)
    return mi.T @ mj


def frames_for_molecule(
    mol: Molecule, graph: Graph, cfg: FrameConfig = DEFAULT_FRAME_CONFIG
) -> tuple[list[Frame], FrameSummary]:
    frames = [build_frame(mol, graph, i, cfg) for i in range(mol.n_atoms)]
    counts = Counter(f.fallback for f in frames)
    summary = FrameSummary(counts, sum(1 for f in frames if f.degenerate))
    return frames, summary


def frame_matrices(frames: list[Frame]) -> np.ndarray:
    return np.stack([f.matrix for f in frames])
