"""Molecule records, dataset I/O, cutoff graphs, splits, and synthetic targets.

The dataset format is line-oriented UTF-8 text, one molecule per line:

    id<TAB>conformer<TAB>Z1,Z2,...<TAB>x1,y1,z1;x2,y2,z2;...<TAB>a11,a12,...,a33

The trailing 3x3 tensor field (row-major, bohr^3) is optional for unlabeled
data; lines starting with '#' are comments. Reals are serialized with 17
significant digits so a write/read round trip is exact.

The synthetic target generator is an additive bond-polarizability model:
per-atom isotropic terms plus per-bond parallel/perpendicular dyadics with
exponential distance damping. It is exactly rotation-equivariant, which makes
it usable as ground truth for equivariance and training checks without any
external data.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

# QM7-X element set.
ELEMENTS = (1, 6, 7, 8, 16, 17)

# Regularizer in the (d^2 + eps)^-1 edge feature, Angstrom^2.
EDGE_EPS_D2 = 1e-8

POLARIZABILITY_SYM_TOL = 1e-9

_FLOAT_FMT = ".17g"


class DatasetError(ValueError):
    """Raised for unreadable or malformed dataset files."""


def _fmt(x: float) -> str:
    return format(float(x), _FLOAT_FMT)


@dataclass
class Molecule:
    """One conformer: atomic numbers, positions (Angstrom), optional target.

    The target is a symmetric 3x3 polarizability tensor in bohr^3.
    """

    molecule_id: str
    conformer_id: str
    atomic_numbers: np.ndarray
    positions: np.ndarray
    polarizability: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.atomic_numbers = np.asarray(self.atomic_numbers, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.atomic_numbers.ndim != 1 or self.atomic_numbers.size < 1:
            raise ValueError("molecule needs at least one atom")
        if np.any(self.atomic_numbers < 1):
            raise ValueError("atomic numbers must be positive")
        n = self.atomic_numbers.size
        if self.positions.shape != (n, 3):
            raise ValueError(
                f"positions shape {self.positions.shape} does not match {n} atoms"
            )
        if not np.isfinite(self.positions).all():
            raise ValueError("non-finite positions")
        if self.polarizability is not None:
            t = np.asarray(self.polarizability, dtype=np.float64)
            if t.shape != (3, 3):
                raise ValueError(f"polarizability must be 3x3, got {t.shape}")
            if not np.isfinite(t).all():
                raise ValueError("non-finite polarizability")
            if np.abs(t - t.T).max() > POLARIZABILITY_SYM_TOL:
                raise ValueError("polarizability tensor is not symmetric")
            self.polarizability = t

    @property
    def n_atoms(self) -> int:
        return int(self.atomic_numbers.size)


def rotate_molecule(mol: Molecule, rot: np.ndarray) -> Molecule:
    """Rigidly rotate positions (and the target tensor, if present)."""
    rot = np.asarray(rot, dtype=np.float64)
    pol = None
    if mol.polarizability is not None:
        pol = rot @ mol.polarizability @ rot.T
        pol = 0.5 * (pol + pol.T)
    return replace(mol, positions=mol.positions @ rot.T, polarizability=pol)


def translate_molecule(mol: Molecule, shift) -> Molecule:
    shift = np.asarray(shift, dtype=np.float64)
    return replace(mol, positions=mol.positions + shift)


@dataclass
class Graph:
    """Directed cutoff graph with cached invariant edge features.

    Edges come in both directions and are sorted by (receiver, sender), so
    `indptr` is a CSR index over receivers. `disp[e]` is the displacement
    from receiver ei[e] to sender ej[e] (x_j - x_i), the sign the frame
    construction needs; the model only consumes d2 and inv_d2.
    """

    n_atoms: int
    ei: np.ndarray
    ej: np.ndarray
    disp: np.ndarray
    d2: np.ndarray
    inv_d2: np.ndarray
    indptr: np.ndarray

    @property
    def n_edges(self) -> int:
        return int(self.ei.size)

    def neighbors(self, i: int) -> np.ndarray:
        return self.ej[self.indptr[i] : self.indptr[i + 1]]

    def edge_range(self, i: int) -> slice:
        return slice(int(self.indptr[i]), int(self.indptr[i + 1]))


def build_graph(mol: Molecule, cutoff: float) -> Graph:
    """All ordered pairs (i, j), i != j, with 0 < |x_i - x_j| <= cutoff."""
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    pos = mol.positions
    n = mol.n_atoms
    diff = pos[None, :, :] - pos[:, None, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    off = ~np.eye(n, dtype=bool)
    if n > 1 and np.any(d2[off] == 0.0):
        raise ValueError("coincident atoms")
    mask = off & (d2 <= cutoff * cutoff)
    ei, ej = np.nonzero(mask)  # row-major: sorted by (i, j)
    disp = pos[ej] - pos[ei]
    d2e = d2[ei, ej]
    indptr = np.searchsorted(ei, np.arange(n + 1))
    return Graph(
        n_atoms=n,
        ei=ei.astype(np.int64),
        ej=ej.astype(np.int64),
        disp=disp,
        d2=d2e,
        inv_d2=1.0 / (d2e + EDGE_EPS_D2),
        indptr=indptr.astype(np.int64),
    )


# ---------------------------------------------------------------------------
# Dataset I/O


def _parse_record(line: str, lineno: int) -> Molecule:
    parts = line.split("\t")
    if len(parts) not in (4, 5):
        raise DatasetError(f"line {lineno}: expected 4 or 5 tab-separated fields, got {len(parts)}")
    mol_id, conf_id = parts[0], parts[1]
    try:
        zs = [int(tok) for tok in parts[2].split(",") if tok != ""]
    except ValueError as exc:
        raise DatasetError(f"line {lineno}: bad atomic number field: {exc}") from None
    try:
        pos = [
            [float(c) for c in triple.split(",")]
            for triple in parts[3].split(";")
            if triple != ""
        ]
    except ValueError as exc:
        raise DatasetError(f"line {lineno}: bad position field: {exc}") from None
    if any(len(p) != 3 for p in pos):
        raise DatasetError(f"line {lineno}: positions must be x,y,z triples")
    pol = None
    if len(parts) == 5 and parts[4] != "":
        try:
            vals = [float(tok) for tok in parts[4].split(",")]
        except ValueError as exc:
            raise DatasetError(f"line {lineno}: bad tensor field: {exc}") from None
        if len(vals) != 9:
            raise DatasetError(f"line {lineno}: tensor field needs 9 values, got {len(vals)}")
        pol = np.array(vals, dtype=np.float64).reshape(3, 3)
    try:
        return Molecule(mol_id, conf_id, zs, pos, pol)
    except ValueError as exc:
        raise DatasetError(f"line {lineno}: record '{mol_id}': {exc}") from None


def read_dataset(path) -> list[Molecule]:
    """Parse a dataset file; raises DatasetError with line numbers."""
    mols: list[Molecule] = []
    try:
        handle = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot open dataset {path}: {exc}") from None
    with handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            mols.append(_parse_record(line, lineno))
    return mols


def format_record(mol: Molecule) -> str:
    fields = [
        mol.molecule_id,
        mol.conformer_id,
        ",".join(str(int(z)) for z in mol.atomic_numbers),
        ";".join(",".join(_fmt(c) for c in row) for row in mol.positions),
    ]
    if mol.polarizability is not None:
        fields.append(",".join(_fmt(v) for v in mol.polarizability.reshape(-1)))
    return "\t".join(fields)


def write_dataset(path, mols: Iterable[Molecule]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as handle:
        for mol in mols:
            handle.write(format_record(mol) + "\n")
            n += 1
    return n


# ---------------------------------------------------------------------------
# Splits


@dataclass(frozen=True)
class SplitAssignment:
    """molecule_id -> split name; all conformers of an id share a split."""

    assignment: Mapping[str, str]

    def of(self, molecule_id: str) -> str:
        return self.assignment[molecule_id]

    def ids(self, split: str) -> list[str]:
        return [m for m, s in self.assignment.items() if s == split]

    def counts(self) -> dict[str, int]:
        out = {"train": 0, "val": 0, "test": 0}
        for s in self.assignment.values():
            out[s] += 1
        return out

    def select(self, mols: Sequence[Molecule], split: str) -> list[Molecule]:
        return [m for m in mols if self.assignment.get(m.molecule_id) == split]


def split_by_molecule(
    mols: Sequence[Molecule],
    seed: int,
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> SplitAssignment:
    """Deterministic train/val/test split grouped by molecule_id."""
    if len(mols) == 0:
        raise ValueError("cannot split an empty dataset")
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ValueError("fractions must be non-negative and sum to 1")
    ids = sorted({m.molecule_id for m in mols})
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    n = len(ids)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    assignment: dict[str, str] = {}
    for rank, idx in enumerate(order):
        if rank < n_train:
            split = "train"
        elif rank < n_train + n_val:
            split = "val"
        else:
            split = "test"
        assignment[ids[idx]] = split
    return SplitAssignment(assignment)


# ---------------------------------------------------------------------------
# Synthetic targets


@dataclass(frozen=True)
class SynthParams:
    """Bond-polarizability constants for the synthetic target generator.

    `atom_scale` holds per-element isotropic magnitudes (bohr^3, free-atom
    like); bond terms use b_par/b_perp * sqrt(a_i * a_j) with exp(-d/decay)
    damping. Bonds are the edges of the cutoff graph.
    """

    atom_scale: Mapping[int, float] = field(
        default_factory=lambda: {1: 4.5, 6: 12.0, 7: 7.4, 8: 5.4, 16: 19.6, 17: 14.6}
    )
    bond_parallel: float = 0.6
    bond_perp: float = 0.2
    decay_length: float = 2.0
    cutoff: float = 4.0


DEFAULT_SYNTH_PARAMS = SynthParams()


def synth_polarizability(mol: Molecule, params: SynthParams | None = None) -> np.ndarray:
    """Exactly equivariant additive bond-polarizability target, bohr^3."""
    p = params or DEFAULT_SYNTH_PARAMS
    scales = np.empty(mol.n_atoms)
    for k, z in enumerate(mol.atomic_numbers):
        try:
            scales[k] = p.atom_scale[int(z)]
        except KeyError:
            raise ValueError(f"no atomic scale for Z={int(z)}") from None
    graph = build_graph(mol, p.cutoff)
    alpha = float(scales.sum()) * np.eye(3)
    eye = np.eye(3)
    for e in range(graph.n_edges):
        i, j = int(graph.ei[e]), int(graph.ej[e])
        if i >= j:  # each pair once
            continue
        d = float(np.sqrt(graph.d2[e]))
        u = graph.disp[e] / d
        damp = np.exp(-d / p.decay_length) * np.sqrt(scales[i] * scales[j])
        uu = np.outer(u, u)
        alpha += damp * (p.bond_parallel * uu + p.bond_perp * (eye - uu))
    return 0.5 * (alpha + alpha.T)


def _connected(mol: Molecule, cutoff: float) -> bool:
    graph = build_graph(mol, cutoff)
    parent = list(range(mol.n_atoms))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in zip(graph.ei, graph.ej):
        ri, rj = find(int(i)), find(int(j))
        if ri != rj:
            parent[ri] = rj
    return len({find(k) for k in range(mol.n_atoms)}) == 1


_MIN_NN = 0.8
_MAX_NN = 2.0
_GEN_MIN_ATOMS = 4
_GEN_MAX_ATOMS = 16


def _grow_positions(rng: np.random.Generator, n_atoms: int) -> np.ndarray | None:
    pos = np.zeros((n_atoms, 3))
    for k in range(1, n_atoms):
        placed = False
        for _ in range(200):
            parent = int(rng.integers(0, k))
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            dist = rng.uniform(_MIN_NN, _MAX_NN)
            cand = pos[parent] + dist * direction
            if np.min(np.linalg.norm(pos[:k] - cand, axis=1)) >= _MIN_NN:
                pos[k] = cand
                placed = True
                break
        if not placed:
            return None
    return pos


def gen_synthetic(
    n: int, seed: int, params: SynthParams | None = None
) -> list[Molecule]:
    """Random connected molecules with exactly equivariant targets.

    4-16 atoms from the QM7-X element set, nearest-neighbour distances in
    [0.8, 2.0] Angstrom, connected at a 4 Angstrom cutoff (checked with
    union-find; regenerated on failure). Deterministic per seed.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    p = params or DEFAULT_SYNTH_PARAMS
    rng = np.random.default_rng(seed)
    elements = np.array(ELEMENTS)
    mols: list[Molecule] = []
    for k in range(n):
        while True:
            n_atoms = int(rng.integers(_GEN_MIN_ATOMS, _GEN_MAX_ATOMS + 1))
            zs = elements[rng.integers(0, len(elements), size=n_atoms)]
            pos = _grow_positions(rng, n_atoms)
            if pos is None:
                continue
            mol = Molecule(f"synth-{k:05d}", "0", zs, pos)
            if _connected(mol, 4.0):
                break
        mols.append(replace(mol, polarizability=synth_polarizability(mol, p)))
    return mols
