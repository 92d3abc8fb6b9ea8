"""Message-passing models with scalar, vector, and rank-2 tensor channels.

Two variants share one scalar backbone that consumes only rotation-invariant
edge features (d^2 and (d^2+eps)^-1), so scalar features are bitwise identical
under rigid motion:

* "scalar": L scalar layers, then a head that decodes one 3x3 tensor per atom
  in its local frame.
* "tensorial": after the first scalar layer, vector [C_v x 3] and tensor
  [C_t x 3 x 3] channels are created from the scalars; every later layer runs
  a scalar update followed by vector and tensor message passing, where sender
  features are carried into the receiver frame by the relative rotation
  F_i^T F_j, mixed per edge with sigmoid gates, summed over neighbours, and
  added residually.

Both variants finish by symmetrizing each per-atom head output, conjugating
it into global coordinates with the atom's frame, and summing over atoms, so
predictions transform as alpha -> R alpha R^T by construction.

All features are tape Values batched over the disjoint union of the input
molecule graphs; frames and edge geometry are constants of the tape.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from functools import lru_cache

import numpy as np

from . import diffengine as de
from .diffengine import MlpSpec, ParamStore, Value
from .frames import DEFAULT_FRAME_CONFIG, FrameConfig, frame_matrices, frames_for_molecule
from .molgraph import Graph, Molecule, build_graph

SCALAR = "scalar"
TENSORIAL = "tensorial"


@dataclass(frozen=True)
class ModelConfig:
    variant: str
    layers: int = 8
    c_s: int = 128
    c_v: int = 4
    c_t: int = 32
    hidden: int = 180
    cutoff: float = 4.0
    elements: tuple[int, ...] = (1, 6, 7, 8, 16, 17)
    pooling: str = "sum"

    def __post_init__(self) -> None:
        if self.variant not in (SCALAR, TENSORIAL):
            raise ValueError(f"unknown variant '{self.variant}'")
        if self.variant == SCALAR and (self.c_v != 0 or self.c_t != 0):
            raise ValueError("scalar variant requires c_v == c_t == 0")
        if self.variant == TENSORIAL and (self.c_v < 1 or self.c_t < 1):
            raise ValueError("tensorial variant requires c_v >= 1 and c_t >= 1")
        if self.layers < 2:
            raise ValueError("layers must be >= 2")
        if self.c_s < 1 or self.hidden < 1:
            raise ValueError("channel and hidden widths must be positive")
        if self.cutoff <= 0:
            raise ValueError("cutoff must be positive")
        if self.pooling != "sum":
            raise ValueError("only sum pooling is supported")
        if len(set(self.elements)) != len(self.elements):
            raise ValueError("duplicate elements")

    # Desk-scale configs keep tests fast; the two full-size configs are
    # width-balanced so their trainable-parameter totals match each other
    # (~5.47M) the way the production comparison requires.
    @staticmethod
    def desk_tensorial() -> "ModelConfig":
        return ModelConfig(TENSORIAL, layers=4, c_s=32, c_v=4, c_t=8, hidden=32)

    @staticmethod
    def desk_scalar() -> "ModelConfig":
        return ModelConfig(SCALAR, layers=4, c_s=86, c_v=0, c_t=0, hidden=32)

    @staticmethod
    def full_tensorial() -> "ModelConfig":
        return ModelConfig(TENSORIAL, layers=8, c_s=128, c_v=4, c_t=32, hidden=180)

    @staticmethod
    def full_scalar() -> "ModelConfig":
        return ModelConfig(SCALAR, layers=8, c_s=331, c_v=0, c_t=0, hidden=289)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["elements"] = list(self.elements)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["elements"] = tuple(d["elements"])
        return ModelConfig(**d)


def element_index(cfg: ModelConfig, z: int) -> int:
    try:
        return cfg.elements.index(int(z))
    except ValueError:
        raise ValueError(f"unknown element Z={int(z)} (model covers {cfg.elements})") from None


@lru_cache(maxsize=None)
def mlp_specs(cfg: ModelConfig) -> dict[str, MlpSpec]:
    """Prefix -> spec for every MLP in the network, in creation order."""
    h = cfg.hidden
    specs: dict[str, MlpSpec] = {}
    for layer in range(1, cfg.layers + 1):
        specs[f"layer{layer}.edge"] = MlpSpec(2 * cfg.c_s + 2, h, cfg.c_s)
        specs[f"layer{layer}.gate"] = MlpSpec(cfg.c_s, h, 1, output_gate=True)
        specs[f"layer{layer}.update"] = MlpSpec(2 * cfg.c_s, h, cfg.c_s)
        if cfg.variant == TENSORIAL and layer == 1:
            specs["vt_init.vec"] = MlpSpec(cfg.c_s, h, 3 * cfg.c_v)
            specs["vt_init.ten"] = MlpSpec(cfg.c_s, h, 9 * cfg.c_t)
        if cfg.variant == TENSORIAL and layer >= 2:
            specs[f"layer{layer}.vec_cand"] = MlpSpec(cfg.c_s, h, 3 * cfg.c_v)
            specs[f"layer{layer}.vec_gate"] = MlpSpec(
                2 * cfg.c_s, h, cfg.c_v * 2 * cfg.c_v, output_gate=True
            )
            specs[f"layer{layer}.ten_cand"] = MlpSpec(cfg.c_s, h, 9 * cfg.c_t)
            specs[f"layer{layer}.ten_gate"] = MlpSpec(
                2 * cfg.c_s, h, cfg.c_t * 2 * cfg.c_t, output_gate=True
            )
    head_in = cfg.c_s + (3 * cfg.c_v + 9 * cfg.c_t if cfg.variant == TENSORIAL else 0)
    specs["readout"] = MlpSpec(head_in, h, 9)
    return specs


def parameter_manifest(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    manifest: list[tuple[str, tuple[int, ...]]] = [
        ("embed", (len(cfg.elements), cfg.c_s))
    ]
    for prefix, spec in mlp_specs(cfg).items():
        for suffix, shape in spec.param_shapes():
            manifest.append((f"{prefix}.{suffix}", shape))
    return manifest


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in parameter_manifest(cfg))


# Gain on the output layer of the MLPs that feed the residual neighbour sums.
# Plain Glorot there lets the vector/tensor channels start 5-10x larger than
# the scalars once summed over ~100-edge neighbourhoods, which saturates the
# tanh readout and stalls training; a small gain keeps every channel O(1) at
# initialization while leaving all gradients nonzero.
CANDIDATE_INIT_GAIN = 0.1

_CANDIDATE_PREFIXES = ("vt_init.vec", "vt_init.ten")
_CANDIDATE_SUFFIXES = (".vec_cand", ".ten_cand")


def _init_gain(name: str) -> float:
    if not name.endswith(".w2"):
        return 1.0
    head = name[: -len(".w2")]
    if head in _CANDIDATE_PREFIXES or head.endswith(_CANDIDATE_SUFFIXES):
        return CANDIDATE_INIT_GAIN
    return 1.0


def init_params(cfg: ModelConfig, seed: int | np.random.Generator) -> ParamStore:
    """Glorot-uniform weights (scaled on residual-branch outputs), zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    store = ParamStore()
    for name, shape in parameter_manifest(cfg):
        if len(shape) == 1:
            store.add(name, np.zeros(shape))
        else:
            store.add(name, _init_gain(name) * de.glorot_uniform(rng, shape))
    return store


# ---------------------------------------------------------------------------
# Batching


@dataclass
class PreparedMolecule:
    """Rotation-dependent constants of one molecule's forward pass.

    fij9 and frames9 are the per-edge / per-atom Kronecker squares of the
    relative rotations and frames, precomputed once so tensor conjugation is
    a batched 9x9 matmul during training.
    """

    molecule_id: str
    conformer_id: str
    z_idx: np.ndarray
    ei: np.ndarray
    ej: np.ndarray
    d2: np.ndarray
    inv_d2: np.ndarray
    frames: np.ndarray
    fij: np.ndarray
    fij9: np.ndarray
    frames9: np.ndarray
    n_degenerate: int
    n_fallback: int
    target: np.ndarray | None

    @property
    def n_atoms(self) -> int:
        return int(self.z_idx.size)


def prepare_molecule(
    mol: Molecule,
    cfg: ModelConfig,
    frame_cfg: FrameConfig = DEFAULT_FRAME_CONFIG,
    graph: Graph | None = None,
    frames: np.ndarray | None = None,
) -> PreparedMolecule:
    """Build graph, frames, and relative rotations for one molecule.

    `frames` overrides the computed per-atom frames (used by the equivariance
    harness to rotate frames without recomputation); fallback diagnostics are
    then reported as zero since nothing was constructed.
    """
    if graph is None:
        graph = build_graph(mol, cfg.cutoff)
    n_degenerate = 0
    n_fallback = 0
    if frames is None:
        frame_list, summary = frames_for_molecule(mol, graph, frame_cfg)
        frames = frame_matrices(frame_list)
        n_degenerate = summary.n_degenerate
        n_fallback = summary.n_fallback
    else:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.shape != (mol.n_atoms, 3, 3):
            raise ValueError(f"frames shape {frames.shape} != ({mol.n_atoms}, 3, 3)")
    z_idx = np.array([element_index(cfg, z) for z in mol.atomic_numbers], dtype=np.int64)
    fij = np.einsum("eca,ecb->eab", frames[graph.ei], frames[graph.ej])
    return PreparedMolecule(
        molecule_id=mol.molecule_id,
        conformer_id=mol.conformer_id,
        z_idx=z_idx,
        ei=graph.ei,
        ej=graph.ej,
        d2=graph.d2,
        inv_d2=graph.inv_d2,
        frames=frames,
        fij=fij,
        fij9=de.kron_rotations(fij),
        frames9=de.kron_rotations(frames),
        n_degenerate=n_degenerate,
        n_fallback=n_fallback,
        target=mol.polarizability,
    )


@dataclass
class Batch:
    """Disjoint union of molecule graphs with tape constants attached."""

    n_atoms: int
    n_mols: int
    z_idx: np.ndarray
    ei: np.ndarray
    ej: np.ndarray
    d2: Value
    inv_d2: Value
    fij: np.ndarray
    fij9: np.ndarray
    frames: np.ndarray
    frames9: np.ndarray
    mol_index: np.ndarray
    targets: np.ndarray | None


def assemble_batch(prepared: list[PreparedMolecule]) -> Batch:
    if not prepared:
        raise ValueError("empty batch")
    offsets = np.cumsum([0] + [p.n_atoms for p in prepared])
    z_idx = np.concatenate([p.z_idx for p in prepared])
    ei = np.concatenate([p.ei + off for p, off in zip(prepared, offsets)])
    ej = np.concatenate([p.ej + off for p, off in zip(prepared, offsets)])
    d2 = np.concatenate([p.d2 for p in prepared])
    inv_d2 = np.concatenate([p.inv_d2 for p in prepared])
    if ei.size:
        fij = np.concatenate([p.fij for p in prepared])
        fij9 = np.concatenate([p.fij9 for p in prepared])
    else:
        fij = np.zeros((0, 3, 3))
        fij9 = np.zeros((0, 9, 9))
    frames = np.concatenate([p.frames for p in prepared])
    frames9 = np.concatenate([p.frames9 for p in prepared])
    mol_index = np.concatenate(
        [np.full(p.n_atoms, k, dtype=np.int64) for k, p in enumerate(prepared)]
    )
    targets = None
    if all(p.target is not None for p in prepared):
        targets = np.stack([p.target for p in prepared])
    return Batch(
        n_atoms=int(z_idx.size),
        n_mols=len(prepared),
        z_idx=z_idx,
        ei=ei,
        ej=ej,
        d2=de.constant(d2[:, None]),
        inv_d2=de.constant(inv_d2[:, None]),
        fij=fij,
        fij9=fij9,
        frames=frames,
        frames9=frames9,
        mol_index=mol_index,
        targets=targets,
    )


# ---------------------------------------------------------------------------
# Layers


def embed_atoms(store: ParamStore, batch: Batch) -> Value:
    return de.gather(store["embed"], batch.z_idx)


def scalar_layer(store: ParamStore, cfg: ModelConfig, layer: int, s: Value, batch: Batch) -> Value:
    """Gated invariant message passing with a residual update."""
    specs = mlp_specs(cfg)
    feats = de.gather_pair(s, batch.ei, batch.ej, extras=(batch.d2, batch.inv_d2))
    msg = de.mlp_forward(store, f"layer{layer}.edge", specs[f"layer{layer}.edge"], feats)
    gate = de.mlp_forward(store, f"layer{layer}.gate", specs[f"layer{layer}.gate"], msg)
    pooled = de.segment_sum(de.mul(gate, msg), batch.ei, batch.n_atoms)
    update = de.mlp_forward(
        store,
        f"layer{layer}.update",
        specs[f"layer{layer}.update"],
        de.concat([s, pooled], axis=1),
    )
    return de.add(s, update)


def init_vector_tensor(store: ParamStore, cfg: ModelConfig, s: Value) -> tuple[Value, Value]:
    """Create vector/tensor channels from the scalars, in local frames."""
    if cfg.variant != TENSORIAL:
        raise ValueError("vector/tensor channels require the tensorial variant")
    specs = mlp_specs(cfg)
    n = s.data.shape[0]
    v = de.reshape(de.mlp_forward(store, "vt_init.vec", specs["vt_init.vec"], s), (n, cfg.c_v, 3))
    t = de.reshape(
        de.mlp_forward(store, "vt_init.ten", specs["vt_init.ten"], s), (n, cfg.c_t, 3, 3)
    )
    return v, t


def edge_scalar_pair(s: Value, batch: Batch) -> Value:
    """[s_i, s_j] per edge; shared input of the vector and tensor gates."""
    return de.gather_pair(s, batch.ei, batch.ej)


def vector_layer(
    store: ParamStore,
    cfg: ModelConfig,
    layer: int,
    s: Value,
    v: Value,
    batch: Batch,
    pair: Value | None = None,
) -> Value:
    """Transport candidate vectors into receiver frames, gate, mix, sum."""
    specs = mlp_specs(cfg)
    n = s.data.shape[0]
    n_edges = batch.ei.size
    cand = de.reshape(
        de.mlp_forward(store, f"layer{layer}.vec_cand", specs[f"layer{layer}.vec_cand"], s),
        (n, cfg.c_v, 3),
    )
    stacked = de.transport_pair_vec(cand, batch.ei, batch.ej, batch.fij)  # [E, 2*C_v, 3]
    if pair is None:
        pair = edge_scalar_pair(s, batch)
    gates = de.reshape(
        de.mlp_forward(store, f"layer{layer}.vec_gate", specs[f"layer{layer}.vec_gate"], pair),
        (n_edges, cfg.c_v, 2 * cfg.c_v),
    )
    mixed = de.bmm(gates, stacked)
    return de.add(v, de.segment_sum(mixed, batch.ei, batch.n_atoms))


def tensor_layer(
    store: ParamStore,
    cfg: ModelConfig,
    layer: int,
    s: Value,
    t: Value,
    batch: Batch,
    pair: Value | None = None,
) -> Value:
    """Conjugate candidate tensors into receiver frames, gate, mix, sum."""
    specs = mlp_specs(cfg)
    n = s.data.shape[0]
    n_edges = batch.ei.size
    cand = de.reshape(
        de.mlp_forward(store, f"layer{layer}.ten_cand", specs[f"layer{layer}.ten_cand"], s),
        (n, cfg.c_t, 3, 3),
    )
    stacked = de.transport_pair_mat(cand, batch.ei, batch.ej, batch.fij9)  # [E, 2*C_t, 9]
    if pair is None:
        pair = edge_scalar_pair(s, batch)
    gates = de.reshape(
        de.mlp_forward(store, f"layer{layer}.ten_gate", specs[f"layer{layer}.ten_gate"], pair),
        (n_edges, cfg.c_t, 2 * cfg.c_t),
    )
    mixed = de.reshape(de.bmm(gates, stacked), (n_edges, cfg.c_t, 3, 3))
    return de.add(t, de.segment_sum(mixed, batch.ei, batch.n_atoms))


def readout(
    store: ParamStore,
    cfg: ModelConfig,
    s: Value,
    v: Value | None,
    t: Value | None,
    batch: Batch,
) -> Value:
    """Per-atom local 3x3 head, symmetrized, rotated to global, pooled."""
    specs = mlp_specs(cfg)
    n = s.data.shape[0]
    if cfg.variant == TENSORIAL:
        head_in = de.concat(
            [s, de.reshape(v, (n, 3 * cfg.c_v)), de.reshape(t, (n, 9 * cfg.c_t))], axis=1
        )
    else:
        head_in = s
    local = de.reshape(de.mlp_forward(store, "readout", specs["readout"], head_in), (n, 3, 3))
    local = de.scale(de.add(local, de.transpose_last2(local)), 0.5)
    global_ = de.reshape(
        de.rotate_mat(de.reshape(local, (n, 1, 3, 3)), batch.frames9), (n, 3, 3)
    )
    return de.segment_sum(global_, batch.mol_index, batch.n_mols)


def forward_batch(cfg: ModelConfig, store: ParamStore, batch: Batch) -> Value:
    """Predicted [n_mols, 3, 3] tensors for a batch, on the tape."""
    s = embed_atoms(store, batch)
    s = scalar_layer(store, cfg, 1, s, batch)
    v = t = None
    if cfg.variant == TENSORIAL:
        v, t = init_vector_tensor(store, cfg, s)
    for layer in range(2, cfg.layers + 1):
        s = scalar_layer(store, cfg, layer, s, batch)
        if cfg.variant == TENSORIAL:
            pair = edge_scalar_pair(s, batch)
            v = vector_layer(store, cfg, layer, s, v, batch, pair)
            t = tensor_layer(store, cfg, layer, s, t, batch, pair)
    return readout(store, cfg, s, v, t, batch)


def predict(
    cfg: ModelConfig,
    store: ParamStore,
    prepared: list[PreparedMolecule],
    scale: float = 1.0,
    chunk_size: int = 64,
) -> np.ndarray:
    """Forward without gradient bookkeeping; returns [B, 3, 3] ndarray."""
    out = np.empty((len(prepared), 3, 3))
    for start in range(0, len(prepared), chunk_size):
        part = prepared[start : start + chunk_size]
        out[start : start + len(part)] = forward_batch(cfg, store, assemble_batch(part)).data
    return scale * out


def forward_molecule(
    cfg: ModelConfig,
    store: ParamStore,
    mol: Molecule,
    frame_cfg: FrameConfig = DEFAULT_FRAME_CONFIG,
    scale: float = 1.0,
) -> np.ndarray:
    return predict(cfg, store, [prepare_molecule(mol, cfg, frame_cfg)], scale=scale)[0]
