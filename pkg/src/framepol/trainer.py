"""Losses, tensor-error metrics, training loop, and evaluation reports.

The four metrics (componentwise MAE, trace MAE, off-diagonal MAE, Frobenius
distance) are implemented once as tape expressions; training losses and
evaluation reports both go through `metric_value`, so the optimized objective
and the reported numbers cannot drift apart.

Targets are standardized by a single global scalar (mean |component| over the
train split) before the loss: every metric here is absolutely homogeneous, so
this leaves the objective the same metric up to a constant factor, keeps all
reported numbers in bohr^3, and commutes with rotations. The scalar is echoed
into the checkpoint so evaluation undoes it.
"""

from __future__ import annotations

import contextlib
import copy
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffengine as de
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .diffengine import AdamState, ParamStore, Value
from .model import (
    Batch,
    ModelConfig,
    PreparedMolecule,
    assemble_batch,
    forward_batch,
    init_params,
    parameter_manifest,
    prepare_molecule,
)
from .molgraph import Molecule, SplitAssignment, split_by_molecule

METRIC_NAMES = ("tensor", "trace", "aniso", "frob")

_DIAG_MASK = np.eye(3)
_OFFDIAG_MASK = 1.0 - np.eye(3)


class TrainingError(RuntimeError):
    """Raised when training cannot proceed (bad data, diverged loss)."""


def _single_thread_blas():
    """Multi-threaded BLAS loses to sync overhead on these matrix sizes and
    is the one nondeterminism risk; training pins one thread when possible."""
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=1)
    except ImportError:
        return contextlib.nullcontext()


# ---------------------------------------------------------------------------
# Metrics


def metric_value(name: str, pred: Value, truth: Value) -> Value:
    """Batch-mean metric between [B,3,3] prediction and truth Values."""
    n_mols = pred.data.shape[0]
    diff = de.sub(pred, truth)
    if name == "tensor":
        return de.scale(de.sum_along(de.abs_(diff)), 1.0 / (9.0 * n_mols))
    if name == "trace":
        per_mol = de.sum_along(de.mul(diff, de.constant(_DIAG_MASK)), axis=(1, 2))
        return de.scale(de.sum_along(de.abs_(per_mol)), 1.0 / n_mols)
    if name == "aniso":
        masked = de.mul(diff, de.constant(_OFFDIAG_MASK))
        return de.scale(de.sum_along(de.abs_(masked)), 1.0 / (6.0 * n_mols))
    if name == "frob":
        sq = de.sum_along(de.mul(diff, diff), axis=(1, 2))
        return de.scale(de.sum_along(de.sqrt_(sq)), 1.0 / n_mols)
    raise ValueError(f"unknown metric '{name}' (choose from {METRIC_NAMES})")


def _pair(pred, truth) -> tuple[Value, Value]:
    p = np.asarray(pred, dtype=np.float64).reshape(1, 3, 3)
    t = np.asarray(truth, dtype=np.float64).reshape(1, 3, 3)
    return de.constant(p), de.constant(t)


def metric_tensor_mae(pred, truth) -> float:
    """Mean |difference| over the 9 tensor components."""
    return float(metric_value("tensor", *_pair(pred, truth)).data)


def metric_trace_mae(pred, truth) -> float:
    """|trace(pred) - trace(truth)|."""
    return float(metric_value("trace", *_pair(pred, truth)).data)


def metric_aniso_mae(pred, truth) -> float:
    """Mean |difference| over the 6 off-diagonal components."""
    return float(metric_value("aniso", *_pair(pred, truth)).data)


def metric_frob_mae(pred, truth) -> float:
    """Frobenius norm of the difference."""
    return float(metric_value("frob", *_pair(pred, truth)).data)


def metric_aniso_delta(pred, truth) -> float:
    """Conventional anisotropy error |da(pred) - da(truth)| with
    da^2 = (3 tr(a^2) - tr(a)^2) / 2; offered alongside the off-diagonal MAE."""

    def aniso(a) -> float:
        a = np.asarray(a, dtype=np.float64)
        return float(np.sqrt(max(0.0, 1.5 * np.trace(a @ a) - 0.5 * np.trace(a) ** 2)))

    return abs(aniso(pred) - aniso(truth))


# ---------------------------------------------------------------------------
# Reports


@dataclass(frozen=True)
class MetricReport:
    split: str
    n_molecules: int
    tensor_mae: float
    trace_mae: float
    aniso_mae: float
    frob_mae: float
    scale_tensor: float
    scale_trace: float
    scale_aniso: float
    scale_frob: float

    def mae(self, name: str) -> float:
        return {
            "tensor": self.tensor_mae,
            "trace": self.trace_mae,
            "aniso": self.aniso_mae,
            "frob": self.frob_mae,
        }[name]

    def scale(self, name: str) -> float:
        return {
            "tensor": self.scale_tensor,
            "trace": self.scale_trace,
            "aniso": self.scale_aniso,
            "frob": self.scale_frob,
        }[name]


def _as_prepared(items: Sequence, cfg: ModelConfig) -> list[PreparedMolecule]:
    out = []
    for item in items:
        if isinstance(item, PreparedMolecule):
            out.append(item)
        else:
            out.append(prepare_molecule(item, cfg))
    return out


def evaluate(
    cfg: ModelConfig,
    store: ParamStore,
    items: Sequence,
    target_scale: float = 1.0,
    split_name: str = "all",
    chunk_size: int = 64,
) -> MetricReport:
    """All four metrics (and ground-truth scale means) over a set of molecules.

    Metrics are computed per molecule and averaged; `items` may hold Molecule
    or PreparedMolecule entries, all with targets.
    """
    prepared = _as_prepared(items, cfg)
    if not prepared:
        raise TrainingError("evaluate needs at least one molecule")
    if any(p.target is None for p in prepared):
        raise TrainingError("evaluate needs labeled molecules")
    sums = {name: 0.0 for name in METRIC_NAMES}
    scale_sums = {name: 0.0 for name in METRIC_NAMES}
    total = 0
    for start in range(0, len(prepared), chunk_size):
        part = prepared[start : start + chunk_size]
        batch = assemble_batch(part)
        pred = de.constant(target_scale * forward_batch(cfg, store, batch).data)
        truth = de.constant(batch.targets)
        zero = de.constant(np.zeros_like(batch.targets))
        for name in METRIC_NAMES:
            sums[name] += float(metric_value(name, pred, truth).data) * len(part)
            scale_sums[name] += float(metric_value(name, zero, truth).data) * len(part)
        total += len(part)
    return MetricReport(
        split=split_name,
        n_molecules=total,
        tensor_mae=sums["tensor"] / total,
        trace_mae=sums["trace"] / total,
        aniso_mae=sums["aniso"] / total,
        frob_mae=sums["frob"] / total,
        scale_tensor=scale_sums["tensor"] / total,
        scale_trace=scale_sums["trace"] / total,
        scale_aniso=scale_sums["aniso"] / total,
        scale_frob=scale_sums["frob"] / total,
    )


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 32
    lr: float = 1e-4
    loss_metric: str = "tensor"
    seed: int = 0
    eval_every: int = 1
    normalize_targets: bool = True

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0 or self.eval_every < 1:
            raise ValueError("train config values must be positive (epochs may be 0)")
        if self.loss_metric not in METRIC_NAMES:
            raise ValueError(f"unknown loss metric '{self.loss_metric}'")


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_tensor: float
    val_trace: float
    val_aniso: float
    val_frob: float


def format_history(rows: Sequence[HistoryRow]) -> str:
    lines = []
    for r in rows:
        cells = [str(r.epoch)] + [
            format(x, ".17g")
            for x in (r.train_loss, r.val_tensor, r.val_trace, r.val_aniso, r.val_frob)
        ]
        lines.append("\t".join(cells))
    return "".join(line + "\n" for line in lines)


def write_history(path, rows: Sequence[HistoryRow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_history(rows))


@dataclass
class TrainResult:
    store: ParamStore
    adam: AdamState
    history: list[HistoryRow]
    best_epoch: int
    best_val: float
    best_params: dict[str, np.ndarray]
    best_adam: AdamState
    target_scale: float
    split: SplitAssignment


def target_scale_of(mols: Sequence[Molecule]) -> float:
    """Mean |component| of the targets; 1.0 for empty or all-zero sets."""
    vals = [np.abs(m.polarizability).mean() for m in mols if m.polarizability is not None]
    if not vals:
        return 1.0
    s = float(np.mean(vals))
    return s if s > 0 else 1.0


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    mols: Sequence[Molecule],
    split: SplitAssignment | None = None,
    store: ParamStore | None = None,
    history_path=None,
    checkpoint_path=None,
) -> TrainResult:
    """Train on the train split, track the best validation checkpoint.

    Deterministic for a given seed: parameter init and the per-epoch shuffle
    draw from independent streams spawned from train_cfg.seed. The history
    records the epoch-mean train loss and the four validation metrics (all in
    bohr^3). With an empty validation split the best checkpoint is tracked on
    the train loss and validation columns hold nan.
    """
    if not mols:
        raise TrainingError("empty dataset")
    if split is None:
        split = split_by_molecule(mols, seed=train_cfg.seed)
    train_mols = split.select(mols, "train")
    val_mols = split.select(mols, "val")
    if not train_mols:
        raise TrainingError("train split is empty")
    if any(m.polarizability is None for m in train_mols + val_mols):
        raise TrainingError("training requires labeled molecules")

    scale = target_scale_of(train_mols) if train_cfg.normalize_targets else 1.0
    de.enable_fast_malloc()
    prep_train = [prepare_molecule(m, model_cfg) for m in train_mols]
    prep_val = [prepare_molecule(m, model_cfg) for m in val_mols]

    seq = np.random.SeedSequence(train_cfg.seed)
    init_stream, shuffle_stream = [np.random.default_rng(s) for s in seq.spawn(2)]
    if store is None:
        store = init_params(model_cfg, init_stream)
    adam = de.init_adam(store)

    def snapshot() -> tuple[dict[str, np.ndarray], AdamState]:
        return store.state_dict(), copy.deepcopy(adam)

    best_params, best_adam = snapshot()
    best_val = float("inf")
    best_epoch = 0
    history: list[HistoryRow] = []

    with _single_thread_blas():
        for epoch in range(1, train_cfg.epochs + 1):
            order = shuffle_stream.permutation(len(prep_train))
            loss_sum = 0.0
            for batch_no, start in enumerate(range(0, len(order), train_cfg.batch_size)):
                chosen = [prep_train[i] for i in order[start : start + train_cfg.batch_size]]
                batch = assemble_batch(chosen)
                pred = forward_batch(model_cfg, store, batch)
                truth = de.constant(batch.targets / scale)
                loss = metric_value(train_cfg.loss_metric, pred, truth)
                loss_raw = float(loss.data) * scale
                if not np.isfinite(loss_raw):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, batch {batch_no + 1}"
                    )
                de.backward(loss)
                de.adam_step(store, adam, train_cfg.lr)
                store.clear_grads()
                loss_sum += loss_raw * len(chosen)
            train_loss = loss_sum / len(prep_train)

            if prep_val and epoch % train_cfg.eval_every == 0:
                report = evaluate(
                    model_cfg, store, prep_val, target_scale=scale, split_name="val"
                )
                val_metrics = tuple(report.mae(name) for name in METRIC_NAMES)
                tracked = report.mae(train_cfg.loss_metric)
            else:
                val_metrics = (float("nan"),) * 4
                tracked = train_loss if not prep_val else float("inf")
            history.append(HistoryRow(epoch, train_loss, *val_metrics))
            if tracked < best_val:
                best_val = tracked
                best_epoch = epoch
                best_params, best_adam = snapshot()

    result = TrainResult(
        store=store,
        adam=adam,
        history=history,
        best_epoch=best_epoch,
        best_val=best_val,
        best_params=best_params,
        best_adam=best_adam,
        target_scale=scale,
        split=split,
    )
    if history_path is not None:
        write_history(history_path, history)
    if checkpoint_path is not None:
        save_model_checkpoint(
            checkpoint_path,
            model_cfg,
            best_params,
            adam=best_adam,
            target_scale=scale,
            train_meta={
                "epochs": train_cfg.epochs,
                "batch_size": train_cfg.batch_size,
                "lr": train_cfg.lr,
                "loss_metric": train_cfg.loss_metric,
                "seed": train_cfg.seed,
                "best_epoch": best_epoch,
                "adam_betas": list(de.DEFAULT_ADAM_BETAS),
                "adam_eps": de.DEFAULT_ADAM_EPS,
                "init": "glorot_uniform",
            },
        )
    return result


# ---------------------------------------------------------------------------
# Model-aware checkpoint helpers


@dataclass
class LoadedModel:
    model_cfg: ModelConfig
    store: ParamStore
    adam: AdamState | None
    target_scale: float
    train_meta: dict


def save_model_checkpoint(
    path,
    model_cfg: ModelConfig,
    params: dict[str, np.ndarray] | ParamStore,
    adam: AdamState | None = None,
    target_scale: float = 1.0,
    train_meta: dict | None = None,
) -> None:
    state = params.state_dict() if isinstance(params, ParamStore) else params
    arrays: dict[str, np.ndarray] = {}
    for name, arr in state.items():
        arrays[f"param.{name}"] = arr
    meta = {
        "model": model_cfg.to_dict(),
        "target_scale": float(target_scale),
        "train": train_meta or {},
        "adam_step": adam.step if adam is not None else None,
    }
    if adam is not None:
        for name, arr in adam.m.items():
            arrays[f"adam.m.{name}"] = arr
        for name, arr in adam.v.items():
            arrays[f"adam.v.{name}"] = arr
    save_checkpoint(path, meta, arrays)


def load_model_checkpoint(path) -> LoadedModel:
    meta, arrays = load_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["model"])
    expected = dict(parameter_manifest(cfg))
    store = ParamStore()
    for name, shape in expected.items():
        key = f"param.{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint/config mismatch: missing parameter '{name}'")
        arr = arrays[key]
        if arr.shape != tuple(shape):
            raise CheckpointError(
                f"checkpoint/config mismatch: parameter '{name}' has shape "
                f"{arr.shape}, expected {tuple(shape)}"
            )
        store.add(name, arr)
    stray = [k for k in arrays if k.startswith("param.") and k[len("param.") :] not in expected]
    if stray:
        raise CheckpointError(f"checkpoint/config mismatch: unexpected parameters {stray}")
    adam = None
    if meta.get("adam_step") is not None:
        adam = AdamState(
            step=int(meta["adam_step"]),
            m={name: arrays[f"adam.m.{name}"] for name in expected},
            v={name: arrays[f"adam.v.{name}"] for name in expected},
        )
    return LoadedModel(
        model_cfg=cfg,
        store=store,
        adam=adam,
        target_scale=float(meta.get("target_scale", 1.0)),
        train_meta=meta.get("train", {}),
    )
