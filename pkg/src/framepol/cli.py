"""Command-line entry point.

Subcommands: gen-synthetic, train, eval, check-equivariance, inspect-frames.
A `--config FILE` of flat key=value lines (keys match long flag names with
dashes or underscores) supplies defaults; explicit flags win. If a --data
path does not exist as given, it is retried under $FRAMEPOL_DATA_DIR.

Exit codes: 0 success / threshold pass, 1 threshold fail, 2 usage error,
3 I/O or data error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .checkpoint import CheckpointError
from .equivariance import format_report, model_equivariance, pipeline_equivariance
from .frames import DEFAULT_FRAME_CONFIG, frames_for_molecule
from .model import SCALAR, TENSORIAL, ModelConfig, param_count
from .molgraph import (
    DatasetError,
    build_graph,
    gen_synthetic,
    read_dataset,
    split_by_molecule,
    write_dataset,
)
from .trainer import (
    TrainConfig,
    TrainingError,
    evaluate,
    load_model_checkpoint,
    metric_aniso_delta,
    train,
)

ENV_DATA_DIR = "FRAMEPOL_DATA_DIR"

# Model-dependent flag defaults (applied when a flag is left unset).
_VARIANT_DEFAULTS = {
    SCALAR: {"cs": 331, "cv": 0, "ct": 0, "hidden": 289},
    TENSORIAL: {"cs": 128, "cv": 4, "ct": 32, "hidden": 180},
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _resolve_data_path(path: str) -> str:
    if os.path.exists(path):
        return path
    base = os.environ.get(ENV_DATA_DIR)
    if base:
        candidate = os.path.join(base, path)
        if os.path.exists(candidate):
            return candidate
    return path


def _read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{lineno}: expected key=value")
                key, value = line.split("=", 1)
                values[key.strip().replace("-", "_")] = value.strip()
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from None
    return values


def _apply_threads(threads: int) -> None:
    if threads == 1:
        try:
            from threadpoolctl import threadpool_limits

            threadpool_limits(limits=1)
        except ImportError:
            pass  # numpy's kernels are deterministic for our sizes either way


def _load_dataset(path: str):
    try:
        return read_dataset(_resolve_data_path(path))
    except DatasetError as exc:
        raise DataError(str(exc)) from None


def _build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="framepol",
        description="Local-frame equivariant prediction of molecular polarizability tensors.",
    )
    parser.add_argument("--config", help="key=value file supplying flag defaults")
    sub = parser.add_subparsers(dest="command", required=True)
    commands: dict[str, argparse.ArgumentParser] = {}

    p = commands["gen-synthetic"] = sub.add_parser(
        "gen-synthetic", help="write a synthetic labeled dataset"
    )
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = commands["train"] = sub.add_parser(
        "train", help="train a model and write checkpoint/history"
    )
    p.add_argument("--data", required=True)
    p.add_argument("--model", choices=[SCALAR, TENSORIAL], default=TENSORIAL)
    p.add_argument("--layers", type=int, default=8)
    p.add_argument("--cs", type=int, default=None)
    p.add_argument("--cv", type=int, default=None)
    p.add_argument("--ct", type=int, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--cutoff", type=float, default=4.0)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--epochs", type=int, default=1000)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--loss", choices=["tensor", "trace", "aniso", "frob"], default="tensor")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--no-normalize", action="store_true", help="skip target scaling")
    p.add_argument("--out-ckpt", default=None)
    p.add_argument("--history", default=None)
    p.add_argument("--threads", type=int, default=0)

    p = commands["eval"] = sub.add_parser("eval", help="report test metrics for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--conventional-aniso", action="store_true")
    p.add_argument("--threads", type=int, default=0)

    p = commands["check-equivariance"] = sub.add_parser(
        "check-equivariance", help="run an equivariance protocol"
    )
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["model", "pipeline"], default="model")
    p.add_argument("--rotations", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--threads", type=int, default=0)

    p = commands["inspect-frames"] = sub.add_parser(
        "inspect-frames", help="dump per-atom frames for one molecule"
    )
    p.add_argument("--data", required=True)
    p.add_argument("--mol-id", required=True)
    p.add_argument("--conformer", default=None)
    p.add_argument("--cutoff", type=float, default=4.0)

    return parser, commands


def _apply_config_defaults(
    argv: list[str], commands: dict[str, argparse.ArgumentParser]
) -> None:
    """Turn config-file entries into subcommand defaults; explicit flags win."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    values = _read_config_file(known.config)
    converted: dict[str, object] = {}
    for key, raw in values.items():
        if key in ("no_normalize", "conventional_aniso"):
            converted[key] = raw.lower() in ("1", "true", "yes")
        elif key in ("lr", "cutoff", "threshold"):
            converted[key] = float(raw)
        else:
            try:
                converted[key] = int(raw)
            except ValueError:
                converted[key] = raw
    known_dests = {a.dest for p in commands.values() for a in p._actions}
    unknown = set(converted) - known_dests
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    for p in commands.values():
        applicable = {a.dest for a in p._actions} & set(converted)
        if not applicable:
            continue
        p.set_defaults(**{k: converted[k] for k in applicable})
        for action in p._actions:
            if action.dest in applicable:
                action.required = False


def _model_config_from_args(args) -> ModelConfig:
    defaults = _VARIANT_DEFAULTS[args.model]
    cs = args.cs if args.cs is not None else defaults["cs"]
    cv = args.cv if args.cv is not None else defaults["cv"]
    ct = args.ct if args.ct is not None else defaults["ct"]
    hidden = args.hidden if args.hidden is not None else defaults["hidden"]
    if args.model == SCALAR and (cv > 0 or ct > 0):
        raise UsageError("--model scalar is incompatible with --cv/--ct > 0")
    try:
        return ModelConfig(
            variant=args.model,
            layers=args.layers,
            c_s=cs,
            c_v=cv,
            c_t=ct,
            hidden=hidden,
            cutoff=args.cutoff,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _cmd_gen_synthetic(args) -> int:
    mols = gen_synthetic(args.n, args.seed)
    try:
        n = write_dataset(args.out, mols)
    except OSError as exc:
        raise DataError(f"cannot write {args.out}: {exc}") from None
    print(f"wrote {n} molecules to {args.out}")
    return 0


def _cmd_train(args) -> int:
    _apply_threads(args.threads)
    mols = _load_dataset(args.data)
    model_cfg = _model_config_from_args(args)
    train_cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        loss_metric=args.loss,
        seed=args.seed,
        eval_every=args.eval_every,
        normalize_targets=not args.no_normalize,
    )
    split = split_by_molecule(mols, seed=args.split_seed)
    result = train(
        model_cfg,
        train_cfg,
        mols,
        split=split,
        history_path=args.history,
        checkpoint_path=args.out_ckpt,
    )
    counts = split.counts()
    print(
        f"trained {model_cfg.variant} model ({param_count(model_cfg)} parameters) "
        f"for {train_cfg.epochs} epochs on {counts['train']} train molecules"
    )
    print(f"best validation {train_cfg.loss_metric} {result.best_val:.6g} at epoch {result.best_epoch}")
    if args.out_ckpt:
        print(f"checkpoint: {args.out_ckpt}")
    if args.history:
        print(f"history: {args.history}")
    return 0


def _select_split(mols, split: str, split_seed: int):
    if split == "all":
        return mols
    assignment = split_by_molecule(mols, seed=split_seed)
    return assignment.select(mols, split)


def _cmd_eval(args) -> int:
    _apply_threads(args.threads)
    loaded = load_model_checkpoint(_resolve_data_path(args.ckpt))
    mols = _load_dataset(args.data)
    chosen = _select_split(mols, args.split, args.split_seed)
    if not chosen:
        raise DataError(f"split '{args.split}' selects no molecules")
    report = evaluate(
        loaded.model_cfg,
        loaded.store,
        chosen,
        target_scale=loaded.target_scale,
        split_name=args.split,
    )
    print(f"split {report.split}: {report.n_molecules} molecules")
    print(f"{'metric':<10}{'ground_truth_mean':>20}{'mae':>16}")
    for name in ("tensor", "trace", "aniso", "frob"):
        print(f"{name:<10}{report.scale(name):>20.6g}{report.mae(name):>16.6g}")
    if args.conventional_aniso:
        from .model import prepare_molecule, predict

        prepared = [prepare_molecule(m, loaded.model_cfg) for m in chosen]
        preds = predict(loaded.model_cfg, loaded.store, prepared, scale=loaded.target_scale)
        vals = [metric_aniso_delta(p, m.polarizability) for p, m in zip(preds, chosen)]
        print(f"{'aniso_d':<10}{'':>20}{float(np.mean(vals)):>16.6g}")
    return 0


def _cmd_check_equivariance(args) -> int:
    _apply_threads(args.threads)
    loaded = load_model_checkpoint(_resolve_data_path(args.ckpt))
    mols = _load_dataset(args.data)
    if args.mode == "model":
        report = model_equivariance(
            loaded.model_cfg, loaded.store, mols, n_rotations=args.rotations, seed=args.seed
        )
        threshold = args.threshold if args.threshold is not None else 1e-6
    else:
        report = pipeline_equivariance(
            loaded.model_cfg, loaded.store, mols, n_rotations=args.rotations, seed=args.seed
        )
        threshold = args.threshold if args.threshold is not None else 1e-3
    sys.stdout.write(format_report(report))
    passed = report.mean <= threshold
    print(f"threshold {threshold:g}: {'PASS' if passed else 'FAIL'} (mean {report.mean:.6e})")
    return 0 if passed else 1


def _cmd_inspect_frames(args) -> int:
    mols = _load_dataset(args.data)
    chosen = [m for m in mols if m.molecule_id == args.mol_id]
    if args.conformer is not None:
        chosen = [m for m in chosen if m.conformer_id == args.conformer]
    if not chosen:
        raise DataError(f"molecule id '{args.mol_id}' not found in {args.data}")
    for mol in chosen:
        graph = build_graph(mol, args.cutoff)
        frames, summary = frames_for_molecule(mol, graph, DEFAULT_FRAME_CONFIG)
        print(
            f"molecule {mol.molecule_id} conformer {mol.conformer_id} "
            f"atoms {mol.n_atoms} cutoff {args.cutoff:g}"
        )
        for i, frame in enumerate(frames):
            n_nb = len(graph.neighbors(i))
            if n_nb > 0:
                from .frames import weighted_moments
                from .linalg3 import sym_eig3

                mu, cov = weighted_moments(mol, graph, i)
                evals = sym_eig3(0.5 * (cov + cov.T)).eigenvalues
                mu_norm = float(np.linalg.norm(mu))
            else:
                evals = np.zeros(3)
                mu_norm = 0.0
            print(
                f"atom {i} Z {int(mol.atomic_numbers[i])} neighbors {n_nb} "
                f"fallback {frame.fallback.value} degenerate {str(frame.degenerate).lower()}"
            )
            print("  eigenvalues " + " ".join(format(v, ".17g") for v in evals))
            print(f"  mu_norm {mu_norm:.17g}")
            for r in range(3):
                print("  F " + " ".join(format(v, ".17g") for v in frame.matrix[r]))
        print(
            f"summary degenerate {summary.n_degenerate} fallback {summary.n_fallback}"
        )
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, commands = _build_parser()
    try:
        _apply_config_defaults(argv, commands)
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    handlers = {
        "gen-synthetic": _cmd_gen_synthetic,
        "train": _cmd_train,
        "eval": _cmd_eval,
        "check-equivariance": _cmd_check_equivariance,
        "inspect-frames": _cmd_inspect_frames,
    }
    try:
        return handlers[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, DatasetError, CheckpointError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def entrypoint() -> None:  # console-script shim
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
