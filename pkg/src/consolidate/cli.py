"""Command-line driver: ``consolidate <verb> [flags]``.

Exit codes: 0 success, 1 domain error (printed as ``ERROR <code>: <detail>``
on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Sequence

from .checkpoint import atomic_write_bytes, read_checkpoint, write_checkpoint
from .errors import ConsolidateError, ValidationError
from .merge import ALL_METHODS, MergeRecipe, apply_recipe, load_recipe, thread_count
from .taskvec import (compute_task_vector, layer_norm_profile, normalize_task_vectors,
                      subspace_angles, write_profile)
from .testbed.evaluate import evaluate
from .testbed.suite import run_suite
from .testbed.tasks import gen_tasks, read_dataset, write_dataset
from .testbed.train import init_base, train, train_joint

SPLITS = ("train", "cal", "eval")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="consolidate", description="Model-merging testbed.")
    sub = p.add_subparsers(dest="verb", required=True, metavar="VERB")

    g = sub.add_parser("gen-tasks", help="generate synthetic task datasets")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--similarity", type=float, default=0.0)
    g.add_argument("--n-tasks", type=int, default=3)
    g.add_argument("--input-dim", type=int, default=16)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--out", required=True, help="output directory")

    t = sub.add_parser("train", help="fine-tune an expert, or create a base with --init-base")
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--data", nargs="+", required=True, help="training dataset file(s)")
    t.add_argument("--model", help="starting checkpoint (required unless --init-base)")
    t.add_argument("--init-base", action="store_true", help="initialize and pre-train a base model")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--mode", choices=("full", "lowrank"), default="full")
    t.add_argument("--rank", type=int, default=2)
    t.add_argument("--lora-alpha", type=float, default=2.0)
    t.add_argument("--out", required=True)

    j = sub.add_parser("train-joint", help="train on the union of all task datasets")
    j.add_argument("--seed", type=int, required=True)
    j.add_argument("--base", required=True)
    j.add_argument("--data", nargs="+", required=True)
    j.add_argument("--steps", type=int, default=500)
    j.add_argument("--lr", type=float, default=0.05)
    j.add_argument("--ordered", action="store_true", help="train tasks in sequence without shuffling")
    j.add_argument("--out", required=True)

    m = sub.add_parser("merge", help="merge experts as described by a recipe file")
    m.add_argument("--recipe", required=True)
    m.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="accuracy report of a model on eval datasets")
    e.add_argument("--model", required=True)
    e.add_argument("--data", nargs="+", required=True)
    e.add_argument("--experts", nargs="+", help="expert checkpoints, one per dataset, for retention")
    e.add_argument("--out", required=True)

    pr = sub.add_parser("profile", help="per-depth task-vector norms")
    pr.add_argument("--base", required=True)
    pr.add_argument("--experts", nargs="+", required=True)
    pr.add_argument("--normalize", choices=("model", "matrix"))
    pr.add_argument("--out", required=True)

    a = sub.add_parser("angles", help="principal angles between two experts' weight deltas")
    a.add_argument("--base", required=True)
    a.add_argument("--experts", nargs=2, required=True)
    a.add_argument("--k", type=int, default=2)
    a.add_argument("--out", required=True)

    s = sub.add_parser("suite", help="train everything and run the full comparison grid")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--similarity", type=float, default=0.3)
    s.add_argument("--recipes", default="all", help="'all' or a comma-separated method list")
    s.add_argument("--mode", choices=("full", "lowrank"), default="full")
    s.add_argument("--steps", type=int, default=500)
    s.add_argument("--out", required=True)
    return p


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    return build_parser().parse_args(argv)


def _inputs(args: argparse.Namespace) -> list[str]:
    paths = []
    for key in ("data", "model", "base", "experts", "recipe"):
        val = getattr(args, key, None)
        if val:
            paths.extend(val if isinstance(val, list) else [val])
    return paths


def _check_paths(args: argparse.Namespace) -> None:
    for p in _inputs(args):
        if not Path(p).is_file():
            raise ValidationError(f"no such file: {p}")
    out = Path(args.out)
    if out.exists() and out.is_dir() != (args.verb in ("gen-tasks", "suite")):
        raise ValidationError(f"output path {out} has the wrong type")


def _recipe_list(spec: str, seed: int) -> list[MergeRecipe]:
    if spec == "all":
        names = list(ALL_METHODS)
    else:
        names = [s.strip() for s in spec.split(",") if s.strip()]
    recipes = [MergeRecipe(n, seed=seed) for n in names]
    for r in recipes:
        r.resolved(1)
    return recipes


def _parent(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def cmd_gen_tasks(args) -> None:
    bundle = gen_tasks(args.seed, args.similarity, n_tasks=args.n_tasks, input_dim=args.input_dim,
                       n_classes=args.classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for splits in bundle.tasks:
        for name in SPLITS:
            ds = getattr(splits, name)
            write_dataset(ds, out / f"{ds.task_id}_{name}.mrgf")


def cmd_train(args) -> None:
    datasets = [read_dataset(p) for p in args.data]
    if args.init_base:
        ckpt = init_base(args.seed, datasets, steps=100 if args.steps is None else args.steps, lr=args.lr)
    else:
        if args.model is None:
            raise ValidationError("train needs --model unless --init-base is given")
        if len(datasets) != 1:
            raise ValidationError("expert training takes exactly one dataset")
        ckpt = train(read_checkpoint(args.model), datasets[0], steps=500 if args.steps is None else args.steps,
                     lr=args.lr, mode=args.mode, seed=args.seed, rank=args.rank, lora_alpha=args.lora_alpha)
    write_checkpoint(ckpt, _parent(args.out))


def cmd_train_joint(args) -> None:
    datasets = [read_dataset(p) for p in args.data]
    ckpt = train_joint(read_checkpoint(args.base), datasets, steps=args.steps, lr=args.lr,
                       seed=args.seed, ordered=args.ordered)
    write_checkpoint(ckpt, _parent(args.out))


def cmd_merge(args) -> None:
    rf = load_recipe(args.recipe)
    for p in [rf.base, *rf.experts, *(rf.recipe.calibration or [])]:
        if not Path(p).is_file():
            raise ValidationError(f"no such file: {p}")
    base = read_checkpoint(rf.base)
    experts = [read_checkpoint(p) for p in rf.experts]
    merged = apply_recipe(rf.recipe, base, experts, calibration=rf.recipe.calibration)
    write_checkpoint(merged.checkpoint, _parent(args.out))


def cmd_eval(args) -> None:
    model = read_checkpoint(args.model)
    datasets = [read_dataset(p) for p in args.data]
    for ds in datasets:
        if ds.labels is None:
            raise ValidationError(f"{ds.task_id}/{ds.split} has no labels")
    reference = None
    if args.experts:
        if len(args.experts) != len(datasets):
            raise ValidationError(f"{len(args.experts)} experts for {len(datasets)} datasets")
        reference = {ds.task_id: evaluate(read_checkpoint(p), [ds]).accuracy[ds.task_id]
                     for p, ds in zip(args.experts, datasets)}
    evaluate(model, datasets, reference).write(_parent(args.out))


def _task_vectors(args):
    base = read_checkpoint(args.base)
    return [compute_task_vector(base, read_checkpoint(p)) for p in args.experts]


def cmd_profile(args) -> None:
    tvs = _task_vectors(args)
    if args.normalize:
        tvs = normalize_task_vectors(tvs, args.normalize)
    write_profile(layer_norm_profile(tvs), _parent(args.out))


def cmd_angles(args) -> None:
    t1, t2 = _task_vectors(args)
    lines = ["tensor,index,angle"]
    for e in t1.manifest.entries:
        if len(e.shape) != 2:
            continue
        for i, theta in enumerate(subspace_angles(t1.deltas[e.name], t2.deltas[e.name], args.k)):
            lines.append(f"{e.name},{i},{theta:.6g}")
    atomic_write_bytes(_parent(args.out), ("\n".join(lines) + "\n").encode("utf-8"))


def cmd_suite(args) -> None:
    recipes = _recipe_list(args.recipes, args.seed)
    run_suite(args.seed, args.similarity, recipes, out_dir=args.out, mode=args.mode,
              threads=thread_count(), steps=args.steps)


COMMANDS = {
    "gen-tasks": cmd_gen_tasks,
    "train": cmd_train,
    "train-joint": cmd_train_joint,
    "merge": cmd_merge,
    "eval": cmd_eval,
    "profile": cmd_profile,
    "angles": cmd_angles,
    "suite": cmd_suite,
}


def execute(args: argparse.Namespace) -> int:
    try:
        _check_paths(args)
        COMMANDS[args.verb](args)
    except ConsolidateError as exc:
        detail = " ".join(str(exc).split())
        print(f"ERROR {exc.code}: {detail}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"ERROR io: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    return execute(args)


if __name__ == "__main__":
    sys.exit(main())
