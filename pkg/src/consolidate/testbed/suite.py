"""End-to-end comparison grid: experts, data mixing and every merge recipe."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from ..calibration import CalibrationSet
from ..checkpoint import Checkpoint, atomic_write_bytes, checkpoint_bytes
from ..errors import ConsolidateError
from ..merge import ALL_METHODS, MergeRecipe, apply_recipe
from .evaluate import EvalReport, evaluate
from .tasks import TaskBundle, gen_tasks
from .train import init_base, train, train_joint


@dataclass
class SuiteResult:
    task_ids: list[str]
    reports: list[EvalReport]
    kinds: list[str]
    expert_accuracy: dict[str, float]
    checkpoints: dict[str, Checkpoint] = field(default_factory=dict)

    def report(self, tag: str) -> EvalReport:
        for r in self.reports:
            if r.model_tag == tag:
                return r
        raise KeyError(tag)

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "kind"] + [f"acc_{t}" for t in self.task_ids] + ["mean_accuracy"]
                   + [f"ret_{t}" for t in self.task_ids] + ["mean_retention", "wins"])
        for kind, r in zip(self.kinds, self.reports):
            w.writerow([r.model_tag, kind]
                       + [f"{r.accuracy[t]:.6f}" for t in self.task_ids] + [f"{r.mean_accuracy:.6f}"]
                       + [f"{r.retention.get(t, float('nan')):.6f}" for t in self.task_ids]
                       + [f"{r.mean_retention:.6f}", r.wins(self.expert_accuracy)])
        return buf.getvalue()

    def markdown(self) -> str:
        head = ["model", "kind"] + self.task_ids + ["mean", "retention", "beats expert"]
        lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
        for kind, r in zip(self.kinds, self.reports):
            cells = [r.model_tag, kind] + [f"{100 * r.accuracy[t]:.2f}" for t in self.task_ids]
            cells += [f"{100 * r.mean_accuracy:.2f}", f"{r.mean_retention:.3f}", str(r.wins(self.expert_accuracy))]
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def default_recipes(seed: int, methods: Sequence[str] = ALL_METHODS) -> list[MergeRecipe]:
    return [MergeRecipe(m, seed=seed) for m in methods]


def _file_name(index: int, recipe: MergeRecipe) -> str:
    return f"{index:02d}_{recipe.method}.mrgf"


def run_suite(seed: int, similarity: float, recipes: Sequence[MergeRecipe] | None = None,
              out_dir=None, mode: str = "full", threads: int = 1, bundle: TaskBundle | None = None,
              steps: int = 500, lr: float = 0.05, rank: int = 2) -> SuiteResult:
    """Train base, experts and the joint model, then apply every recipe.

    ``mode`` selects how experts are fine-tuned ("full" or "lowrank").
    Merges may run on ``threads`` workers; rows and files are always emitted
    in recipe order.
    """
    recipes = default_recipes(seed) if recipes is None else list(recipes)
    bundle = bundle or gen_tasks(seed, similarity)
    train_sets, eval_sets = bundle.split("train"), bundle.split("eval")
    cal_sets = [CalibrationSet.from_dataset(d, seed) for d in bundle.split("cal")]
    task_ids = [d.task_id for d in eval_sets]

    base = init_base(seed, train_sets)
    experts = [train(base, d, steps=steps, lr=lr, mode=mode, seed=seed, rank=rank) for d in train_sets]
    joint = train_joint(base, train_sets, steps=steps, lr=lr, seed=seed)

    own = {}
    expert_reports = []
    for ex, ds in zip(experts, eval_sets):
        rep = evaluate(ex, eval_sets, tag=f"expert_{ds.task_id}")
        own[ds.task_id] = rep.accuracy[ds.task_id]
        expert_reports.append(rep)
    for rep in expert_reports:
        rep.retention = {t: a / own[t] for t, a in rep.accuracy.items() if own[t] > 0}

    def run(item):
        index, recipe = item
        try:
            merged = apply_recipe(recipe, base, experts, calibration=cal_sets, threads=1)
        except ConsolidateError as exc:
            exc.args = (f"suite row {recipe.method!r}: {exc}",)
            raise
        return merged.checkpoint, evaluate(merged.checkpoint, eval_sets, own, tag=recipe.method)

    items = list(enumerate(recipes))
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            merged_rows = list(pool.map(run, items))
    else:
        merged_rows = [run(x) for x in items]

    reports = expert_reports + [evaluate(joint, eval_sets, own, tag="joint")]
    kinds = ["expert"] * len(experts) + ["joint"]
    checkpoints = {"base": base, "joint": joint}
    checkpoints.update({f"expert_{t}": e for t, e in zip(task_ids, experts)})
    for (index, recipe), (ckpt, rep) in zip(items, merged_rows):
        reports.append(rep)
        kinds.append("merged")
        checkpoints[_file_name(index, recipe)] = ckpt
    result = SuiteResult(task_ids, reports, kinds, own, checkpoints)
    if out_dir is not None:
        write_suite(result, out_dir)
    return result


def write_suite(result: SuiteResult, out_dir) -> None:
    out = Path(out_dir)
    (out / "models").mkdir(parents=True, exist_ok=True)
    for name, ckpt in result.checkpoints.items():
        fname = name if name.endswith(".mrgf") else f"{name}.mrgf"
        atomic_write_bytes(out / "models" / fname, checkpoint_bytes(ckpt))
    atomic_write_bytes(out / "suite.csv", result.csv().encode("utf-8"))
    atomic_write_bytes(out / "suite.md", result.markdown().encode("utf-8"))
