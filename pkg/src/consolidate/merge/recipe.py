"""Merge recipes: method table, defaults, validation and the JSON file format."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from ..checkpoint import Checkpoint
from ..errors import RecipeError

GRANULARITIES = ("model", "layer", "matrix")


@dataclass(frozen=True)
class MethodInfo:
    name: str
    granularity: str
    kind: str  # "param", "delta" or "calibration"
    defaults: dict
    data_free: bool = True


# Table order; granularity is each method's native assignment.
METHODS: dict[str, MethodInfo] = {m.name: m for m in [
    MethodInfo("average", "model", "param", {}),
    MethodInfo("slerp", "model", "param", {"t": 0.5}),
    MethodInfo("metagpt", "model", "delta", {}),
    MethodInfo("lines", "layer", "delta", {"alpha0": 0.5, "beta0": 0.5}),
    MethodInfo("dare", "model", "delta", {"p": 0.9}),
    MethodInfo("breadcrumbs", "model", "delta", {"beta": 0.85, "gamma": 0.99}),
    MethodInfo("ties", "matrix", "delta", {"k": 0.2}),
    MethodInfo("consensus_ta", "matrix", "delta", {"lambda_mask": 0.4, "min_support": 2}),
    MethodInfo("tsv", "matrix", "delta", {"rank": None}),
    MethodInfo("iso_cts", "matrix", "delta", {"rank": None}),
    MethodInfo("impart", "matrix", "delta", {"tau": 0.9}),
    MethodInfo("tadrop", "matrix", "delta", {"rho": 0.9}),
    MethodInfo("cabs", "matrix", "delta", {"n": 1, "m": 4}),
    MethodInfo("pcb", "matrix", "delta", {"r": 0.2}),
    MethodInfo("della", "matrix", "delta", {"p_min": 0.2, "p_max": 0.8}),
    MethodInfo("sce", "matrix", "delta", {"p": 0.1}),
    MethodInfo("wudi", "matrix", "delta", {"iters": 300, "step": 1e-2}),
    MethodInfo("adamerging", "layer", "calibration", {"iters": 200, "step": 0.05, "init": 0.3}, False),
    MethodInfo("regmean", "matrix", "calibration", {"rho": 0.9}, False),
    MethodInfo("cat", "matrix", "calibration", {"r": 2}, False),
]}

ALL_METHODS = tuple(METHODS)

# (low, high, low_inclusive, high_inclusive) or "int>=1"
_RANGES: dict[str, dict[str, Any]] = {
    "slerp": {"t": (0, 1, True, True)},
    "lines": {"alpha0": (-math.inf, math.inf, False, False), "beta0": (-math.inf, math.inf, False, False)},
    "dare": {"p": (0, 1, True, False)},
    "breadcrumbs": {"beta": (0, 1, True, True), "gamma": (0, 1, True, True)},
    "ties": {"k": (0, 1, False, True)},
    "consensus_ta": {"lambda_mask": (0, math.inf, False, False), "min_support": "int>=1"},
    "tsv": {"rank": "int>=1|none"},
    "iso_cts": {"rank": "int>=1|none"},
    "impart": {"tau": (0, 1, False, True)},
    "tadrop": {"rho": (0, 1, False, True)},
    "cabs": {"n": "int>=1", "m": "int>=1"},
    "pcb": {"r": (0, 1, False, True)},
    "della": {"p_min": (0, 1, False, True), "p_max": (0, 1, False, True)},
    "sce": {"p": (0, 1, False, True)},
    "wudi": {"iters": "int>=0", "step": (0, math.inf, False, False)},
    "adamerging": {"iters": "int>=0", "step": (0, math.inf, False, False), "init": (0, 1, True, True)},
    "regmean": {"rho": (0, 1, True, True)},
    "cat": {"r": "int>=1"},
}


def _check_param(method: str, key: str, value) -> None:
    rule = _RANGES.get(method, {}).get(key)
    if rule is None:
        return
    if isinstance(rule, str):
        if value is None and rule.endswith("|none"):
            return
        if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
            raise RecipeError(f"{method}.{key} must be an integer, got {value!r}")
        floor = 0 if rule.startswith("int>=0") else 1
        if value < floor:
            raise RecipeError(f"{method}.{key} must be >= {floor}, got {value}")
        return
    lo, hi, lo_inc, hi_inc = rule
    if not isinstance(value, (int, float)) or isinstance(value, bool) or not math.isfinite(value):
        raise RecipeError(f"{method}.{key} must be a finite number, got {value!r}")
    if (value < lo or (value == lo and not lo_inc)) or (value > hi or (value == hi and not hi_inc)):
        raise RecipeError(f"{method}.{key}={value} outside its allowed range")


@dataclass
class MergeRecipe:
    method: str
    granularity: str | None = None
    weights: list[float] | None = None
    lam: float = 1.0
    params: dict = field(default_factory=dict)
    normalize: bool | str = False
    seed: int = 0
    calibration: list[str] | None = None

    @property
    def info(self) -> MethodInfo:
        return METHODS[self.method]

    def resolved(self, n_experts: int) -> "MergeRecipe":
        """Validated copy with every default filled in."""
        if self.method not in METHODS:
            raise RecipeError(f"unknown method {self.method!r}; expected one of {', '.join(ALL_METHODS)}")
        info = self.info
        gran = self.granularity or info.granularity
        if gran not in GRANULARITIES:
            raise RecipeError(f"unknown granularity {gran!r}")
        if info.kind == "calibration" and gran != info.granularity and self.method != "adamerging":
            raise RecipeError(f"{self.method} only supports {info.granularity} granularity")
        unknown = set(self.params) - set(info.defaults)
        if unknown:
            raise RecipeError(f"{self.method}: unknown params {sorted(unknown)}")
        params = dict(info.defaults, **self.params)
        for k, v in params.items():
            _check_param(self.method, k, v)
        if n_experts < 1:
            raise RecipeError("at least one expert is required")
        weights = self.weights
        if weights is None:
            weights = [1.0 / n_experts] * n_experts
        weights = [float(w) for w in weights]
        if len(weights) != n_experts:
            raise RecipeError(f"{len(weights)} weights for {n_experts} experts")
        if any(w < 0 or not math.isfinite(w) for w in weights):
            raise RecipeError(f"weights must be finite and non-negative, got {weights}")
        if self.method == "average" and abs(sum(weights) - 1.0) > 1e-6:
            raise RecipeError(f"average weights must sum to 1, got {sum(weights)}")
        if not math.isfinite(self.lam):
            raise RecipeError("lambda must be finite")
        normalize = self.normalize
        if normalize is True:
            normalize = "model"
        if normalize not in (False, "model", "matrix"):
            raise RecipeError(f"normalize must be false, true, 'model' or 'matrix', got {normalize!r}")
        if not isinstance(self.seed, (int, np.integer)) or isinstance(self.seed, bool):
            raise RecipeError(f"seed must be an integer, got {self.seed!r}")
        return MergeRecipe(self.method, gran, weights, float(self.lam), params, normalize,
                           int(self.seed), self.calibration)

    def to_json(self) -> dict:
        out = asdict(self)
        out["lambda"] = out.pop("lam")
        return out


@dataclass(eq=False)
class MergedModel:
    checkpoint: Checkpoint
    recipe_echo: MergeRecipe
    per_tensor_coefficients: dict[str, list[float]] | None = None


@dataclass
class RecipeFile:
    recipe: MergeRecipe
    base: str
    experts: list[str]


_RECIPE_KEYS = {"method", "granularity", "base", "experts", "weights", "lambda", "params", "normalize",
                "seed", "calibration"}


def parse_recipe(obj: dict, root: Path | None = None) -> RecipeFile:
    if not isinstance(obj, dict):
        raise RecipeError("recipe must be a JSON object")
    unknown = set(obj) - _RECIPE_KEYS
    if unknown:
        raise RecipeError(f"unknown recipe fields {sorted(unknown)}")
    for key in ("method", "base", "experts", "seed"):
        if key not in obj:
            raise RecipeError(f"recipe is missing {key!r}")
    if not isinstance(obj["experts"], list) or not obj["experts"]:
        raise RecipeError("experts must be a non-empty list of paths")
    params = obj.get("params") or {}
    if not isinstance(params, dict):
        raise RecipeError("params must be an object")
    cal = obj.get("calibration")
    if isinstance(cal, str):
        cal = [cal]
    if cal is not None and not (isinstance(cal, list) and all(isinstance(c, str) for c in cal)):
        raise RecipeError("calibration must be a path or a list of paths")

    def resolve(p):
        p = Path(p)
        return str(p if p.is_absolute() or root is None else root / p)

    recipe = MergeRecipe(
        method=obj["method"],
        granularity=obj.get("granularity"),
        weights=obj.get("weights"),
        lam=obj.get("lambda", 1.0),
        params=params,
        normalize=obj.get("normalize", False),
        seed=obj["seed"],
        calibration=None if cal is None else [resolve(c) for c in cal],
    )
    recipe.resolved(len(obj["experts"]))
    return RecipeFile(recipe, resolve(obj["base"]), [resolve(e) for e in obj["experts"]])


def load_recipe(path) -> RecipeFile:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise RecipeError(f"{path}: invalid JSON ({exc})") from None
    return parse_recipe(obj, path.parent)
