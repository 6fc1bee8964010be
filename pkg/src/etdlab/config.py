"""Experiment configuration documents: parsing, normalization and hashing.

A configuration is a JSON object::

    {
      "model": "twostate" | {"builtin": "baird7", "params": {...}} | {"path": "m.json"} | {inline model},
      "weighting": "emphatic" | "behavior",           (optional, follows the variant)
      "ode": {"horizon": 20.0, "dt": 0.01},            (optional, used by analyze)
      "algorithm": {"variant": ..., "schedule": {...}, "radius": 12.0 | "auto", ...},
      "experiment": {"horizon": ..., "n_runs": ..., "base_seed": ..., "delta": 0.3 | "auto", ...},
      "grid": {"param": "alpha", "values": [0.01, 0.003]}   (optional)
    }

``radius: "auto"`` resolves to ``radius_factor * |b| / c`` and ``delta: "auto"``
to ``0.1 * max(1, |theta*|)``, both from the exact analysis.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .etd import AlgoConfig, StepSchedule, Variant
from .exceptions import ConfigParse, ModelError
from .experiment import ExperimentPlan
from .mdp import BUILTINS, MODEL_KEYS, builtin, load_model, model_from_dict

TOP_KEYS = ("model", "weighting", "ode", "algorithm", "experiment", "grid")
GRID_PARAMS = ("alpha", "clip_K", "radius", "perturb_std", "delta")

ALGO_DEFAULTS = {
    "variant": Variant.PROJECTED.value,
    "schedule": {"kind": "constant", "a": 0.01},
    "radius": "auto",
    "radius_factor": 1.5,
    "clip_K": None,
    "clip_kind": "componentwise",
    "perturb_std": 0.0,
    "init_state": None,
    "init_e": None,
    "init_F": None,
    "init_theta": None,
}
EXPERIMENT_DEFAULTS = {
    "horizon": 10000,
    "burn_in": None,
    "n_runs": 1,
    "base_seed": 0,
    "delta": "auto",
    "window_m": 1,
    "thin": 1,
}


def _merge(defaults, given, section):
    if given is None:
        given = {}
    if not isinstance(given, dict):
        raise ConfigParse(f"{section!r} must be an object", key=section)
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigParse(f"unknown key {section}.{unknown[0]}", key=f"{section}.{unknown[0]}")
    out = copy.deepcopy(defaults)
    out.update(copy.deepcopy(given))
    return out


def _check_number(value, key, positive=False, integer=False, allow=()):
    if value in allow:
        return value
    kind = int if integer else (int, float)
    if isinstance(value, bool) or not isinstance(value, kind):
        raise ConfigParse(f"{key} must be {'an integer' if integer else 'a number'}, got {value!r}",
                          key=key)
    if positive and value <= 0:
        raise ConfigParse(f"{key} must be positive", key=key)
    return value


def _normalize_model(entry, base_dir):
    if isinstance(entry, str):
        if entry not in BUILTINS:
            raise ConfigParse(f"unknown builtin model {entry!r}", key="model")
        return {"builtin": entry, "params": {}}
    if not isinstance(entry, dict):
        raise ConfigParse("model must be a builtin name or an object", key="model")
    if "builtin" in entry:
        extra = sorted(set(entry) - {"builtin", "params", "features"})
        if extra:
            raise ConfigParse(f"unknown key model.{extra[0]}", key=f"model.{extra[0]}")
        if entry["builtin"] not in BUILTINS:
            raise ConfigParse(f"unknown builtin model {entry['builtin']!r}", key="model.builtin")
        out = {"builtin": entry["builtin"], "params": dict(entry.get("params") or {})}
        if entry.get("features") is not None:
            out["features"] = entry["features"]
        return out
    if "path" in entry:
        path = Path(entry["path"])
        if not path.is_absolute() and base_dir is not None:
            path = Path(base_dir) / path
        return {"path": str(path)}
    missing = [k for k in MODEL_KEYS if k not in entry and k != "reward_noise_std"]
    if missing:
        raise ConfigParse(f"model is missing key {missing[0]!r}", key=f"model.{missing[0]}")
    return dict(entry)


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """Normalized configuration; ``doc`` is the canonical JSON-ready form."""

    doc: dict

    @classmethod
    def from_dict(cls, raw, base_dir=None):
        if not isinstance(raw, dict):
            raise ConfigParse("configuration must be a JSON object")
        unknown = sorted(set(raw) - set(TOP_KEYS))
        if unknown:
            raise ConfigParse(f"unknown top-level key {unknown[0]!r}", key=unknown[0])
        if "model" not in raw:
            raise ConfigParse("configuration is missing key 'model'", key="model")
        algo = _merge(ALGO_DEFAULTS, raw.get("algorithm"), "algorithm")
        exp = _merge(EXPERIMENT_DEFAULTS, raw.get("experiment"), "experiment")
        try:
            Variant(algo["variant"])
        except ValueError:
            raise ConfigParse(f"unknown variant {algo['variant']!r}", key="algorithm.variant") from None
        if not isinstance(algo["schedule"], dict):
            raise ConfigParse("algorithm.schedule must be an object", key="algorithm.schedule")
        try:
            algo["schedule"] = StepSchedule.from_dict(algo["schedule"]).to_dict()
        except (TypeError, ValueError) as exc:
            raise ConfigParse(f"algorithm.schedule: {exc}", key="algorithm.schedule") from None
        _check_number(algo["radius"], "algorithm.radius", positive=True, allow=("auto", None))
        _check_number(algo["radius_factor"], "algorithm.radius_factor", positive=True)
        _check_number(exp["horizon"], "experiment.horizon", positive=True, integer=True)
        _check_number(exp["n_runs"], "experiment.n_runs", positive=True, integer=True)
        _check_number(exp["base_seed"], "experiment.base_seed", integer=True)
        _check_number(exp["thin"], "experiment.thin", positive=True, integer=True)
        _check_number(exp["window_m"], "experiment.window_m", positive=True, integer=True)
        _check_number(exp["delta"], "experiment.delta", positive=True, allow=("auto",))
        _check_number(exp["burn_in"], "experiment.burn_in", integer=True, allow=(None,))
        weighting = raw.get("weighting")
        if weighting is None:
            weighting = "behavior" if Variant(algo["variant"]).offpolicy_td else "emphatic"
        if weighting not in ("emphatic", "behavior"):
            raise ConfigParse("weighting must be 'emphatic' or 'behavior'", key="weighting")
        doc = {"model": _normalize_model(raw["model"], base_dir), "weighting": weighting,
               "algorithm": algo, "experiment": exp}
        if raw.get("ode") is not None:
            ode = _merge({"horizon": 20.0, "dt": 0.01, "theta0": None}, raw["ode"], "ode")
            _check_number(ode["horizon"], "ode.horizon", positive=True)
            _check_number(ode["dt"], "ode.dt", positive=True)
            doc["ode"] = ode
        if raw.get("grid") is not None:
            grid = raw["grid"]
            if not isinstance(grid, dict) or grid.get("param") not in GRID_PARAMS:
                raise ConfigParse(f"grid.param must be one of {GRID_PARAMS}", key="grid.param")
            values = grid.get("values")
            if not isinstance(values, list) or not values:
                raise ConfigParse("grid.values must be a nonempty list", key="grid.values")
            for v in values:
                _check_number(v, "grid.values")
            doc["grid"] = {"param": grid["param"], "values": list(values)}
        return cls(doc)

    @classmethod
    def load(cls, path):
        path = Path(path)
        with open(path) as fh:
            text = fh.read()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigParse(f"invalid JSON in {path}: {exc}") from None
        return cls.from_dict(raw, base_dir=path.parent)

    def to_dict(self):
        return copy.deepcopy(self.doc)

    def to_json(self):
        return json.dumps(self.doc, sort_keys=True, separators=(",", ":"))

    @property
    def hash(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def with_overrides(self, seed=None, runs=None, thin=None):
        doc = self.to_dict()
        if seed is not None:
            doc["experiment"]["base_seed"] = int(seed)
        if runs is not None:
            doc["experiment"]["n_runs"] = int(runs)
        if thin is not None:
            doc["experiment"]["thin"] = int(thin)
        return ExperimentConfig.from_dict(doc)

    # -- building runtime objects -------------------------------------------

    def build_model(self):
        entry = self.doc["model"]
        if "builtin" in entry:
            try:
                mdp, pp = builtin(entry["builtin"], **entry["params"])
            except TypeError as exc:
                raise ConfigParse(f"model.params: {exc}", key="model.params") from None
            if "features" in entry:
                mdp = mdp.replace(features=np.asarray(entry["features"], dtype=float))
            return mdp, pp
        if "path" in entry:
            return load_model(entry["path"])
        return model_from_dict(entry)

    def grid_points(self):
        grid = self.doc.get("grid")
        if grid is None:
            return [(None, None)]
        return [(grid["param"], v) for v in grid["values"]]

    def build_algo(self, report, param=None, value=None):
        a = copy.deepcopy(self.doc["algorithm"])
        if param == "alpha":
            a["schedule"] = dict(a["schedule"], kind="constant", a=value)
        elif param in ("clip_K", "radius", "perturb_std"):
            a[param] = value
        factor = a.pop("radius_factor")
        if a["radius"] == "auto":
            needs = Variant(a["variant"]).projected
            a["radius"] = factor * report.radius_threshold if needs else None
            if needs and not np.isfinite(a["radius"]):
                raise ModelError("radius 'auto' needs a positive definiteness margin")
        try:
            return AlgoConfig.from_dict(a)
        except ModelError as exc:
            raise ConfigParse(f"algorithm: {exc}", key="algorithm") from None

    def build_plan(self, mdp, pp, report, param=None, value=None):
        e = self.doc["experiment"]
        delta = e["delta"]
        if param == "delta":
            delta = value
        elif delta == "auto":
            scale = 0.0 if report.theta_star is None else float(np.linalg.norm(report.theta_star))
            delta = 0.1 * max(1.0, scale)
        algo = self.build_algo(report, param, value)
        try:
            return ExperimentPlan(
                mdp=mdp, pp=pp, algo=algo,
                horizon=e["horizon"], n_runs=e["n_runs"], base_seed=e["base_seed"],
                delta=float(delta), burn_in=e["burn_in"], window_m=e["window_m"], thin=e["thin"])
        except ModelError as exc:
            raise ConfigParse(f"experiment: {exc}", key="experiment") from None
