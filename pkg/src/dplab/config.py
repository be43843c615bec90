"""Experiment configuration: TOML in, defaults resolved, every violation reported.

Configs are TOML files (the resolved copy written next to the artifacts is
JSON; both are accepted). Top-level keys::

    kind        one of KINDS
    seeds       non-empty list of ints
    output_dir  where artifacts go; relative paths resolve under
                $DPLAB_OUTPUT_ROOT when set, else the current directory

plus the sections below. Unknown keys are errors so that typos surface.
"""
from __future__ import annotations

import copy
import json
import os
import re
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .optim import ConfigError, DpConfig, MODES

KINDS = ("phase-switch", "lmc-instability", "random-probe", "clip-noise-ablation", "prune-sweep",
         "theorem1-check", "theorem2-flow", "r-under-pruning")

OUTPUT_ROOT_ENV = "DPLAB_OUTPUT_ROOT"

DATASET_DEFAULTS = {
    "blobs": {"kind": "blobs", "n": 600, "n_classes": 3, "dim": 10, "spread": 1.0, "separation": 3.0,
              "test_fraction": 0.25, "seed": 0},
    "synthetic": {"kind": "synthetic", "d_s": 10, "d_n": 90, "sigma": 0.5, "v_norm": 1.0, "n": 4096,
                  "test_fraction": 0.0, "seed": 0},
    "idx": {"kind": "idx", "images": None, "labels": None, "test_images": None, "test_labels": None,
            "fraction": 1.0, "test_fraction": 0.0, "seed": 0},
}

MODEL_DEFAULTS = {
    "mlp": {"kind": "mlp", "hidden": [32], "activation": "relu", "init": "uniform", "init_std": 0.1,
            "init_scale": 0.1},
    "two_layer_linear": {"kind": "two_layer_linear", "hidden": 16, "init": "uniform", "init_std": 0.1,
                         "init_scale": 0.1},
}

OPTIMIZER_DEFAULTS = {
    "sgd": {"mode": "sgd", "lr": 0.1, "batch_size": 128},
    "dpsgd": {"mode": "dpsgd", "lr": 0.5, "batch_size": 1024, "C": 1.0, "sigma": 0.55},
    "clip_only": {"mode": "clip_only", "lr": 0.1, "batch_size": 128, "C": 1.0},
    "noise_only": {"mode": "noise_only", "lr": 0.1, "batch_size": 128, "sigma": 2.4, "C_ref": 1.0},
}
OPTIMIZER_KEYS = {"mode", "lr", "batch_size", "C", "sigma", "C_ref", "epsilon_label", "grad_method"}

SECTION_DEFAULTS = {
    "phase": {"k": 3, "T": 10, "phase1": ["sgd", "dpsgd"], "phase2": ["sgd", "dpsgd"]},
    "lmc": {"k": 3, "T": 10, "phase1": "sgd", "phase2": ["sgd", "dpsgd"], "loss_split": None,
            "grid_size": 30, "eval_size": 512},
    "probe": {"epochs": 10, "optimizer": "sgd", "distance": 15.0, "n_dirs": 20, "grid_size": 30,
              "loss_split": "train", "eval_size": 512},
    "ablation": {"modes": ["sgd", "clip_only", "noise_only", "dpsgd"], "epochs": 10,
                 "fixed_batch_steps": 5, "fixed_batch_size": 128},
    "pruning": {"keep_fractions": [1.0, 0.7, 0.3], "pretrain_epochs": 20, "pretrain_optimizer": "sgd",
                "train_optimizer": "dpsgd", "epochs": 10, "layers": None, "proxy_fraction": None},
    "theorem1": {"trials": 10000, "Cs": [0.1, 0.5, 1.0]},
    "flow": {"dt": 0.01, "max_time": 1000.0, "tol": 1e-8, "method": "midpoint", "log_every": 10},
    "r_pruning": {"keep_fractions": [1.0, 0.7, 0.3], "target_loss": 0.2, "pretrain_epochs": 20,
                  "optimizer": "sgd"},
}

KIND_SECTIONS = {
    "phase-switch": ("dataset", "model", "optimizers", "phase"),
    "lmc-instability": ("dataset", "model", "optimizers", "lmc"),
    "random-probe": ("dataset", "model", "optimizers", "probe"),
    "clip-noise-ablation": ("dataset", "model", "optimizers", "ablation"),
    "prune-sweep": ("dataset", "model", "optimizers", "pruning"),
    "theorem1-check": ("theorem1",),
    "theorem2-flow": ("dataset", "model", "flow"),
    "r-under-pruning": ("dataset", "model", "optimizers", "r_pruning"),
}
KIND_DATASET = {"theorem2-flow": "synthetic", "r-under-pruning": "synthetic"}
KIND_MODEL = {"theorem2-flow": "two_layer_linear", "r-under-pruning": "two_layer_linear"}


@dataclass
class Diagnostic:
    field: str
    message: str
    line: int | None = None

    def __str__(self):
        where = f"line {self.line}: " if self.line else ""
        return f"{where}{self.field}: {self.message}"


class ConfigValidationError(ValueError):
    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = diagnostics
        super().__init__("\n".join(str(d) for d in diagnostics))


@dataclass
class ExperimentConfig:
    kind: str
    seeds: list[int]
    output_dir: str
    sections: dict
    source: Path | None = None

    def section(self, name: str) -> dict:
        return self.sections[name]

    def optimizer(self, name: str) -> DpConfig:
        return DpConfig(**self.sections["optimizers"][name])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "seeds": list(self.seeds), "output_dir": self.output_dir,
                **copy.deepcopy(self.sections)}

    def output_path(self) -> Path:
        p = Path(self.output_dir)
        if p.is_absolute():
            return p
        root = os.environ.get(OUTPUT_ROOT_ENV)
        return Path(root) / p if root else Path.cwd() / p


# parsing ------------------------------------------------------------------

def read_config_file(path) -> tuple[dict, str]:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        try:
            return json.loads(text), text
        except json.JSONDecodeError as exc:
            raise ConfigValidationError([Diagnostic("<file>", f"invalid JSON: {exc.msg}", exc.lineno)]) from None
    try:
        return tomllib.loads(text), text
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        line = int(m.group(1)) if m else getattr(exc, "lineno", None)
        if line is None and "end of document" in str(exc):
            line = max(1, len(text.splitlines()))
        raise ConfigValidationError([Diagnostic("<file>", f"invalid TOML: {exc}", line)]) from None


def _line_of(text: str, dotted: str) -> int | None:
    """Best-effort line number of ``dotted`` (``section.key``) in TOML source."""
    parts = dotted.split(".")
    key = parts[-1]
    table = ".".join(parts[:-1])
    current = ""
    for i, raw in enumerate(text.splitlines(), start=1):
        s = raw.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s.strip("[]").strip()
            if current == dotted:
                return i
            continue
        if re.match(rf'^"?{re.escape(key)}"?\s*=', s) and current == table:
            return i
    return None


class _Collector:
    def __init__(self, text: str):
        self.text = text
        self.items: list[Diagnostic] = []

    def add(self, field: str, message: str):
        self.items.append(Diagnostic(field, message, _line_of(self.text, field)))


def _is_int(x):
    return isinstance(x, int) and not isinstance(x, bool)


def _is_num(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _merge(defaults: dict, given: dict, where: str, out: _Collector) -> dict:
    merged = copy.deepcopy(defaults)
    for k, v in given.items():
        if k not in defaults:
            out.add(f"{where}.{k}", f"unknown key (allowed: {', '.join(sorted(defaults))})")
        else:
            merged[k] = v
    return merged


def _check(out: _Collector, field: str, ok: bool, message: str):
    if not ok:
        out.add(field, message)


def resolve_config(raw: dict, text: str = "", source=None) -> tuple[ExperimentConfig | None, list[Diagnostic]]:
    """Apply defaults and validate; returns ``(config or None, diagnostics)``."""
    out = _Collector(text)
    base = Path(source).parent if source else Path.cwd()
    if not isinstance(raw, dict):
        return None, [Diagnostic("<file>", "top level must be a table")]
    kind = raw.get("kind")
    if kind not in KINDS:
        out.add("kind", f"must be one of {', '.join(KINDS)}; got {kind!r}")
        return None, out.items
    seeds = raw.get("seeds")
    if not isinstance(seeds, list) or not seeds:
        out.add("seeds", "must be a non-empty list of integers")
        seeds = []
    elif not all(_is_int(s) and s >= 0 for s in seeds):
        out.add("seeds", "every seed must be a non-negative integer")
    elif len(set(seeds)) != len(seeds):
        out.add("seeds", "seeds must be distinct")
    output_dir = raw.get("output_dir")
    if not isinstance(output_dir, str) or not output_dir:
        out.add("output_dir", "must be a non-empty string")
    allowed = {"kind", "seeds", "output_dir", *KIND_SECTIONS[kind]}
    for k in raw:
        if k not in allowed:
            out.add(k, f"not used by kind {kind!r} (allowed: {', '.join(sorted(allowed))})")

    sections = {}
    for name in KIND_SECTIONS[kind]:
        given = raw.get(name, {})
        if not isinstance(given, dict):
            out.add(name, "must be a table")
            given = {}
        if name == "dataset":
            sections[name] = _resolve_dataset(given, kind, base, out)
        elif name == "model":
            sections[name] = _resolve_model(given, kind, out)
        elif name == "optimizers":
            sections[name] = _resolve_optimizers(given, out)
        else:
            sections[name] = _merge(SECTION_DEFAULTS[name], given, name, out)

    _validate_sections(kind, sections, out)
    if out.items:
        return None, out.items
    return ExperimentConfig(kind, list(seeds), output_dir, sections, Path(source) if source else None), []


def _resolve_dataset(given, kind, base, out):
    dkind = given.get("kind", KIND_DATASET.get(kind, "blobs"))
    if dkind not in DATASET_DEFAULTS:
        out.add("dataset.kind", f"must be one of {', '.join(DATASET_DEFAULTS)}; got {dkind!r}")
        return dict(given)
    if kind in KIND_DATASET and dkind != KIND_DATASET[kind]:
        out.add("dataset.kind", f"kind {kind!r} needs a {KIND_DATASET[kind]!r} dataset")
    ds = _merge(DATASET_DEFAULTS[dkind], given, "dataset", out)
    if dkind == "idx":
        for key in ("images", "labels", "test_images", "test_labels"):
            p = ds[key]
            if p is None:
                if key in ("images", "labels"):
                    out.add(f"dataset.{key}", "required for idx datasets")
                continue
            full = Path(p) if Path(p).is_absolute() else base / p
            if not full.exists():
                out.add(f"dataset.{key}", f"file not found: {full}")
            ds[key] = str(full)
        _check(out, "dataset.fraction", _is_num(ds["fraction"]) and 0 < ds["fraction"] <= 1,
               "must be in (0, 1]")
    else:
        _check(out, "dataset.n", _is_int(ds["n"]) and ds["n"] >= 2, "must be an integer >= 2")
    if dkind == "blobs":
        _check(out, "dataset.n_classes", _is_int(ds["n_classes"]) and ds["n_classes"] >= 2, "must be >= 2")
        _check(out, "dataset.dim", _is_int(ds["dim"]) and ds["dim"] >= 1, "must be >= 1")
        _check(out, "dataset.spread", _is_num(ds["spread"]) and ds["spread"] >= 0, "must be >= 0")
    if dkind == "synthetic":
        _check(out, "dataset.d_s", _is_int(ds["d_s"]) and ds["d_s"] >= 0, "must be an integer >= 0")
        _check(out, "dataset.d_n", _is_int(ds["d_n"]) and ds["d_n"] >= 0, "must be an integer >= 0")
        _check(out, "dataset.sigma", _is_num(ds["sigma"]) and ds["sigma"] >= 0, "must be >= 0")
        _check(out, "dataset.v_norm", _is_num(ds["v_norm"]) and ds["v_norm"] >= 0, "must be >= 0")
    _check(out, "dataset.test_fraction", _is_num(ds["test_fraction"]) and 0 <= ds["test_fraction"] < 1,
           "must be in [0, 1)")
    _check(out, "dataset.seed", _is_int(ds["seed"]) and ds["seed"] >= 0, "must be a non-negative integer")
    return ds


def _resolve_model(given, kind, out):
    mkind = given.get("kind", KIND_MODEL.get(kind, "mlp"))
    if mkind not in MODEL_DEFAULTS:
        out.add("model.kind", f"must be one of {', '.join(MODEL_DEFAULTS)}; got {mkind!r}")
        return dict(given)
    if kind in KIND_MODEL and mkind != KIND_MODEL[kind]:
        out.add("model.kind", f"kind {kind!r} needs a {KIND_MODEL[kind]!r} model")
    defaults = dict(MODEL_DEFAULTS[mkind])
    if kind == "theorem2-flow":
        defaults["init"] = "balanced"
    m = _merge(defaults, given, "model", out)
    if mkind == "mlp":
        h = m["hidden"]
        _check(out, "model.hidden", isinstance(h, list) and all(_is_int(x) and x >= 1 for x in h),
               "must be a list of positive integers")
        _check(out, "model.activation", m["activation"] in ("relu", "tanh", "identity"),
               "must be relu, tanh or identity")
        _check(out, "model.init", m["init"] in ("uniform", "gaussian"), "must be uniform or gaussian")
    else:
        _check(out, "model.hidden", _is_int(m["hidden"]) and m["hidden"] >= 1, "must be a positive integer")
        _check(out, "model.init", m["init"] in ("uniform", "gaussian", "balanced"),
               "must be uniform, gaussian or balanced")
    _check(out, "model.init_scale", _is_num(m["init_scale"]) and m["init_scale"] > 0, "must be > 0")
    _check(out, "model.init_std", _is_num(m["init_std"]) and m["init_std"] >= 0, "must be >= 0")
    return m


def _resolve_optimizers(given, out):
    opts = {}
    for name, body in given.items():
        if not isinstance(body, dict):
            out.add(f"optimizers.{name}", "must be a table")
            continue
        mode = body.get("mode", name if name in OPTIMIZER_DEFAULTS else None)
        if mode not in MODES:
            out.add(f"optimizers.{name}.mode", f"must be one of {', '.join(MODES)}; got {mode!r}")
            continue
        base = {k: v for k, v in OPTIMIZER_DEFAULTS[mode].items()} if name in OPTIMIZER_DEFAULTS else {"mode": mode}
        for k, v in body.items():
            if k not in OPTIMIZER_KEYS:
                out.add(f"optimizers.{name}.{k}", f"unknown key (allowed: {', '.join(sorted(OPTIMIZER_KEYS))})")
            else:
                base[k] = v
        opts[name] = base
    for name, defaults in OPTIMIZER_DEFAULTS.items():
        opts.setdefault(name, dict(defaults))
    for name, body in opts.items():
        try:
            DpConfig(**body)
        except ConfigError as exc:
            for problem in str(exc).split("; "):
                field = _field_for_problem(problem)
                out.add(f"optimizers.{name}.{field}" if field else f"optimizers.{name}",
                        f"violates DpConfig invariant: {problem}")
        except TypeError as exc:
            out.add(f"optimizers.{name}", str(exc))
    return opts


def _field_for_problem(problem: str) -> str | None:
    for key in ("C_ref", "C", "sigma", "lr", "batch_size", "grad_method", "mode"):
        if re.search(rf"\b{key}\b", problem):
            return key
    return None


def _need_optimizer(out, sections, field, name):
    if not isinstance(name, str) or name not in sections.get("optimizers", {}):
        out.add(field, f"names an undefined optimizer {name!r}")


def _keep_fractions(out, field, values):
    if not isinstance(values, list) or not values:
        out.add(field, "must be a non-empty list")
        return
    for v in values:
        if not (_is_num(v) and 0 < v <= 1):
            out.add(field, f"keep_fraction {v!r} outside (0, 1]")


def _validate_sections(kind, s, out):
    if kind == "phase-switch":
        p = s["phase"]
        _check(out, "phase.T", _is_int(p["T"]) and p["T"] >= 1, "must be a positive integer")
        _check(out, "phase.k", _is_int(p["k"]) and _is_int(p["T"]) and 0 <= p["k"] <= p["T"],
               "PhasePlan invariant 0 <= k <= T violated")
        for key in ("phase1", "phase2"):
            names = p[key] if isinstance(p[key], list) else [p[key]]
            for n in names:
                _need_optimizer(out, s, f"phase.{key}", n)
    elif kind == "lmc-instability":
        p = s["lmc"]
        _check(out, "lmc.k", _is_int(p["k"]) and _is_int(p["T"]) and 0 <= p["k"] <= p["T"],
               "PhasePlan invariant 0 <= k <= T violated")
        _check(out, "lmc.loss_split", p["loss_split"] in ("train", "test"),
               "must be set explicitly to 'train' or 'test'")
        _need_optimizer(out, s, "lmc.phase1", p["phase1"])
        for n in (p["phase2"] if isinstance(p["phase2"], list) else [p["phase2"]]):
            _need_optimizer(out, s, "lmc.phase2", n)
        _check(out, "lmc.grid_size", _is_int(p["grid_size"]) and p["grid_size"] >= 3, "must be >= 3")
    elif kind == "random-probe":
        p = s["probe"]
        _need_optimizer(out, s, "probe.optimizer", p["optimizer"])
        _check(out, "probe.distance", _is_num(p["distance"]) and p["distance"] > 0, "must be > 0")
        _check(out, "probe.n_dirs", _is_int(p["n_dirs"]) and p["n_dirs"] >= 1, "must be >= 1")
        _check(out, "probe.grid_size", _is_int(p["grid_size"]) and p["grid_size"] >= 3, "must be >= 3")
        _check(out, "probe.loss_split", p["loss_split"] in ("train", "test"), "must be 'train' or 'test'")
    elif kind == "clip-noise-ablation":
        p = s["ablation"]
        if not isinstance(p["modes"], list) or not p["modes"]:
            out.add("ablation.modes", "must be a non-empty list of optimizer names")
        else:
            for n in p["modes"]:
                _need_optimizer(out, s, "ablation.modes", n)
        _check(out, "ablation.epochs", _is_int(p["epochs"]) and p["epochs"] >= 1, "must be >= 1")
        _check(out, "ablation.fixed_batch_steps", _is_int(p["fixed_batch_steps"]) and p["fixed_batch_steps"] >= 0,
               "must be >= 0")
    elif kind == "prune-sweep":
        p = s["pruning"]
        _keep_fractions(out, "pruning.keep_fractions", p["keep_fractions"])
        _need_optimizer(out, s, "pruning.pretrain_optimizer", p["pretrain_optimizer"])
        _need_optimizer(out, s, "pruning.train_optimizer", p["train_optimizer"])
        _check(out, "pruning.pretrain_epochs", _is_int(p["pretrain_epochs"]) and p["pretrain_epochs"] >= 0,
               "must be >= 0")
        pf = p["proxy_fraction"]
        _check(out, "pruning.proxy_fraction", pf is None or (_is_num(pf) and 0 < pf <= 1), "must be in (0, 1]")
    elif kind == "theorem1-check":
        p = s["theorem1"]
        _check(out, "theorem1.trials", _is_int(p["trials"]) and p["trials"] >= 1, "must be >= 1")
        _check(out, "theorem1.Cs", isinstance(p["Cs"], list) and p["Cs"] and all(_is_num(c) and c > 0 for c in p["Cs"]),
               "must be a non-empty list of positive numbers")
    elif kind == "theorem2-flow":
        p = s["flow"]
        _check(out, "flow.dt", _is_num(p["dt"]) and p["dt"] > 0, "must be > 0")
        _check(out, "flow.max_time", _is_num(p["max_time"]) and p["max_time"] > 0, "must be > 0")
        _check(out, "flow.method", p["method"] in ("midpoint", "euler"), "must be 'midpoint' or 'euler'")
        _check(out, "flow.log_every", _is_int(p["log_every"]) and p["log_every"] >= 1, "must be >= 1")
        _check(out, "dataset.sigma", s["dataset"].get("sigma", 0) > 0 or s["dataset"].get("v_norm", 0) > 0,
               "flow needs sigma > 0 or v_norm > 0")
    elif kind == "r-under-pruning":
        p = s["r_pruning"]
        _keep_fractions(out, "r_pruning.keep_fractions", p["keep_fractions"])
        _need_optimizer(out, s, "r_pruning.optimizer", p["optimizer"])
        _check(out, "r_pruning.target_loss", _is_num(p["target_loss"]) and p["target_loss"] > 0, "must be > 0")


def load_config(path) -> ExperimentConfig:
    raw, text = read_config_file(path)
    cfg, diags = resolve_config(raw, text, path)
    if diags:
        raise ConfigValidationError(diags)
    return cfg


def validate_file(path) -> list[Diagnostic]:
    try:
        raw, text = read_config_file(path)
    except ConfigValidationError as exc:
        return exc.diagnostics
    return resolve_config(raw, text, path)[1]
