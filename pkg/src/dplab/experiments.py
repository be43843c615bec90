"""Runners for each experiment kind and the atomic artifact writer.

A runner turns a resolved :class:`ExperimentConfig` into a mapping of
relative path -> bytes. Nothing touches the disk until every seed has
finished; :func:`write_artifacts` then stages the files in a sibling temp
directory, adds ``manifest.json`` (sha256 of every file) and renames the
directory into place. A failure at any point leaves no output directory.

Per-seed artifacts live under ``seed<N>/``; ``summary.csv`` holds median and
interquartile range across seeds.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import (Dataset, default_synthetic_spec, load_idx, make_blobs, sample_synthetic, split,
                   subsample)
from .grads import batch_loss
from .landscape import (default_grid, interpolation_profile, param_stats, random_direction_probe)
from .models import InitSpec, Model, build_mlp, build_two_layer_linear, checkpoint_bytes
from .optim import PhasePlan, dp_step, epochs_csv, steps_jsonl, train
from .pruning import PruneSpec, mask_density, masks_from, rewind
from .theory import (R_under_pruning, closed_form_optimum, population_gradient_flow, theorem1_csv,
                     theorem1_trials)

MANIFEST = "manifest.json"
RESOLVED = "config.resolved.json"


# small helpers ------------------------------------------------------------

def _csv(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    return buf.getvalue().encode()


def _fraction_tag(kf: float) -> str:
    return f"keep{float(kf)!r}"


SUMMARY_HEADER = ["group", "metric", "n", "median", "q25", "q75"]


def summarize(rows: list[dict], group_key: str, metrics: list[str]) -> bytes:
    """Median and quartiles of each metric, grouped by ``group_key``, in first-seen group order."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[group_key], []).append(r)
    out = []
    for g, members in groups.items():
        for m in metrics:
            vals = np.array([float(r[m]) for r in members])
            q25, med, q75 = np.percentile(vals, [25, 50, 75])
            out.append([str(g), m, len(vals), float(med), float(q25), float(q75)])
    return _csv(SUMMARY_HEADER, out)


def _hist_csv(model: Model) -> bytes:
    st = param_stats(model)
    rows = []
    for name, counts in st.histograms.items():
        for lo, hi, c in zip(st.bin_edges[:-1], st.bin_edges[1:], counts):
            rows.append([name, float(lo), float(hi), int(c)])
    return _csv(["layer", "bin_lo", "bin_hi", "count"], rows)


# datasets and models ------------------------------------------------------

def build_datasets(ds: dict) -> tuple[Dataset, Dataset | None]:
    """``(train, test)``; ``test`` is ``None`` when the config asks for no held-out split."""
    kind = ds["kind"]
    if kind == "blobs":
        full = make_blobs(ds["n"], ds["n_classes"], ds["dim"], ds["spread"], ds["separation"], ds["seed"])
    elif kind == "synthetic":
        full = sample_synthetic(synthetic_spec(ds))
    else:
        full = load_idx(ds["images"], ds["labels"])
        if ds["fraction"] < 1:
            full = subsample(full, ds["fraction"], ds["seed"])
        if ds["test_images"]:
            return full, load_idx(ds["test_images"], ds["test_labels"])
    if ds["test_fraction"] > 0:
        return split(full, ds["test_fraction"], ds["seed"])
    return full, None


def synthetic_spec(ds: dict):
    return default_synthetic_spec(ds["d_s"], ds["d_n"], ds["sigma"], ds["v_norm"], ds["n"], ds["seed"])


def _n_outputs(ds: dict, train_set: Dataset, test_set: Dataset | None) -> int:
    if train_set.task == "regression":
        return 1
    if ds["kind"] == "blobs":
        return ds["n_classes"]
    top = train_set.labels.max() if test_set is None else max(train_set.labels.max(), test_set.labels.max())
    return int(top) + 1


def build_model(mcfg: dict, ds: dict, train_set: Dataset, test_set: Dataset | None, seed: int) -> Model:
    init = InitSpec(mcfg["init"], seed, 0.0, mcfg["init_std"], mcfg["init_scale"])
    if mcfg["kind"] == "two_layer_linear":
        return build_two_layer_linear(ds["d_s"], ds["d_n"], mcfg["hidden"], init)
    sizes = [train_set.dim, *mcfg["hidden"], _n_outputs(ds, train_set, test_set)]
    return build_mlp(sizes, mcfg["activation"], init)


def _eval_subset(data: Dataset, size: int, seed: int) -> Dataset:
    if size >= len(data):
        return data
    idx = np.sort(np.random.default_rng([seed, 2]).choice(len(data), size=size, replace=False))
    return data.take(idx)


def _as_list(x):
    return list(x) if isinstance(x, list) else [x]


# runners ------------------------------------------------------------------

def run_phase_switch(cfg: ExperimentConfig) -> dict[str, bytes]:
    p = cfg.section("phase")
    ds = cfg.section("dataset")
    train_set, test_set = build_datasets(ds)
    files, summary = {}, []
    for seed in cfg.seeds:
        init = build_model(cfg.section("model"), ds, train_set, test_set, seed)
        for m1 in _as_list(p["phase1"]):
            for m2 in _as_list(p["phase2"]):
                plan = PhasePlan(p["k"], p["T"], cfg.optimizer(m1), cfg.optimizer(m2))
                res = train(init, train_set, plan, seed, test_set, snapshot_epochs={p["k"], p["T"]})
                base = f"seed{seed}/{m1}-{m2}"
                files[f"{base}/epochs.csv"] = epochs_csv(res.epochs).encode()
                files[f"{base}/steps.jsonl"] = steps_jsonl(res.steps).encode()
                files[f"{base}/checkpoint_k{p['k']}.ckpt"] = checkpoint_bytes(res.snapshots[p["k"]])
                files[f"{base}/final.ckpt"] = checkpoint_bytes(res.model)
                last = res.epochs[-1] if res.epochs else None
                summary.append({"combo": f"{m1}-{m2}",
                                "train_loss": last.train_loss if last else float("nan"),
                                "test_loss": last.test_loss if last else float("nan"),
                                "test_acc": last.test_acc if last else float("nan")})
    files["summary.csv"] = summarize(summary, "combo", ["train_loss", "test_loss", "test_acc"])
    return files


def run_lmc_instability(cfg: ExperimentConfig) -> dict[str, bytes]:
    """Phase 1 once, then two independently shuffled phase-2 runs per mode.

    Child run ``j`` of seed ``s`` trains with seed ``10000 * s + j + 1``.
    Profiles cover same-mode pairs, cross-mode pairs and phase-1-end vs final.
    """
    p = cfg.section("lmc")
    ds = cfg.section("dataset")
    train_set, test_set = build_datasets(ds)
    evals = train_set if p["loss_split"] == "train" or test_set is None else test_set
    evals = _eval_subset(evals, p["eval_size"], ds["seed"])
    grid = default_grid(p["grid_size"])
    modes = _as_list(p["phase2"])
    files, rows = {}, []
    for seed in cfg.seeds:
        init = build_model(cfg.section("model"), ds, train_set, test_set, seed)
        theta_k = train(init, train_set, PhasePlan.single(cfg.optimizer(p["phase1"]), p["k"]), seed).model
        finals = {}
        j = 0
        for mode in modes:
            for tag in ("a", "b"):
                child_seed = 10000 * seed + j + 1
                j += 1
                finals[f"{mode}-{tag}"] = train(
                    theta_k, train_set, PhasePlan.single(cfg.optimizer(mode), p["T"] - p["k"]), child_seed).model
        pairs = [(f"{m}-a", f"{m}-b") for m in modes]
        pairs += [(f"{a}-a", f"{b}-a") for i, a in enumerate(modes) for b in modes[i + 1:]]
        pairs += [("phase1", f"{m}-a") for m in modes]
        models = {"phase1": theta_k, **finals}
        files[f"seed{seed}/phase1.ckpt"] = checkpoint_bytes(theta_k)
        for a, b in pairs:
            prof = interpolation_profile(models[a], models[b], evals.inputs, evals.labels, evals.loss, grid)
            files[f"seed{seed}/profile_{a}_vs_{b}.csv"] = prof.to_csv(a, b).encode()
            l0, l1 = prof.endpoint_losses
            rows.append({"seed": seed, "pair": f"{a}_vs_{b}", "instability": prof.instability,
                         "loss0": l0, "loss1": l1})
    files["instability.csv"] = _csv(["seed", "pair", "instability", "loss0", "loss1"],
                                    [[r["seed"], r["pair"], r["instability"], r["loss0"], r["loss1"]] for r in rows])
    files["summary.csv"] = summarize(rows, "pair", ["instability"])
    return files


def run_random_probe(cfg: ExperimentConfig) -> dict[str, bytes]:
    p = cfg.section("probe")
    ds = cfg.section("dataset")
    train_set, test_set = build_datasets(ds)
    evals = train_set if p["loss_split"] == "train" or test_set is None else test_set
    evals = _eval_subset(evals, p["eval_size"], ds["seed"])
    grid = default_grid(p["grid_size"])
    files, rows = {}, []
    for seed in cfg.seeds:
        init = build_model(cfg.section("model"), ds, train_set, test_set, seed)
        theta = train(init, train_set, PhasePlan.single(cfg.optimizer(p["optimizer"]), p["epochs"]), seed).model
        probe = random_direction_probe(theta, p["distance"], p["n_dirs"],
                                       lambda m: batch_loss(m, evals.inputs, evals.labels, evals.loss),
                                       seed, grid)
        curve_rows = [[i, float(a), float(probe.losses[i, k])]
                      for i in range(p["n_dirs"]) for k, a in enumerate(grid)]
        files[f"seed{seed}/probe.csv"] = _csv(["direction", "alpha", "loss"], curve_rows)
        files[f"seed{seed}/trained.ckpt"] = checkpoint_bytes(theta)
        base_loss = float(probe.losses[0, 0])
        rows.append({"seed": seed, "dim": theta.num_params, "max_abs_cosine": probe.max_abs_cosine,
                     "base_loss": base_loss, "mean_end_loss": float(probe.losses[:, -1].mean()),
                     "max_rise": float(probe.losses.max() - base_loss), "group": "all"})
    files["probe_summary.csv"] = _csv(
        ["seed", "dim", "max_abs_cosine", "base_loss", "mean_end_loss", "max_rise"],
        [[r["seed"], r["dim"], r["max_abs_cosine"], r["base_loss"], r["mean_end_loss"], r["max_rise"]]
         for r in rows])
    files["summary.csv"] = summarize(rows, "group", ["max_abs_cosine", "base_loss", "mean_end_loss", "max_rise"])
    return files


FIXED_BATCH_HEADER = ["mode", "step", "loss", "mean_grad_norm", "clipped_fraction", "max_post_clip_norm",
                      "param_norm"]


def run_clip_noise_ablation(cfg: ExperimentConfig) -> dict[str, bytes]:
    p = cfg.section("ablation")
    ds = cfg.section("dataset")
    train_set, test_set = build_datasets(ds)
    files, summary = {}, []
    for seed in cfg.seeds:
        init = build_model(cfg.section("model"), ds, train_set, test_set, seed)
        bsize = min(p["fixed_batch_size"], len(train_set))
        fixed = train_set.take(np.sort(np.random.default_rng([seed, 3]).choice(len(train_set), bsize, replace=False)))
        fixed_rows = []
        for mode in p["modes"]:
            opt = cfg.optimizer(mode)
            res = train(init, train_set, PhasePlan.single(opt, p["epochs"]), seed, test_set)
            files[f"seed{seed}/{mode}/epochs.csv"] = epochs_csv(res.epochs).encode()
            files[f"seed{seed}/{mode}/steps.jsonl"] = steps_jsonl(res.steps).encode()
            files[f"seed{seed}/{mode}/param_hist.csv"] = _hist_csv(res.model)
            model = init.copy()
            rng = np.random.default_rng([seed, 1])
            for step in range(p["fixed_batch_steps"]):
                _, m = dp_step(model, fixed.inputs, fixed.labels, fixed.loss, opt, rng, 0, step)
                fixed_rows.append([mode, step, m.loss, m.mean_grad_norm, m.clipped_fraction,
                                   m.max_post_clip_norm, m.param_norm])
            last = res.epochs[-1]
            summary.append({"mode": mode, "train_loss": last.train_loss, "test_acc": last.test_acc,
                            "param_l2": last.param_l2, "mean_grad_norm": last.mean_grad_norm})
        files[f"seed{seed}/fixed_batch.csv"] = _csv(FIXED_BATCH_HEADER, fixed_rows)
    files["summary.csv"] = summarize(summary, "mode", ["train_loss", "test_acc", "param_l2", "mean_grad_norm"])
    return files


def run_prune_sweep(cfg: ExperimentConfig) -> dict[str, bytes]:
    """Pretrain once per seed (on a proxy subsample when configured), then mask, rewind, retrain."""
    p = cfg.section("pruning")
    ds = cfg.section("dataset")
    train_set, test_set = build_datasets(ds)
    proxy = train_set if p["proxy_fraction"] is None else subsample(train_set, p["proxy_fraction"], ds["seed"] + 1)
    layers = tuple(p["layers"]) if p["layers"] else None
    files, summary = {}, []
    for seed in cfg.seeds:
        init = build_model(cfg.section("model"), ds, train_set, test_set, seed)
        pre = init
        if p["pretrain_epochs"] > 0:
            pre = train(init, proxy, PhasePlan.single(cfg.optimizer(p["pretrain_optimizer"]), p["pretrain_epochs"]),
                        seed).model
        for kf in p["keep_fractions"]:
            masked = rewind(init, masks_from(pre, PruneSpec(kf, p["pretrain_epochs"], layers)))
            res = train(masked, train_set, PhasePlan.single(cfg.optimizer(p["train_optimizer"]), p["epochs"]),
                        seed, test_set)
            base = f"seed{seed}/{_fraction_tag(kf)}"
            files[f"{base}/masked_init.ckpt"] = checkpoint_bytes(masked)
            files[f"{base}/final.ckpt"] = checkpoint_bytes(res.model)
            files[f"{base}/epochs.csv"] = epochs_csv(res.epochs).encode()
            files[f"{base}/param_hist.csv"] = _hist_csv(res.model)
            last = res.epochs[-1] if res.epochs else None
            density = float(np.mean([mask_density(m) for m in masked.masks.values()]))
            summary.append({"keep_fraction": float(kf), "density": density,
                            "train_loss": last.train_loss if last else float("nan"),
                            "test_acc": last.test_acc if last else float("nan"),
                            "param_l2": float(np.linalg.norm(res.model.flatten()))})
    files["summary.csv"] = summarize(summary, "keep_fraction", ["density", "train_loss", "test_acc", "param_l2"])
    return files


def run_theorem1_check(cfg: ExperimentConfig) -> dict[str, bytes]:
    p = cfg.section("theorem1")
    files, summary = {}, []
    for seed in cfg.seeds:
        rows = theorem1_trials(p["trials"], seed, tuple(p["Cs"]))
        files[f"seed{seed}/theorem1.csv"] = theorem1_csv(rows).encode()
        slack = np.array([r["lhs"] - r["rhs"] for r in rows])
        summary.append({"group": "all", "holds_fraction": float(np.mean([r["holds"] for r in rows])),
                        "min_slack": float(slack.min())})
    files["summary.csv"] = summarize(summary, "group", ["holds_fraction", "min_slack"])
    return files


def run_theorem2_flow(cfg: ExperimentConfig) -> dict[str, bytes]:
    p = cfg.section("flow")
    ds = cfg.section("dataset")
    spec = synthetic_spec(ds)
    w_star = closed_form_optimum(spec)
    files, rows = {}, []
    for seed in cfg.seeds:
        model = build_model(cfg.section("model"), ds, None, None, seed)
        res = population_gradient_flow(model, spec, p["dt"], p["max_time"], p["tol"], p["method"])
        files[f"seed{seed}/flow.csv"] = res.to_csv(p["log_every"]).encode()
        W = res.final.W2 @ res.final.W1
        rows.append({"seed": seed, "group": "all", "converged": int(res.converged), "time": res.final.time,
                     "final_loss": res.final.loss, "norm_Wn": float(np.linalg.norm(W[:, spec.d_s:])),
                     "dist_to_optimum": float(np.linalg.norm(W - w_star)),
                     "max_balance_residual": float(res.balance_residual.max())})
    cols = ["seed", "converged", "time", "final_loss", "norm_Wn", "dist_to_optimum", "max_balance_residual"]
    files["flow_summary.csv"] = _csv(cols, [[r[c] for c in cols] for r in rows])
    files["summary.csv"] = summarize(rows, "group", cols[1:])
    return files


def run_r_under_pruning(cfg: ExperimentConfig) -> dict[str, bytes]:
    p = cfg.section("r_pruning")
    ds = cfg.section("dataset")
    mcfg = cfg.section("model")
    spec = synthetic_spec(ds)
    init = InitSpec(mcfg["init"], 0, 0.0, mcfg["init_std"], mcfg["init_scale"])
    header = ["seed", "keep_fraction", "R", "train_loss", "steps", "matched"]
    files, all_rows = {}, []
    for seed in cfg.seeds:
        rows = R_under_pruning(spec, p["keep_fractions"], cfg.optimizer(p["optimizer"]), [seed], mcfg["hidden"],
                               p["target_loss"], p["pretrain_epochs"], init)
        files[f"seed{seed}/r_pruning.csv"] = _csv(
            header, [[r.seed, r.keep_fraction, r.R, r.train_loss, r.steps, str(r.matched).lower()] for r in rows])
        all_rows += [{"keep_fraction": r.keep_fraction, "R": r.R, "train_loss": r.train_loss} for r in rows]
    files["summary.csv"] = summarize(all_rows, "keep_fraction", ["R", "train_loss"])
    return files


RUNNERS = {
    "phase-switch": run_phase_switch,
    "lmc-instability": run_lmc_instability,
    "random-probe": run_random_probe,
    "clip-noise-ablation": run_clip_noise_ablation,
    "prune-sweep": run_prune_sweep,
    "theorem1-check": run_theorem1_check,
    "theorem2-flow": run_theorem2_flow,
    "r-under-pruning": run_r_under_pruning,
}


# writing ------------------------------------------------------------------

def manifest_bytes(files: dict[str, bytes]) -> bytes:
    entries = [{"path": k, "sha256": hashlib.sha256(v).hexdigest(), "bytes": len(v)}
               for k, v in sorted(files.items())]
    return (json.dumps({"files": entries}, indent=2, sort_keys=True) + "\n").encode()


def write_artifacts(out_dir, files: dict[str, bytes]) -> Path:
    """Stage ``files`` plus a manifest beside ``out_dir`` and rename into place.

    An existing ``out_dir`` is replaced only after staging succeeded.
    """
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    try:
        for rel, data in files.items():
            target = stage / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(data)
        (stage / MANIFEST).write_bytes(manifest_bytes(files))
        old = None
        if out_dir.exists():
            old = out_dir.parent / f".{out_dir.name}.old-{os.getpid()}"
            os.rename(out_dir, old)
        os.rename(stage, out_dir)
        if old is not None:
            shutil.rmtree(old)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    return out_dir


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> Path:
    """Run ``cfg`` and write its artifacts; returns the output directory."""
    files = dict(RUNNERS[cfg.kind](cfg))
    files[RESOLVED] = (json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n").encode()
    return write_artifacts(out_dir or cfg.output_path(), files)


def verify_manifest(out_dir) -> list[str]:
    """Paths whose content no longer matches the manifest (empty when intact)."""
    out_dir = Path(out_dir)
    manifest = json.loads((out_dir / MANIFEST).read_text())
    bad = []
    for e in manifest["files"]:
        p = out_dir / e["path"]
        if not p.exists() or hashlib.sha256(p.read_bytes()).hexdigest() != e["sha256"]:
            bad.append(e["path"])
    return bad
