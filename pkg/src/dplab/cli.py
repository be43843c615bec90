"""``dplab`` command line.

Exit codes: 0 success, 1 invalid config or arguments, 2 runtime failure
(including a theorem check that does not hold).
"""
from __future__ import annotations

import argparse
import copy
import sys
import time

import numpy as np

from .config import ConfigValidationError, load_config, read_config_file, resolve_config, validate_file
from .data import default_synthetic_spec
from .experiments import run_experiment
from .models import InitSpec, build_two_layer_linear
from .theory import closed_form_optimum, population_gradient_flow, theorem1_trials

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _print_diags(diags, path):
    for d in diags:
        print(f"{path}: {d}", file=sys.stderr)


def _execute(cfg) -> int:
    t0 = time.perf_counter()
    try:
        out = run_experiment(cfg)
    except Exception as exc:  # noqa: BLE001 - reported and mapped to an exit code
        print(f"error: {cfg.kind} run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"{cfg.kind}: wrote {out} in {time.perf_counter() - t0:.1f}s")
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        diags = validate_file(args.config)
    except OSError as exc:
        print(f"error: cannot read {args.config}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if diags:
        _print_diags(diags, args.config)
        return EXIT_INVALID
    print(f"{args.config}: ok")
    return EXIT_OK


def _load(path):
    try:
        return load_config(path), None
    except ConfigValidationError as exc:
        _print_diags(exc.diagnostics, path)
    except OSError as exc:
        print(f"error: cannot read {path}: {exc}", file=sys.stderr)
    return None, EXIT_INVALID


def cmd_run(args) -> int:
    cfg, code = _load(args.config)
    return code if cfg is None else _execute(cfg)


def cmd_prune(args) -> int:
    """Run a prune-sweep or r-under-pruning config, optionally overriding its keep fractions."""
    try:
        raw, text = read_config_file(args.config)
    except ConfigValidationError as exc:
        _print_diags(exc.diagnostics, args.config)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: cannot read {args.config}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    section = {"prune-sweep": "pruning", "r-under-pruning": "r_pruning"}.get(raw.get("kind"))
    if section is None:
        print(f"{args.config}: kind: prune needs a prune-sweep or r-under-pruning config, "
              f"got {raw.get('kind')!r}", file=sys.stderr)
        return EXIT_INVALID
    if args.keep_fraction:
        raw = copy.deepcopy(raw)
        raw.setdefault(section, {})["keep_fractions"] = list(args.keep_fraction)
    cfg, diags = resolve_config(raw, text, args.config)
    if diags:
        _print_diags(diags, args.config)
        return EXIT_INVALID
    return _execute(cfg)


def cmd_check_theorems(args) -> int:
    if args.trials < 1:
        print("error: --trials must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    rows = theorem1_trials(args.trials, args.seed)
    failed = [r["trial"] for r in rows if not r["holds"]]
    slack = min(r["lhs"] - r["rhs"] for r in rows)
    print(f"alignment bound: {len(rows) - len(failed)}/{len(rows)} trials hold, min slack {slack:.3e}")

    spec = default_synthetic_spec()
    model = build_two_layer_linear(spec.d_s, spec.d_n, 16, InitSpec("balanced", args.seed, scale=0.1))
    flow = population_gradient_flow(model, spec)
    W = flow.final.W2 @ flow.final.W1
    norm_wn = float(np.linalg.norm(W[:, spec.d_s:]))
    dist = float(np.linalg.norm(W - closed_form_optimum(spec)))
    bal = float(flow.balance_residual.max())
    flow_ok = flow.converged and norm_wn <= 1e-6 and dist <= 1e-6 and bal <= 1e-8
    print(f"noise-weight flow: converged={flow.converged} t={flow.final.time:.2f} |W_n|={norm_wn:.2e} "
          f"|W-W*|={dist:.2e} max balance residual={bal:.2e}")
    ok = not failed and flow_ok
    print("all checks hold" if ok else "CHECK FAILED")
    return EXIT_OK if ok else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dplab", description="Desk-scale DP-SGD landscape experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate", help="report every problem in a config without running it")
    p.add_argument("config")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("prune", help="run a pruning config, optionally overriding keep fractions")
    p.add_argument("config")
    p.add_argument("--keep-fraction", type=float, action="append", metavar="F",
                   help="fraction of weights retained; repeat for a sweep")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("check-theorems", help="numerically check the alignment bound and the flow endpoint")
    p.add_argument("--trials", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_check_theorems)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
