"""Command-line front end.

Every subcommand writes one JSON document to stdout and a short summary to
stderr.  Exit status is 0 when every checked property holds, 1 when a check
fails, and 2 for usage or input errors.
"""
from __future__ import annotations

import argparse
import os
import sys
from importlib import resources
from typing import List, Optional, Sequence

import numpy as np

from .adapters import KINDS, AdapterConfig, BlockGrid, ConfigError, rank_trial, rank_witness, delta
from .cost_model import cost_report
from .experiments import (
    aggregate,
    block_size_sweep,
    figure1_probe,
    figure1_ordering_holds,
    gini_experiment,
    gini_ordering_by_seed,
    int_list,
    parse_config,
    spec_from_config,
    sweep,
    unimodal_with_interior_peak,
)
from .grads import grad_check, random_grad_problem
from .matrix_core import dumps_json, load_matrix, numeric_rank
from .spectral import CSV_HEADER, spectral_report

GRAD_TOL = 1e-6
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _kinds(text: str) -> List[str]:
    if text == "all":
        return list(KINDS)
    kinds = [k.strip() for k in text.split(",") if k.strip()]
    bad = [k for k in kinds if k not in KINDS]
    if bad or not kinds:
        raise UsageError(f"unknown kind(s) {bad}; expected a subset of {list(KINDS)} or 'all'")
    return kinds


def _positive(value: int, name: str) -> int:
    if value < 1:
        raise UsageError(f"--{name} must be at least 1")
    return value


def _emit(payload: dict, summary: str, passed: bool) -> int:
    payload["passed"] = bool(passed)
    sys.stdout.write(dumps_json(payload) + "\n")
    sys.stderr.write(summary.rstrip() + "\n")
    return EXIT_OK if passed else EXIT_FAIL


# -- verification commands ----------------------------------------------------

def cmd_grad_check(args) -> int:
    kinds = _kinds(args.kinds)
    trials = _positive(args.trials, "trials")
    rng = np.random.default_rng(args.seed)
    out, lines = {}, []
    for kind in kinds:
        worst = 0.0
        for t in range(trials):
            b = (1, 2, 4)[t % 3] if kind == "bhra" else 1
            worst = max(worst, grad_check(*random_grad_problem(kind, rng, b=b)))
        out[kind] = {"trials": trials, "max_rel_err": worst, "pass": worst <= GRAD_TOL}
        lines.append(f"{kind:5s} max relative error {worst:.3e} over {trials} trials")
    passed = all(v["pass"] for v in out.values())
    return _emit({"command": "grad-check", "tolerance": GRAD_TOL, "seed": args.seed, "kinds": out},
                 "\n".join(lines), passed)


def cmd_rank_bounds(args) -> int:
    kinds = _kinds(args.kinds)
    trials = _positive(args.trials, "trials")
    rng = np.random.default_rng(args.seed)
    out, lines = {}, []
    for kind in kinds:
        rows = [rank_trial(kind, rng) for _ in range(trials)]
        bad = [r for r in rows if r["rank"] > r["bound"]]
        out[kind] = {"trials": trials, "violations": len(bad), "examples": bad[:5]}
        lines.append(f"{kind:5s} {len(bad)} violations in {trials} trials")
    w0, state, cfg = rank_witness()
    w_rank = numeric_rank(delta(w0, state))
    hira_bound = w0.r0 * cfg.r_tot
    witness = {"m": 4, "n": 4, "b": cfg.b, "r_tot": cfg.r_tot, "r0": w0.r0,
               "rank": w_rank, "hira_bound": hira_bound, "exceeds": w_rank > hira_bound}
    lines.append(f"witness: BHRA rank {w_rank} vs r0*r = {hira_bound}")
    passed = all(v["violations"] == 0 for v in out.values()) and witness["exceeds"]
    return _emit({"command": "rank-bounds", "seed": args.seed, "kinds": out, "witness": witness},
                 "\n".join(lines), passed)


def cmd_spectra(args) -> int:
    try:
        m = load_matrix(args.matrix)
    except OSError as exc:
        raise UsageError(f"cannot read {args.matrix}: {exc}")
    except ValueError as exc:
        raise UsageError(f"cannot parse {args.matrix}: {exc}")
    grid = None
    if args.grid_b is not None:
        grid = BlockGrid.square(_positive(args.grid_b, "grid-b"))
        try:
            grid.check(*m.shape)
        except ValueError as exc:
            raise UsageError(str(exc))
    rep = spectral_report(m, grid)
    if args.format == "csv":
        sys.stdout.write(CSV_HEADER + "\n" + rep.csv_row(os.path.basename(args.matrix)) + "\n")
        sys.stderr.write(f"stable rank {rep.stable_rank:.6g}\n")
        return EXIT_OK
    sys.stdout.write(rep.to_json() + "\n")
    sys.stderr.write(f"{m.shape[0]}x{m.shape[1]}: stable rank {rep.stable_rank:.6g}, "
                     f"effective rank {rep.effective_rank:.6g}\n")
    return EXIT_OK


def cmd_flops(args) -> int:
    try:
        rep = cost_report(args.m, args.n, args.r, args.b, args.T)
    except ValueError as exc:
        raise UsageError(str(exc))
    d = rep.to_dict()
    summary = f"bhra_train {d['flops_train']}  hira_train {d['hira_train']}  lora_train {d['lora_train']}"
    return _emit({"command": "flops", "report": d}, summary, True)


# -- experiment commands ------------------------------------------------------

def _load_config(path: Optional[str], bundled: str):
    if path is None:
        text = resources.files("bhra").joinpath("data", bundled).read_text()
    else:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}")
    try:
        cfg = parse_config(text)
        spec = spec_from_config(cfg)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad config: {exc}")
    return cfg, spec


def _cfg_int(cfg: dict, key: str, default: int) -> int:
    try:
        return int(cfg.get(key, default))
    except ValueError:
        raise UsageError(f"config key {key} must be an integer")


def _cfg_ints(cfg: dict, key: str, default: Sequence[int]) -> List[int]:
    try:
        return int_list(cfg[key]) if key in cfg else list(default)
    except ValueError:
        raise UsageError(f"config key {key} must be a comma separated list of integers")


def _write_outputs(out_dir: Optional[str], records, rows) -> dict:
    if out_dir is None:
        return {}
    os.makedirs(out_dir, exist_ok=True)
    rec_path = os.path.join(out_dir, "records.jsonl")
    agg_path = os.path.join(out_dir, "aggregate.csv")
    with open(rec_path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
    with open(agg_path, "w") as fh:
        if rows:
            keys = list(rows[0])
            fh.write(",".join(keys) + "\n")
            for row in rows:
                fh.write(",".join(dumps_json(row[k]) for k in keys) + "\n")
    return {"records_path": rec_path, "aggregate_path": agg_path}


def _record_dicts(records, keep_losses: bool):
    out = []
    for rec in records:
        d = rec.to_dict()
        if not keep_losses:
            d.pop("losses")
        out.append(d)
    return out


def _build_config(kind: str, r_tot: int, b: int) -> AdapterConfig:
    try:
        return AdapterConfig(kind, r_tot, b if kind == "bhra" else 1)
    except ConfigError as exc:
        raise UsageError(str(exc))


def cmd_train_toy(args) -> int:
    cfg, spec = _load_config(args.config, "train_toy.cfg")
    kind = cfg.get("kind", "bhra")
    if kind not in KINDS:
        raise UsageError(f"unknown kind {kind!r}")
    acfg = _build_config(kind, _cfg_int(cfg, "r_tot", 8), _cfg_int(cfg, "b", 4))
    try:
        acfg.grid.check(spec.m, spec.n)
    except ValueError as exc:
        raise UsageError(str(exc))
    records = sweep(spec, [acfg], max_workers=args.threads)
    rows = aggregate(records)
    decreased = {rec.seed: rec.ok and rec.losses[-1] < rec.losses[0] for rec in records} if spec.train_steps else {}
    passed = all(rec.ok for rec in records) and all(decreased.values())
    payload = {"command": "train-toy", "spec": spec.to_dict(), "records": _record_dicts(records, args.losses),
               "aggregate": rows, "checks": {"loss_decreased": decreased}}
    payload.update(_write_outputs(args.out_dir, records, rows))
    summary = f"{kind} r_tot={acfg.r_tot} b={acfg.b}: median final loss {rows[0]['median_final_loss']:.4g} " \
              f"(improvement {rows[0]['median_improvement']:.4f}) over {len(records)} seeds"
    return _emit(payload, summary, passed)


def cmd_sweep(args) -> int:
    cfg, spec = _load_config(args.config, "sweep.cfg")
    r_tot = _cfg_int(cfg, "r_tot", 8)
    blocks = _cfg_ints(cfg, "blocks", (1, 2, 4, 8))
    for b in blocks:
        _build_config("bhra", r_tot, b)
    records, rows = block_size_sweep(spec, r_tot, blocks, max_workers=args.threads)
    med = [r["median_improvement"] for r in rows]
    unimodal, peak = unimodal_with_interior_peak(med)
    passed = unimodal and all(rec.ok for rec in records)
    payload = {"command": "sweep", "spec": spec.to_dict(), "records": _record_dicts(records, args.losses),
               "aggregate": rows, "checks": {"unimodal_interior_peak": unimodal, "best_b": blocks[peak]}}
    payload.update(_write_outputs(args.out_dir, records, rows))
    summary = "median improvement by b: " + ", ".join(f"b={b}: {v:.4f}" for b, v in zip(blocks, med))
    return _emit(payload, summary, passed)


def cmd_figure1(args) -> int:
    cfg, spec = _load_config(args.config, "figure1.cfg")
    budgets = _cfg_ints(cfg, "budgets", (4, 8, 16))
    bhra_b = _cfg_int(cfg, "bhra_b", 4)
    for r in budgets:
        _build_config("bhra", r, bhra_b)
    rows = figure1_probe(spec, budgets, bhra_b=bhra_b, max_workers=args.threads)
    holds = figure1_ordering_holds(rows)
    payload = {"command": "figure1", "spec": spec.to_dict(), "table": rows,
               "checks": {"bhra_above_hira_and_lora_below_2": holds}}
    summary = "\n".join(f"{r['kind']:5s} r={r['r']:3d} mean stable rank {r['mean_stable_rank']:.3f}" for r in rows)
    return _emit(payload, summary, holds)


def cmd_gini(args) -> int:
    cfg, spec = _load_config(args.config, "gini.cfg")
    r_tot, b = _cfg_int(cfg, "r_tot", 8), _cfg_int(cfg, "b", 4)
    _build_config("bhra", r_tot, b)
    records, rows = gini_experiment(spec, r_tot, b, max_workers=args.threads)
    per_seed = gini_ordering_by_seed(rows)
    n_order = sum(v["gini_order"] for v in per_seed.values())
    n_loss = sum(v["bhra_beats_lora"] for v in per_seed.values())
    need = len(per_seed) - 1 if len(per_seed) >= 5 else len(per_seed)
    passed = n_order >= need and n_loss >= need
    payload = {"command": "gini", "spec": spec.to_dict(), "rows": rows,
               "checks": {"seeds": len(per_seed), "gini_order_seeds": n_order,
                          "bhra_beats_lora_seeds": n_loss, "required": need}}
    payload.update(_write_outputs(args.out_dir, records, aggregate(records)))
    summary = f"Gini order BHRA > HiRA > LoRA in {n_order}/{len(per_seed)} seeds; " \
              f"BHRA loss below LoRA in {n_loss}/{len(per_seed)}"
    return _emit(payload, summary, passed)


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bhra", description="Adapter verification and desk-scale experiments.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("grad-check", help="compare analytic gradients with finite differences")
    g.add_argument("--kinds", default="all")
    g.add_argument("--trials", type=int, default=50)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_grad_check)

    r = sub.add_parser("rank-bounds", help="check update ranks against their bounds")
    r.add_argument("--kinds", default="all")
    r.add_argument("--trials", type=int, default=200)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_rank_bounds)

    s = sub.add_parser("spectra", help="spectral report of a matrix file")
    s.add_argument("--matrix", required=True)
    s.add_argument("--grid-b", type=int, default=None)
    s.add_argument("--format", choices=("json", "csv"), default="json")
    s.set_defaults(func=cmd_spectra)

    f = sub.add_parser("flops", help="closed-form FLOP and memory counts")
    for name in ("m", "n", "r", "b", "T"):
        f.add_argument(f"--{name}", type=int, required=True)
    f.set_defaults(func=cmd_flops)

    for name, func, help_text in (
        ("train-toy", cmd_train_toy, "train one adapter on the toy task over seeds"),
        ("sweep", cmd_sweep, "BHRA block-count sweep at a fixed budget"),
        ("figure1", cmd_figure1, "stable rank of learned updates per adapter and budget"),
        ("gini", cmd_gini, "block Gini of learned updates per adapter"),
    ):
        e = sub.add_parser(name, help=help_text)
        e.add_argument("--config", default=None, help="key = value file; a bundled default is used otherwise")
        e.add_argument("--out-dir", default=None, help="also write records.jsonl and aggregate.csv here")
        e.add_argument("--threads", type=int, default=None, help="worker threads (default: BHRA_THREADS)")
        e.add_argument("--losses", action="store_true", help="include per-step losses in the payload")
        e.set_defaults(func=func)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(f"bhra: error: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
