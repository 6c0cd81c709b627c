"""Desk-scale teacher/student harness for comparing adapters.

A frozen ``W0`` and a planted update ``Delta*`` define the regression target
``y = (W0 + Delta*) x``; each adapter is trained with Adam on fresh Gaussian
batches.  Final loss here is the population loss
``0.5 * ||s * Delta W - Delta*||_F^2``, the expectation of the per-batch
loss over standard-normal inputs; it stands in for downstream accuracy.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .adapters import (
    AdapterConfig,
    BlockGrid,
    FrozenWeight,
    delta,
    from_blocks,
    init_adapter,
    param_count,
)
from .grads import AdamState, BackpropContext, adam_step, adapter_grad
from .matrix_core import dumps_json, numeric_rank
from .spectral import SpectralReport, block_gini, spectral_report

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (42, 2025, 2024, 2023, 2022)


@dataclass(frozen=True)
class ToyTaskSpec:
    m: int = 64
    n: int = 64
    r0_target: int = 8
    # per-block multipliers of the planted update; its shape fixes the teacher grid
    teacher_block_profile: Tuple[Tuple[float, ...], ...] = ((4.0, 1.0), (1.0, 1.0))
    teacher_mask_rank: int = 3
    # shared mask value added in every block; gives the planted update a global component
    teacher_global_offset: float = 0.0
    # singular values of W0 follow w0_decay**k, k = 0..r0_target-1
    w0_decay: float = 1.0
    train_steps: int = 2000
    learning_rate: float = 1e-2
    warmup_steps: int = 100
    batch: int = 8
    seeds: Tuple[int, ...] = DEFAULT_SEEDS
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.r0_target < 1 or self.r0_target > min(self.m, self.n):
            raise ValueError("r0_target must lie in [1, min(m, n)]")
        prof = np.asarray(self.teacher_block_profile, dtype=float)
        if prof.ndim != 2 or np.any(prof < 0) or not np.any(prof > 0):
            raise ValueError("teacher_block_profile must be a 2-D grid of nonnegative values, not all zero")
        self.teacher_grid.check(self.m, self.n)
        if self.train_steps < 0 or self.batch < 1 or self.warmup_steps < 0:
            raise ValueError("invalid training schedule")

    @property
    def teacher_grid(self) -> BlockGrid:
        p, q = np.shape(self.teacher_block_profile)
        return BlockGrid(p, q)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["teacher_block_profile"] = [list(r) for r in self.teacher_block_profile]
        d["seeds"] = list(self.seeds)
        return d


@dataclass
class RunRecord:
    config: dict
    seed: int
    losses: List[float]
    initial_loss: float
    final_loss: float
    steps: int
    report: Optional[SpectralReport] = None
    delta: Optional[np.ndarray] = field(default=None, repr=False)
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def improvement(self) -> float:
        """Fraction of the initial population loss removed by training."""
        if self.initial_loss == 0:
            return 0.0
        return 1.0 - self.final_loss / self.initial_loss

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "seed": self.seed,
            "steps": self.steps,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "improvement": self.improvement,
            "losses": self.losses,
            "report": None if self.report is None else self.report.to_dict(),
            "error": self.error,
            "quality_proxy": "population regression loss (not accuracy)",
        }

    def to_json(self) -> str:
        return dumps_json(self.to_dict())


def _rank1_sum(rng, m: int, n: int, k: int, weights) -> np.ndarray:
    u = rng.standard_normal((m, k)) / np.sqrt(m)
    v = rng.standard_normal((k, n)) / np.sqrt(n)
    return (u * weights) @ v


def build_teacher(spec: ToyTaskSpec, seed: int, max_tries: int = 10):
    """Frozen weight of rank ``r0_target`` and target weight ``W0 + Delta*``.

    Block (i, j) of ``Delta*`` on the teacher grid is
    ``profile[i][j] * (W0_ij * M_ij)`` with ``M_ij`` a fresh Gaussian matrix
    of rank ``teacher_mask_rank``.
    """
    rng = np.random.default_rng([seed, 0])
    weights = np.sqrt(spec.m) * spec.w0_decay ** np.arange(spec.r0_target)
    for _ in range(max_tries):
        w0 = _rank1_sum(rng, spec.m, spec.n, spec.r0_target, weights)
        if numeric_rank(w0) == spec.r0_target:
            break
    else:
        raise RuntimeError(f"could not draw a rank-{spec.r0_target} W0 in {max_tries} tries")
    grid = spec.teacher_grid
    mb, nb = grid.block_shape(spec.m, spec.n)
    q = spec.teacher_mask_rank
    masks = np.empty((grid.row_parts, grid.col_parts, mb, nb))
    prof = np.asarray(spec.teacher_block_profile, dtype=float)
    for i in range(grid.row_parts):
        for j in range(grid.col_parts):
            masks[i, j] = prof[i, j] * (rng.standard_normal((mb, q)) @ rng.standard_normal((q, nb))) / np.sqrt(q)
    planted = w0 * (spec.teacher_global_offset + from_blocks(masks))
    frozen = FrozenWeight.from_matrix(w0)
    return frozen, w0 + planted


def warmup_lr(step: int, lr: float, warmup_steps: int) -> float:
    """Linear ramp ``lr * (step + 1) / warmup_steps`` then constant."""
    if warmup_steps <= 0:
        return lr
    return lr * min(1.0, (step + 1) / warmup_steps)


def population_loss(eff_update: np.ndarray, planted: np.ndarray) -> float:
    d = eff_update - planted
    return 0.5 * float(np.sum(d * d))


def config_echo(spec: ToyTaskSpec, cfg: AdapterConfig) -> dict:
    return {
        "kind": cfg.kind,
        "r_tot": cfg.r_tot,
        "b": cfg.b,
        "r_b": cfg.r_b,
        "alpha": cfg.alpha,
        "params": param_count(cfg, spec.m, spec.n),
        "m": spec.m,
        "n": spec.n,
    }


def run_training(spec: ToyTaskSpec, cfg: AdapterConfig, seed: int,
                 report_grid: Optional[BlockGrid] = None) -> RunRecord:
    """Train one adapter on the teacher drawn from ``seed``."""
    frozen, target = build_teacher(spec, seed)
    planted = target - frozen.w0
    state = init_adapter(cfg, spec.m, spec.n, seed=seed + 1)
    data_rng = np.random.default_rng([seed, 1])
    adam = AdamState(lr=spec.learning_rate, weight_decay=spec.weight_decay)
    losses = []
    T = spec.batch
    for step in range(spec.train_steps):
        x = data_rng.standard_normal((spec.n, T))
        with np.errstate(over="ignore", invalid="ignore"):
            # overflow shows up as a non-finite loss, reported just below
            g = (cfg.scale * delta(frozen, state) - planted) @ x
            loss = 0.5 * float(np.sum(g * g)) / T
        if not np.isfinite(loss):
            raise FloatingPointError(f"loss diverged at step {step} ({cfg.kind}, seed {seed})")
        losses.append(loss)
        grads = adapter_grad(BackpropContext(g / T, x), frozen, state, cfg)
        state.params = adam_step(state.params, grads, adam, lr=warmup_lr(step, spec.learning_rate, spec.warmup_steps))
    eff = cfg.scale * delta(frozen, state)
    grid = report_grid if report_grid is not None else cfg.grid
    return RunRecord(
        config=config_echo(spec, cfg),
        seed=seed,
        losses=losses,
        initial_loss=population_loss(np.zeros_like(planted), planted),
        final_loss=population_loss(eff, planted),
        steps=spec.train_steps,
        report=spectral_report(eff, grid),
        delta=eff,
    )


def _worker_count(max_workers: Optional[int]) -> int:
    if max_workers is not None:
        return max(1, max_workers)
    env = os.environ.get("BHRA_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def check_budget_parity(spec: ToyTaskSpec, configs: Sequence[AdapterConfig]) -> int:
    counts = {param_count(c, spec.m, spec.n) for c in configs}
    if len(counts) != 1:
        raise ValueError(f"configs do not share one parameter budget: {sorted(counts)}")
    return counts.pop()


def sweep(spec: ToyTaskSpec, configs: Sequence[AdapterConfig], seeds: Optional[Sequence[int]] = None,
          report_grid: Optional[BlockGrid] = None, max_workers: Optional[int] = None,
          require_parity: bool = True) -> List[RunRecord]:
    """All (config, seed) runs, ordered by config then seed.

    A failing run yields a record with ``error`` set; the sweep continues.
    """
    seeds = spec.seeds if seeds is None else tuple(seeds)
    if require_parity:
        check_budget_parity(spec, configs)
    jobs = [(cfg, s) for cfg in configs for s in seeds]

    def run(job):
        cfg, s = job
        try:
            return run_training(spec, cfg, s, report_grid)
        except (FloatingPointError, ValueError, RuntimeError) as exc:
            log.warning("run %s seed %d failed: %s", cfg, s, exc)
            return RunRecord(config_echo(spec, cfg), s, [], float("nan"), float("nan"), 0, error=str(exc))

    workers = _worker_count(max_workers)
    if workers == 1:
        return [run(j) for j in jobs]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(run, jobs))


def aggregate(records: Sequence[RunRecord]) -> List[dict]:
    """Median final loss, improvement, stable rank and Gini per config."""
    groups = {}
    for rec in records:
        key = (rec.config["kind"], rec.config["r_tot"], rec.config["b"])
        groups.setdefault(key, []).append(rec)
    rows = []
    for (kind, r_tot, b), recs in groups.items():
        good = [r for r in recs if r.ok]
        rows.append({
            "kind": kind,
            "r_tot": r_tot,
            "b": b,
            "runs": len(recs),
            "failed": len(recs) - len(good),
            "median_final_loss": float(np.median([r.final_loss for r in good])) if good else float("nan"),
            "median_improvement": float(np.median([r.improvement for r in good])) if good else float("nan"),
            "median_stable_rank": float(np.median([r.report.stable_rank for r in good])) if good else float("nan"),
            "median_block_gini": float(np.median([r.report.block_gini for r in good])) if good else float("nan"),
        })
    return rows


def block_sweep_configs(r_tot: int, blocks: Sequence[int]) -> List[AdapterConfig]:
    return [AdapterConfig("bhra", r_tot, b) for b in blocks]


def unimodal_with_interior_peak(values: Sequence[float]) -> Tuple[bool, int]:
    """Whether ``values`` rise to a single peak and then fall; also the peak index."""
    v = list(values)
    k = int(np.argmax(v))
    rising = all(v[i] <= v[i + 1] for i in range(k))
    falling = all(v[i] >= v[i + 1] for i in range(k, len(v) - 1))
    return rising and falling and 0 < k < len(v) - 1, k


def figure1_probe(spec: ToyTaskSpec, rank_budgets: Sequence[int] = (4, 8, 16),
                  seeds: Optional[Sequence[int]] = None, bhra_b: int = 4,
                  train: bool = True, max_workers: Optional[int] = None) -> List[dict]:
    """Mean stable rank of the trained update per (kind, budget).

    With ``train=False`` the untrained (zero) updates are measured instead.
    """
    seeds = spec.seeds if seeds is None else tuple(seeds)
    probe_spec = spec if train else replace(spec, train_steps=0)
    rows = []
    for r in rank_budgets:
        cfgs = [AdapterConfig("lora", r), AdapterConfig("hira", r), AdapterConfig("bhra", r, bhra_b)]
        recs = sweep(probe_spec, cfgs, seeds, max_workers=max_workers)
        for cfg in cfgs:
            mine = [x for x in recs if x.config["kind"] == cfg.kind and x.ok]
            rows.append({
                "kind": cfg.kind,
                "r": r,
                "b": cfg.b,
                "mean_stable_rank": float(np.mean([x.report.stable_rank for x in mine])),
                "runs": len(mine),
            })
    return rows


def figure1_ordering_holds(rows: Sequence[dict], lora_ceiling: float = 2.0) -> bool:
    by = {(r["kind"], r["r"]): r["mean_stable_rank"] for r in rows}
    budgets = sorted({r["r"] for r in rows})
    return all(by[("bhra", r)] > by[("hira", r)] and by[("lora", r)] < lora_ceiling for r in budgets)


def gini_probe(records: Sequence[RunRecord], grid: BlockGrid) -> List[dict]:
    """(kind, block Gini of the trained update on ``grid``, final loss) per run."""
    out = []
    for rec in records:
        if not rec.ok:
            continue
        g = block_gini(rec.delta, grid) if rec.delta is not None else 0.0
        out.append({"kind": rec.config["kind"], "seed": rec.seed, "block_gini": g, "final_loss": rec.final_loss})
    return out


def gini_ordering_by_seed(rows: Sequence[dict]) -> dict:
    """Per seed: whether Gini(BHRA) > Gini(HiRA) > Gini(LoRA) and loss(BHRA) < loss(LoRA)."""
    seeds = sorted({r["seed"] for r in rows})
    out = {}
    for s in seeds:
        by = {r["kind"]: r for r in rows if r["seed"] == s}
        out[s] = {
            "gini_order": by["bhra"]["block_gini"] > by["hira"]["block_gini"] > by["lora"]["block_gini"],
            "bhra_beats_lora": by["bhra"]["final_loss"] < by["lora"]["final_loss"],
        }
    return out


# -- presets and canned experiments ------------------------------------------

# hot blocks on a checkerboard, each with its own mask, on top of a shared
# global component that every adapter can reach
CHECKERBOARD_PROFILE = (
    (4.0, 0.0, 4.0, 0.0),
    (0.0, 4.0, 0.0, 4.0),
    (4.0, 0.0, 4.0, 0.0),
    (0.0, 4.0, 0.0, 4.0),
)


def heterogeneous_task(**overrides) -> ToyTaskSpec:
    """Teacher for the Gini comparison.

    Each hot block carries an independent rank-2 mask, so a per-block rank of
    two captures it exactly while a single global mask of rank 8 cannot.
    """
    kw = dict(teacher_block_profile=CHECKERBOARD_PROFILE, teacher_mask_rank=2, teacher_global_offset=2.0)
    kw.update(overrides)
    return ToyTaskSpec(**kw)


def figure1_task(**overrides) -> ToyTaskSpec:
    """Short-horizon protocol for the stable-rank comparison.

    The planted update is dominated by the leading direction of a W0 with a
    geometric spectrum, and training stops at the end of warmup, which is the
    regime where a real fine-tune spends its few epochs.  Run to convergence,
    every adapter reproduces the spectrum of the planted update and the
    ordering is no longer informative.
    """
    kw = dict(w0_decay=0.6, teacher_global_offset=4.0, train_steps=100, warmup_steps=100)
    kw.update(overrides)
    return ToyTaskSpec(**kw)


def block_size_sweep(spec: ToyTaskSpec, r_tot: int = 8, blocks: Sequence[int] = (1, 2, 4, 8),
                     seeds: Optional[Sequence[int]] = None,
                     max_workers: Optional[int] = None) -> Tuple[List[RunRecord], List[dict]]:
    """BHRA at a fixed budget over several block counts, with per-b medians."""
    recs = sweep(spec, block_sweep_configs(r_tot, blocks), seeds, max_workers=max_workers)
    return recs, aggregate(recs)


def gini_experiment(spec: ToyTaskSpec, r_tot: int = 8, b: int = 4, seeds: Optional[Sequence[int]] = None,
                    max_workers: Optional[int] = None) -> Tuple[List[RunRecord], List[dict]]:
    """Train LoRA, HiRA and BHRA at one budget; Gini is read on the BHRA grid."""
    cfgs = [AdapterConfig("lora", r_tot), AdapterConfig("hira", r_tot), AdapterConfig("bhra", r_tot, b)]
    grid = BlockGrid.square(b)
    recs = sweep(spec, cfgs, seeds, report_grid=grid, max_workers=max_workers)
    return recs, gini_probe(recs, grid)


# -- config files -------------------------------------------------------------

def parse_config(text: str) -> dict:
    """Plain ``key = value`` lines; ``#`` starts a comment; lists are comma separated."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, val = (t.strip() for t in line.split("=", 1))
        out[key] = val
    return out


_INT_FIELDS = ("m", "n", "r0_target", "teacher_mask_rank", "train_steps", "warmup_steps", "batch")
_FLOAT_FIELDS = ("learning_rate", "weight_decay", "teacher_global_offset", "w0_decay")


# keys that select what to run rather than the task itself
RUN_KEYS = frozenset({"preset", "kind", "kinds", "r_tot", "blocks", "budgets", "b", "bhra_b"})
CONFIG_KEYS = frozenset(_INT_FIELDS) | frozenset(_FLOAT_FIELDS) | {"seeds", "teacher_block_profile"} | RUN_KEYS

PRESETS = {
    "default": ToyTaskSpec,
    "heterogeneous": heterogeneous_task,
    "figure1": figure1_task,
}


def int_list(val: str) -> List[int]:
    return [int(t) for t in val.replace(" ", "").split(",") if t]


def spec_from_config(cfg: dict) -> ToyTaskSpec:
    kw = {}
    for k in _INT_FIELDS:
        if k in cfg:
            kw[k] = int(cfg[k])
    for k in _FLOAT_FIELDS:
        if k in cfg:
            kw[k] = float(cfg[k])
    if "seeds" in cfg:
        kw["seeds"] = tuple(int_list(cfg["seeds"]))
    if "teacher_block_profile" in cfg:
        # rows separated by ';', entries by ','
        rows = [r for r in cfg["teacher_block_profile"].split(";") if r.strip()]
        kw["teacher_block_profile"] = tuple(tuple(float(t) for t in r.split(",")) for r in rows)
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    preset = cfg.get("preset", "default")
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    return PRESETS[preset](**kw)
