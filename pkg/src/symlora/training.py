"""Optimizers, the fine-tuning loop, grid search, and score statistics.

train() is model-agnostic: anything exposing param_entries(),
loss_node(), metric_on() and adapted_layers() can be trained against a
task that yields batches. Only trainable parameters are updated; frozen
parameters are content-hashed and verified untouched. For SymLoRA
adapters the loop also checks, while training runs, that the realized
update stays exactly symmetric (every step) and within its rank bound
(every logged step).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from statistics import mean as _mean, stdev as _stdev
from typing import Callable, Mapping, Sequence

import numpy as np

from .autodiff import GradientMap, Tape, backward, register_leaves
from .errors import ConfigError, DivergenceError, ShapeMismatchError, SymloraError
from .linalg import rank_ratio
from .matrix import Matrix
from .rng import SeededRng

Z_95 = 1.96


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    batch_size: int
    steps: int
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    eval_every: int = 50

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.batch_size < 1 or self.steps < 0:
            raise ConfigError("learning_rate, batch_size must be positive; steps >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")


@dataclass
class TrainResult:
    final_metric: float
    metric_name: str
    loss_curve: list[tuple[int, float]]
    seed_metrics: list[float]
    wall_clock_seconds: float
    steps_run: int
    max_symmetry_violation: float | None = None
    max_rank_ratio: float | None = None


@dataclass(frozen=True)
class ScoreStats:
    """Mean score with the 95% half-width 1.96 * s / sqrt(n).

    `formula` names how the spread s was estimated: "sample-std" for the
    n-1 sample standard deviation across runs, "bernoulli-variance" for
    the fraction-score shortcut s = p*(1-p) taken at face value, and
    "bernoulli-std" for its square root.
    """

    mean: float
    s: float | None
    n: int
    half_width: float | None
    formula: str = "sample-std"

    def interval(self) -> tuple[float, float]:
        hw = self.half_width or 0.0
        return (self.mean - hw, self.mean + hw)

    def overlaps(self, other: "ScoreStats") -> bool:
        lo1, hi1 = self.interval()
        lo2, hi2 = other.interval()
        return lo1 <= hi2 and lo2 <= hi1


def confidence_interval(scores: Sequence[float]) -> ScoreStats:
    """Mean, sample std (n-1 denominator) and 1.96*s/sqrt(n) half-width.

    A single score has no spread estimate; s and half_width come back
    absent rather than zero.
    """
    n = len(scores)
    if n < 1:
        raise ConfigError("confidence_interval needs at least one score")
    mu = _mean(scores)
    if n == 1:
        return ScoreStats(mean=mu, s=None, n=1, half_width=None)
    s = _stdev(scores)
    return ScoreStats(mean=mu, s=s, n=n, half_width=Z_95 * s / math.sqrt(n))


def bernoulli_interval(p: float, n: int, use_sqrt: bool = False) -> ScoreStats:
    """Interval for a fraction score using the Bernoulli spread s = p*(1-p).

    That formula is the Bernoulli variance, not its standard deviation;
    it is applied here exactly as stated, with the square-root variant
    available behind `use_sqrt`. Outputs are labeled with which one was
    used.
    """
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"p must lie in [0, 1], got {p}")
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    s = p - p * p
    formula = "bernoulli-variance"
    if use_sqrt:
        s = math.sqrt(s)
        formula = "bernoulli-std"
    return ScoreStats(mean=p, s=s, n=n, half_width=Z_95 * s / math.sqrt(n),
                      formula=formula)


# -- optimizers ------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: Mapping[str, Matrix],
    grads: GradientMap,
    state: AdamState,
    cfg: TrainConfig,
) -> tuple[dict[str, Matrix], AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    t = state.t + 1
    new_params: dict[str, Matrix] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ShapeMismatchError(
                f"adam_step: grad {g.shape} vs param {p.shape} for {key!r}")
        gv = g.to_numpy()
        pv = p.to_numpy()
        m = cfg.beta1 * state.m.get(key, 0.0) + (1.0 - cfg.beta1) * gv
        v = cfg.beta2 * state.v.get(key, 0.0) + (1.0 - cfg.beta2) * gv * gv
        m_hat = m / (1.0 - cfg.beta1**t)
        v_hat = v / (1.0 - cfg.beta2**t)
        new = pv - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
        if cfg.weight_decay > 0.0:
            new = new - cfg.learning_rate * cfg.weight_decay * pv
        new_params[key] = Matrix._wrap(np.asarray(new))
        new_m[key] = np.asarray(m)
        new_v[key] = np.asarray(v)
    return new_params, AdamState(new_m, new_v, t)


def sgd_step(
    params: Mapping[str, Matrix],
    grads: GradientMap,
    cfg: TrainConfig,
) -> dict[str, Matrix]:
    """Plain gradient descent update."""
    out: dict[str, Matrix] = {}
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ShapeMismatchError(
                f"sgd_step: grad {g.shape} vs param {p.shape} for {key!r}")
        new = p.to_numpy() - cfg.learning_rate * g.to_numpy()
        if cfg.weight_decay > 0.0:
            new = new - cfg.learning_rate * cfg.weight_decay * p.to_numpy()
        out[key] = Matrix._wrap(new)
    return out


# -- training loop ----------------------------------------------------------


def train(model, task, cfg: TrainConfig, log_path=None,
          invariant_checks: bool = True) -> TrainResult:
    """Fine-tune a model's trainable parameters on a task.

    Raises DivergenceError as soon as the loss goes non-finite. Writes
    one JSON record per logged step to log_path when given.
    """
    entries = model.param_entries()
    probe = Tape()
    _, arrays, trainset = register_leaves(probe, entries)
    if not trainset:
        raise ConfigError("model has no trainable parameters")
    frozen_keys = sorted(k for k in arrays if k not in trainset)
    frozen_hashes = {k: hash(arrays[k].tobytes()) for k in frozen_keys}

    adapted = model.adapted_layers()
    sym_adapters = [(name, lay.adapter) for _, name, lay in adapted
                    if lay.adapter is not None and lay.adapter.kind == "symlora"]
    all_adapters = [(name, lay.adapter) for _, name, lay in adapted
                    if lay.adapter is not None]

    rng = SeededRng(cfg.seed)
    eval_set = task.eval_set()
    state = AdamState()
    curve: list[tuple[int, float]] = []
    max_sym = 0.0 if sym_adapters else None
    max_rank = 0.0 if all_adapters else None
    log_records: list[dict] = []

    def check_frozen() -> None:
        for key in frozen_keys:
            if hash(arrays[key].tobytes()) != frozen_hashes[key]:
                raise SymloraError(f"frozen parameter {key!r} changed during training")

    start = time.perf_counter()
    metric = model.metric_on(eval_set)
    for step in range(1, cfg.steps + 1):
        batch = task.sample_batch(cfg.batch_size, rng)
        tape = Tape()
        leaves, _, _ = register_leaves(tape, entries)
        loss_node = model.loss_node(tape, leaves, batch, dropout_rng=rng)
        loss = float(loss_node.value[0, 0])
        if not math.isfinite(loss):
            raise DivergenceError(f"loss became non-finite at step {step}")
        grads = backward(tape, loss_node)
        params = {k: Matrix(arrays[k]) for k in trainset}
        if cfg.optimizer == "adam":
            updated, state = adam_step(params, grads, state, cfg)
        else:
            updated = sgd_step(params, grads, cfg)
        for k, new in updated.items():
            arrays[k][...] = new.to_numpy()

        if invariant_checks:
            for _, lay in ((n, l) for _, n, l in adapted):
                lay.base.assert_frozen()
            for _, ad in sym_adapters:
                max_sym = max(max_sym, ad.symmetry_violation())

        if step % cfg.eval_every == 0 or step == cfg.steps:
            metric = model.metric_on(eval_set)
            record = {"step": step, "loss": loss, "metric": metric}
            if invariant_checks:
                check_frozen()
                if all_adapters:
                    step_rank = max(
                        rank_ratio(ad.delta_weight_array(), ad.r)
                        for _, ad in all_adapters)
                    max_rank = max(max_rank, step_rank)
                    record["max_rank_ratio"] = step_rank
                if sym_adapters:
                    record["max_symmetry_violation"] = max_sym
            curve.append((step, loss))
            log_records.append(record)
    check_frozen()
    elapsed = time.perf_counter() - start

    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            for record in log_records:
                fh.write(json.dumps(record) + "\n")

    return TrainResult(
        final_metric=metric,
        metric_name=task.metric_name,
        loss_curve=curve,
        seed_metrics=[metric],
        wall_clock_seconds=elapsed,
        steps_run=cfg.steps,
        max_symmetry_violation=max_sym,
        max_rank_ratio=max_rank,
    )


# -- grid search -------------------------------------------------------------


@dataclass
class GridCell:
    config: TrainConfig
    stats: ScoreStats | None
    metrics: list[float]
    failures: list[tuple[int, str]]

    @property
    def failed(self) -> bool:
        return bool(self.failures) or self.stats is None


@dataclass
class GridSearchResult:
    best_config: TrainConfig
    best_stats: ScoreStats
    cells: list[GridCell]


def _config_key(cfg: TrainConfig) -> tuple:
    return (cfg.learning_rate, cfg.batch_size, cfg.steps, cfg.optimizer,
            cfg.weight_decay, cfg.eval_every)


def grid_search(
    model_factory: Callable[[int], object],
    task,
    grid: Sequence[TrainConfig],
    seeds: Sequence[int],
) -> GridSearchResult:
    """Train every (config, seed) cell and pick the best mean metric.

    Cells are independent; each run derives its randomness from its own
    seed, so results do not depend on grid order. A diverging run flags
    its cell instead of aborting the search, and flagged cells are
    excluded from the "best" pick.
    """
    if not grid or not seeds:
        raise ConfigError("grid_search needs a nonempty grid and seed list")
    cells: list[GridCell] = []
    for cfg in grid:
        metrics: list[float] = []
        failures: list[tuple[int, str]] = []
        for seed in seeds:
            run_cfg = replace(cfg, seed=int(seed))
            model = model_factory(int(seed))
            try:
                result = train(model, task, run_cfg)
            except DivergenceError as exc:
                failures.append((int(seed), str(exc)))
                continue
            metrics.append(result.final_metric)
        stats = confidence_interval(metrics) if metrics else None
        cells.append(GridCell(config=cfg, stats=stats, metrics=metrics,
                              failures=failures))

    viable = [c for c in cells if not c.failed]
    if not viable:
        raise SymloraError("grid_search: every cell failed")
    sign = 1.0 if task.higher_is_better else -1.0
    best = min(viable, key=lambda c: (-sign * c.stats.mean, _config_key(c.config)))
    return GridSearchResult(best_config=best.config, best_stats=best.stats,
                            cells=cells)
