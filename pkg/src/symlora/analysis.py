"""Per-layer norm reports and adapter-vs-adapter comparison tables.

The norm report tabulates, for every adapted matrix, the size of the
base term actually used in the forward pass (scale * W0 for SymLoRA,
W0 for LoRA) against the size of the realized update, in either the
Frobenius norm or the entrywise absolute sum. Both statistics exist
because the two are easy to conflate; every report carries a norm-kind
tag, and a shared min/max is included so any renderer can put all grids
on one color scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .adapters import delta_weight
from .errors import ConfigError, MissingArmError, NoAdaptersError
from .matrix import entrywise_abs_sum, frobenius_norm
from .training import ScoreStats

NORM_KINDS = ("frobenius", "entrywise_abs_sum")

# Full-scale GLUE validation/test results published for these two adapter
# families on RoBERTa-base (rank 8 on query/value, alpha = rank). Not
# reproducible at desk scale; kept as rendering fixtures and documented
# reference targets. Values are (mean, 95% half-width or None).
FULL_SCALE_REFERENCE = {
    "CoLA": {"metric": "matthews_corr",
             "symlora_val": (0.63, 0.029), "symlora_test": (0.60, None),
             "lora_val": (0.63, None)},
    "QNLI": {"metric": "accuracy",
             "symlora_val": (0.92, 0.007), "symlora_test": (0.92, 0.007),
             "lora_val": (0.93, 0.003)},
    "SST-2": {"metric": "accuracy",
              "symlora_val": (0.94, 0.015), "symlora_test": (0.95, 0.010),
              "lora_val": (0.95, 0.002)},
    "MNLI": {"metric": "accuracy",
             "symlora_val": (0.86, 0.005), "symlora_test": (0.86, 0.005),
             "lora_val": (0.87, 0.003)},
    "QQP": {"metric": "accuracy",
            "symlora_val": (0.90, 0.003), "symlora_test": (0.88, 0.001),
            "lora_val": (0.90, 0.001)},
    "RTE": {"metric": "accuracy",
            "symlora_val": (0.85, 0.041), "symlora_test": (0.78, 0.015),
            "lora_val": (0.86, 0.007)},
    "MRPC": {"metric": "accuracy",
             "symlora_val": (0.88, 0.015), "symlora_test": (0.88, 0.015),
             "lora_val": (0.89, 0.007)},
    "STS-B": {"metric": "pearson_corr",
              "symlora_val": (0.90, 0.005), "symlora_test": (0.88, None),
              "lora_val": (0.91, None)},
}


@dataclass(frozen=True)
class NormRow:
    layer: int
    matrix_name: str
    base_term_norm: float
    adapter_norm: float
    difference: float
    lambda_value: float | None


@dataclass
class NormReport:
    adapter_kind: str
    norm_kind: str
    rows: list[NormRow]
    scale_min: float
    scale_max: float

    def to_dict(self) -> dict:
        return {
            "adapter_kind": self.adapter_kind,
            "norm_kind": self.norm_kind,
            "scale": {"min": self.scale_min, "max": self.scale_max},
            "rows": [
                {
                    "layer": r.layer,
                    "matrix_name": r.matrix_name,
                    "norm_kind": self.norm_kind,
                    "base_term_norm": r.base_term_norm,
                    "adapter_norm": r.adapter_norm,
                    "difference": r.difference,
                    "lambda_value": r.lambda_value,
                }
                for r in self.rows
            ],
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def render_text(self) -> str:
        lines = [
            f"norm report ({self.adapter_kind}, {self.norm_kind})",
            f"{'layer':>5}  {'matrix':<28} {'base term':>12} {'adapter':>12} "
            f"{'difference':>12} {'lambda':>8}",
        ]
        for r in self.rows:
            lam = f"{r.lambda_value:8.4f}" if r.lambda_value is not None else "       -"
            lines.append(
                f"{r.layer:>5}  {r.matrix_name:<28} {r.base_term_norm:>12.6f} "
                f"{r.adapter_norm:>12.6f} {r.difference:>12.6f} {lam}")
        lines.append(f"shared scale: min {self.scale_min:.6f} max {self.scale_max:.6f}")
        return "\n".join(lines)


def norm_report(model, norm_kind: str = "frobenius") -> NormReport:
    """One row per adapted matrix: base-term norm, update norm, and their
    difference, plus the base scale for SymLoRA rows."""
    if norm_kind not in NORM_KINDS:
        raise ConfigError(f"unknown norm kind {norm_kind!r}; choose from {NORM_KINDS}")
    adapted = model.adapted_layers()
    if not adapted:
        raise NoAdaptersError("norm_report requires a model with adapters")
    norm = frobenius_norm if norm_kind == "frobenius" else entrywise_abs_sum

    rows = []
    kinds = set()
    for layer_idx, name, lin in adapted:
        ad = lin.adapter
        kinds.add(ad.kind)
        if ad.kind == "symlora":
            lam = ad.lambda_scale
            base_term = norm(lam * lin.base.W0)
            lambda_value: float | None = lam
        else:
            base_term = norm(lin.base.W0)
            lambda_value = None
        adapter_norm = norm(delta_weight(ad))
        rows.append(NormRow(layer=layer_idx, matrix_name=name,
                            base_term_norm=base_term, adapter_norm=adapter_norm,
                            difference=base_term - adapter_norm,
                            lambda_value=lambda_value))
    values = [v for r in rows for v in (r.base_term_norm, r.adapter_norm, r.difference)]
    return NormReport(
        adapter_kind=kinds.pop() if len(kinds) == 1 else "mixed",
        norm_kind=norm_kind,
        rows=rows,
        scale_min=min(values),
        scale_max=max(values),
    )


@dataclass(frozen=True)
class ComparisonRow:
    task: str
    metric: str
    symlora: ScoreStats
    lora: ScoreStats
    difference: float
    tie: bool


@dataclass
class ComparisonTable:
    rows: list[ComparisonRow]

    def to_dict(self) -> dict:
        return {
            "rows": [
                {
                    "task": r.task,
                    "metric": r.metric,
                    "symlora": stats_to_dict(r.symlora),
                    "lora": stats_to_dict(r.lora),
                    "difference": r.difference,
                    "tie": r.tie,
                }
                for r in self.rows
            ]
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def render_text(self) -> str:
        lines = [f"{'task':<12} {'metric':<16} {'symlora':>18} {'lora':>18} "
                 f"{'diff':>9} {'tie':>5}"]
        for r in self.rows:
            lines.append(
                f"{r.task:<12} {r.metric:<16} {_fmt_stats(r.symlora):>18} "
                f"{_fmt_stats(r.lora):>18} {r.difference:>+9.4f} "
                f"{'yes' if r.tie else 'no':>5}")
        return "\n".join(lines)


def _fmt_stats(s: ScoreStats) -> str:
    if s.half_width is None:
        return f"{s.mean:.4f}"
    return f"{s.mean:.4f} +/- {s.half_width:.4f}"


def compare_runs(results, metric_names=None) -> ComparisonTable:
    """Build the tie table from per-task (symlora, lora) ScoreStats pairs.

    Two arms tie when their confidence intervals intersect; an arm with
    no half-width contributes a point interval.
    """
    rows = []
    for task in sorted(results):
        sym, lora = results[task]
        if sym is None or lora is None:
            raise MissingArmError(f"task {task!r} is missing an arm")
        metric = (metric_names or {}).get(task, "score")
        rows.append(ComparisonRow(
            task=task, metric=metric, symlora=sym, lora=lora,
            difference=sym.mean - lora.mean, tie=sym.overlaps(lora)))
    return ComparisonTable(rows=rows)


def full_scale_reference_table() -> ComparisonTable:
    """The published full-scale GLUE validation comparison, rendered
    through the same tie machinery as desk-scale runs."""
    results = {}
    metrics = {}
    for task, ref in FULL_SCALE_REFERENCE.items():
        sym_mean, sym_hw = ref["symlora_val"]
        lora_mean, lora_hw = ref["lora_val"]
        results[task] = (
            ScoreStats(mean=sym_mean, s=None, n=1, half_width=sym_hw,
                       formula="sample-std"),
            ScoreStats(mean=lora_mean, s=None, n=1, half_width=lora_hw,
                       formula="sample-std"),
        )
        metrics[task] = ref["metric"]
    return compare_runs(results, metrics)


# -- stats files (the CLI compare interchange format) ------------------------


def stats_to_dict(s: ScoreStats) -> dict:
    return {"mean": s.mean, "s": s.s, "n": s.n, "half_width": s.half_width,
            "formula": s.formula}


def stats_from_dict(d: dict) -> ScoreStats:
    return ScoreStats(mean=d["mean"], s=d.get("s"), n=d["n"],
                      half_width=d.get("half_width"),
                      formula=d.get("formula", "sample-std"))


def write_stats_file(path, arm: str, results: dict) -> None:
    """results: task -> (ScoreStats, metric_name)."""
    payload = {
        "arm": arm,
        "tasks": {
            task: dict(stats_to_dict(stats), metric=metric)
            for task, (stats, metric) in results.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_stats_file(path) -> tuple[str, dict]:
    """Returns (arm, task -> (ScoreStats, metric_name))."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    tasks = {
        task: (stats_from_dict(entry), entry.get("metric", "score"))
        for task, entry in payload.get("tasks", {}).items()
    }
    return payload.get("arm", "unknown"), tasks
