"""Command-line surface: train, eval, merge, norms, compare, grad-check, swap.

Every run is fully specified by flags (paths, seeds, hyperparameters);
nothing is read from the environment. Checkpoints carry enough metadata
to rebuild their frozen base deterministically, so `eval`, `norms`,
`merge`, and `swap` only need the checkpoint path.
"""

from __future__ import annotations

import argparse
import json
import struct
import sys

import numpy as np

from . import analysis, store
from .errors import SymloraError
from .matrix import matmul, max_abs_diff
from .model import (
    InjectionPolicy,
    LinearTaskModel,
    TinyTransformerConfig,
    build_model,
    inject_adapters,
    pretrain_base,
)
from .rng import SeededRng, gaussian_matrix
from .tasks import make_planted_task, make_sequence_task, make_task
from .training import TrainConfig, confidence_interval, train
from .verification import adapter_gradient_check_case

TASK_IDS = ("planted-sym", "planted-asym", "parity", "majority", "copy")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="symlora",
        description="Train, evaluate, and swap LoRA / SymLoRA adapters on toy tasks.")
    sub = parser.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="fine-tune adapters on a task")
    tr.add_argument("--task", required=True, choices=TASK_IDS)
    tr.add_argument("--adapter", default="symlora", choices=("lora", "symlora", "none"))
    tr.add_argument("--rank", type=int, default=8)
    tr.add_argument("--alpha", type=float, default=None,
                    help="update scale (defaults to the rank)")
    tr.add_argument("--init-std", type=float, default=None,
                    help="adapter init std (default 0.1 planted, 0.02 sequence)")
    tr.add_argument("--targets", default="query,value",
                    help="comma list from query,key,value,output")
    tr.add_argument("--tie-lambda", action="store_true")
    tr.add_argument("--lr", type=float, default=None,
                    help="learning rate (default 0.05 planted, 3e-3 sequence)")
    tr.add_argument("--batch-size", type=int, default=None)
    tr.add_argument("--steps", type=int, default=2000)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--seeds", default=None,
                    help="comma list of seeds; runs all and writes --stats-out")
    tr.add_argument("--optimizer", default="adam", choices=("adam", "sgd"))
    tr.add_argument("--eval-every", type=int, default=None)
    tr.add_argument("--out", default=None, help="checkpoint output path")
    tr.add_argument("--log", default=None, help="JSONL training-log path")
    tr.add_argument("--stats-out", default=None, help="per-task ScoreStats JSON path")
    # planted-task shape
    tr.add_argument("--n", type=int, default=64)
    tr.add_argument("--r-star", type=int, default=4)
    tr.add_argument("--noise-std", type=float, default=0.01)
    tr.add_argument("--task-seed", type=int, default=0)
    # sequence-task / model shape
    tr.add_argument("--vocab-size", type=int, default=8)
    tr.add_argument("--seq-len", type=int, default=9)
    tr.add_argument("--d-model", type=int, default=64)
    tr.add_argument("--n-heads", type=int, default=4)
    tr.add_argument("--n-layers", type=int, default=2)
    tr.add_argument("--max-seq-len", type=int, default=32)
    tr.add_argument("--base-seed", type=int, default=1)
    tr.add_argument("--pretrain-steps", type=int, default=300)
    tr.add_argument("--pretrain-task", default="copy", choices=("parity", "majority", "copy"))

    ev = sub.add_parser("eval", help="evaluate a checkpoint on its task")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--json", action="store_true", help="emit a JSON result line")

    mg = sub.add_parser("merge", help="emit merged dense weights for a checkpoint")
    mg.add_argument("--ckpt", required=True)
    mg.add_argument("--out", required=True)

    nm = sub.add_parser("norms", help="per-layer norm report for a checkpoint")
    nm.add_argument("--ckpt", required=True)
    nm.add_argument("--norm-kind", default="frobenius",
                    choices=("frobenius", "entrywise_abs_sum"))
    nm.add_argument("--out", default=None, help="report JSON path")

    cp = sub.add_parser("compare", help="tie table from two stats files")
    cp.add_argument("--symlora", required=True, help="stats file for the symlora arm")
    cp.add_argument("--lora", required=True, help="stats file for the lora arm")
    cp.add_argument("--out", default=None, help="table JSON path")

    gc = sub.add_parser("grad-check", help="finite-difference gradient suite")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--cases", type=int, default=100)
    gc.add_argument("--tolerance", type=float, default=1e-5)

    sw = sub.add_parser("swap", help="evaluate two checkpoints on one base")
    sw.add_argument("--ckpt-a", required=True)
    sw.add_argument("--ckpt-b", required=True)
    return parser


# -- shared plumbing ---------------------------------------------------------


def _task_from_args(args) -> tuple[object, dict]:
    if args.task in ("planted-sym", "planted-asym"):
        task = make_planted_task(args.n, args.r_star,
                                 symmetric=args.task == "planted-sym",
                                 noise_std=args.noise_std, seed=args.task_seed)
    else:
        task = make_sequence_task(args.task, vocab_size=args.vocab_size,
                                  seq_len=args.seq_len, seed=args.task_seed)
    return task, task.spec()


def _defaults_for(args, planted: bool) -> tuple[float, int, float, int]:
    lr = args.lr if args.lr is not None else (0.05 if planted else 3e-3)
    batch = args.batch_size if args.batch_size is not None else (64 if planted else 32)
    init_std = args.init_std if args.init_std is not None else (0.1 if planted else 0.02)
    eval_every = args.eval_every if args.eval_every is not None else 50
    return lr, batch, init_std, eval_every


def _build_fine_tune_model(args, task, base_recipe: dict, run_seed: int):
    """Model ready for fine-tuning, plus the recipe to rebuild its base."""
    alpha = args.alpha if args.alpha is not None else float(args.rank)
    planted = base_recipe["kind"] == "planted"
    _, _, init_std, _ = _defaults_for(args, planted)
    if planted:
        return LinearTaskModel(task, args.adapter, args.rank, alpha,
                               init_std=init_std, seed=run_seed)
    cfg = TinyTransformerConfig.from_dict(base_recipe["model"])
    base = build_model(cfg)
    if base_recipe["pretrain"]["steps"] > 0:
        pre_task = make_task(base_recipe["pretrain"]["task"])
        base = pretrain_base(base, pre_task, base_recipe["pretrain"]["steps"])
    policy = InjectionPolicy(kind=args.adapter,
                             targets=tuple(args.targets.split(",")),
                             r=args.rank, alpha=alpha, init_std=init_std,
                             tie_lambda=args.tie_lambda)
    return inject_adapters(base, policy, SeededRng(run_seed))


def _base_recipe_from_args(args, task_spec: dict) -> dict:
    if args.task in ("planted-sym", "planted-asym"):
        return {"kind": "planted", "task": task_spec}
    # One head with vocab_size classes serves every sequence task (binary
    # tasks use a subset), so checkpoints for different tasks share a base
    # and can be hot-swapped.
    cfg = TinyTransformerConfig(
        vocab_size=args.vocab_size, n_classes=args.vocab_size,
        d_model=args.d_model, n_heads=args.n_heads, n_layers=args.n_layers,
        max_seq_len=args.max_seq_len, seed=args.base_seed)
    pretrain_task = make_sequence_task(args.pretrain_task, vocab_size=args.vocab_size,
                                       seq_len=args.seq_len, seed=args.base_seed + 1000)
    return {"kind": "transformer", "model": cfg.to_dict(),
            "pretrain": {"task": pretrain_task.spec(), "steps": args.pretrain_steps}}


def _rebuild_from_checkpoint(ckpt_path: str):
    """(model with adapters attached, task) from checkpoint metadata."""
    ckpt = store.read_checkpoint(ckpt_path)
    meta = ckpt.metadata
    recipe = meta["base_recipe"]
    task = make_task(meta["task"])
    if recipe["kind"] == "planted":
        bare = LinearTaskModel(task, "none", 1, 1.0)
    else:
        cfg = TinyTransformerConfig.from_dict(recipe["model"])
        bare = build_model(cfg)
        if recipe["pretrain"]["steps"] > 0:
            pre_task = make_task(recipe["pretrain"]["task"])
            bare = pretrain_base(bare, pre_task, recipe["pretrain"]["steps"])
    return store.load_adapter(bare, ckpt_path), task


# -- subcommands -------------------------------------------------------------


def _cmd_train(args) -> int:
    if args.adapter == "none" and args.task in ("planted-sym", "planted-asym"):
        raise SymloraError("planted tasks need an adapter to train")
    task, task_spec = _task_from_args(args)
    recipe = _base_recipe_from_args(args, task_spec)
    planted = recipe["kind"] == "planted"
    lr, batch, _, eval_every = _defaults_for(args, planted)

    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [args.seed]
    metrics = []
    for i, seed in enumerate(seeds):
        model = _build_fine_tune_model(args, task, recipe, seed)
        cfg = TrainConfig(learning_rate=lr, batch_size=batch, steps=args.steps,
                          optimizer=args.optimizer, seed=seed, eval_every=eval_every)
        result = train(model, task, cfg, log_path=args.log if i == 0 else None)
        metrics.append(result.final_metric)
        print(f"seed {seed}: final {task.metric_name} = {result.final_metric:.6g} "
              f"({result.wall_clock_seconds:.1f}s)")
        if args.out and i == 0:
            metadata = {
                "task": task_spec,
                "base_recipe": recipe,
                "seed": seed,
                "steps": args.steps,
                "final_metric": result.final_metric,
                "metric_name": task.metric_name,
                "policy": model.policy.to_dict() if model.policy else None,
            }
            store.save_adapter(model, args.out, metadata)
            print(f"checkpoint written to {args.out}")

    if args.stats_out:
        stats = confidence_interval(metrics)
        analysis.write_stats_file(args.stats_out, args.adapter,
                                  {args.task: (stats, task.metric_name)})
        print(f"stats written to {args.stats_out}")
    return 0


def _cmd_eval(args) -> int:
    model, task = _rebuild_from_checkpoint(args.ckpt)
    metric = model.metric_on(task.eval_set())
    meta = store.read_checkpoint(args.ckpt).metadata
    if args.json:
        print(json.dumps({"metric_name": task.metric_name, "metric": metric,
                          "saved_metric": meta.get("final_metric")}))
    else:
        print(f"{task.metric_name} = {metric:.6g}")
        if "final_metric" in meta:
            print(f"saved at training time: {meta['final_metric']:.6g}")
    return 0


def _cmd_merge(args) -> int:
    model, _ = _rebuild_from_checkpoint(args.ckpt)
    arrays = {}
    worst = 0.0
    for _, name, lin in model.adapted_layers():
        merged = lin.merge()
        arrays[name] = merged
        x = gaussian_matrix(merged.cols, 4, 1.0, SeededRng(0))
        worst = max(worst, max_abs_diff(matmul(merged, x), lin.forward(x)))
    payload = b"".join(np.ascontiguousarray(m.to_numpy(), dtype="<f8").tobytes()
                       for m in arrays.values())
    header = {
        "kind": "merged-weights",
        "source": str(args.ckpt),
        "matrices": [[name, list(m.shape)] for name, m in arrays.items()],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(args.out, "wb") as fh:
        fh.write(store.MAGIC + bytes([store.FORMAT_VERSION]))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)
        fh.write(struct.pack("<Q", store.fnv1a64(payload)))
    print(f"merged {len(arrays)} matrices to {args.out} "
          f"(forward agreement {worst:.2e})")
    return 0


def _cmd_norms(args) -> int:
    model, _ = _rebuild_from_checkpoint(args.ckpt)
    report = analysis.norm_report(model, args.norm_kind)
    print(report.render_text())
    if args.out:
        report.write_json(args.out)
        print(f"report written to {args.out}")
    return 0


def _cmd_compare(args) -> int:
    arm_a, tasks_a = analysis.read_stats_file(args.symlora)
    arm_b, tasks_b = analysis.read_stats_file(args.lora)
    if arm_a != "symlora" or arm_b != "lora":
        raise SymloraError(f"expected symlora and lora stats files, got "
                           f"{arm_a!r} and {arm_b!r}")
    shared = sorted(set(tasks_a) & set(tasks_b))
    if not shared:
        raise SymloraError("stats files share no tasks")
    results = {t: (tasks_a[t][0], tasks_b[t][0]) for t in shared}
    metrics = {t: tasks_a[t][1] for t in shared}
    table = analysis.compare_runs(results, metrics)
    print(table.render_text())
    if args.out:
        table.write_json(args.out)
        print(f"table written to {args.out}")
    return 0


def _cmd_grad_check(args) -> int:
    worst = 0.0
    for case in range(args.cases):
        worst = max(worst, adapter_gradient_check_case(case, args.seed))
    print(f"max relative gradient error over {args.cases} cases: {worst:.3e}")
    if worst <= args.tolerance:
        print(f"PASS (tolerance {args.tolerance:g})")
        return 0
    print(f"FAIL (tolerance {args.tolerance:g})")
    return 1


def _cmd_swap(args) -> int:
    model_a, task_a = _rebuild_from_checkpoint(args.ckpt_a)
    meta_a = store.read_checkpoint(args.ckpt_a).metadata
    metric_a = model_a.metric_on(task_a.eval_set())
    # Swap B's adapters onto the same base object graph.
    model_b = store.load_adapter(model_a, args.ckpt_b)
    task_b = make_task(store.read_checkpoint(args.ckpt_b).metadata["task"])
    meta_b = store.read_checkpoint(args.ckpt_b).metadata
    metric_b = model_b.metric_on(task_b.eval_set())
    ok = True
    for label, metric, meta in (("A", metric_a, meta_a), ("B", metric_b, meta_b)):
        saved = meta.get("final_metric")
        reproduced = saved is not None and metric == saved
        ok = ok and reproduced
        print(f"checkpoint {label}: metric {metric:.6g} "
              f"(saved {saved!r}, reproduced={reproduced})")
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {
        "train": _cmd_train,
        "eval": _cmd_eval,
        "merge": _cmd_merge,
        "norms": _cmd_norms,
        "compare": _cmd_compare,
        "grad-check": _cmd_grad_check,
        "swap": _cmd_swap,
    }
    try:
        return handlers[args.command](args)
    except SymloraError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
