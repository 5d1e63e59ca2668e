"""Command-line entry point: ``aptkit {cost,verify,gradcheck,train,attn-dump}``.

Exit codes: 0 success, 1 a check failed (or training diverged), 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import costmodel as cm
from . import numkit as nk
from . import traced
from .apt import (
    SingularTransformError,
    exact_representation_check,
    vk_transform_gap,
)
from .attention import (
    AttentionParams,
    FeedForward,
    Layer,
    PromptBank,
    assemble_blocks,
    assemble_partition,
    decompose_attention,
    deep_prompt_forward,
    input_row_attention,
    prompt_extended_attention,
)
from .autodiff import gradcheck, ops
from .toybench.dump import TOP_PROMPTS, TOP_TOKENS, attention_diffusion_dump, write_dumps
from .toybench.forward import METHODS
from .toybench.tasks import KINDS, TaskError, make_task
from .toybench.train import DivergenceError, TrainConfig, load_run, save_run, train

OK, FAILED, USAGE = 0, 1, 2
SPEC_FIELDS = ("layers", "d", "n", "p", "r", "sites", "heads")


class UsageError(Exception):
    pass


def resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    env = os.environ.get("APT_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"APT_SEED must be an integer, got {env!r}") from None


# --- cost --------------------------------------------------------------------


def build_spec(args) -> cm.CostSpec:
    """Preset (with n fitted where a reference exists) overlaid with explicit flags."""
    overrides = {f: getattr(args, f) for f in SPEC_FIELDS if getattr(args, f) is not None}
    if args.preset is None:
        return cm.CostSpec("custom", **overrides)
    base = cm.preset(args.preset, fitted="n" not in overrides)
    return base.with_(**overrides, name=base.name if not overrides else f"{base.name}*")


def cmd_cost(args) -> int:
    explicit = all(getattr(args, f) is not None for f in ("layers", "d", "n", "p", "r", "sites"))
    if args.preset is None and not explicit:
        args.preset = "vilt"
    try:
        spec = build_spec(args)
    except cm.CostError as e:
        raise UsageError(str(e)) from None
    conv = cm.CONVENTIONS[args.convention]
    table = cm.table_csv(spec, conv) if args.format == "csv" else cm.table_markdown(spec, conv)
    print(table, end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "cost.csv"), "w") as fh:
            fh.write(cm.table_csv(spec, conv))
        with open(os.path.join(args.out, "cost.md"), "w") as fh:
            fh.write(cm.table_markdown(spec, conv))
    if not args.check_paper:
        return OK
    if args.preset not in cm.REFERENCE:
        raise UsageError(f"--check-paper needs one of the presets {', '.join(cm.REFERENCE)}")
    if any(getattr(args, f) is not None for f in SPEC_FIELDS):
        raise UsageError("--check-paper checks the unmodified preset; drop the explicit dimensions")
    checks = cm.check_reference([args.preset])
    for c in checks:
        print(c.line())
    for row in cm.reference_comparison(args.preset):
        print(
            f"[info] {row['preset']} {row['method']}: published {row['published'] / cm.G:.2f}G, "
            f"fitted n={row['fitted_n']:.1f}: mac-only {row['mac_only'] / cm.G:.2f}G, "
            f"default {row['default'] / cm.G:.2f}G"
        )
    return OK if all(c.passed for c in checks) else FAILED


# --- verify ------------------------------------------------------------------


def _verify_instance(rng, d: int, n: int, p: int, perturb: float) -> dict[str, float]:
    params = AttentionParams.random(d, rng)
    x = rng.normal(size=(n, d))
    prompts = rng.normal(size=(p, d))
    x_out, _ = prompt_extended_attention(x, prompts, params)
    blocks = decompose_attention(x, prompts, params)
    errs = {
        "block reconstruction": np.max(np.abs(assemble_blocks(blocks, x, prompts, params) + perturb - x_out)),
        "partition identity": np.max(np.abs(assemble_partition(blocks, x, prompts, params) + perturb - x_out)),
        "row-drop invariance": np.max(np.abs(input_row_attention(x, prompts, params) + perturb - x_out)),
    }
    stack = [Layer(AttentionParams.random(d, rng), FeedForward.random(d, rng)) for _ in range(2)]
    bank = PromptBank("deep", [rng.normal(size=(p, d)) for _ in stack])
    skip = deep_prompt_forward(x, bank, stack, skip=True)
    full = deep_prompt_forward(x, bank, stack, skip=False)
    errs["deep stack row-drop"] = np.max(np.abs(skip + perturb - full))
    try:
        rep = exact_representation_check(x, prompts, params)
        errs["exact representation"] = rep.max_abs_error + perturb
    except SingularTransformError:
        pass
    # rank bound on a rank-deficient instance
    ka, kb = rng.integers(1, d + 1, size=2)
    w_q = rng.normal(size=(d, ka)) @ rng.normal(size=(ka, d))
    w_v = rng.normal(size=(d, kb)) @ rng.normal(size=(kb, d))
    low = AttentionParams(w_q, rng.normal(size=(d, d)), w_v, np.eye(d))
    gap = nk.numerical_rank(vk_transform_gap(rng.normal(size=(max(p, d), d)), low))
    bound = nk.numerical_rank(low.w_k @ low.w_q.T) + nk.numerical_rank(low.w_v)
    errs["rank bound excess"] = max(0.0, gap - bound) + perturb
    return {k: float(v) for k, v in errs.items()}


VERIFY_TOL = {
    "block reconstruction": 1e-9,
    "partition identity": 1e-9,
    "row-drop invariance": 1e-12,
    "deep stack row-drop": 1e-12,
    "exact representation": 1e-8,
    "rank bound excess": 0.5,
    "measured vs analytic flops": 0.01,
}


def cmd_verify(args) -> int:
    if args.d < 1 or args.n < 1 or args.p < 1 or args.trials < 1:
        raise UsageError("--d, --n, --p and --trials must be positive")
    start = time.perf_counter()
    rng = np.random.default_rng(resolve_seed(args.seed))
    worst: dict[str, float] = {}
    for _ in range(args.trials):
        for k, v in _verify_instance(rng, args.d, args.n, args.p, args.perturb).items():
            worst[k] = max(worst.get(k, 0.0), v)
    r = min(args.r if args.r is not None else 2, args.d)
    spec = cm.CostSpec("verify", layers=2, d=args.d, n=args.n, p=args.p, r=r, sites=2)
    rep = cm.measured_vs_analytic(spec, seed=resolve_seed(args.seed))
    worst["measured vs analytic flops"] = max(row.rel_err for row in rep.rows) + args.perturb
    failed = []
    for name, err in worst.items():
        tol = VERIFY_TOL[name]
        ok = err < tol if name != "measured vs analytic flops" else err <= tol
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: max error {err:.3e} (tol {tol:g})")
        if not ok:
            failed.append(name)
    print(f"{args.trials} instances, d={args.d} n={args.n} p={args.p}, {time.perf_counter() - start:.2f}s")
    if failed:
        print("failed checks: " + ", ".join(failed), file=sys.stderr)
        return FAILED
    return OK


# --- gradcheck ---------------------------------------------------------------


def gradcheck_cases(rng, d: int, n: int, p: int, r: int):
    """(name, loss builder, parameters) for the APT and deep-prompt paths."""
    params = AttentionParams.random(d, rng)
    x = rng.normal(size=(n, d))
    weights = rng.normal(size=(n, d))

    def apt_loss(tape, leaves):
        out = traced.apt_attention(tape.const(x), params, leaves)
        return ops.sum_all(out * weights)

    apt = {
        "p_v": rng.normal(size=(p, d)),
        "w1": rng.normal(size=(d, r)) * 0.3,
        "w2": rng.normal(size=(r, d)) * 0.3,
        "s": np.array([[rng.normal() * 0.1]]),
    }

    def deep_loss(tape, leaves):
        out = traced.input_row_attention(tape.const(x), leaves["prompts"], params)
        return ops.sum_all(out * weights)

    return [("apt_attention", apt_loss, apt), ("deep_prompt", deep_loss, {"prompts": rng.normal(size=(p, d))})]


def cmd_gradcheck(args) -> int:
    if min(args.d, args.n, args.p, args.r) < 1 or args.r > args.d:
        raise UsageError("sizes must be positive and --r must not exceed --d")
    rng = np.random.default_rng(resolve_seed(args.seed))
    csv_parts = []
    worst = 0.0
    for name, fn, params in gradcheck_cases(rng, args.d, args.n, args.p, args.r):
        try:
            rep = gradcheck(fn, params, eps=args.eps, tol=args.tol, rng=rng)
        except ValueError as e:
            raise UsageError(str(e)) from None
        for param in rep.params:
            print(f"{name}.{param}: max rel err {rep.max_rel_err(param):.3e}")
        print(f"{name}: {len(rep.rows)} coordinates, {len(rep.excluded)} excluded at non-smooth points")
        worst = max(worst, rep.max_rel_err())
        body = rep.to_csv().splitlines()
        if not csv_parts:
            csv_parts.append("case," + body[0])
        csv_parts.extend(f"{name},{line}" for line in body[1:])
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("\n".join(csv_parts) + "\n")
    ok = worst < args.tol
    print(f"[{'PASS' if ok else 'FAIL'}] max rel err {worst:.3e} (tol {args.tol:g})")
    return OK if ok else FAILED


# --- train / attn-dump ---------------------------------------------------------


def _methods(args) -> list[str]:
    names = args.compare.split(",") if args.compare else [args.method]
    bad = [m for m in names if m not in METHODS]
    if bad:
        raise UsageError(f"unknown method(s) {', '.join(bad)}; choose from {', '.join(METHODS)}")
    return names


def cmd_train(args) -> int:
    seed = resolve_seed(args.seed)
    methods = _methods(args)
    try:
        task = make_task(seed, args.task)
        cfgs = [
            TrainConfig(method=m, p=args.p, r=args.r, lr=args.lr, prompt_lr=args.prompt_lr, steps=args.steps, seed=seed)
            for m in methods
        ]
    except (ValueError, TaskError) as e:
        raise UsageError(str(e)) from None
    results = {}
    for cfg in cfgs:
        try:
            res = train(task.model, task, cfg)
        except DivergenceError as e:
            print(f"{cfg.method}: {e}", file=sys.stderr)
            return FAILED
        run_dir = os.path.join(args.out, cfg.method)
        save_run(res, task, run_dir)
        write_dumps(run_dir, attention_diffusion_dump(task.model, task, cfg.method, res.params))
        results[cfg.method] = res
        if not res.windows.passed:
            print(f"[warn] {cfg.method}: {res.windows.describe()}", file=sys.stderr)
    print(f"task {task.kind} seed {seed} (head-only floor {task.gap:.4f})")
    print(f"{'method':<11} {'trainable':>9} {'init_val':>10} {'final_val':>10} {'time':>6}")
    for m, res in results.items():
        print(f"{m:<11} {res.trainable:>9} {res.init_val_loss:>10.6f} {res.final_val_loss:>10.6f} {res.wall_time:>5.1f}s")
    if {"classifier", "deep"} <= results.keys():
        c, d = results["classifier"].final_val_loss, results["deep"].final_val_loss
        print(f"ordering classifier >= deep: {'yes' if c >= d else 'no'}")
    if {"deep", "apt"} <= results.keys():
        a, d = results["apt"].final_val_loss, results["deep"].final_val_loss
        print(f"apt within 1.05x of deep: {'yes' if a <= 1.05 * d else 'no'} (ratio {a / d:.3f})")
    return OK


def cmd_attn_dump(args) -> int:
    run_dir = args.run
    if not os.path.isfile(os.path.join(run_dir, "config.txt")):
        raise UsageError(f"{run_dir} is not a run directory (no config.txt)")
    cfg, raw, params = load_run(run_dir)
    task = make_task(int(raw["task_seed"]), raw["task_kind"])
    top_t = None if args.all else args.top_tokens
    top_p = None if args.all else args.top_prompts
    if args.layer is not None and not 0 <= args.layer < task.model.depth:
        raise UsageError(f"--layer must lie in [0, {task.model.depth})")
    if not 0 <= args.sample < task.val.size:
        raise UsageError(f"--sample must lie in [0, {task.val.size})")
    dumps = attention_diffusion_dump(task.model, task, cfg.method, params, args.layer, args.sample, top_t, top_p)
    out = args.out or run_dir
    os.makedirs(out, exist_ok=True)
    for path in write_dumps(out, dumps):
        print(path)
    return OK


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aptkit", description="Prompt-tuning cost, identity and toy-training tools.")
    sub = ap.add_subparsers(dest="command", required=True)

    c = sub.add_parser("cost", help="parameter/FLOP tables for shallow, deep and APT prompting")
    c.add_argument("--preset", choices=sorted(cm.PRESETS), help="base configuration (default vilt unless all of layers/d/n/p/r/sites are given)")
    for f in SPEC_FIELDS:
        kind = float if f == "n" else int
        c.add_argument(f"--{f}", type=kind, help=f"override {f}")
    c.add_argument("--convention", choices=sorted(cm.CONVENTIONS), default="default", help="FLOP pricing")
    c.add_argument("--format", choices=("md", "csv"), default="md")
    c.add_argument("--out", help="directory for cost.md and cost.csv")
    c.add_argument("--check-paper", action="store_true", help="assert the published parameter and saving figures")
    c.set_defaults(func=cmd_cost)

    v = sub.add_parser("verify", help="attention/APT identity suite")
    v.add_argument("--d", type=int, default=8)
    v.add_argument("--n", type=int, default=6)
    v.add_argument("--p", type=int, default=4)
    v.add_argument("--r", type=int, default=None, help="APT rank for the FLOP check (default 2, capped at d)")
    v.add_argument("--trials", type=int, default=20)
    v.add_argument("--seed", type=int, default=None)
    v.add_argument("--perturb", type=float, default=0.0, help="add this offset to every result (fault injection)")
    v.set_defaults(func=cmd_verify)

    g = sub.add_parser("gradcheck", help="finite-difference check of APT and deep-prompt gradients")
    g.add_argument("--d", type=int, default=6)
    g.add_argument("--n", type=int, default=5)
    g.add_argument("--p", type=int, default=3)
    g.add_argument("--r", type=int, default=2)
    g.add_argument("--eps", type=float, default=1e-6)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", help="write the per-coordinate report as CSV")
    g.set_defaults(func=cmd_gradcheck)

    t = sub.add_parser("train", help="adapt the toy frozen model")
    t.add_argument("--method", choices=METHODS, default="apt")
    t.add_argument("--compare", help="comma-separated methods to run side by side")
    t.add_argument("--task", choices=KINDS, default="regression-shift")
    t.add_argument("--steps", type=int, default=TrainConfig.steps)
    t.add_argument("--p", type=int, default=TrainConfig.p)
    t.add_argument("--r", type=int, default=TrainConfig.r)
    t.add_argument("--lr", type=float, default=TrainConfig.lr, help="head learning rate")
    t.add_argument("--prompt-lr", type=float, default=0.0, help="prompt learning rate (0: per-method default)")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", default="runs", help="run artifacts go to OUT/<method>/")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("attn-dump", help="attention block dumps from a run directory")
    a.add_argument("--run", required=True, help="a run directory written by train")
    a.add_argument("--layer", type=int, default=None, help="single layer (default all)")
    a.add_argument("--sample", type=int, default=0, help="validation sequence index")
    a.add_argument("--top-tokens", type=int, default=TOP_TOKENS, help="most active tokens kept per segment")
    a.add_argument("--top-prompts", type=int, default=TOP_PROMPTS, help="most active prompts kept")
    a.add_argument("--all", action="store_true", help="keep every token and prompt")
    a.add_argument("--out", help="output directory (default: the run directory)")
    a.set_defaults(func=cmd_attn_dump)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"aptkit {args.command}: error: {e}", file=sys.stderr)
        return USAGE


if __name__ == "__main__":
    sys.exit(main())
