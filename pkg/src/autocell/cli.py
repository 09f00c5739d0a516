"""Command-line entry points.

Exit codes: 0 success, 1 runtime failure (message on stderr), 2 usage error.
Every run prints its fully-resolved configuration so results are
reproducible from the log alone.
"""
from __future__ import annotations

import argparse
import sys

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, manifest, save_checkpoint
from .composer import compile_plan, execute_plan, parse_task_graph, write_trace
from .config import (ModelConfig, TrainConfig, apply_override, config_to_lines,
                     load_config_file)
from .emulation import (aggregate_and_evaluate, block_decompose,
                        classifier_accuracy, execute_blocks, load_mnist,
                        train_linear_classifier, write_job_errors)
from .hardware import ModularComponents
from .tasks import make_instance, parse_distribution
from .training import (TrainState, batch_rollout, evaluate, finetune_hardware,
                       init_train_state, train_joint)


def _resolved(model: ModelConfig, train: TrainConfig, trained_updates: int = 0) -> None:
    print("# resolved config")
    print(config_to_lines(model, train, {"trained_updates": trained_updates}), end="")


def _load_base(args) -> tuple[ModelConfig, TrainConfig]:
    if getattr(args, "config", None):
        model, train, _ = load_config_file(args.config)
    else:
        model, train = ModelConfig(), TrainConfig()
    for ov in getattr(args, "set", None) or []:
        if "=" not in ov:
            raise ValueError(f"--set expects key=value, got {ov!r}")
        key, _, raw = ov.partition("=")
        apply_override(model, train, key.strip(), raw)
    model.validate()
    train.validate()
    return model, train


def cmd_train(args) -> int:
    if args.resume:
        state = load_checkpoint(args.resume)
        for ov in args.set or []:
            key, _, raw = ov.partition("=")
            apply_override(state.model, state.train, key.strip(), raw)
        state.train.validate()
    else:
        model, train = _load_base(args)
        state = init_train_state(model, train)
    _resolved(state.model, state.train, state.trained_updates)
    n = args.updates if args.updates is not None else state.train.updates
    train_joint(state, n, log_path=args.log, progress=not args.quiet)
    save_checkpoint(state, args.out)
    print(f"saved checkpoint to {args.out} after {state.trained_updates} updates")
    return 0


def cmd_finetune(args) -> int:
    state = load_checkpoint(args.checkpoint)
    for ov in args.set or []:
        key, _, raw = ov.partition("=")
        apply_override(state.model, state.train, key.strip(), raw)
    state.train.validate()
    _resolved(state.model, state.train, state.trained_updates)
    n = args.updates if args.updates is not None else state.train.updates
    finetune_hardware(state, n, log_path=args.log, progress=not args.quiet)
    save_checkpoint(state, args.out)
    print(f"saved fine-tuned checkpoint to {args.out}")
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    _resolved(state.model, state.train, state.trained_updates)
    kinds = args.kinds.split(",") if args.kinds else None
    report = evaluate(state, kinds, n=args.n, seed=args.seed)
    for kind, loss in report.items():
        print(f"{kind}\tmean_eval_loss\t{loss:.6f}")
    return 0


def cmd_emulate(args) -> int:
    state = None
    if args.backend == "nca":
        if not args.checkpoint:
            raise ValueError("the nca backend needs --checkpoint")
        state = load_checkpoint(args.checkpoint)
        _resolved(state.model, state.train, state.trained_updates)
    train_set = load_mnist(f"{args.data_dir}/train-images-idx3-ubyte.gz",
                           f"{args.data_dir}/train-labels-idx1-ubyte.gz")
    test_set = load_mnist(f"{args.data_dir}/t10k-images-idx3-ubyte.gz",
                          f"{args.data_dir}/t10k-labels-idx1-ubyte.gz")
    w = train_linear_classifier(train_set, epochs=args.epochs, lr=args.lr,
                                rng=np.random.default_rng(args.seed))
    ref_acc = classifier_accuracy(w, test_set.images, test_set.labels)
    print(f"classifier test accuracy: {ref_acc:.4f}")
    x = test_set.images[: args.limit]
    y = test_set.labels[: args.limit]
    jobs, amap = block_decompose(x, w, scale=not args.no_scale)
    partials, errors = execute_blocks(jobs, args.backend, state, args.t_steps)
    metrics = aggregate_and_evaluate(partials, amap, y, w, x)
    print(f"jobs={len(jobs)} images={len(x)} backend={args.backend}")
    print("emulated_accuracy={emulated_accuracy:.4f} "
          "reference_accuracy={reference_accuracy:.4f} "
          "agreement={agreement:.4f}".format(**metrics))
    if args.histogram:
        write_job_errors(args.histogram, errors)
        print(f"wrote per-job errors to {args.histogram}")
    return 0


def _load_matrix_csv(path: str) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float32))


def cmd_compose(args) -> int:
    with open(args.plan, "r", encoding="utf-8") as fh:
        graph = parse_task_graph(fh.read())
    state = None
    if args.backend == "nca":
        if not args.checkpoint:
            raise ValueError("the nca backend needs --checkpoint")
        state = load_checkpoint(args.checkpoint)
        components = state.components
        if components is None:
            raise ValueError("the checkpoint has no modular components")
        _resolved(state.model, state.train, state.trained_updates)
    else:
        components = ModularComponents(ModelConfig().c_hw, ModelConfig().hw_init_scale,
                                       np.random.default_rng(args.seed))
    plan = compile_plan(graph, components)
    print(f"plan: {len(plan.stages)} stage(s) on a {plan.h}x{plan.w} grid; "
          f"required inputs: {sorted(plan.required_inputs)}")

    initial: dict[str, np.ndarray] = {}
    for spec_arg in args.input or []:
        tag, _, path = spec_arg.partition("=")
        initial[tag.strip()] = _load_matrix_csv(path.strip())
    rng = np.random.default_rng(args.seed)
    for tag, shape in plan.required_inputs.items():
        if tag not in initial:
            initial[tag] = rng.uniform(-1, 1, size=shape).astype(np.float32)

    final, stage_outputs, trace = execute_plan(plan, initial, args.backend, state)
    for s_idx, kind, steps, mse in trace:
        print(f"stage {s_idx}: {kind} for {steps} steps, output_mse={mse:.8f}")
    last_outputs = stage_outputs[-1]
    for tag in sorted(last_outputs):
        if tag in initial:
            diff = float(np.abs(last_outputs[tag] - initial[tag]).max())
            print(f"final region {tag} vs initial: max|diff| = {diff:.8f}")
    if args.trace:
        write_trace(args.trace, trace)
        print(f"wrote trace to {args.trace}")
    return 0


def cmd_inspect(args) -> int:
    cfg_text, tensors = manifest(args.checkpoint)
    print("# config echo")
    print(cfg_text, end="")
    print(f"# {len(tensors)} tensors")
    for name, shape in tensors:
        dims = "x".join(str(d) for d in shape) if shape else "scalar"
        print(f"{name}\t{dims}")
    return 0


def _write_pgm(path: str, arr: np.ndarray) -> None:
    lo, hi = float(arr.min()), float(arr.max())
    span = hi - lo if hi > lo else 1.0
    pix = np.round((arr - lo) / span * 255).astype(np.int32)
    h, w = arr.shape
    with open(path, "w") as fh:
        fh.write(f"P2\n# value range [{lo:.6f}, {hi:.6f}]\n{w} {h}\n255\n")
        for row in pix:
            fh.write(" ".join(str(v) for v in row) + "\n")


def cmd_export_grid(args) -> int:
    state = load_checkpoint(args.checkpoint)
    _resolved(state.model, state.train, state.trained_updates)
    cfg = state.train
    rng = np.random.default_rng(args.seed)
    inst = make_instance(args.task, parse_distribution(cfg.distributions[0]),
                         cfg.grid_h, cfg.grid_w, cfg.placement, cfg.t_steps,
                         rng, model=state.model, components=state.components,
                         mono=state.monos.get(args.task),
                         min_size=cfg.min_size, max_size=cfg.max_size)
    steps = args.step if args.step is not None else cfg.t_steps
    with T.no_grad():
        states = batch_rollout(inst.initial.mutable.data[None],
                               T.stack([inst.hardware]), state.rule, max(steps, 1))
    value = states[steps].data[0, :, :, 0] if steps > 0 else inst.initial.mutable.data[:, :, 0]
    _write_pgm(f"{args.out}_value.pgm", value)
    np.savetxt(f"{args.out}_value.csv", value, delimiter=",", fmt="%.6f")
    hw = inst.hardware.data
    proj = hw.reshape(-1, state.model.c_hw) @ state.viz
    proj = proj.reshape(hw.shape[0], hw.shape[1], 3)
    for c in range(3):
        _write_pgm(f"{args.out}_hw{c}.pgm", proj[:, :, c])
    np.savetxt(f"{args.out}_hw.csv", proj.reshape(-1, 3), delimiter=",", fmt="%.6f")
    print(f"exported value channel and hardware projection with prefix {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="autocell",
        description="Neural-cellular-automaton computational substrate: "
                    "train rules, emulate classifiers, compose task plans.")
    sub = ap.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("train", help="joint training of rule and hardware")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--updates", type=int, help="updates to run now (default: config)")
    p.add_argument("--log", help="metrics log path")
    add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="hardware-only adaptation, rule frozen")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--updates", type=int)
    p.add_argument("--log")
    add_common(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="mean eval loss on fresh instances")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kinds", help="comma-separated task kinds")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--seed", type=int, default=1234)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("emulate-mnist", help="block-decomposed classifier emulation")
    p.add_argument("--backend", choices=("oracle", "nca"), default="oracle")
    p.add_argument("--checkpoint")
    p.add_argument("--data-dir", default="data/mnist")
    p.add_argument("--limit", type=int, default=256, help="test images to emulate")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--t-steps", type=int, help="rollout length per job")
    p.add_argument("--no-scale", action="store_true",
                   help="disable per-job max-abs scaling")
    p.add_argument("--histogram", help="write per-job MSE lines here")
    p.set_defaults(func=cmd_emulate)

    p = sub.add_parser("compose", help="parse, compile and execute a plan file")
    p.add_argument("plan")
    p.add_argument("--backend", choices=("oracle", "nca"), default="oracle")
    p.add_argument("--checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--input", action="append", metavar="TAG=CSV",
                   help="initial matrix for a tag (repeatable)")
    p.add_argument("--trace", help="write the stage trace here")
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("inspect", help="print a checkpoint manifest")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("export-grid", help="dump value channel + hardware projection")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", default="identity")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=int, help="rollout step to export (default: t_steps)")
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_export_grid)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:  # runtime failures exit 1 with a diagnostic
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
