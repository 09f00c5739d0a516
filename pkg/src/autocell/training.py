"""Joint multi-task training and hardware-only fine-tuning.

Every parameter belongs to exactly one group: the shared rule, the shared IO
embeddings, or one task-specific group per task kind (modular embedding or
monolithic field).  A training update runs one backward pass per task kind
present in the batch; shared groups accumulate the kind gradients weighted
by each kind's share of the batch (which equals the plain mean over the
whole batch), while a task-specific group takes only the mean over its own
kind's instances.  Groups absent from a batch are not stepped at all, so
their parameters and optimizer state stay bitwise unchanged.

All randomness of update u comes from a fresh generator seeded with
(seed, u); together with checkpointed optimizer state this makes a resumed
run bitwise identical to an uninterrupted one.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelConfig, TrainConfig, TASK_KINDS
from .hardware import ModularComponents, MonolithicHardware, build_monolithic
from .nca import GridState, RuleParams, RolloutCtx, sample_eval_index
from .optim import AdamState, adam_step, clip_grad_norm
from .tasks import TaskInstance, make_instance, parse_distribution
from .tensor import Tensor, backward


class ParamRegistry:
    """Named parameter tensors partitioned into disjoint groups."""

    def __init__(self):
        self.groups: dict[str, dict[str, Tensor]] = {}

    def add_group(self, name: str, params: dict[str, Tensor]) -> None:
        if name in self.groups:
            raise ValueError(f"duplicate group {name!r}")
        self.groups[name] = dict(params)

    def group(self, name: str) -> dict[str, Tensor]:
        return self.groups[name]

    def named(self):
        for g in self.groups:
            for n, p in self.groups[g].items():
                yield f"{g}/{n}", p

    def zero_grad(self) -> None:
        for _, p in self.named():
            p.grad = None

    def n_params(self) -> int:
        return sum(p.size for _, p in self.named())


@dataclass
class TrainState:
    """Everything a run carries: configs, parameters, optimizer, progress."""

    model: ModelConfig
    train: TrainConfig
    rule: RuleParams
    components: ModularComponents | None
    monos: dict[str, MonolithicHardware]
    viz: np.ndarray                      # fixed [C_hw,3] projection for exports
    registry: ParamRegistry = field(default_factory=ParamRegistry)
    opt: dict[str, AdamState] = field(default_factory=dict)
    trained_updates: int = 0

    def task_group(self, kind: str) -> str:
        return f"mono:{kind}" if self.train.hardware_mode == "monolithic" else f"task:{kind}"


def init_train_state(model: ModelConfig, train: TrainConfig) -> TrainState:
    model.validate()
    train.validate()
    rng = np.random.default_rng([train.seed, 0])
    rule = RuleParams(model, rng)
    components = None
    monos: dict[str, MonolithicHardware] = {}
    if train.hardware_mode == "modular":
        components = ModularComponents(model.c_hw, model.hw_init_scale, rng)
    else:
        for kind in sorted(train.task_mix):
            monos[kind] = build_monolithic(kind, train.grid_h, train.grid_w,
                                           model.c_hw, model.hw_init_scale, rng)
    viz = rng.standard_normal((model.c_hw, 3)).astype(np.float32)

    state = TrainState(model, train, rule, components, monos, viz)
    state.registry.add_group("rule", dict(rule.named()))
    if components is not None:
        state.registry.add_group("io", dict(components.io_named()))
        for kind in sorted(components.task_embeds):
            state.registry.add_group(f"task:{kind}", {"embed": components.task_embeds[kind]})
    for kind, m in monos.items():
        state.registry.add_group(f"mono:{kind}", {"field": m.field})
    for g in state.registry.groups:
        lr = train.lr_rule if g == "rule" else train.lr_hardware
        state.opt[g] = AdamState(lr=lr)
    return state


def masked_mse(final, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """(1/|M|) * sum over masked cells of (value channel - target)^2."""
    mut = final.mutable if isinstance(final, GridState) else final
    m_count = float(mask.sum())
    if m_count < 1:
        raise ValueError("mask has no active cells")
    chan = T.getitem(mut, (Ellipsis, 0))
    diff = chan - Tensor(target)
    return T.tsum(diff * diff * Tensor(mask / m_count))


def batch_rollout(mut0: np.ndarray, hardware: Tensor, rule: RuleParams,
                  t_steps: int) -> list[Tensor]:
    """Roll a [B,H,W,C_mut] batch forward; returns the t_steps+1 states."""
    ctx = RolloutCtx(hardware, rule)
    mut = Tensor(mut0)
    states = [mut]
    for _ in range(t_steps):
        mut = ctx.step(mut)
        states.append(mut)
    return states


def _subbatch_loss(insts: list[TaskInstance], eval_idx: list[int],
                   rule: RuleParams) -> Tensor:
    """Mean masked MSE of a same-kind sub-batch, each instance evaluated at
    its own sampled index."""
    mut0 = np.stack([i.initial.mutable.data for i in insts])
    hw = T.stack([i.hardware for i in insts])
    states = batch_rollout(mut0, hw, rule, insts[0].t_steps)
    total = None
    for j, inst in enumerate(insts):
        s_j = T.getitem(states[eval_idx[j]], j)
        l_j = masked_mse(s_j, inst.target, inst.mask)
        total = l_j if total is None else total + l_j
    return total * (1.0 / len(insts))


def _sample_batch(state: TrainState, rng: np.random.Generator
                  ) -> tuple[list[TaskInstance], list[int]]:
    cfg = state.train
    kinds = sorted(k for k, wt in cfg.task_mix.items() if wt > 0)
    weights = np.array([cfg.task_mix[k] for k in kinds], dtype=np.float64)
    weights /= weights.sum()
    picks = rng.choice(len(kinds), size=cfg.batch_size, p=weights)
    dists = [parse_distribution(d) for d in cfg.distributions]
    insts = []
    for pick in picks:
        dist = dists[int(rng.integers(0, len(dists)))] if len(dists) > 1 else dists[0]
        insts.append(make_instance(
            kinds[int(pick)], dist, cfg.grid_h, cfg.grid_w, cfg.placement,
            cfg.t_steps, rng, model=state.model, components=state.components,
            mono=state.monos.get(kinds[int(pick)]),
            min_size=cfg.min_size, max_size=cfg.max_size,
            inner_min=cfg.inner_min, inner_max=cfg.inner_max))
    eval_idx = [sample_eval_index(cfg.t_steps, rng) for _ in insts]
    return insts, eval_idx


def _run_updates(state: TrainState, n_updates: int, trainable: tuple[str, ...],
                 log_path: str | None = None, progress: bool = False
                 ) -> list[tuple[int, str, float, float]]:
    """The shared update loop; `trainable` filters which group kinds step."""
    cfg = state.train
    T.set_strict_finite(cfg.strict)
    history: list[tuple[int, str, float, float]] = []
    log = open(log_path, "a") if log_path else None
    try:
        end = state.trained_updates + n_updates
        while state.trained_updates < end:
            u = state.trained_updates
            rng = np.random.default_rng([cfg.seed, u])
            insts, eval_idx = _sample_batch(state, rng)
            t0 = time.perf_counter()

            acc: dict[str, dict[str, np.ndarray]] = {}
            losses: dict[str, float] = {}
            batch_kinds = sorted(set(i.kind for i in insts))
            for kind in batch_kinds:
                picked = [(j, i) for j, i in enumerate(insts) if i.kind == kind]
                sub = [i for _, i in picked]
                idxs = [eval_idx[j] for j, _ in picked]
                state.registry.zero_grad()
                loss_k = _subbatch_loss(sub, idxs, state.rule)
                losses[kind] = loss_k.item()
                if cfg.strict and not np.isfinite(losses[kind]):
                    raise FloatingPointError(
                        f"non-finite loss at update {u} for kind {kind}")
                backward(loss_k)
                share = len(sub) / len(insts)
                for g in ("rule", "io"):
                    if g not in state.registry.groups or g not in trainable:
                        continue
                    dst = acc.setdefault(g, {})
                    for n, p in state.registry.group(g).items():
                        if p.grad is None:
                            continue
                        if n in dst:
                            dst[n] += share * p.grad
                        else:
                            dst[n] = share * p.grad
                tg = state.task_group(kind)
                if tg in trainable:
                    dst = acc.setdefault(tg, {})
                    for n, p in state.registry.group(tg).items():
                        if p.grad is not None:
                            dst[n] = p.grad.copy()

            for g in sorted(acc):
                if not acc[g]:
                    continue
                clip_grad_norm(acc[g], cfg.clip_norm)
                adam_step(state.registry.group(g), acc[g], state.opt[g],
                          strict=cfg.strict)

            wall_ms = (time.perf_counter() - t0) * 1000.0
            for kind in batch_kinds:
                rec = (u, kind, losses[kind], wall_ms)
                history.append(rec)
                if log:
                    log.write(f"{u}\t{kind}\t{losses[kind]:.6f}\t{wall_ms:.2f}\n")
            if log:
                log.flush()
            if progress and u % 100 == 0:
                parts = " ".join(f"{k}={losses[k]:.4f}" for k in batch_kinds)
                print(f"update {u}: {parts} ({wall_ms:.0f} ms)")
            state.trained_updates = u + 1
    finally:
        if log:
            log.close()
        T.set_strict_finite(False)
    return history


def all_group_kinds(state: TrainState) -> tuple[str, ...]:
    return tuple(state.registry.groups)


def train_joint(state: TrainState, n_updates: int | None = None,
                log_path: str | None = None, progress: bool = False):
    """Optimize the shared rule, shared IO embeddings, and task hardware."""
    n = state.train.updates if n_updates is None else n_updates
    return _run_updates(state, n, all_group_kinds(state), log_path, progress)


def finetune_hardware(state: TrainState, n_updates: int | None = None,
                      log_path: str | None = None, progress: bool = False):
    """Adapt hardware only: rule parameters are frozen (bitwise) and their
    gradient work is skipped, which makes each update cheaper than a full
    training update."""
    n = state.train.updates if n_updates is None else n_updates
    trainable = tuple(g for g in state.registry.groups if g != "rule")
    if not trainable:
        raise ValueError("no hardware groups to fine-tune")
    state.rule.set_requires_grad(False)
    try:
        return _run_updates(state, n, trainable, log_path, progress)
    finally:
        state.rule.set_requires_grad(True)


def evaluate(state: TrainState, kinds: list[str] | None = None, n: int = 16,
             seed: int = 1234) -> dict[str, float]:
    """Mean eval-index loss over n fresh instances per kind (no gradients)."""
    cfg = state.train
    kinds = kinds or sorted(k for k, wt in cfg.task_mix.items() if wt > 0)
    out: dict[str, float] = {}
    with T.no_grad():
        for kind in kinds:
            total = 0.0
            for i in range(n):
                rng = np.random.default_rng([seed, TASK_KINDS.index(kind), i])
                dist = parse_distribution(cfg.distributions[
                    int(rng.integers(0, len(cfg.distributions)))])
                inst = make_instance(
                    kind, dist, cfg.grid_h, cfg.grid_w, cfg.placement,
                    cfg.t_steps, rng, model=state.model,
                    components=state.components, mono=state.monos.get(kind),
                    min_size=cfg.min_size, max_size=cfg.max_size,
                    inner_min=cfg.inner_min, inner_max=cfg.inner_max)
                states = batch_rollout(inst.initial.mutable.data[None],
                                       T.stack([inst.hardware]),
                                       state.rule, inst.t_steps)
                idx = sample_eval_index(inst.t_steps, rng)
                s = T.getitem(states[idx], 0)
                total += masked_mse(s, inst.target, inst.mask).item()
            out[kind] = total / n
    return out
