"""Optimizer, teacher training and the adapter-only unlearning loop."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from . import lora
from . import losses as L
from . import ndgrad as nd
from . import nets
from .config import ConfigError, Phase, UnlearnConfig
from .data import SplitDataset, iter_batches, stack_images, stack_targets
from .evalkit.metrics import split_metric

log = logging.getLogger(__name__)

BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class EngineError(RuntimeError):
    """Precondition or invariant violated inside a training loop."""


class TeacherThresholdError(EngineError):
    """Teacher never reached the validation target within its epoch cap."""

    def __init__(self, message: str, teacher=None, metric: float = float("nan")):
        super().__init__(message)
        self.teacher = teacher
        self.metric = metric


# -- optimizer --------------------------------------------------------------

def adam_step(params, grads, state: dict, lr: float, betas=BETAS, eps: float = ADAM_EPS) -> None:
    """One in-place Adam update with bias correction.

    ``state`` maps a parameter's position in ``params`` to its ``(m, v, t)``
    and is filled lazily. A ``None`` gradient skips the parameter.
    """
    if len(params) != len(grads):
        raise ValueError(f"adam_step: {len(params)} params but {len(grads)} grads")
    b1, b2 = betas
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"adam_step: grad {g.shape} does not match param {p.shape}")
        m, v, t = state.get(i) or (np.zeros_like(p.data), np.zeros_like(p.data), 0)
        if m.shape != p.shape:
            raise ValueError(f"adam_step: state {m.shape} does not match param {p.shape}")
        t += 1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        state[i] = (m.astype(p.dtype), v.astype(p.dtype), t)


class Adam:
    def __init__(self, params, lr: float = 1e-3):
        self.params = list(params)
        self.lr = lr
        self.state: dict = {}

    def step(self, lr: float | None = None) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr if lr is None else lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def grad_norm(params) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64)))
                             for p in params if p.grad is not None)))


# -- logging ----------------------------------------------------------------

@dataclass
class TrainLog:
    """Append-only per-step and per-epoch records."""

    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def add_step(self, phase: str, epoch: int, step: int, kind: str, loss: float, parts: dict,
                 gnorm: float) -> None:
        rec = {"phase": phase, "epoch": epoch, "step": step, "batch": kind, "loss": loss, "grad_norm": gnorm}
        rec.update({f"term_{k}": float(v) for k, v in parts.items()})
        self.steps.append(rec)

    def add_epoch(self, phase: str, epoch: int, metrics: dict) -> None:
        self.epochs.append({"phase": phase, "epoch": epoch, **metrics})

    def step_columns(self) -> list[str]:
        fixed = ["phase", "epoch", "step", "batch", "loss", "grad_norm"]
        extra = sorted({k for r in self.steps for k in r} - set(fixed))
        return fixed + extra

    def epoch_loss(self, phase: str | None = None) -> list[float]:
        """Mean step loss per epoch, in order."""
        out: dict = {}
        for r in self.steps:
            if phase is None or r["phase"] == phase:
                out.setdefault((r["phase"], r["epoch"]), []).append(r["loss"])
        return [float(np.mean(v)) for v in out.values()]

    @staticmethod
    def _csv(rows, columns) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r.get(c), float) else r.get(c, "") for c in columns])
        return buf.getvalue()

    def to_csv(self) -> str:
        return self._csv(self.steps, self.step_columns())

    def epochs_to_csv(self) -> str:
        columns = ["phase", "epoch"] + sorted({k for r in self.epochs for k in r} - {"phase", "epoch"})
        return self._csv(self.epochs, columns)

    def write(self, directory, prefix: str = "train") -> None:
        from pathlib import Path
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{prefix}_steps.csv").write_text(self.to_csv())
        (d / f"{prefix}_epochs.csv").write_text(self.epochs_to_csv())


# -- batching ---------------------------------------------------------------

def interleave(retain_batches, forget_batches, seed=0) -> list[tuple[str, object]]:
    """Merge two batch lists, placing forget batches at seeded random slots.

    Order inside each list is kept, so every sample still appears once.
    """
    retain_batches, forget_batches = list(retain_batches), list(forget_batches)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    total = len(retain_batches) + len(forget_batches)
    slots = set(rng.choice(total, size=len(forget_batches), replace=False).tolist()) if forget_batches else set()
    r, f = iter(retain_batches), iter(forget_batches)
    return [("forget", next(f)) if i in slots else ("retain", next(r)) for i in range(total)]


class _Cache:
    """Teacher logits/features per item id, computed once per run."""

    def __init__(self, teacher, items, batch_size: int = 32):
        self.logits, self.feats = {}, {}
        from .evalkit.metrics import predict
        z, f = predict(teacher, items, batch_size)
        for i, it in enumerate(items):
            self.logits[it.id] = z[i]
            self.feats[it.id] = f[i]

    def batch(self, items, task: str) -> L.Batch:
        images = nd.Tensor(stack_images(items))
        targets = stack_targets(items, "seg" if task == "segmentation" else "cls")
        z = nd.Tensor(np.stack([self.logits[it.id] for it in items]))
        f = nd.Tensor(np.stack([self.feats[it.id] for it in items]))
        return L.Batch(images, targets, z, f)


def _short_task(task: str) -> str:
    return "seg" if task in ("seg", "segmentation") else "cls"


# -- teacher ----------------------------------------------------------------

def teacher_metric(net, items, task: str) -> float:
    m = split_metric(net, items, _short_task(task))
    return m["dice"] if "dice" in m else m["accuracy"]


def train_teacher(data: SplitDataset, config: UnlearnConfig, log_to: TrainLog | None = None):
    """Supervised training on retain+forget until the val target is met.

    Stops at the first epoch whose val metric (Dice, or accuracy for
    classification) reaches ``config.teacher_target`` once
    ``config.teacher_min_epochs`` have run. Raises
    :class:`TeacherThresholdError` if the cap is hit first.
    """
    task = _short_task(config.task)
    if task != data.task:
        raise ConfigError(f"config task {config.task!r} does not match dataset task {data.task!r}")
    target = config.teacher_target if task == "seg" else config.teacher_target_cls
    net = nets.build(task, seed=config.seed, n_classes=data.spec.n_classes, feature_point=config.feature_point)
    params = net.parameters()
    opt = Adam(params, config.teacher_lr)
    rng = np.random.default_rng(config.seed + 101)
    train_items, val_items = data.train(), data.split("val")
    best = float("nan")
    step = 0
    net.train()
    for epoch in range(config.teacher_epochs):
        for items in iter_batches(train_items, config.batch_size, rng):
            x = nd.Tensor(stack_images(items))
            y = stack_targets(items, task)
            out = net(x)
            logits = out[0] if isinstance(out, tuple) else out
            loss = L.dice_bce(logits, y) if task == "seg" else L.cross_entropy(logits, y)
            opt.zero_grad()
            nd.backward(loss)
            if log_to is not None:
                log_to.add_step("teacher", epoch, step, "train", float(loss.data), {}, grad_norm(params))
            opt.step()
            step += 1
        best = teacher_metric(net, val_items, task)
        net.train()
        if log_to is not None:
            log_to.add_epoch("teacher", epoch, {"val": best})
        log.info("teacher epoch %d val %.4f", epoch, best)
        if best >= target and epoch + 1 >= config.teacher_min_epochs:
            break
    net.eval()
    nets.freeze(net)
    if not best >= target:
        raise TeacherThresholdError(
            f"teacher reached val {'Dice' if task == 'seg' else 'accuracy'} {best:.4f} < {target} "
            f"after {config.teacher_epochs} epochs", net, best)
    return net


# -- unlearning -------------------------------------------------------------

def _snapshot(tensors) -> list[np.ndarray]:
    return [t.data.copy() for t in tensors]


def _bitwise_same(tensors, snap) -> bool:
    return all(np.array_equal(t.data, s) for t, s in zip(tensors, snap)) and len(tensors) == len(snap)


def _phase_loss(kind: str, phase: Phase, batch: L.Batch, student, config: UnlearnConfig, rng) -> L.Terms:
    w = config.weights
    outputs = student(batch.images)
    outputs = outputs if isinstance(outputs, tuple) else (outputs, None)
    if phase.phase == "joint":
        if kind == "retain":
            return L.retain_composite(batch, student, w, outputs=outputs)
        return L.forget_composite(batch, student, w, config.forget_objective, rng, outputs=outputs)
    if phase.phase == "ascent":
        objective = config.forget_objective
        if objective == "ascent-composite":
            return L.ascent_composite(batch, student, w, outputs=outputs)
        terms = L.forget_composite(batch, student, w, objective, rng, outputs=outputs)
        return L.Terms(terms.parts["forget"], terms.parts)
    return L.descent_composite(batch, student, w, supervised=config.restore_supervised, outputs=outputs)


def _check_isolation(student, teacher_snap, where: str) -> None:
    for name, (t, _) in student.registry.items():
        if t.grad is not None or t.requires_grad:
            raise EngineError(f"{where}: non-adapter tensor {name} received gradient")
    if teacher_snap is not None and not _bitwise_same(student.parameters(), teacher_snap):
        raise EngineError(f"{where}: frozen weights changed")


def unlearn(teacher, data: SplitDataset, config: UnlearnConfig, on_epoch=None):
    """Run the configured schedule on a LoRA student of ``teacher``.

    Returns ``(student, adapters, TrainLog)``. Only adapter tensors are
    ever updated; during ``head-adapters-only`` phases every other adapter
    has ``requires_grad`` switched off and is checked to stay bitwise fixed.
    ``on_epoch(phase, epoch, student)`` is called after every epoch with
    the current :class:`Phase` and a global epoch counter.
    """
    if not teacher.frozen():
        raise EngineError("teacher must be frozen before unlearning")
    task = _short_task(config.task)
    if task != data.task:
        raise ConfigError(f"config task {config.task!r} does not match dataset task {data.task!r}")
    for p in config.schedule:
        if p.scope == "head-adapters-only" and "head" not in config.policy:
            raise ConfigError("head-adapters-only scope needs head adapters")

    student = nets.clone_frozen(teacher)
    aset = lora.inject(student, config.policy, config.lora_r, config.lora_alpha,
                       config.lora_dropout if config.lora_dropout_in_unlearn else 0.0, seed=config.seed + 7)
    all_params = aset.parameters()
    head_params = aset.parameters(["head"])
    frozen_snap = _snapshot(student.parameters()) if config.debug_checks else None
    teacher_snap = _snapshot(teacher.parameters())

    retain, forget = data.split("retain"), data.split("forget")
    cache = _Cache(teacher, retain + forget)
    rng = np.random.default_rng(config.seed + 202)
    label_rng = np.random.default_rng(config.seed + 303)
    opt = Adam(all_params, config.lr)
    trace = TrainLog()
    step = 0
    forget_bs = config.forget_batch_size or config.batch_size

    epoch_counter = 0
    for phase in config.schedule:
        scope = all_params if phase.scope == "all-adapters" else head_params
        scope_ids = {id(p) for p in scope}
        for p in all_params:
            p.requires_grad = id(p) in scope_ids
        outside = [p for p in all_params if id(p) not in scope_ids]
        outside_snap = _snapshot(outside)
        lr = config.lr if phase.lr is None else phase.lr
        for _ in range(phase.epochs):
            if phase.phase == "joint":
                stream = interleave(iter_batches(retain, config.batch_size, rng, "retain"),
                                    iter_batches(forget, forget_bs, rng, "forget"), rng)
            elif phase.phase == "ascent":
                stream = [("forget", b) for b in iter_batches(forget, forget_bs, rng, "forget")]
            else:
                stream = [("retain", b) for b in iter_batches(retain, config.batch_size, rng, "retain")]
            student.train()
            for kind, items in stream:
                batch = cache.batch(items, config.task)
                terms = _phase_loss(kind, phase, batch, student, config, label_rng)
                opt.zero_grad()
                nd.backward(terms.total)
                if config.debug_checks:
                    _check_isolation(student, None, f"{phase.phase} step {step}")
                    if any(p.grad is not None for p in outside):
                        raise EngineError(f"{phase.phase} step {step}: out-of-scope adapter received gradient")
                trace.add_step(phase.phase, epoch_counter, step, kind, float(terms.total.data),
                               {k: v.data for k, v in terms.parts.items()}, grad_norm(scope))
                opt.step(lr)
                step += 1
            student.eval()
            for target, (lhs, rhs) in lora.drift_bound(aset).items():
                if lhs > rhs * (1 + 1e-5) + 1e-12:
                    raise EngineError(f"drift bound violated on {target}: {lhs} > {rhs}")
            if config.debug_checks:
                _check_isolation(student, frozen_snap, f"{phase.phase} epoch {epoch_counter}")
                if not _bitwise_same(outside, outside_snap):
                    raise EngineError(f"{phase.phase} epoch {epoch_counter}: out-of-scope adapters moved")
            if config.eval_every_epoch:
                metrics = {s: _headline(split_metric(student, data.split(s), task)) for s in ("retain", "forget", "val")}
                trace.add_epoch(phase.phase, epoch_counter, metrics)
            if on_epoch is not None:
                on_epoch(phase, epoch_counter, student)
            epoch_counter += 1
    for p in all_params:
        p.requires_grad = True
    if not _bitwise_same(teacher.parameters(), teacher_snap):
        raise EngineError("teacher weights changed during unlearning")
    student.eval()
    return student, aset, trace


def _headline(m: dict) -> float:
    return m["dice"] if "dice" in m else m["accuracy"]
