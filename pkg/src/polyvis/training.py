"""Two-phase training: align the fusion network first, then unfreeze the LM."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .model import Batch, PolyExpertModel
from .numerics import NonFiniteError, ParamTensor

log = logging.getLogger(__name__)

FROZEN_BY_PHASE = {"pretrain": frozenset({"expert", "lm"}), "finetune": frozenset({"expert"})}
WARMUP_RATIO = 0.03


@dataclass
class PhaseConfig:
    phase: str = "pretrain"
    lr: float = 3e-3
    steps: int = 200
    batch_size: int = 16
    warmup_ratio: float = WARMUP_RATIO

    @property
    def frozen_groups(self) -> frozenset[str]:
        return FROZEN_BY_PHASE[self.phase]

    def problems(self, path: str = "phase") -> list[tuple[str, str]]:
        out = []
        if self.phase not in FROZEN_BY_PHASE:
            out.append((f"{path}.phase", f"unknown phase {self.phase!r}"))
        if not self.lr > 0:
            out.append((f"{path}.lr", "learning rate must be positive"))
        if self.steps < 1:
            out.append((f"{path}.steps", "need at least one step"))
        if self.batch_size < 1:
            out.append((f"{path}.batch_size", "need at least one item per batch"))
        if not 0 <= self.warmup_ratio < 1:
            out.append((f"{path}.warmup_ratio", "must lie in [0, 1)"))
        return out

    def to_dict(self) -> dict:
        return dict(lr=self.lr, steps=self.steps, batch_size=self.batch_size, warmup_ratio=self.warmup_ratio)


def lr_at(step: int, phase: PhaseConfig) -> float:
    """Linear warmup then cosine decay to zero over ``phase.steps``."""
    warm = max(1, math.ceil(phase.warmup_ratio * phase.steps)) if phase.warmup_ratio > 0 else 0
    if step < warm:
        return phase.lr * (step + 1) / warm
    span = max(1, phase.steps - warm)
    return phase.lr * 0.5 * (1.0 + math.cos(math.pi * min(step - warm, span) / span))


class Adam:
    """Bias-corrected first/second moment update; frozen tensors are skipped."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state: dict[str, tuple[np.ndarray, np.ndarray, int]] = {}

    def step(self, params: Sequence[ParamTensor], lr: float) -> None:
        for p in params:
            if p.frozen:
                continue
            m, v, t = self.state.get(p.name, (np.zeros_like(p.data), np.zeros_like(p.data), 0))
            g = p.grad
            t += 1
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.state[p.name] = (m, v, t)
            if lr == 0:
                continue
            mhat = m / (1 - self.beta1**t)
            vhat = v / (1 - self.beta2**t)
            p.data = (p.data - lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)


@dataclass
class TrainReport:
    phase: str
    losses: list[float] = field(default_factory=list)
    digests_before: dict[str, str] = field(default_factory=dict)
    digests_after: dict[str, str] = field(default_factory=dict)

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    def window_means(self, window: int = 100) -> list[float]:
        n = len(self.losses) // window
        return [float(np.mean(self.losses[i * window : (i + 1) * window])) for i in range(n)]


def train_step(batch: Batch, model: PolyExpertModel, phase: PhaseConfig, optimizer: Adam, step: int = 0, batch_index: int | None = None) -> float:
    """Forward, backward and one optimizer update on the non-frozen groups."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    model.set_frozen_groups(phase.frozen_groups)
    model.zero_grad()
    try:
        with nx.skip_frozen():
            loss = model.loss(batch)
            nx.backward(loss)
    except NonFiniteError as exc:
        where = step if batch_index is None else batch_index
        raise NonFiniteError(f"non-finite loss or gradient at batch {where}: {exc}") from exc
    optimizer.step(model.parameters(), lr_at(step, phase))
    return float(loss.data)


def batch_order(n: int, batch_size: int, steps: int, seed: int) -> list[np.ndarray]:
    """Deterministic epoch-shuffled minibatch indices."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA7C]))
    out, perm, pos = [], rng.permutation(n), 0
    bs = min(batch_size, n)
    for _ in range(steps):
        if pos + bs > n:
            perm, pos = rng.permutation(n), 0
        out.append(np.sort(perm[pos : pos + bs]))
        pos += bs
    return out


def train_phase(model: PolyExpertModel, data: Batch, phase: PhaseConfig, seed: int = 0, log_every: int = 0) -> TrainReport:
    report = TrainReport(phase.phase, digests_before=model.digests())
    opt = Adam()
    for step, idx in enumerate(batch_order(len(data), phase.batch_size, phase.steps, seed + hash_phase(phase.phase))):
        loss = train_step(data.subset(idx), model, phase, opt, step, batch_index=step)
        report.losses.append(loss)
        if log_every and (step % log_every == 0 or step == phase.steps - 1):
            log.info("%s step %d loss %.4f", phase.phase, step, loss)
    report.digests_after = model.digests()
    return report


def hash_phase(name: str) -> int:
    return {"pretrain": 1, "finetune": 2}.get(name, 0)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

GRADCHECK_STEP = 1e-5
GRADCHECK_MAX_PARAMS = 5000
# relative error = |a - n| / max(|a|, |n|, floor). Central differences on a
# loss of order 1 carry ~eps*|L|/h ~ 1e-10 of rounding noise, so relative
# error is only meaningful for gradients well above that; the floor sits
# two decades over the noise/tolerance ratio.
GRADCHECK_FLOOR = 1e-4


def grad_check(
    model: PolyExpertModel,
    batch: Batch,
    step: float = GRADCHECK_STEP,
    loss_fn=None,
    floor: float = GRADCHECK_FLOOR,
) -> dict[str, float]:
    """Max relative error per trainable group, analytic vs central differences."""
    if model.dtype != np.float64:
        raise TypeError("grad_check runs in verification precision (float64)")
    loss_fn = loss_fn or (lambda: model.loss(batch))
    trainable = [p for p in model.parameters() if not p.frozen]
    total = sum(p.data.size for p in trainable)
    if total > GRADCHECK_MAX_PARAMS:
        raise ValueError(f"{total} trainable scalars exceeds the grad-check limit of {GRADCHECK_MAX_PARAMS}")
    model.zero_grad()
    nx.backward(loss_fn())
    report: dict[str, float] = {}
    for p in trainable:
        analytic = p.grad.copy()
        if not np.all(np.isfinite(analytic)):
            raise NonFiniteError(f"non-finite gradient for {p.name}")
        worst = 0.0
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(loss_fn().data)
            flat[i] = orig - step
            down = float(loss_fn().data)
            flat[i] = orig
            num = (up - down) / (2 * step)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
        report[p.group] = max(report.get(p.group, 0.0), worst)
    return report


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


@dataclass
class PipelineResult:
    model: PolyExpertModel
    checkpoints: dict[str, bytes]
    reports: dict[str, TrainReport]
    init_digests: dict[str, str]


def run_pipeline(config, train_set=None, out_dir=None, log_every: int = 0) -> PipelineResult:
    """Build the model from ``config``, run pretrain then finetune, checkpoint each."""
    from .harness.checkpoint import checkpoint_bytes
    from .harness.experiment import build_model
    from .harness.task import generate_task

    model = build_model(config)
    if train_set is None:
        train_set, _ = generate_task(config.task, config.seed)
    data = train_set if isinstance(train_set, Batch) else model.make_batch(train_set)
    init = model.digests()
    ckpts, reports = {}, {}
    for name in ("pretrain", "finetune"):
        phase = config.phases[name]
        reports[name] = train_phase(model, data, phase, seed=config.seed, log_every=log_every)
        ckpts[name] = checkpoint_bytes(model, config)
        if out_dir is not None:
            from pathlib import Path

            path = Path(out_dir) / f"checkpoint_{name}.bin"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(ckpts[name])
    model.set_frozen_groups(frozenset())
    return PipelineResult(model, ckpts, reports, init)
