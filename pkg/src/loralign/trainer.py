"""AdamW, the step-decay schedule, and the pretrain / adapt loops."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import tasks
from .align import AlignConfig, build_reference_frames, mean_align_loss
from .autodiff import Param, Tape
from .kernels import tune_allocator
from .lora import PlacementSpec, inject_adapters, select_targets, trainable_param_count
from .model import ToyRestorer

log = logging.getLogger(__name__)

MODES = ("pretrain", "finetune-full", "lora", "lora-a")
DEFAULT_LR = {"pretrain": 2e-3, "finetune-full": 5e-5, "lora": 5e-4, "lora-a": 5e-4}
DEFAULT_STEPS = {"pretrain": 2000, "finetune-full": 500, "lora": 500, "lora-a": 500}
EVAL_SEEDS = 64
EVAL_BASE = 10_000_000
TRAIN_SEED_MOD = 10_000_000


class TrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "lora"
    lr: float | None = None
    betas: tuple[float, float] = (0.9, 0.99)
    eps: float = 1e-8
    weight_decay: float = 0.0
    gamma: float = 0.95
    epoch_steps: int = 50
    batch: int = 32
    steps: int | None = None
    rank: int = 4
    placement: PlacementSpec = field(default_factory=PlacementSpec)
    align: AlignConfig = field(default_factory=AlignConfig)
    pool: int = 1000
    eval_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise TrainError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.lr is not None and not self.lr > 0:
            raise TrainError(f"lr must be positive, got {self.lr}")
        if not 0 < self.gamma <= 1:
            raise TrainError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.batch < 1 or self.epoch_steps < 1 or self.pool < 1:
            raise TrainError("batch, epoch_steps and pool must be >= 1")

    @property
    def learning_rate(self) -> float:
        return DEFAULT_LR[self.mode] if self.lr is None else self.lr

    @property
    def n_steps(self) -> int:
        return DEFAULT_STEPS[self.mode] if self.steps is None else self.steps

    def echo(self) -> dict:
        d = asdict(self)
        d["placement"] = str(self.placement)
        d["lr"] = self.learning_rate
        d["steps"] = self.n_steps
        d["betas"] = list(self.betas)
        return d


def lr_at(step: int, lr0: float, gamma: float, epoch_steps: int) -> float:
    """``lr0 * gamma ** floor(step / epoch_steps)``."""
    return lr0 * gamma ** (step // epoch_steps)


class AdamW:
    """Adam with bias correction and decoupled weight decay; skips frozen params."""

    def __init__(self, params, betas=(0.9, 0.99), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        for p in self.params:
            if p.trainable and not np.all(np.isfinite(p.grad)):
                raise TrainError(f"non-finite gradient for parameter {p.name!r}")
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if not p.trainable:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd:
                upd = upd + self.wd * p.value
            p.value -= lr * upd


def adamw_step(params, state: AdamW, lr: float) -> None:
    state.step(lr)


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------


def eval_seeds(kind: str, n: int = EVAL_SEEDS) -> list[int]:
    base = EVAL_BASE + tasks.KINDS.index(kind) * 100_000
    return [base + i for i in range(n)]


def train_seeds(kind: str, n: int, run_seed: int, purpose: int) -> list[int]:
    ss = np.random.SeedSequence([int(run_seed), tasks.KINDS.index(kind), int(purpose)])
    return [int(x) % TRAIN_SEED_MOD for x in ss.generate_state(n, dtype=np.uint64)]


@lru_cache(maxsize=64)
def _pairs(kind: str, seeds: tuple[int, ...]):
    clean, deg = tasks.make_batch(kind, seeds)
    clean.setflags(write=False)
    deg.setflags(write=False)
    return clean, deg


def eval_set(kind: str, n: int = EVAL_SEEDS):
    return _pairs(kind, tuple(eval_seeds(kind, n)))


def train_pool(kind: str, n: int, run_seed: int, purpose: int):
    return _pairs(kind, tuple(train_seeds(kind, n, run_seed, purpose)))


def evaluate(model: ToyRestorer, kinds, n: int = EVAL_SEEDS) -> dict[str, tuple[float, float]]:
    """Mean PSNR/SSIM of the restored held-out images, per task."""
    out = {}
    for kind in kinds:
        clean, deg = eval_set(kind, n)
        restored = model.restore(deg)
        ps = [tasks.psnr(r, c) for r, c in zip(restored, clean)]
        ss = [tasks.ssim(r, c) for r, c in zip(restored, clean)]
        out[kind] = (float(np.mean(ps)), float(np.mean(ss)))
    return out


def evaluate_inputs(kinds, n: int = EVAL_SEEDS) -> dict[str, tuple[float, float]]:
    """Metrics of the degraded inputs themselves (the do-nothing baseline)."""
    out = {}
    for kind in kinds:
        clean, deg = eval_set(kind, n)
        out[kind] = (
            float(np.mean([tasks.psnr(d, c) for d, c in zip(deg, clean)])),
            float(np.mean([tasks.ssim(d, c) for d, c in zip(deg, clean)])),
        )
    return out


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


@dataclass
class RunReport:
    method: str
    pretrain_tasks: tuple[str, ...]
    novel: str
    metrics: dict[str, dict[str, tuple[float, float]]]  # stage -> task -> (psnr, ssim)
    trainable_params: int
    total_params: int
    curves: dict[str, list[float]]
    config: dict
    wall_clock: float = 0.0

    def role(self, task: str) -> str:
        return "novel" if task == self.novel else "pretrained"

    def psnr(self, stage: str, task: str) -> float:
        return self.metrics[stage][task][0]

    def mean_pre_psnr(self, stage: str = "after") -> float:
        return float(np.mean([self.metrics[stage][t][0] for t in self.pretrain_tasks]))


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


class Trainer:
    """Owns one model, its optimizer state and the per-run data stream."""

    def __init__(self, model: ToyRestorer, config: TrainConfig, frames=None):
        tune_allocator()
        self.model = model
        self.config = config
        self.frames = frames
        self.opt = AdamW(model.trainable_parameters(), config.betas, config.eps, config.weight_decay)
        self.step_count = 0
        self.curves: dict[str, list[float]] = {"total": [], "l1": [], "align": []}

    def lr(self) -> float:
        c = self.config
        return lr_at(self.step_count, c.learning_rate, c.gamma, c.epoch_steps)

    def train_step(self, clean: np.ndarray, degraded: np.ndarray) -> dict[str, float]:
        cfg = self.config
        tape = Tape()
        out = self.model.forward(tape, degraded)
        l1 = tape.l1_loss(out, clean)
        loss, align_val = l1, 0.0
        if cfg.mode == "lora-a":
            if self.frames is None:
                raise TrainError("lora-a mode needs reference frames")
            al = mean_align_loss(tape, self.model, self.frames, cfg.align.k, cfg.align.T)
            align_val = al.value.item()
            loss = tape.add(l1, tape.scale(al, cfg.align.w_align))
        self.opt.zero_grad()
        tape.backward(loss)
        self.opt.step(self.lr())
        self.step_count += 1
        rec = {"total": loss.value.item(), "l1": l1.value.item(), "align": align_val}
        for key, val in rec.items():
            self.curves[key].append(val)
        return rec


def train_step(model, batch, config: TrainConfig, frames=None, trainer: Trainer | None = None):
    """One optimization step on ``batch = (clean, degraded)``; returns the loss breakdown."""
    trainer = trainer or Trainer(model, config, frames)
    return trainer.train_step(*batch)


def _batches(pools, config: TrainConfig, purpose: int):
    rng = np.random.default_rng([config.seed, purpose, 0xBA7C])
    for _ in range(config.n_steps):
        which = rng.integers(0, len(pools), size=config.batch)
        idx = rng.integers(0, config.pool, size=config.batch)
        clean = np.stack([pools[w][0][i] for w, i in zip(which, idx)])
        deg = np.stack([pools[w][1][i] for w, i in zip(which, idx)])
        yield clean, deg


def pretrain(task_kinds, config: TrainConfig, model_seed: int | None = None) -> tuple[ToyRestorer, RunReport]:
    """Train every parameter on batches drawn uniformly from ``task_kinds``."""
    if config.mode != "pretrain":
        raise TrainError(f"pretrain needs mode 'pretrain', got {config.mode!r}")
    task_kinds = tuple(task_kinds)
    if len(set(task_kinds)) != len(task_kinds) or not task_kinds:
        raise TrainError(f"pre-training tasks must be distinct, got {task_kinds}")
    t0 = time.perf_counter()
    model = ToyRestorer(seed=config.seed if model_seed is None else model_seed)
    model.set_trainable(True)
    pools = [train_pool(k, config.pool, config.seed, purpose=1) for k in task_kinds]
    tr = Trainer(model, config)
    curves = {"eval_psnr": []}
    for clean, deg in _batches(pools, config, purpose=1):
        tr.train_step(clean, deg)
        if config.eval_every and tr.step_count % config.eval_every == 0:
            m = evaluate(model, task_kinds, n=16)
            mean_psnr = float(np.mean([v[0] for v in m.values()]))
            curves["eval_psnr"].append(mean_psnr)
            log.info("pretrain step %d  l1 %.4f  eval psnr %.2f", tr.step_count, tr.curves["l1"][-1], mean_psnr)
    novel = [k for k in tasks.KINDS if k not in task_kinds]
    kinds = list(task_kinds) + novel
    report = RunReport(
        method="pretrained",
        pretrain_tasks=task_kinds,
        novel=novel[0] if len(novel) == 1 else "",
        metrics={"input": evaluate_inputs(kinds), "after": evaluate(model, kinds)},
        trainable_params=model.n_base_params(),
        total_params=model.n_base_params(),
        curves={**tr.curves, **curves},
        config=config.echo(),
        wall_clock=time.perf_counter() - t0,
    )
    return model, report


METHOD_NAMES = {"finetune-full": "full", "lora": "lora", "lora-a": "lora-a"}


def adapt(state: dict[str, np.ndarray], pretrain_tasks, novel: str, config: TrainConfig) -> tuple[ToyRestorer, RunReport]:
    """Adapt a pre-trained model to ``novel`` and report metrics on every task before and after."""
    if config.mode not in METHOD_NAMES:
        raise TrainError(f"adapt needs mode full/lora/lora-a, got {config.mode!r}")
    if novel in pretrain_tasks:
        raise TrainError(f"novel task {novel!r} is one of the pre-training tasks")
    t0 = time.perf_counter()
    model = ToyRestorer()
    model.load_state_dict(state)
    kinds = list(pretrain_tasks) + [novel]
    before = evaluate(model, kinds)

    frames = None
    if config.mode == "finetune-full":
        model.set_trainable(True)
        n_train = model.n_base_params()
    else:
        names = select_targets(model, config.placement)
        inject_adapters(model, names, config.rank, config.seed)
        n_train = trainable_param_count(model)
        if config.mode == "lora-a":
            frames = build_reference_frames(model, config.align.k)

    pool = train_pool(novel, config.pool, config.seed, purpose=2)
    tr = Trainer(model, config, frames)
    for clean, deg in _batches([pool], config, purpose=2):
        tr.train_step(clean, deg)
        if config.eval_every and tr.step_count % config.eval_every == 0:
            log.info("%s step %d  l1 %.4f  align %.3g", config.mode, tr.step_count, tr.curves["l1"][-1], tr.curves["align"][-1])

    report = RunReport(
        method=METHOD_NAMES[config.mode],
        pretrain_tasks=tuple(pretrain_tasks),
        novel=novel,
        metrics={"input": evaluate_inputs(kinds), "before": before, "after": evaluate(model, kinds)},
        trainable_params=n_train,
        total_params=model.n_base_params(),
        curves=tr.curves,
        config=config.echo(),
        wall_clock=time.perf_counter() - t0,
    )
    return model, report
