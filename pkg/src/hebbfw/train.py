"""Episodic optimisation: AdamW, warmup + cosine schedule, clipping,
early stopping and evaluation drivers."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .backbones import Model
from .checkpoint import save_checkpoint, snapshot
from .data import CharacterDataset, PreprocessConfig, preprocess_batch
from .fewshot import ClassSplit, Episode, EpisodeConfig, EpisodeMetrics, episode_metrics, run_episode, sample_episode, summarize
from .tensor import NumericalError, no_grad

log = logging.getLogger(__name__)

SPLIT_CODES = {"train": 0, "val": 1, "test": 2}


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 5e-4
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip: float = 1.0


@dataclass(frozen=True)
class ScheduleConfig:
    warmup_epochs: int = 10
    total_epochs: int = 60

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("warmup_epochs must satisfy 0 <= warmup < total")


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def decayed_names(params: dict) -> set:
    """Weight decay applies to matrices only (not norms, biases, embeddings or logits)."""
    return {name for name, t in params.items() if t.ndim == 2}


def adamw_step(params: dict, grads: dict, state: OptimizerState, cfg: OptimConfig,
               lr: float | None = None, decay: set | None = None) -> None:
    """In-place AdamW update with bias correction and decoupled decay."""
    lr = cfg.lr if lr is None else lr
    decay = set(params) if decay is None else decay
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        if name in decay and cfg.weight_decay:
            p.data -= lr * cfg.weight_decay * p.data
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def lr_at(epoch: int, cfg: ScheduleConfig, lr_base: float) -> float:
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    if epoch < cfg.warmup_epochs:
        return lr_base * (epoch + 1) / cfg.warmup_epochs
    progress = (epoch - cfg.warmup_epochs) / (cfg.total_epochs - cfg.warmup_epochs)
    return lr_base * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads) -> float:
    return math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads if g is not None))


def clip_grads(grads: dict, threshold: float) -> float:
    """Scale every gradient in place so the global l2 norm is at most
    ``threshold``; returns the norm before clipping."""
    if threshold <= 0:
        raise ValueError("clip threshold must be positive")
    norm = global_norm(grads.values())
    if norm > threshold:
        factor = threshold / norm
        for g in grads.values():
            if g is not None:
                g *= factor
    return norm


# ---------------------------------------------------------------------------
# records


@dataclass
class MetricsRow:
    run_id: str
    epoch: int
    split: str
    episodes: int
    acc_mean: float
    acc_ci95: float | None
    precision_macro: float
    recall_macro: float
    f1_macro: float
    loss_mean: float
    lr: float | None
    eta_values: list
    lambda_values: list
    wall_seconds: float | None

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        return asdict(self)


def episode_rng(seed: int, split: str, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, SPLIT_CODES[split], epoch, index])


def prepare_episode(dataset: CharacterDataset, classes, cfg: EpisodeConfig, pp: PreprocessConfig,
                    train_mode: bool, rng: np.random.Generator):
    ep = sample_episode(classes, dataset, cfg, rng)
    support = preprocess_batch(ep.support_images, pp, train_mode, rng)
    query = preprocess_batch(ep.query_images, pp, train_mode, rng)
    return ep, support, query


def evaluate(model: Model, dataset: CharacterDataset, classes, cfg: EpisodeConfig, n_episodes: int,
             pp: PreprocessConfig, seed: int = 42, split: str = "val",
             threads: int = 1) -> tuple[dict, list[EpisodeMetrics]]:
    """Mean metrics over a fixed (seeded) set of evaluation episodes."""
    if n_episodes < 1:
        raise ValueError("need at least one evaluation episode")

    def one(index: int) -> EpisodeMetrics:
        rng = episode_rng(seed, split, 0, index)
        ep, support, query = prepare_episode(dataset, classes, cfg, pp, False, rng)
        with no_grad():
            loss, preds = run_episode(model, support, ep.support_labels, query, ep.query_labels, cfg.n_way)
        return episode_metrics(preds, ep.query_labels, cfg.n_way, float(loss.data))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(n_episodes)))
    else:
        results = [one(i) for i in range(n_episodes)]
    return summarize(results), results


@dataclass
class TrainResult:
    best_params: dict
    best_val_acc: float
    best_epoch: int
    history: list
    checkpoint_path: Path | None = None
    stopped_early: bool = False


def train_loop(model: Model, dataset: CharacterDataset, split: ClassSplit, episode_cfg: EpisodeConfig,
               optim: OptimConfig, schedule: ScheduleConfig, patience: int = 15,
               pp: PreprocessConfig | None = None, seed: int = 42, run_id: str = "run",
               checkpoint_path=None, meta: dict | None = None, threads: int = 1,
               record_time: bool = True,
               on_episode: Callable[[int, int, Episode, np.ndarray, np.ndarray], None] | None = None) -> TrainResult:
    """Train for up to ``schedule.total_epochs`` epochs with early stopping on
    validation accuracy. The best parameters are kept (and written to
    ``checkpoint_path`` when given) every time validation accuracy improves."""
    pp = pp or PreprocessConfig()
    state = OptimizerState()
    decay = decayed_names(model.params)
    history: list[MetricsRow] = []
    best_acc, best_epoch, best_params = -1.0, -1, snapshot(model)
    stale = 0
    stopped = False
    for epoch in range(schedule.total_epochs):
        lr = lr_at(epoch, schedule, optim.lr)
        start = time.perf_counter()
        train_metrics = []
        for index in range(episode_cfg.train_episodes):
            rng = episode_rng(seed, "train", epoch, index)
            ep, support, query = prepare_episode(dataset, split.train, episode_cfg, pp, True, rng)
            if on_episode is not None:
                on_episode(epoch, index, ep, support, query)
            model.zero_grad()
            loss, preds = run_episode(model, support, ep.support_labels, query, ep.query_labels, episode_cfg.n_way)
            value = float(loss.data)
            if not math.isfinite(value):
                etas, lams = model.plasticity()
                raise NumericalError(
                    f"non-finite loss at epoch {epoch} episode {index}; eta={etas} lambda={lams}"
                )
            loss.backward()
            grads = {name: p.grad for name, p in model.params.items() if p.grad is not None}
            clip_grads(grads, optim.clip)
            adamw_step(model.params, grads, state, optim, lr, decay)
            train_metrics.append(episode_metrics(preds, ep.query_labels, episode_cfg.n_way, value))
        train_seconds = time.perf_counter() - start
        etas, lams = model.plasticity()
        history.append(_row(run_id, epoch, "train", summarize(train_metrics), lr, etas, lams,
                            train_seconds if record_time else None))

        start = time.perf_counter()
        val_summary, _ = evaluate(model, dataset, split.val, episode_cfg, episode_cfg.val_episodes, pp,
                                  seed, "val", threads)
        history.append(_row(run_id, epoch, "val", val_summary, lr, etas, lams,
                            time.perf_counter() - start if record_time else None))
        log.info("epoch %d lr %.2e train loss %.4f val acc %.4f", epoch, lr,
                 history[-2].loss_mean, val_summary["acc_mean"])

        if val_summary["acc_mean"] > best_acc:
            best_acc, best_epoch, best_params = val_summary["acc_mean"], epoch, snapshot(model)
            stale = 0
            if checkpoint_path is not None:
                info = dict(meta or {}, epoch=epoch, best_val_acc=best_acc, seed=seed, run_id=run_id)
                save_checkpoint(model, info, checkpoint_path)
        else:
            stale += 1
            if stale >= patience:
                stopped = True
                log.info("early stop after %d epochs without improvement", stale)
                break
    return TrainResult(best_params, best_acc, best_epoch, history,
                       Path(checkpoint_path) if checkpoint_path is not None else None, stopped)


def _row(run_id, epoch, split, summary, lr, etas, lams, seconds) -> MetricsRow:
    return MetricsRow(
        run_id=run_id, epoch=epoch, split=split, episodes=summary["episodes"],
        acc_mean=summary["acc_mean"], acc_ci95=summary["acc_ci95"],
        precision_macro=summary["precision_macro"], recall_macro=summary["recall_macro"],
        f1_macro=summary["f1_macro"], loss_mean=summary["loss_mean"], lr=lr,
        eta_values=etas, lambda_values=lams, wall_seconds=seconds,
    )
