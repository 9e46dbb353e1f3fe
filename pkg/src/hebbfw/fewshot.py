"""Episodic N-way K-shot machinery and the prototypical-network head."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import CharacterDataset, DataError
from .tensor import DimensionError, Tensor


@dataclass
class ClassSplit:
    train: list
    val: list
    test: list
    seed: int

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)

    def partition(self, name: str) -> list:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def split_classes(class_ids: Sequence, ratios=(0.8, 0.1, 0.1), seed: int = 42,
                  remainder: str = "val") -> ClassSplit:
    """Seeded class-level split. Each part gets ``floor(ratio * total)``
    classes and the leftover goes to ``remainder``."""
    class_ids = list(class_ids)
    if len(class_ids) < 3:
        raise ValueError("need at least 3 classes to split")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    if remainder not in ("train", "val", "test"):
        raise ValueError(f"remainder must go to train, val or test, not {remainder!r}")
    total = len(class_ids)
    counts = [int(math.floor(r * total + 1e-9)) for r in ratios]
    counts[("train", "val", "test").index(remainder)] += total - sum(counts)
    order = np.random.default_rng(seed).permutation(total)
    shuffled = [class_ids[i] for i in order]
    a, b = counts[0], counts[0] + counts[1]
    return ClassSplit(shuffled[:a], shuffled[a:b], shuffled[b:], seed)


@dataclass(frozen=True)
class EpisodeConfig:
    n_way: int = 5
    k_shot: int = 1
    n_query: int = 15
    train_episodes: int = 600
    val_episodes: int = 200
    test_episodes: int = 400

    def __post_init__(self):
        if self.n_way < 2:
            raise ValueError("n_way must be >= 2")
        if self.k_shot < 1:
            raise ValueError("k_shot must be >= 1")
        if self.n_query < 1:
            raise ValueError("n_query must be >= 1")

    def episodes(self, split: str) -> int:
        return {"train": self.train_episodes, "val": self.val_episodes, "test": self.test_episodes}[split]


@dataclass
class Episode:
    support_images: np.ndarray
    support_labels: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    class_map: list
    # (class id, image index) of every drawn image, for audits
    support_ids: list = field(default_factory=list)
    query_ids: list = field(default_factory=list)


def sample_episode(classes: Sequence, dataset: CharacterDataset, cfg: EpisodeConfig,
                   rng: np.random.Generator) -> Episode:
    if len(classes) < cfg.n_way:
        raise DataError(f"partition has {len(classes)} classes, need {cfg.n_way}")
    need = cfg.k_shot + cfg.n_query
    chosen = [classes[i] for i in rng.choice(len(classes), size=cfg.n_way, replace=False)]
    sup_img, qry_img, sup_ids, qry_ids = [], [], [], []
    for cid in chosen:
        images = dataset.images[cid]
        if len(images) < need:
            raise DataError(f"class {cid!r} has {len(images)} images, episode needs {need}")
        picks = rng.permutation(len(images))[:need]
        sup_img.append(images[picks[: cfg.k_shot]])
        qry_img.append(images[picks[cfg.k_shot:]])
        sup_ids += [(cid, int(i)) for i in picks[: cfg.k_shot]]
        qry_ids += [(cid, int(i)) for i in picks[cfg.k_shot:]]
    labels = np.arange(cfg.n_way)
    return Episode(
        support_images=np.concatenate(sup_img),
        support_labels=np.repeat(labels, cfg.k_shot),
        query_images=np.concatenate(qry_img),
        query_labels=np.repeat(labels, cfg.n_query),
        class_map=chosen,
        support_ids=sup_ids,
        query_ids=qry_ids,
    )


# ---------------------------------------------------------------------------
# prototypical head


def prototypes(support_emb: Tensor, labels: np.ndarray, n_way: int | None = None) -> Tensor:
    """Per-class mean of the support embeddings."""
    labels = np.asarray(labels)
    n_way = int(labels.max()) + 1 if n_way is None else n_way
    counts = np.bincount(labels, minlength=n_way)
    if len(counts) > n_way or (counts == 0).any():
        raise ValueError(f"every class in [0, {n_way}) needs support, got counts {counts.tolist()}")
    if (counts != counts[0]).any():
        raise ValueError(f"unbalanced support counts {counts.tolist()}")
    avg = np.zeros((n_way, len(labels)), dtype=support_emb.dtype)
    avg[labels, np.arange(len(labels))] = 1.0 / counts[labels]
    return T.matmul(Tensor(avg), support_emb)


def classify_queries(query_emb: Tensor, protos: Tensor) -> tuple[Tensor, np.ndarray]:
    """Logits are negative squared distances; ties go to the lowest class."""
    if query_emb.shape[-1] != protos.shape[-1]:
        raise DimensionError(f"query width {query_emb.shape} does not match prototypes {protos.shape}")
    m, d = query_emb.shape
    n = protos.shape[0]
    diff = T.sub(T.reshape(query_emb, (m, 1, d)), T.reshape(protos, (1, n, d)))
    logits = -T.tsum(T.hadamard(diff, diff), axis=-1)
    return logits, np.argmax(logits.data, axis=1)


def episode_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels)
    picked = T.log_softmax(logits, axis=1)[np.arange(len(labels)), labels]
    return -T.mean(picked)


@dataclass
class EpisodeMetrics:
    accuracy: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    loss: float = float("nan")


def episode_metrics(preds, labels, n_way: int, loss: float = float("nan")) -> EpisodeMetrics:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError("preds and labels differ in length")
    conf = np.zeros((n_way, n_way), dtype=np.int64)
    np.add.at(conf, (labels, preds), 1)
    tp = np.diag(conf).astype(float)
    predicted = conf.sum(axis=0)
    actual = conf.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / np.maximum(predicted, 1), 0.0)
        recall = np.where(actual > 0, tp / np.maximum(actual, 1), 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1), 0.0)
    return EpisodeMetrics(
        accuracy=float(tp.sum() / max(len(labels), 1)),
        precision_macro=float(precision.mean()),
        recall_macro=float(recall.mean()),
        f1_macro=float(f1.mean()),
        loss=float(loss),
    )


def summarize(metrics: Sequence[EpisodeMetrics]) -> dict:
    """Mean over episodes plus the 95% interval half-width of accuracy (None for one episode)."""
    acc = np.array([m.accuracy for m in metrics])
    out = {
        "episodes": len(metrics),
        "acc_mean": float(acc.mean()),
        "acc_ci95": float(1.96 * acc.std(ddof=1) / math.sqrt(len(acc))) if len(acc) > 1 else None,
    }
    for key in ("precision_macro", "recall_macro", "f1_macro"):
        out[key] = float(np.mean([getattr(m, key) for m in metrics]))
    out["loss_mean"] = float(np.mean([m.loss for m in metrics]))
    return out


# ---------------------------------------------------------------------------
# episode forward


def embed_episode(model, support: np.ndarray, query: np.ndarray) -> tuple[Tensor, Tensor]:
    """Embed support and query images.

    Models without fast weights, or with per-forward memory, embed all images
    in one batch (each image owns its memory). With per-episode memory the
    support images are fed one at a time in sampler order, threading the
    memory; every query then reads that memory, and its own write is dropped.
    """
    cfg = getattr(model.config, "hfw", None)
    if cfg is None or cfg.memory_scope == "per_forward":
        emb, _ = model.embed(np.concatenate([support, query]))
        n = len(support)
        return emb[:n], emb[n:]
    memories = model.fresh_memories(1)
    sup = []
    for img in support:
        e, memories = model.embed(img[None], memories)
        sup.append(e)
    q_emb, _ = model.embed(query, [m.expand(len(query)) for m in memories])
    return T.concat(sup, axis=0), q_emb


def run_episode(model, support: np.ndarray, support_labels, query: np.ndarray, query_labels,
                n_way: int) -> tuple[Tensor, np.ndarray]:
    """Forward one episode; returns (loss tensor, query predictions)."""
    s_emb, q_emb = embed_episode(model, support, query)
    logits, preds = classify_queries(q_emb, prototypes(s_emb, support_labels, n_way))
    return episode_loss(logits, query_labels), preds
