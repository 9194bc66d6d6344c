"""Survival losses, Adam, and the training loop with validation early stopping."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .evalmetrics import MetricsReport, evaluate_scores
from .model import ModelConfig, init_params, param_shapes, run_sequence
from .numerics import Tape, Tensor
from .samples import Sample, Scalers, bucket_batches, collate

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 1.0
    lr: float = 1e-3
    epochs: int = 40
    patience: int = 5
    seed: int = 0
    batch_size: int = 64
    max_grad_norm: float | None = 10.0
    positive_share: float = 0.2  # one positive per four negatives
    split: tuple[float, float, float] = (0.7, 0.15, 0.15)

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("learning rate, epochs, patience and batch size must be positive")
        if self.max_grad_norm is not None and self.max_grad_norm <= 0:
            raise ValueError("max_grad_norm must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if not 0 < self.positive_share < 1:
            raise ValueError("positive_share must lie in (0, 1)")
        if abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) <= 0:
            raise ValueError("split ratios must be positive and sum to 1")


# -------------------------------------------------------------------- losses


def _cumulative(totals: Tensor) -> Tensor:
    """Running sum along the last axis of a ``(B, T)`` tensor, as a matmul."""
    steps = totals.shape[-1]
    return nx.matmul(totals, Tensor(np.triu(np.ones((steps, steps)))))


def prediction_terms(cum: Tensor, labels: np.ndarray) -> Tensor:
    """Elementwise ``l * L + (l - 1) * ln(max(1 - exp(-L), floor))`` with ``L = relu(cumulative rate)``.

    This is the negative log-likelihood of the survival value ``exp(-L)``;
    taking ``relu`` first keeps it non-negative and bounded below.
    """
    lab = Tensor(np.broadcast_to(np.asarray(labels, dtype=float).reshape(-1, *([1] * (cum.ndim - 1))), cum.shape))
    hazard = nx.relu(cum)
    survive = nx.clip_min(-nx.expm1(-hazard), LOG_FLOOR)
    return lab * hazard + (lab - 1.0) * nx.log(survive)


def prediction_loss(rates, label: int, t_m: int) -> Tensor:
    """Loss of one sample at step ``t_m`` given its ``(T, 5)`` rate history."""
    rates = nx.as_tensor(rates)
    if not 1 <= t_m <= rates.shape[0]:
        raise ValueError(f"t_m={t_m} outside trace of length {rates.shape[0]}")
    cum = nx.reshape(nx.sum_(rates[:t_m]), (1,))
    return nx.reshape(prediction_terms(cum, np.array([label])), ())


def consistency_indicators(totals: np.ndarray) -> np.ndarray:
    """1 where a step's total rate flips sign against the previous step (step 0 counts as 0)."""
    totals = np.asarray(totals, dtype=float)
    prev = np.concatenate([np.zeros(totals.shape[:-1] + (1,)), totals[..., :-1]], axis=-1)
    return (prev * totals < 0).astype(float)


def consistency_loss(rates, t_m: int) -> float:
    totals = np.asarray(nx.as_tensor(rates).value, dtype=float).sum(axis=-1)
    if not 1 <= t_m <= len(totals):
        raise ValueError(f"t_m={t_m} outside trace of length {len(totals)}")
    return float(consistency_indicators(totals[:t_m])[-1])


def total_loss(rates: Tensor, labels: Sequence[int], gamma: float) -> Tensor:
    """``sum_t sqrt(t) * sum_b (prediction + gamma * consistency)`` for ``(B, T, 5)`` rates.

    The consistency term is an indicator and contributes no gradient.
    """
    batch, steps, _ = rates.shape
    totals = nx.sum_(rates, axis=2)
    terms = prediction_terms(_cumulative(totals), np.asarray(labels))
    if gamma:
        terms = terms + Tensor(gamma * consistency_indicators(totals.value))
    weights = np.broadcast_to(np.sqrt(np.arange(1, steps + 1)), (batch, steps))
    return nx.sum_(terms * Tensor(weights))


# ----------------------------------------------------------------- optimizer


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = None
    step_count: int = 0
    moments: dict = field(default_factory=dict)

    def step(self, params: dict[str, Tensor]) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1 - b1**self.step_count
        corr2 = 1 - b2**self.step_count
        scale = 1.0
        if self.max_grad_norm is not None:
            norm = math.sqrt(sum(float(np.sum(p.grad**2)) for p in params.values() if p.grad is not None))
            if norm > self.max_grad_norm:
                scale = self.max_grad_norm / norm
        for name, p in params.items():
            if p.grad is None:
                continue
            m, v = self.moments.get(name, (np.zeros(p.shape), np.zeros(p.shape)))
            grad = p.grad * scale
            m = b1 * m + (1 - b1) * grad
            v = b2 * v + (1 - b2) * grad**2
            self.moments[name] = (m, v)
            p.value -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)
            p.grad = None


# ------------------------------------------------------------------- splits


def stratified_split(labels: Sequence[int], ratios=(0.7, 0.15, 0.15), seed: int = 0) -> tuple[list[int], list[int], list[int]]:
    """Seeded split keeping each label's share in every part."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels, dtype=int)
    parts: tuple[list[int], list[int], list[int]] = ([], [], [])
    for lab in (0, 1):
        idx = np.flatnonzero(labels == lab)
        rng.shuffle(idx)
        n_train = int(round(ratios[0] * len(idx)))
        n_val = int(round(ratios[1] * len(idx)))
        parts[0].extend(idx[:n_train].tolist())
        parts[1].extend(idx[n_train : n_train + n_val].tolist())
        parts[2].extend(idx[n_train + n_val :].tolist())
    return tuple(sorted(p) for p in parts)  # type: ignore[return-value]


def oversample(indices: Sequence[int], labels: Sequence[int], positive_share: float, rng: np.random.Generator) -> list[int]:
    """All indices plus positives drawn with replacement until they make up ``positive_share``."""
    pos = [i for i in indices if labels[i] == 1]
    neg = [i for i in indices if labels[i] == 0]
    target = math.ceil(positive_share / (1 - positive_share) * len(neg))
    extra = rng.choice(pos, size=target - len(pos), replace=True).tolist() if pos and target > len(pos) else []
    return list(indices) + extra


# ------------------------------------------------------------------ training


def predict_rates(params: dict[str, Tensor], cfg: ModelConfig, samples: list[Sample], batch_size: int = 128) -> np.ndarray:
    """``(len(samples), T, 5)`` rates computed without a tape."""
    out = np.zeros((len(samples), samples[0].horizon, 5)) if samples else np.zeros((0, 0, 5))
    for batch in bucket_batches(samples, list(range(len(samples))), batch_size):
        out[batch] = run_sequence(params, cfg, collate([samples[i] for i in batch], cfg)).value
    return out


def survival_scores(rates: np.ndarray) -> np.ndarray:
    """``exp(-relu(cumulative total rate))`` per sample and step."""
    return np.exp(-np.maximum(np.cumsum(rates.sum(axis=-1), axis=-1), 0.0))


def evaluate(params, cfg: ModelConfig, samples: list[Sample]) -> MetricsReport:
    return evaluate_scores(survival_scores(predict_rates(params, cfg, samples)), [s.label for s in samples])


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_f1e: float
    val_f1c: float
    seconds: float


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    history: list[EpochRecord]
    split: tuple[list[int], list[int], list[int]]
    scalers: Scalers
    best_epoch: int


def train(samples: list[Sample], cfg: ModelConfig, tcfg: TrainConfig = TrainConfig(), split=None) -> TrainResult:
    """Fit the model; returns the parameters of the best validation epoch.

    ``split`` optionally fixes the ``(train, val, test)`` index lists. Scalers
    are fitted on the training part and applied to every sample in place.
    """
    labels = [s.label for s in samples]
    if len(set(labels)) < 2:
        raise ValueError("training needs both classes")
    split = split or stratified_split(labels, tcfg.split, tcfg.seed)
    train_idx, val_idx, _ = split
    if not val_idx:
        raise ValueError("empty validation split")
    scalers = Scalers.fit([samples[i] for i in train_idx])
    scalers.apply(samples)
    rng = np.random.default_rng(tcfg.seed)
    params = init_params(cfg, tcfg.seed)
    opt = Adam(lr=tcfg.lr, max_grad_norm=tcfg.max_grad_norm)
    val = [samples[i] for i in val_idx]
    history: list[EpochRecord] = []
    best = (-1.0, {k: v.value.copy() for k, v in params.items()}, 0)
    stale = 0
    for epoch in range(1, tcfg.epochs + 1):
        start = time.perf_counter()
        epoch_loss, n_seen = 0.0, 0
        for batch in bucket_batches(samples, oversample(train_idx, labels, tcfg.positive_share, rng), tcfg.batch_size, rng):
            members = [samples[i] for i in batch]
            with Tape() as tape:
                rates = run_sequence(params, cfg, collate(members, cfg))
                loss = total_loss(rates, [s.label for s in members], tcfg.gamma)
            tape.backward(loss)
            opt.step(params)
            epoch_loss += loss.item()
            n_seen += len(batch)
        report = evaluate(params, cfg, val)
        rec = EpochRecord(epoch, epoch_loss / n_seen, report.f1_early, report.f1_consistent, time.perf_counter() - start)
        history.append(rec)
        log.info("epoch %d loss %.4f val F1E %.4f F1C %.4f (%.1fs)", epoch, rec.train_loss, rec.val_f1e, rec.val_f1c, rec.seconds)
        if rec.val_f1e > best[0]:
            best = (rec.val_f1e, {k: v.value.copy() for k, v in params.items()}, epoch)
            stale = 0
        else:
            stale += 1
            if stale >= tcfg.patience:
                break
    final = {k: Tensor(v, requires_grad=True) for k, v in best[1].items()}
    return TrainResult(final, history, split, scalers, best[2])


def write_history(history: list[EpochRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_F1E", "val_F1C"])
        for r in history:
            w.writerow([r.epoch, f"{r.train_loss:.6f}", f"{r.val_f1e:.6f}", f"{r.val_f1c:.6f}"])


def save_checkpoint(result: TrainResult, cfg: ModelConfig, tcfg: TrainConfig, path: str | Path, extra: dict | None = None) -> None:
    meta = {
        "model": asdict(cfg),
        "train": asdict(tcfg),
        "scalers": result.scalers.to_json(),
        "best_epoch": result.best_epoch,
        **(extra or {}),
    }
    nx.save_params(result.params, path, meta)


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], ModelConfig, Scalers, dict]:
    params, meta = nx.load_params(path)
    try:
        cfg = ModelConfig(**meta["model"])
        scalers = Scalers.from_json(meta["scalers"])
    except (KeyError, TypeError) as exc:
        raise nx.ShapeError(f"checkpoint metadata incomplete: {exc}") from exc
    expected = param_shapes(cfg)
    if set(expected) != set(params) or any(params[k].shape != s for k, s in expected.items()):
        raise nx.ShapeError("checkpoint does not match its model config")
    return params, cfg, scalers, meta
