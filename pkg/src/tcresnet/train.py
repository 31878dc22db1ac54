"""SGD-with-momentum training loop with step learning-rate decay and early stopping."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import nn_core as nn
from .audio_io import AugmentConfig, ClipStore
from .features import DEFAULT_CONFIG, FeatureConfig, compute_mfcc_batch
from .models import ModelInstance, backward, forward, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 100
    total_iters: int = 30000
    base_lr: float = 0.1
    lr_drop_every: int = 10000
    lr_drop_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 0.001
    dropout_p: float = 0.5
    eval_every: int = 500
    early_stop_patience: int = 10
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "total_iters", "base_lr", "lr_drop_every", "eval_every", "early_stop_patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr_drop_factor <= 1:
            raise ValueError("lr_drop_factor must exceed 1")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0 or not 0 <= self.dropout_p < 1:
            raise ValueError("momentum and dropout_p must lie in [0, 1); weight_decay >= 0")


def load_config(path) -> tuple[TrainConfig, AugmentConfig]:
    """Parse flat ``key = value`` lines (``#`` starts a comment).

    Keys are :class:`TrainConfig` or :class:`AugmentConfig` field names;
    ``rng_seed`` seeds both.
    """
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def parse_config(text: str) -> tuple[TrainConfig, AugmentConfig]:
    train_fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    aug_fields = {f.name: f for f in dataclasses.fields(AugmentConfig)}
    train_kw, aug_kw = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in train_fields and key not in aug_fields:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        ftype = (train_fields.get(key) or aug_fields[key]).type
        cast = int if ftype in (int, "int") else float
        try:
            parsed = cast(value)
        except ValueError:
            raise ValueError(f"config line {lineno}: bad value {value!r} for {key}") from None
        if key in train_fields:
            train_kw[key] = parsed
        if key in aug_fields:
            aug_kw[key] = parsed
    return TrainConfig(**train_kw), AugmentConfig(**aug_kw)


def lr_at(iteration: int, config: TrainConfig) -> float:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return config.base_lr / config.lr_drop_factor ** (iteration // config.lr_drop_every)


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0


def sgd_step(params: dict, grads: dict, state: OptimizerState, lr: float, config: TrainConfig) -> None:
    """In-place momentum SGD with coupled L2 weight decay.

    Only names present in ``grads`` are updated, so moving batch-norm
    statistics are never decayed.
    """
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p)
        v *= config.momentum
        v += g + config.weight_decay * p
        p -= lr * v
    state.iteration += 1


class FeatureBank:
    """Un-augmented MFCCs for index entries, computed once and memoized."""

    def __init__(self, store: ClipStore, config: FeatureConfig = DEFAULT_CONFIG):
        self.store = store
        self.config = config
        self._cache: dict[str, np.ndarray] = {}

    def features(self, entries) -> np.ndarray:
        missing = [e for e in dict.fromkeys(entries) if e.path not in self._cache]
        for start in range(0, len(missing), 256):
            chunk = missing[start : start + 256]
            waves = np.stack([self.store.waveform(e) for e in chunk])
            for e, feat in zip(chunk, compute_mfcc_batch(waves, self.config).astype(np.float32)):
                self._cache[e.path] = feat
        return np.stack([self._cache[e.path] for e in entries])


def accuracy(logits, labels) -> float:
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean(np.argmax(logits, axis=-1) == labels))


def predict_logits(model: ModelInstance, entries, bank: FeatureBank, batch: int = 256) -> np.ndarray:
    if model.mode != "infer":
        raise ValueError("predict_logits needs an infer-mode model")
    out = [forward(model, bank.features(entries[i : i + batch])) for i in range(0, len(entries), batch)]
    return np.concatenate(out) if out else np.zeros((0, model.spec.n_classes), np.float32)


def evaluate_accuracy(model: ModelInstance, entries, bank: FeatureBank) -> float:
    """Fraction of ``entries`` whose top logit is the true label (no augmentation)."""
    entries = list(entries)
    if not entries:
        raise ValueError("evaluate_accuracy needs at least one entry")
    return accuracy(predict_logits(model, entries, bank), [e.label_id for e in entries])


@dataclass
class LogRow:
    iter: int
    lr: float
    train_loss: float
    val_acc: float


def write_metrics_csv(rows, out) -> None:
    if isinstance(out, (str, os.PathLike)):
        with open(out, "w", encoding="utf-8", newline="") as fh:
            write_metrics_csv(rows, fh)
        return
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["iter", "lr", "train_loss", "val_acc"])
    for r in rows:
        w.writerow([r.iter, f"{r.lr:.6g}", f"{r.train_loss:.6f}", f"{r.val_acc:.6f}"])


def metrics_csv(rows) -> str:
    buf = io.StringIO()
    write_metrics_csv(rows, buf)
    return buf.getvalue()


@dataclass
class TrainResult:
    best: ModelInstance
    best_iter: int
    best_val_acc: float
    log: list[LogRow]
    losses: list[float]
    stopped_early: bool


def train_loop(
    model: ModelInstance,
    entries,
    config: TrainConfig,
    augment: AugmentConfig,
    store: ClipStore,
    feature_config: FeatureConfig = DEFAULT_CONFIG,
    checkpoint_path=None,
) -> TrainResult:
    """Train ``model`` in place on the ``train`` split of ``entries``.

    Batches are drawn uniformly with replacement from a generator seeded by
    ``(rng_seed, iteration)``, so a seed, config and index reproduce the run
    exactly. Validation accuracy is measured every ``eval_every`` iterations
    and the best-scoring parameters are returned (and written to
    ``checkpoint_path`` when given).
    """
    entries = list(entries)
    train_set = [e for e in entries if e.split == "train"]
    val_set = [e for e in entries if e.split == "validation"]
    if not train_set:
        raise ValueError("train split is empty")
    if not val_set:
        raise ValueError("validation split is empty")
    labels = np.array([e.label_id for e in train_set])
    bank = FeatureBank(store, feature_config)
    model.train()
    model.dropout_p = config.dropout_p
    state = OptimizerState()
    seed = config.rng_seed

    best, best_iter, best_acc = model.copy().eval(), 0, -1.0
    rows, losses, window = [], [], []
    bad_rounds, stopped = 0, False
    for it in range(config.total_iters):
        rng = np.random.default_rng([seed, it])
        idx = rng.integers(len(train_set), size=config.batch_size)
        if augment.is_identity:
            feats = bank.features([train_set[i] for i in idx])
        else:
            waves = np.stack([
                store.waveform(train_set[i], np.random.default_rng([seed, it, slot]), augment)
                for slot, i in enumerate(idx)
            ])
            feats = compute_mfcc_batch(waves, feature_config).astype(np.float32)
        cache: dict = {}
        logits = forward(model, feats, rng=rng, cache=cache)
        loss, grad = nn.softmax_cross_entropy(logits, labels[idx])
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at iteration {it}")
        lr = lr_at(it, config)
        sgd_step(model.params, backward(model, cache, grad), state, lr, config)
        losses.append(loss)
        window.append(loss)

        done = it + 1
        if done % config.eval_every == 0 or done == config.total_iters:
            model.eval()
            val_acc = evaluate_accuracy(model, val_set, bank)
            model.train()
            rows.append(LogRow(done, lr, float(np.mean(window)), val_acc))
            window = []
            log.info("iter %d lr %g loss %.4f val_acc %.4f", done, lr, rows[-1].train_loss, val_acc)
            if val_acc > best_acc:
                best, best_iter, best_acc, bad_rounds = model.copy().eval(), done, val_acc, 0
                if checkpoint_path is not None:
                    save_checkpoint(best, checkpoint_path)
            else:
                bad_rounds += 1
                if bad_rounds >= config.early_stop_patience:
                    stopped = True
                    break
    return TrainResult(best, best_iter, best_acc, rows, losses, stopped)
