"""Negative-sampled binary cross-entropy training with Adam."""

from __future__ import annotations

import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .corpus import Corpus, TrainingInstance, make_training_instances
from .model import ModelConfig, forward, init_params, zero_grads
from .tensor import Tensor

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-12


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    x: int = 3
    lam: float = 0.0001
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 0

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1 or self.x < 1:
            raise ValueError("batch_size and x must be >= 1")
        if self.learning_rate < 0 or self.lam < 0:
            raise ValueError("learning_rate and lam must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("invalid Adam constants")
        return self


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def l2_penalty(params: dict[str, Tensor]) -> Tensor:
    terms = [T.sum_all(T.mul(p, p)) for p in params.values()]
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def bce_loss(scores: Tensor, params: dict[str, Tensor] | None = None, lam: float = 0.0,
             reg_weight: float = 1.0) -> Tensor:
    """Sum over rows of -log s_target - sum log(1 - s_neg), plus the L2 term.

    ``scores`` is B x (1+x) with the target in column 0. Scores are clamped to
    [1e-12, 1-1e-12] before the logs. The L2 term is ``lam * reg_weight *
    ||params||^2``; training passes the batch's share of the instances as
    ``reg_weight`` so one epoch adds the penalty exactly once.
    """
    B, C = scores.shape
    s = T.clamp(scores, LOG_CLAMP, 1.0 - LOG_CLAMP)
    sign = np.zeros((B, C))
    sign[:, 0] = 1.0
    # log(s) on the target column, log(1 - s) on the negatives
    flipped = T.add(T.mul(s, Tensor(2 * sign - 1)), Tensor(1 - sign))
    total = T.scale(T.sum_all(T.log(flipped)), -1.0)
    if params and lam > 0:
        total = T.add(total, T.scale(l2_penalty(params), lam * reg_weight))
    return total


def loss(target_score, negative_scores, params: dict[str, Tensor] | None = None, lam: float = 0.0) -> Tensor:
    """Loss of a single instance from its target and negative scores."""
    tgt = target_score if isinstance(target_score, Tensor) else Tensor(target_score)
    negs = negative_scores if isinstance(negative_scores, Tensor) else Tensor(negative_scores)
    row = T.concat([T.reshape(tgt, (1,)), T.reshape(negs, (negs.size,))])
    return bce_loss(T.reshape(row, (1, row.size)), params, lam)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class Adam:
    """Adam with bias correction; moments are kept per parameter name."""

    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, Tensor]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------------------
# epochs
# ---------------------------------------------------------------------------


def batch_arrays(batch: list[TrainingInstance]):
    users = np.array([b.user for b in batch], dtype=np.int64)
    hist = np.array([b.history for b in batch], dtype=np.int64)
    cands = np.array([(b.target, *b.negatives) for b in batch], dtype=np.int64)
    return users, hist, cands


def batch_loss(corpus: Corpus, batch, params, model_config: ModelConfig, lam: float,
               reg_weight: float) -> Tensor:
    users, hist, cands = batch_arrays(batch)
    scores = forward(corpus, users, hist, cands, params, model_config)
    return bce_loss(scores, params, lam, reg_weight)


def train_epoch(corpus: Corpus, instances: list[TrainingInstance], params: dict[str, Tensor],
                opt: Adam, model_config: ModelConfig, train_config: TrainConfig, epoch: int) -> float:
    """One shuffled pass of Adam updates; returns the mean loss per instance."""
    if not instances:
        raise TrainingError("no training instances")
    rng = np.random.default_rng([train_config.seed, epoch, 1])
    order = rng.permutation(len(instances))
    n = len(instances)
    total = 0.0
    for b, start in enumerate(range(0, n, train_config.batch_size)):
        batch = [instances[i] for i in order[start:start + train_config.batch_size]]
        zero_grads(params)
        with T.Tape() as tape:
            value = batch_loss(corpus, batch, params, model_config, train_config.lam, len(batch) / n)
        lv = value.item()
        if not np.isfinite(lv):
            raise TrainingError(f"non-finite loss {lv} in epoch {epoch}, batch {b}")
        T.backward(tape, value)
        opt.step(params)
        total += lv
    zero_grads(params)
    return total / n


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    losses: list[float] = field(default_factory=list)
    epochs_run: int = 0


def train(corpus: Corpus, model_config: ModelConfig, train_config: TrainConfig,
          params: dict[str, Tensor] | None = None,
          on_epoch: Callable[[int, float, dict], None] | None = None,
          log_stream=None) -> TrainResult:
    """Train for ``epochs`` epochs, resampling negatives every epoch.

    Each epoch writes a JSON line ``{epoch, mean_loss, wall_ms, lr}`` to
    ``log_stream`` (stderr by default). With ``patience`` > 0, the last train
    item of every user is held out and training stops once HR@5 on it has not
    improved for that many epochs.
    """
    model_config.validate()
    train_config.validate()
    if params is None:
        params = init_params(model_config, train_config.seed)
    opt = Adam(train_config.learning_rate, train_config.beta1, train_config.beta2, train_config.eps)
    stream = sys.stderr if log_stream is None else log_stream

    fit_corpus, holdout = corpus, None
    if train_config.patience > 0:
        fit_corpus, holdout = _holdout_split(corpus, model_config.L, train_config.seed)

    result = TrainResult(params)
    best, stale = -1.0, 0
    for epoch in range(1, train_config.epochs + 1):
        t0 = time.perf_counter()
        instances = make_training_instances(fit_corpus, model_config.L, train_config.x,
                                            seed=[train_config.seed, epoch])
        mean = train_epoch(fit_corpus, instances, params, opt, model_config, train_config, epoch)
        result.losses.append(mean)
        result.epochs_run = epoch
        record = {"epoch": epoch, "mean_loss": mean,
                  "wall_ms": round(1000 * (time.perf_counter() - t0), 1),
                  "lr": train_config.learning_rate}
        if holdout is not None:
            from .evaluation import evaluate
            hr = evaluate(params, model_config, corpus, holdout, 5).hr
            record["holdout_hr"] = hr
            if hr > best:
                best, stale = hr, 0
            else:
                stale += 1
        if stream is not False:
            print(json.dumps(record), file=stream, flush=True)
        if on_epoch is not None:
            on_epoch(epoch, mean, params)
        if holdout is not None and stale >= train_config.patience:
            logger.info("early stop after epoch %d", epoch)
            break
    return result


def _holdout_split(corpus: Corpus, L: int, seed: int):
    """Corpus view whose train prefixes drop their last item, plus per-step
    instances that rank that held-out item against 100 negatives (fewer when
    the catalog is small)."""
    from dataclasses import replace as dc_replace

    from .corpus import TestInstance, _sample_excluding, _window

    shorter = np.maximum(corpus.train_lengths - 1, 1)
    view = dc_replace(corpus, train_lengths=shorter)
    rng = np.random.default_rng([seed, 7919])
    held = []
    for u in range(corpus.n_users):
        seq = corpus.sequences[u]
        t = int(shorter[u])
        exclude = set(seq.tolist())
        k = min(100, corpus.n_items - len(exclude))
        negs = _sample_excluding(rng, corpus.n_items, k, exclude) if k > 0 else []
        target = int(seq[t])
        held.append(TestInstance(u, _window(seq, t, L), (target,), (target, *negs), t))
    return view, held


def config_dict(model_config: ModelConfig, train_config: TrainConfig) -> dict:
    return {**model_config.to_dict(), **asdict(train_config)}
