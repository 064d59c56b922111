"""Bag sampling, Adam optimization and the epoch/grid-search training loops.

Training bags are resampled fresh every epoch (a bag-level augmentation),
while validation and test bags come from fixed per-bag streams so they are
identical across runs, platforms and epoch counts. Everything downstream
of a (seed, data, config) triple is bit-deterministic.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .embeddings import EmbeddingStore
from .errors import ConfigError
from .model import (
    Bag,
    Gradients,
    MILParams,
    backward,
    bag_loss,
    init_params,
)
from .numerics import RngStream, derive_stream

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    """Knobs of one training run; serialized as flat JSON."""

    epochs: int
    learning_rate: float
    bag_size: int = 100
    bags_per_epoch: int = 6400
    val_bags: int = 2500
    test_bags: int = 2500
    batch_size: int = 64
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "bag_size", "bags_per_epoch", "val_bags",
                     "test_bags", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict, source: str = "config") -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"{source}: unknown config keys {sorted(unknown)}")
        missing = {"epochs", "learning_rate"} - set(data)
        if missing:
            raise ConfigError(f"{source}: missing required keys {sorted(missing)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        p = Path(path)
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{p}: config must be a JSON object")
        return cls.from_dict(data, source=str(p))


@dataclass
class AdamState:
    """First/second moment estimates plus the shared step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def zeros_like(cls, params: MILParams) -> "AdamState":
        return cls(m=[np.zeros_like(t) for t in params.tensors()],
                   v=[np.zeros_like(t) for t in params.tensors()])


def adam_step(params: MILParams, grads: Gradients, state: AdamState,
              lr: float, weight_decay: float = 0.0,
              decoupled: bool = False) -> tuple[MILParams, AdamState]:
    """One Adam update with bias correction. Updates params/state in place.

    weight_decay is coupled into the gradient (classic Adam L2) by default;
    decoupled=True applies it directly to the parameters instead (AdamW).
    """
    for g in grads.tensors():
        if not np.all(np.isfinite(g)):
            raise ValueError("non-finite gradient")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params.tensors(), grads.tensors(), state.m, state.v):
        if decoupled:
            p -= lr * weight_decay * p
        elif weight_decay != 0.0:
            g = g + weight_decay * p
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def sample_bag(store: EmbeddingStore, label: int, bag_size: int,
               rng: RngStream) -> Bag:
    """Draw a bag of patches from one slide's store.

    Without replacement when the store holds at least bag_size entries
    (maximizing slide coverage per bag), with replacement otherwise so
    small slides still yield full-size bags.
    """
    n = len(store)
    if n == 0:
        raise ValueError(f"empty store for slide '{store.slide_id}'")
    if bag_size < 1:
        raise ValueError("bag_size must be >= 1")
    if n >= bag_size:
        idx = rng.choice(n, size=bag_size, replace=False)
    else:
        idx = rng.integers(0, n, size=bag_size)
    return Bag(slide_id=store.slide_id, label=int(label),
               embeddings=store.values[idx].astype(np.float64),
               patch_xy=store.coords[idx].astype(np.int64))


def fixed_bags(stores: list[EmbeddingStore], labels: list[int], count: int,
               bag_size: int, base_seed: int) -> list[Bag]:
    """Run-independent bag list: bag i comes from slide i mod n_slides with
    stream id hash(slide_id, i), so the result never depends on epoch count,
    training order or platform."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if len(stores) != len(labels) or not stores:
        raise ValueError("stores and labels must be non-empty and aligned")
    bags = []
    for i in range(count):
        store = stores[i % len(stores)]
        label = labels[i % len(labels)]
        rng = RngStream(base_seed, derive_stream(store.slide_id, i))
        bags.append(sample_bag(store, label, bag_size, rng))
    return bags


def _zero_grads(params: MILParams) -> list[np.ndarray]:
    return [np.zeros_like(t) for t in params.tensors()]


def train_epoch(params: MILParams, state: AdamState,
                train_stores: list[tuple[EmbeddingStore, int]], cfg: TrainConfig,
                epoch_index: int, *, decoupled: bool = False,
                ) -> tuple[MILParams, AdamState, float]:
    """One epoch of freshly sampled bags, batched Adam updates.

    The epoch stream is keyed by (cfg.seed, epoch_index), so every epoch
    sees different bags but reruns are bit-identical. Batch gradients are
    the mean of per-bag gradients accumulated in bag order.
    """
    if not train_stores:
        raise ValueError("no training stores")
    rng = RngStream(cfg.seed, derive_stream("epoch", epoch_index))
    total_loss = 0.0
    done = 0
    while done < cfg.bags_per_epoch:
        batch_n = min(cfg.batch_size, cfg.bags_per_epoch - done)
        batch = []
        for _ in range(batch_n):
            store, label = train_stores[int(rng.integers(0, len(train_stores)))]
            batch.append(sample_bag(store, label, cfg.bag_size, rng))
        acc = _zero_grads(params)
        for bag in batch:
            loss, grads = backward(params, bag)
            total_loss += loss
            for a, g in zip(acc, grads.tensors()):
                a += g
        mean = Gradients(*(a / batch_n for a in acc))
        adam_step(params, mean, state, cfg.learning_rate, cfg.weight_decay, decoupled)
        done += batch_n
    return params, state, total_loss / cfg.bags_per_epoch


def mean_bag_loss(params: MILParams, bags: list[Bag]) -> float:
    if not bags:
        raise ValueError("no bags to evaluate")
    return float(np.mean([bag_loss(params, bag) for bag in bags]))


@dataclass
class TrainResult:
    """Outcome of a full run: best-epoch weights by validation loss."""

    params: MILParams            # weights from the best epoch
    final_params: MILParams
    best_epoch: int
    best_val_loss: float
    history: list[dict] = field(default_factory=list)  # per-epoch losses


def run_training(train_stores: list[tuple[EmbeddingStore, int]],
                 val_bags: list[Bag], cfg: TrainConfig, *,
                 attention_dim: int, n_classes: int = 4,
                 decoupled: bool = False) -> TrainResult:
    """Epoch loop with per-epoch validation; keeps the best-epoch weights."""
    embed_dim = train_stores[0][0].dim
    params = init_params(attention_dim, embed_dim, n_classes,
                         RngStream(cfg.seed, derive_stream("init")))
    state = AdamState.zeros_like(params)
    best = None
    history = []
    for epoch in range(cfg.epochs):
        params, state, train_loss = train_epoch(params, state, train_stores, cfg,
                                                epoch, decoupled=decoupled)
        val_loss = mean_bag_loss(params, val_bags)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        if best is None or val_loss < best[0]:
            best = (val_loss, epoch, params.copy())
    return TrainResult(params=best[2], final_params=params, best_epoch=best[1],
                       best_val_loss=best[0], history=history)


def write_training_log(history: list[dict], cfg: TrainConfig, path) -> None:
    """CSV log with one row per epoch."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "lr", "wd", "seed"])
        for row in history:
            writer.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"]),
                             repr(cfg.learning_rate), repr(cfg.weight_decay), cfg.seed])


DEFAULT_LR_GRID = (1e-3, 1e-4, 1e-5, 1e-6)
DEFAULT_WD_GRID = (1e-3, 1e-4, 1e-5, 1e-6, 1e-7)


@dataclass
class GridResult:
    """Validation losses over the full (lr, wd) grid and the winning pair."""

    losses: dict[tuple[float, float], float]
    best_lr: float
    best_wd: float

    def to_dict(self) -> dict:
        return {
            "grid": [{"learning_rate": lr, "weight_decay": wd, "val_loss": loss}
                     for (lr, wd), loss in sorted(self.losses.items())],
            "best": {"learning_rate": self.best_lr, "weight_decay": self.best_wd},
        }


def grid_search(train_stores: list[tuple[EmbeddingStore, int]],
                val_bags: list[Bag], cfg: TrainConfig,
                lr_grid=DEFAULT_LR_GRID, wd_grid=DEFAULT_WD_GRID, *,
                attention_dim: int = 128, n_classes: int = 4,
                evaluate=None) -> GridResult:
    """Train one model per (lr, wd) pair from the same init seed and pick
    the pair with minimum validation loss; ties break toward the smaller
    learning rate, then the smaller weight decay.

    ``evaluate`` maps (lr, wd) to a validation loss and exists so tests can
    stub out the training; the default trains for cfg.epochs and scores the
    best epoch on the fixed validation bags.
    """
    if not lr_grid or not wd_grid:
        raise ValueError("lr_grid and wd_grid must be non-empty")

    if evaluate is None:
        def evaluate(lr: float, wd: float) -> float:
            trial = TrainConfig(**{**cfg.to_dict(),
                                   "learning_rate": lr, "weight_decay": wd})
            result = run_training(train_stores, val_bags, trial,
                                  attention_dim=attention_dim, n_classes=n_classes)
            return result.best_val_loss

    losses = {}
    for lr in lr_grid:
        for wd in wd_grid:
            losses[(float(lr), float(wd))] = float(evaluate(lr, wd))
    best_lr, best_wd = min(losses, key=lambda pair: (losses[pair], pair[0], pair[1]))
    return GridResult(losses=losses, best_lr=best_lr, best_wd=best_wd)
