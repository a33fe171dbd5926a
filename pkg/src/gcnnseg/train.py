"""Optimisation, loss, Dice metric, data regimes and stability reports."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import groups as G
from .layers import apply_input_transform
from .model import GUNet, save_model, softmax

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    plateau_patience_epochs: int = 20
    lr_decay_factor: float = 0.5
    batch_size: int = 16
    epochs: int = 10
    batches_per_epoch: int = 50
    seed: int = 0
    data_regime_fraction: float = 1.0
    # Roto-reflection augmentation of training batches (off; kept for baseline ablations).
    augment: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 < self.data_regime_fraction <= 1:
            raise ConfigError("data_regime_fraction must lie in (0, 1]")


@dataclass
class Dataset:
    """Model-ready images ``[N, C, H, W]`` and integer masks ``[N, H, W]``."""

    images: np.ndarray
    masks: np.ndarray

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.masks[idx])

    @property
    def tags(self) -> np.ndarray:
        """1 for images with any foreground pixel, else 0."""
        return (self.masks.reshape(len(self.masks), -1) > 0).any(axis=1).astype(np.int64)


# --------------------------------------------------------------------------
# optimiser and schedule


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


class PlateauSchedule:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr: float, patience: int = 20, factor: float = 0.5):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.best = np.inf
        self.bad_epochs = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


# --------------------------------------------------------------------------
# loss and metric


def pixel_loss(logits: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean per-pixel softmax cross-entropy and its gradient w.r.t. ``logits``."""
    b, c, h, w = logits.shape
    target = np.asarray(target)
    if target.shape != (b, h, w):
        raise ValueError(f"target shape {target.shape} does not match logits {logits.shape}")
    if target.min(initial=0) < 0 or target.max(initial=0) >= c:
        raise ValueError(f"target labels must lie in [0, {c - 1}]")
    z = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    picked = np.take_along_axis(z, target[:, None].astype(np.int64), axis=1)[:, 0]
    n = b * h * w
    loss = float((logsum - picked).sum() / n)
    onehot = np.arange(c)[None, :, None, None] == target[:, None]
    grad = (softmax(z, axis=1) - onehot) / n
    return loss, grad.astype(logits.dtype)


class DiceCounter:
    """Accumulates Dice both pixel-pooled (micro) and per image."""

    def __init__(self):
        self.inter = 0
        self.total = 0
        self.per_image: list[float] = []

    def update(self, pred: np.ndarray, target: np.ndarray) -> None:
        pred = np.asarray(pred).astype(bool)
        target = np.asarray(target).astype(bool)
        if pred.shape != target.shape:
            raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
        if pred.ndim == 2:
            pred, target = pred[None], target[None]
        for p, t in zip(pred, target):
            i, s = int((p & t).sum()), int(p.sum() + t.sum())
            self.inter += i
            self.total += s
            self.per_image.append(1.0 if s == 0 else 2 * i / s)

    @property
    def micro(self) -> float:
        return 1.0 if self.total == 0 else 2 * self.inter / self.total

    @property
    def mean_per_image(self) -> float:
        return float(np.mean(self.per_image)) if self.per_image else 1.0


def dice_coefficient(pred: np.ndarray, target: np.ndarray) -> float:
    """``2|P & T| / (|P| + |T|)`` pooled over all pixels; 1 when both are empty."""
    counter = DiceCounter()
    counter.update(pred, target)
    return counter.micro


# --------------------------------------------------------------------------
# data regimes


def subsample_regime(data: Dataset, fraction: float, seed: int = 0) -> Dataset:
    """Class-stratified subset holding ``round(fraction * len(data))`` items."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    if fraction == 1:
        return data
    n_keep = int(round(fraction * len(data)))
    if n_keep < 1:
        raise ValueError(f"fraction {fraction} of {len(data)} items leaves no samples")
    rng = np.random.default_rng(seed)
    tags = data.tags
    classes = np.unique(tags)
    exact = np.array([fraction * (tags == c).sum() for c in classes])
    alloc = np.floor(exact).astype(int)
    for i in np.argsort(-(exact - alloc), kind="stable")[: n_keep - alloc.sum()]:
        alloc[i] += 1
    keep = []
    for c, n in zip(classes, alloc):
        members = np.flatnonzero(tags == c)
        keep.append(rng.permutation(members)[:n])
    return data.subset(np.sort(np.concatenate(keep)))


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    best_state: dict[str, np.ndarray]
    best_epoch: int
    best_val_loss: float
    log: list[dict]
    timing: list[dict]


def evaluate(model: GUNet, data: Dataset, batch_size: int = 16) -> dict:
    """Eval-mode loss and Dice (micro and per-image) on ``data``."""
    if len(data) == 0:
        raise ConfigError("cannot evaluate on an empty split")
    counter = DiceCounter()
    total = 0.0
    for i in range(0, len(data), batch_size):
        x, y = data.images[i : i + batch_size], data.masks[i : i + batch_size]
        logits = model.forward(x, train=False)
        loss, _ = pixel_loss(logits, y)
        total += loss * len(x)
        counter.update(logits.argmax(axis=1) == 1, y == 1)
    return {"loss": total / len(data), "dsc": counter.micro, "dsc_per_image": counter.mean_per_image}


def _augment(x: np.ndarray, y: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    elems = G.P4M.elements
    x, y = x.copy(), y.copy()
    for i, gi in enumerate(rng.integers(0, len(elems), size=len(x))):
        x[i] = apply_input_transform(elems[gi], x[i])
        y[i] = apply_input_transform(elems[gi], y[i])
    return x, y


def _copy_state(model: GUNet) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.state_dict().items()}


def train(
    model: GUNet,
    train_set: Dataset,
    val_set: Dataset,
    config: TrainConfig,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Adam with plateau halving; keeps the weights with the lowest validation loss.

    When ``out_dir`` is given, ``metrics.jsonl`` (epoch, split, loss, dsc, lr),
    ``timing.jsonl`` (epoch, wall_time) and ``best.gunt`` are written there.
    The metric log holds no clock readings so identical runs give identical bytes.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigError("training and validation splits must be non-empty")
    train_set = subsample_regime(train_set, config.data_regime_fraction, config.seed)
    rng = np.random.default_rng(config.seed)
    aug_rng = np.random.default_rng([config.seed, 1])
    adam = AdamState()
    schedule = PlateauSchedule(config.learning_rate, config.plateau_patience_epochs, config.lr_decay_factor)
    params = model.parameters()

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text("")
        (out / "timing.jsonl").write_text("")

    records: list[dict] = []
    timing: list[dict] = []

    def emit(rec: dict, path: str, sink: list):
        sink.append(rec)
        if out is not None:
            with open(out / path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    best_state = _copy_state(model)
    best_loss, best_epoch = np.inf, 0
    if config.epochs > 0:
        best_loss = evaluate(model, val_set)["loss"]
    start = time.perf_counter()
    order = rng.permutation(len(train_set))
    cursor = 0
    for epoch in range(1, config.epochs + 1):
        lr = schedule.lr
        losses, counter = [], DiceCounter()
        for _ in range(config.batches_per_epoch):
            idx = []
            while len(idx) < config.batch_size:
                if cursor == len(order):
                    order, cursor = rng.permutation(len(train_set)), 0
                take = order[cursor : cursor + config.batch_size - len(idx)]
                cursor += len(take)
                idx.extend(take.tolist())
            x, y = train_set.images[idx], train_set.masks[idx]
            if config.augment:
                x, y = _augment(x, y, aug_rng)
            logits = model.forward(x, train=True)
            loss, dlogits = pixel_loss(logits, y)
            grads = model.backward(dlogits)
            adam_step(params, grads, adam, lr)
            losses.append(loss)
            counter.update(logits.argmax(axis=1) == 1, y == 1)
        emit({"epoch": epoch, "split": "train", "loss": float(np.mean(losses)), "dsc": counter.micro, "lr": lr},
             "metrics.jsonl", records)
        val = evaluate(model, val_set)
        emit({"epoch": epoch, "split": "val", "loss": val["loss"], "dsc": val["dsc"],
              "dsc_per_image": val["dsc_per_image"], "lr": lr}, "metrics.jsonl", records)
        emit({"epoch": epoch, "wall_time": time.perf_counter() - start}, "timing.jsonl", timing)
        log.info("epoch %d train %.4f val %.4f dsc %.4f lr %.2e", epoch, np.mean(losses), val["loss"], val["dsc"], lr)
        if val["loss"] < best_loss:
            best_loss, best_epoch = val["loss"], epoch
            best_state = _copy_state(model)
        schedule.step(val["loss"])

    model.load_state_dict(best_state)
    if out is not None:
        save_model(out / "best.gunt", model)
    return TrainResult(best_state, best_epoch, float(best_loss), records, timing)


# --------------------------------------------------------------------------
# stability


@dataclass
class StabilityReport:
    mean: np.ndarray  # [H, W]
    std: np.ndarray  # [H, W]
    max_std: float
    mean_std: float

    def summary(self) -> dict:
        return {"max_std": self.max_std, "mean_std": self.mean_std}


def stability_report(model: GUNet, image: np.ndarray, group: G.GroupSpec | str = "p4m", cls: int = 1) -> StabilityReport:
    """Spread of class-``cls`` probabilities over the roto-reflected copies of ``image``.

    Each prediction is mapped back to the original orientation before the
    per-pixel mean and (population) standard deviation are taken.
    """
    group = G.get_group(group)
    x = image if image.ndim == 4 else image[None]
    if x.shape[0] != 1:
        raise ValueError("stability_report takes a single image")
    model.check_input(x)
    maps = []
    for g in group.elements:
        prob = model.predict_proba(apply_input_transform(g, x))[0, cls]
        maps.append(apply_input_transform(G.inverse(g, group), prob).astype(np.float64))
    stack = np.stack(maps)
    std = stack.std(axis=0)
    return StabilityReport(stack.mean(axis=0), std, float(std.max()), float(std.mean()))


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
