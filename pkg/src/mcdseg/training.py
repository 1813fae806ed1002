"""Loss, Adam, augmentation, early stopping and the training loop."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import SegDataset, SegItem
from .errors import NumericError, ShapeError
from .metrics import binarize, dice
from .tensor import PROB_EPS, Tensor, backward, clamp, get_tape, ln, mean, mul, no_grad, tsum
from .unet import ModelGraph, forward_seg, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 0.001
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-5
    early_stop_patience: int = 10
    early_stop_metric: str = "val_dice"
    augment: bool = True
    threshold: float = 0.5
    val_samples: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.val_samples < 0:
            raise ValueError("val_samples must be >= 0")
        if self.early_stop_metric not in ("val_dice", "val_loss"):
            raise ValueError("early_stop_metric must be 'val_dice' or 'val_loss'")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_dice: list[float] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0

    def __len__(self) -> int:
        return len(self.train_loss)

    def to_text(self) -> str:
        lines = ["epoch\ttrain_loss\tval_loss\tval_dice"]
        for i, row in enumerate(zip(self.train_loss, self.val_loss, self.val_dice), start=1):
            lines.append(f"{i}\t" + "\t".join(f"{v:.17g}" for v in row))
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def read(cls, path: str | Path) -> "TrainHistory":
        hist = cls()
        rows = Path(path).read_text().splitlines()[1:]
        for row in rows:
            _, tl, vl, vd = row.split("\t")
            hist.train_loss.append(float(tl))
            hist.val_loss.append(float(vl))
            hist.val_dice.append(float(vd))
        hist.stopped_epoch = len(rows)
        return hist


# --------------------------------------------------------------------------
# loss


def bce_loss(pred: Tensor, target, eps: float = PROB_EPS) -> Tensor:
    """Mean binary cross entropy over all pixels, predictions clamped to [eps, 1-eps]."""
    y = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if y.shape != pred.shape:
        raise ShapeError(f"target shape {y.shape} does not match prediction {pred.shape}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("target mask must be binary")
    p = clamp(pred, eps, 1.0 - eps)
    pos = mul(ln(p), Tensor(y))
    neg = mul(ln(1.0 - p), Tensor(1.0 - y))
    return mul(mean(pos + neg), -1.0)


def l2_penalty(params: Sequence[Tensor], weight_decay: float) -> Tensor:
    """0.5 * lambda * sum(w^2); its gradient is lambda * w."""
    total = None
    for t in params:
        term = tsum(mul(t, t))
        total = term if total is None else total + term
    return mul(total, 0.5 * weight_decay)


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls([np.zeros(p.shape) for p in params], [np.zeros(p.shape) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float = 0.001, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
              weight_decay: float = 0.0) -> None:
    """One bias-corrected Adam update in place; ``weight_decay * w`` is added to each gradient."""
    if len(state.m) != len(params):
        raise ShapeError("optimizer state does not match the parameter list")
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros(p.shape)
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {i}")
        if weight_decay:
            g = g + weight_decay * p.data
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr=0.001, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.state = AdamState.zeros_like(self.params)

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.lr,
                  self.betas, self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# --------------------------------------------------------------------------
# augmentation


def hflip(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr[..., ::-1])


def rot90(arr: np.ndarray) -> np.ndarray:
    """Counter-clockwise quarter turn of the trailing two axes."""
    return np.ascontiguousarray(np.rot90(arr, 1, axes=(-2, -1)))


def augment(dataset: SegDataset) -> SegDataset:
    """Originals, then a horizontally flipped copy of each, then a rotated copy of each."""
    flipped, rotated = [], []
    for it in dataset.items:
        flipped.append(it.replace(image=hflip(it.image), mask=hflip(it.mask), stem=it.stem + "_flip"))
        rotated.append(it.replace(image=rot90(it.image), mask=rot90(it.mask), stem=it.stem + "_rot90"))
    return SegDataset(list(dataset.items) + flipped + rotated)


# --------------------------------------------------------------------------
# early stopping


class EarlyStopping:
    """Track the best epoch of a maximized score and signal after ``patience`` stale epochs."""

    def __init__(self, patience: int = 10):
        self.patience = patience
        self.best: float | None = None
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, score: float) -> bool:
        """Record ``score`` for ``epoch``; return True if it is a new best."""
        if self.best is None or score > self.best:
            self.best, self.best_epoch, self.stale = score, epoch, 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


# --------------------------------------------------------------------------
# loop


def evaluate_split(model: ModelGraph, data: SegDataset, threshold: float = 0.5,
                   batch_size: int = 16, samples: int = 0, seed: int = 0) -> tuple[float, float]:
    """BCE and mean per-image Dice on ``data``.

    With ``samples`` > 0 and active dropout the prediction is the mean of
    that many seeded mc_active passes, the same predictor used at
    evaluation time; otherwise a single plain-inference pass.
    """
    images, masks = data.images(), data.masks()
    stochastic = samples > 0 and any(d.rate > 0 for d in model.dropout_layers())
    losses, scores = [], []
    with no_grad():
        for s in range(0, len(images), batch_size):
            batch = images[s:s + batch_size]
            if stochastic:
                probs = np.mean([forward_seg(model, batch, "mc_active",
                                             np.random.default_rng([seed, 2, s, t])).data
                                 for t in range(samples)], axis=0)
            else:
                probs = forward_seg(model, batch, "inference").data
            y = masks[s:s + batch_size]
            losses.append(bce_loss(Tensor(probs), y).item() * len(y))
            for pm, ym in zip(probs[:, 0], y[:, 0]):
                scores.append(dice(binarize(pm, threshold), ym))
    return float(np.sum(losses) / len(images)), float(np.mean(scores))


def train(model: ModelGraph, train_set: SegDataset, val_set: SegDataset, config: TrainConfig,
          checkpoint_path: str | Path | None = None, history_path: str | Path | None = None,
          on_epoch: Callable[[int, TrainHistory], None] | None = None) -> tuple[bytes, TrainHistory]:
    """Fit ``model`` in place and return (best checkpoint bytes, history).

    Parameters from the best validation epoch are restored before the
    checkpoint is serialized.
    """
    config.validate()
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation splits must be non-empty")
    leaked = train_set.groups() & val_set.groups()
    if leaked:
        raise ValueError(f"groups {sorted(leaked)} appear in both train and validation splits")
    if config.augment:
        train_set = augment(train_set)

    images, masks = train_set.images(), train_set.masks()
    shuffle_rng = np.random.default_rng([config.seed, 0])
    dropout_rng = np.random.default_rng([config.seed, 1])
    params = [t for _, t in model.parameters()]
    opt = Adam(params, config.learning_rate, (config.beta1, config.beta2), config.adam_eps,
               config.weight_decay)
    stopper = EarlyStopping(config.early_stop_patience)
    history = TrainHistory()
    best_state = model.state()
    tape = get_tape()

    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(images))
        total = 0.0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            tape.clear()
            opt.zero_grad()
            try:
                probs = forward_seg(model, images[idx], "train", dropout_rng)
                loss = bce_loss(probs, masks[idx])
                value = loss.item()
                backward(loss)
                opt.step()
            except NumericError as exc:
                tape.clear()
                raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from exc
            total += value * len(idx)
        val_loss, val_dice = evaluate_split(model, val_set, config.threshold,
                                             samples=config.val_samples, seed=config.seed)
        history.train_loss.append(total / len(images))
        history.val_loss.append(val_loss)
        history.val_dice.append(val_dice)
        history.stopped_epoch = epoch
        score = val_dice if config.early_stop_metric == "val_dice" else -val_loss
        if stopper.update(epoch, score):
            best_state = model.state()
        log.info("epoch %d train_loss %.4f val_loss %.4f val_dice %.4f", epoch,
                 history.train_loss[-1], val_loss, val_dice)
        if on_epoch is not None:
            on_epoch(epoch, history)
        if stopper.should_stop:
            break

    history.best_epoch = stopper.best_epoch
    model.load_state(best_state)
    blob = save_checkpoint(model, checkpoint_path,
                           extra={"train": config.to_dict(), "best_epoch": history.best_epoch,
                                  "stopped_epoch": history.stopped_epoch})
    if history_path is not None:
        history.write(history_path)
    return blob, history
