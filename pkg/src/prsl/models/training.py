"""SGD-with-momentum training of either model on CE or PRSL."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidConfigError, InvalidDimensionError, NumericError, TrainingError
from ..losses import LossConfig
from ..numerics import ParamStore
from .captioner import captioner_loss
from .classifier import classifier_loss
from .specs import init_params


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings.  ``loss=None`` trains on plain cross-entropy."""

    loss: LossConfig | None = field(default_factory=LossConfig)
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise InvalidConfigError("learning rate must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidConfigError("epochs and batch size must be at least 1")
        if not 0 <= self.momentum < 1:
            raise InvalidConfigError("momentum must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "loss": None if self.loss is None else self.loss.to_dict(),
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        loss = d.get("loss", {})
        return cls(
            loss=None if loss is None else LossConfig.from_dict(loss),
            learning_rate=float(d.get("learning_rate", 0.05)),
            momentum=float(d.get("momentum", 0.9)),
            epochs=int(d.get("epochs", 20)),
            batch_size=int(d.get("batch_size", 32)),
            seed=int(d.get("seed", 0)),
        )


def config_hash(*parts: dict) -> str:
    blob = json.dumps(list(parts), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def sgd_step(params: ParamStore, grads: ParamStore, learning_rate: float, momentum: float,
             velocity: ParamStore | None = None):
    """``v <- momentum * v + g``; ``p <- p - lr * v``.  Returns new (params, velocity)."""
    if velocity is None:
        velocity = params.zeros_like()
    if list(grads) != list(params) or list(velocity) != list(params):
        raise InvalidDimensionError("gradient/velocity names do not match parameters")
    new_p, new_v = ParamStore(), ParamStore()
    for name in params:
        g = grads[name]
        if g.shape != params[name].shape or velocity[name].shape != params[name].shape:
            raise InvalidDimensionError(f"shape mismatch for {name!r}")
        v = momentum * velocity[name] + g
        new_v.add(name, v)
        new_p.add(name, params[name] - learning_rate * v)
    return new_p, new_v


def model_loss(spec, params, images, targets, loss, **kwargs):
    """Dispatch to the classifier or captioner loss by ``spec.kind``."""
    if spec.kind == "classifier":
        return classifier_loss(params, spec, images, targets, loss, **kwargs)
    return captioner_loss(params, spec, images, targets, loss, **kwargs)


def _unpack(dataset):
    if isinstance(dataset, tuple):
        return dataset
    return dataset.images, dataset.targets


def train(dataset, config: TrainConfig, spec, epoch_callback=None):
    """Minimize mean CE/PRSL over shuffled mini-batches.

    ``dataset`` is ``(images, targets)`` or an object with ``images`` and
    ``targets`` attributes: integer labels for a classifier, token-id
    captions for a captioner.  ``epoch_callback(epoch, params, loss)`` may
    return True to stop after that epoch.  Returns a ``Checkpoint``.
    """
    from .checkpoint import Checkpoint

    images, targets = _unpack(dataset)
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    if n == 0 or len(targets) != n:
        raise InvalidConfigError("dataset must be non-empty with one target per image")
    if config.loss is not None:
        spec.validate_window(config.loss.window)

    seeds = np.random.SeedSequence(config.seed).spawn(2)
    params = init_params(spec, seeds[0])
    order_rng = np.random.default_rng(seeds[1])
    velocity = params.zeros_like()
    is_caption = spec.kind == "captioner"
    history = []

    epochs_run = 0
    for epoch in range(1, config.epochs + 1):
        order = order_rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch_targets = [targets[i] for i in idx] if is_caption else np.asarray(targets)[idx]
            try:
                result = model_loss(spec, params, images[idx], batch_targets, config.loss)
            except NumericError as exc:
                raise TrainingError(f"{exc} in epoch {epoch}", epoch=epoch) from exc
            value = result.breakdown.total
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss in epoch {epoch}", epoch=epoch)
            total += value * idx.size
            seen += idx.size
            params, velocity = sgd_step(params, result.param_grads, config.learning_rate,
                                        config.momentum, velocity)
        history.append(total / seen)
        epochs_run = epoch
        if epoch_callback is not None and epoch_callback(epoch, params, history[-1]):
            break

    metadata = {
        "config": config.to_dict(),
        "config_hash": config_hash(config.to_dict(), spec.to_dict()),
        "epochs_run": epochs_run,
        "final_train_loss": history[-1],
        "loss_history": history,
    }
    return Checkpoint(spec=spec, params=params, metadata=metadata)
