"""Untargeted BIM (iterated FGSM) against the classifier or captioner.

All functions accept a single image ``(H, W, C)`` or a batch
``(N, H, W, C)``; batched items are attacked independently (the loss is
summed over items, so each image sees only its own gradient).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AttackError, InvalidConfigError, NumericError, InvalidDimensionError, InvalidInputError
from .models.training import model_loss

# Published presets; their pixel normalization is not known.
PAPER_PRESETS = {
    "vit-gpt2": {"eps": 0.5, "alpha": 0.01},
    "blip2-opt": {"eps": 1.0, "alpha": 0.5},
}


@dataclass(frozen=True)
class AttackConfig:
    eps: float = 0.1
    alpha: float = 0.02
    iters_per_round: int = 1
    rounds: int = 10
    clamp: tuple = (0.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "clamp", tuple(float(c) for c in self.clamp))
        if not self.eps > 0:
            raise InvalidConfigError(f"eps must be positive, got {self.eps}")
        if not self.alpha > 0:
            raise InvalidConfigError(f"alpha must be positive, got {self.alpha}")
        if self.rounds < 1 or self.iters_per_round < 1:
            raise InvalidConfigError("rounds and iters_per_round must be at least 1")
        if len(self.clamp) != 2 or not self.clamp[0] < self.clamp[1]:
            raise InvalidConfigError(f"invalid clamp interval {self.clamp}")

    def to_dict(self) -> dict:
        return {
            "eps": self.eps,
            "alpha": self.alpha,
            "iters_per_round": self.iters_per_round,
            "rounds": self.rounds,
            "clamp": list(self.clamp),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class AttackTrace:
    """Snapshots after each round; ``images[0]`` is the original."""

    original: np.ndarray
    snapshots: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    config: AttackConfig = None

    @property
    def images(self) -> list:
        return [self.original, *self.snapshots]


def _normalize_reference(model, image, reference):
    x = np.asarray(image, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if model.kind == "classifier":
        ref = np.atleast_1d(np.asarray(reference))
        if ref.dtype.kind not in "iu" or ref.shape != (x.shape[0],):
            raise InvalidInputError("classifier reference must be one integer label per image")
        if ref.min() < 0 or ref.max() >= model.classes:
            raise InvalidInputError("reference label out of range")
    else:
        ref = [reference] if single else list(reference)
        if len(ref) != x.shape[0]:
            raise InvalidInputError("need one reference caption per image")
        for caption in ref:
            if any(int(t) < 0 or int(t) >= model.vocab_size for t in caption):
                raise InvalidInputError("reference caption has out-of-vocabulary tokens")
    return x, ref, single


def _loss_and_grad(model, params, x, ref):
    try:
        result = model_loss(model, params, x, ref, None, want_params=False, want_input=True,
                            reduction="sum")
    except NumericError as exc:
        raise AttackError(f"non-finite values during attack: {exc}") from exc
    return result.per_item, result.input_grad


def input_gradient(model, params, image, reference_output) -> np.ndarray:
    """Gradient of the clean-reference CE with respect to the pixels.

    For the captioner the CE is the teacher-forced mean over positions of
    ``reference_output`` (a token-id caption).
    """
    x, ref, single = _normalize_reference(model, image, reference_output)
    _, grad = _loss_and_grad(model, params, x, ref)
    return grad[0] if single else grad


def bim_step(image, pixel_gradient, alpha, origin_image, eps, clamp=(0.0, 1.0)) -> np.ndarray:
    """``clamp(clip_[origin-eps, origin+eps](x + alpha * sign(g)))``; sign(0) = 0."""
    x = np.asarray(image, dtype=np.float64)
    g = np.asarray(pixel_gradient, dtype=np.float64)
    origin = np.asarray(origin_image, dtype=np.float64)
    if not x.shape == g.shape == origin.shape:
        raise InvalidDimensionError(f"shapes {x.shape}, {g.shape}, {origin.shape} differ")
    if not alpha > 0:
        raise InvalidConfigError("alpha must be positive")
    stepped = x + alpha * np.sign(g)
    stepped = np.minimum(origin + eps, np.maximum(origin - eps, stepped))
    return np.clip(stepped, clamp[0], clamp[1])


def bim_attack(model, params, image, reference_output, config: AttackConfig,
               resume: AttackTrace | None = None) -> AttackTrace:
    """Run ``config.rounds`` rounds of ``iters_per_round`` BIM steps.

    With ``resume``, the attack continues from the last snapshot of an
    earlier trace (same original image and ε-ball) and appends to a copy
    of it.
    """
    x, ref, single = _normalize_reference(model, image, reference_output)
    lo, hi = config.clamp
    if np.any(x < lo) or np.any(x > hi):
        raise InvalidInputError("original image lies outside the clamp interval")

    if resume is None:
        trace = AttackTrace(original=np.asarray(image, dtype=np.float64).copy(), config=config)
        current = x.copy()
    else:
        trace = AttackTrace(resume.original.copy(), list(resume.snapshots), list(resume.losses), config)
        last = trace.images[-1]
        current = np.asarray(last, dtype=np.float64)[None] if single else np.array(last, dtype=np.float64)

    for _ in range(config.rounds):
        for _ in range(config.iters_per_round):
            losses, grad = _loss_and_grad(model, params, current, ref)
            if not np.all(np.isfinite(losses)) or not np.all(np.isfinite(grad)):
                raise AttackError("non-finite loss or gradient during attack")
            current = bim_step(current, grad, config.alpha, x, config.eps, config.clamp)
        losses, _ = _loss_and_grad(model, params, current, ref)
        if not np.all(np.isfinite(losses)):
            raise AttackError("non-finite loss during attack")
        trace.snapshots.append(current[0].copy() if single else current.copy())
        trace.losses.append(float(losses[0]) if single else losses.copy())
    return trace


def write_pnm(path, image) -> None:
    """Write an image in ``[0, 1]`` as a plain-text PGM (1 channel) or PPM (3 channels)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    if c not in (1, 3):
        raise InvalidDimensionError("PNM export needs 1 or 3 channels")
    levels = np.rint(np.clip(img, 0.0, 1.0) * 255).astype(int)
    magic = "P2" if c == 1 else "P3"
    lines = [magic, f"{w} {h}", "255"]
    for row in levels:
        lines.append(" ".join(str(v) for v in row.ravel()))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
