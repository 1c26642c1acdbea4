"""Flatten -> (affine -> ReLU)* -> affine image classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidInputError
from ..losses import LossBreakdown, LossConfig, batch_loss
from ..numerics import ParamStore, affine, affine_backward, relu, relu_backward
from .specs import ClassifierSpec


@dataclass
class LossResult:
    """Mean loss over a batch plus gradients.

    ``per_item`` holds each item's total loss; ``param_grads`` and
    ``input_grad`` are None when not requested.
    """

    breakdown: LossBreakdown
    per_item: np.ndarray
    param_grads: ParamStore | None
    input_grad: np.ndarray | None


def _batch_images(images, spec) -> tuple[np.ndarray, bool]:
    x = np.asarray(images, dtype=np.float64)
    single = x.shape == spec.image_shape
    if single:
        x = x[None]
    if x.shape[1:] != spec.image_shape:
        raise InvalidInputError(f"image shape {x.shape[1:]} does not match spec {spec.image_shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("image contains non-finite values")
    return x, single


def _check_params(params, spec: ClassifierSpec) -> None:
    n_layers = len(spec.hidden)
    expected = [f"fc{i}.{p}" for i in range(n_layers) for p in ("weight", "bias")]
    expected += ["head.weight", "head.bias"]
    if list(params) != expected:
        raise InvalidInputError(f"parameters {list(params)} do not match the classifier spec")


def _forward(params, spec, x):
    h = x.reshape(x.shape[0], -1)
    cache = []
    for i in range(len(spec.hidden)):
        pre = affine(h, params[f"fc{i}.weight"], params[f"fc{i}.bias"])
        cache.append((h, pre))
        h = relu(pre)
    logits = affine(h, params["head.weight"], params["head.bias"])
    return logits, (cache, h)


def classifier_forward(image, params: ParamStore, spec: ClassifierSpec) -> np.ndarray:
    """Logits for one image ``(H, W, C)`` -> ``(classes,)`` or a batch -> ``(N, classes)``."""
    _check_params(params, spec)
    x, single = _batch_images(image, spec)
    logits = _forward(params, spec, x)[0]
    return logits[0] if single else logits


def _backward(params, spec, x, fwd_cache, dlogits, want_params, want_input):
    cache, h_last = fwd_cache
    grads = {}
    dh, gw, gb = affine_backward(dlogits, h_last, params["head.weight"])
    grads["head.weight"], grads["head.bias"] = gw, gb
    for i in reversed(range(len(spec.hidden))):
        h_in, pre = cache[i]
        dpre = relu_backward(dh, pre)
        dh, gw, gb = affine_backward(dpre, h_in, params[f"fc{i}.weight"])
        grads[f"fc{i}.weight"], grads[f"fc{i}.bias"] = gw, gb
    param_grads = ParamStore((k, grads[k]) for k in params) if want_params else None
    input_grad = dh.reshape(x.shape) if want_input else None
    return param_grads, input_grad


def classifier_loss(
    params: ParamStore,
    spec: ClassifierSpec,
    images,
    labels,
    loss: LossConfig | None = None,
    want_params: bool = True,
    want_input: bool = False,
    reduction: str = "mean",
) -> LossResult:
    """Batch CE/PRSL and its gradients; ``loss=None`` is plain CE.

    ``reduction="sum"`` differentiates the sum over items, which gives
    each image its own unscaled input gradient.
    """
    _check_params(params, spec)
    x, _ = _batch_images(images, spec)
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape != (x.shape[0],):
        raise InvalidInputError(f"{labels.size} labels for {x.shape[0]} images")
    logits, cache = _forward(params, spec, x)
    need_grad = want_params or want_input
    ce, pen, grad, _ = batch_loss(logits, labels, loss, need_grad=need_grad)
    b = loss.b if loss is not None else 0.0
    n = x.shape[0]
    ce_mean, pen_mean = float(ce.mean()), float(pen.mean())
    breakdown = LossBreakdown(ce_mean + b * pen_mean, ce_mean, pen_mean, ())
    per_item = ce + b * pen if b != 0.0 else ce
    if not need_grad:
        return LossResult(breakdown, per_item, None, None)
    if reduction == "mean":
        grad = grad / n
    param_grads, input_grad = _backward(params, spec, x, cache, grad, want_params, want_input)
    return LossResult(breakdown, per_item, param_grads, input_grad)


def predict(params, spec, images) -> np.ndarray:
    """Arg-max class per image (lowest index on ties)."""
    logits = classifier_forward(images, params, spec)
    return np.argmax(np.atleast_2d(logits), axis=-1)
