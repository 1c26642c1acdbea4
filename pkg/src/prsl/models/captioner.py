"""Autoregressive captioner: image prefix + one causal self-attention block.

Sequence layout for ``T`` input tokens: position 0 holds the image
embedding, positions ``1..T`` hold the tokens.  Output row ``t`` is read at
position ``t + 1`` and predicts the token after input token ``t``.
"""

from __future__ import annotations

import numpy as np

from ..errors import InvalidInputError
from ..losses import LossBreakdown, LossConfig, batch_loss
from ..numerics import ParamStore, relu, relu_backward
from .classifier import LossResult, _batch_images
from .specs import BOS, EOS, PAD, CaptionerSpec, _layer_shapes


def _check_params(params, spec: CaptionerSpec) -> None:
    expected = [(name, shape) for name, shape, _ in _layer_shapes(spec)]
    actual = [(name, params[name].shape) for name in params]
    if actual != expected:
        raise InvalidInputError("parameters do not match the captioner spec")


def _check_tokens(tokens: np.ndarray, spec: CaptionerSpec) -> None:
    if tokens.shape[-1] > spec.context:
        raise InvalidInputError(f"prefix length {tokens.shape[-1]} exceeds context {spec.context}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= spec.vocab_size):
        raise InvalidInputError("token id outside the vocabulary")


def _forward(params, spec, x, tokens):
    """Batched forward pass; returns logits ``(N, T, V)`` and a backward cache."""
    n, t = tokens.shape
    d = spec.d_model
    flat = x.reshape(n, -1)
    f_pre = flat @ params["img.fc.weight"].T + params["img.fc.bias"]
    f = relu(f_pre)
    e0 = f @ params["img.proj.weight"].T + params["img.proj.bias"]

    h = np.concatenate([e0[:, None, :], params["tok_emb"][tokens]], axis=1)
    h = h + params["pos_emb"][: t + 1]
    q = h @ params["attn.q"].T
    k = h @ params["attn.k"].T
    v = h @ params["attn.v"].T
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(d)
    future = np.triu(np.ones((t + 1, t + 1), dtype=bool), k=1)
    scores = np.where(future, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    attn = np.exp(scores)
    attn = attn / attn.sum(axis=-1, keepdims=True)
    mixed = attn @ v
    u = h + mixed @ params["attn.o"].T
    g_pre = u @ params["mlp.fc.weight"].T + params["mlp.fc.bias"]
    g = relu(g_pre)
    m = u + g @ params["mlp.proj.weight"].T + params["mlp.proj.bias"]
    logits = m[:, 1:] @ params["head.weight"].T + params["head.bias"]
    if not np.all(np.isfinite(logits)):
        raise InvalidInputError("captioner produced non-finite logits")
    cache = (flat, f_pre, f, tokens, h, q, k, v, attn, mixed, u, g_pre, g, m)
    return logits, cache


def _backward(params, spec, cache, dlogits):
    flat, f_pre, f, tokens, h, q, k, v, attn, mixed, u, g_pre, g, m = cache
    n, t = tokens.shape
    d = spec.d_model
    grads = {}

    def wgrad(dy, x):
        return dy.reshape(-1, dy.shape[-1]).T @ x.reshape(-1, x.shape[-1])

    grads["head.weight"] = wgrad(dlogits, m[:, 1:])
    grads["head.bias"] = dlogits.reshape(-1, dlogits.shape[-1]).sum(axis=0)
    dm = np.zeros_like(m)
    dm[:, 1:] = dlogits @ params["head.weight"]

    du = dm.copy()
    grads["mlp.proj.weight"] = wgrad(dm, g)
    grads["mlp.proj.bias"] = dm.reshape(-1, d).sum(axis=0)
    dg_pre = relu_backward(dm @ params["mlp.proj.weight"], g_pre)
    grads["mlp.fc.weight"] = wgrad(dg_pre, u)
    grads["mlp.fc.bias"] = dg_pre.reshape(-1, dg_pre.shape[-1]).sum(axis=0)
    du += dg_pre @ params["mlp.fc.weight"]

    dh = du.copy()
    grads["attn.o"] = wgrad(du, mixed)
    dmixed = du @ params["attn.o"]
    dattn = dmixed @ v.transpose(0, 2, 1)
    dv = attn.transpose(0, 2, 1) @ dmixed
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) / np.sqrt(d)
    dq = dscores @ k
    dk = dscores.transpose(0, 2, 1) @ q
    grads["attn.q"] = wgrad(dq, h)
    grads["attn.k"] = wgrad(dk, h)
    grads["attn.v"] = wgrad(dv, h)
    dh += dq @ params["attn.q"] + dk @ params["attn.k"] + dv @ params["attn.v"]

    dpos = np.zeros_like(params["pos_emb"])
    dpos[: t + 1] = dh.sum(axis=0)
    grads["pos_emb"] = dpos
    dtok = np.zeros_like(params["tok_emb"])
    np.add.at(dtok, tokens.ravel(), dh[:, 1:].reshape(-1, d))
    grads["tok_emb"] = dtok

    de0 = dh[:, 0]
    grads["img.proj.weight"] = de0.T @ f
    grads["img.proj.bias"] = de0.sum(axis=0)
    df_pre = relu_backward(de0 @ params["img.proj.weight"], f_pre)
    grads["img.fc.weight"] = df_pre.T @ flat
    grads["img.fc.bias"] = df_pre.sum(axis=0)
    dflat = df_pre @ params["img.fc.weight"]
    return ParamStore((name, grads[name]) for name in params), dflat


def captioner_forward(image, prefix_tokens, params: ParamStore, spec: CaptionerSpec) -> np.ndarray:
    """Per-position next-token logits, ``(len(prefix), V)`` for one image.

    A batch of images with an ``(N, T)`` token array gives ``(N, T, V)``.
    """
    _check_params(params, spec)
    x, single = _batch_images(image, spec)
    tokens = np.asarray(prefix_tokens, dtype=np.int64)
    if single:
        tokens = tokens[None]
    if tokens.ndim != 2 or tokens.shape[0] != x.shape[0]:
        raise InvalidInputError("token array does not match the image batch")
    _check_tokens(tokens, spec)
    logits = _forward(params, spec, x, tokens)[0]
    return logits[0] if single else logits


def teacher_forcing(captions, spec: CaptionerSpec):
    """Pad ``[BOS] + caption`` inputs and ``caption + [EOS]`` targets.

    Returns ``(inputs, targets, mask)``; each is ``(N, T)`` where ``T`` is
    the longest caption plus one.
    """
    captions = [list(map(int, c)) for c in captions]
    longest = max(len(c) for c in captions) + 1
    if longest > spec.context:
        raise InvalidInputError(f"caption of {longest - 1} tokens does not fit context {spec.context}")
    n = len(captions)
    inputs = np.full((n, longest), PAD, dtype=np.int64)
    targets = np.full((n, longest), PAD, dtype=np.int64)
    mask = np.zeros((n, longest), dtype=bool)
    for i, c in enumerate(captions):
        inputs[i, : len(c) + 1] = [BOS, *c]
        targets[i, : len(c) + 1] = [*c, EOS]
        mask[i, : len(c) + 1] = True
    _check_tokens(inputs, spec)
    _check_tokens(targets, spec)
    return inputs, targets, mask


def captioner_loss(
    params: ParamStore,
    spec: CaptionerSpec,
    images,
    captions,
    loss: LossConfig | None = None,
    want_params: bool = True,
    want_input: bool = False,
    reduction: str = "mean",
) -> LossResult:
    """Teacher-forced sequence CE/PRSL, reduced per caption then over the batch.

    Within a caption the reduction follows ``loss.sequence_reduction``
    (mean for plain CE).  ``reduction`` controls the batch reduction.
    """
    _check_params(params, spec)
    x, single = _batch_images(images, spec)
    if single:
        captions = [captions]
    if len(captions) != x.shape[0]:
        raise InvalidInputError(f"{len(captions)} captions for {x.shape[0]} images")
    inputs, targets, mask = teacher_forcing(captions, spec)
    logits, cache = _forward(params, spec, x, inputs)

    n = x.shape[0]
    rows = logits[mask]
    need_grad = want_params or want_input
    ce, pen, grad, _ = batch_loss(rows, targets[mask], loss, need_grad=need_grad)
    b = loss.b if loss is not None else 0.0
    lengths = mask.sum(axis=1)
    owner = np.repeat(np.arange(n), lengths)
    per_pos_scale = np.ones(n) if loss is not None and loss.sequence_reduction == "sum" else 1.0 / lengths
    ce_item = np.zeros(n)
    pen_item = np.zeros(n)
    np.add.at(ce_item, owner, ce)
    np.add.at(pen_item, owner, pen)
    ce_item *= per_pos_scale
    pen_item *= per_pos_scale
    ce_mean, pen_mean = float(ce_item.mean()), float(pen_item.mean())
    breakdown = LossBreakdown(ce_mean + b * pen_mean, ce_mean, pen_mean, ())
    per_item = ce_item + b * pen_item if b != 0.0 else ce_item
    if not need_grad:
        return LossResult(breakdown, per_item, None, None)

    scale = per_pos_scale[owner] if np.ndim(per_pos_scale) else np.full(owner.size, per_pos_scale)
    if reduction == "mean":
        scale = scale / n
    dlogits = np.zeros_like(logits)
    dlogits[mask] = grad * scale[:, None]
    param_grads, dflat = _backward(params, spec, cache, dlogits)
    return LossResult(
        breakdown,
        per_item,
        param_grads if want_params else None,
        dflat.reshape(x.shape) if want_input else None,
    )


def greedy_decode(params: ParamStore, spec: CaptionerSpec, images, max_tokens: int | None = None):
    """Greedy captions (token id lists without BOS/EOS) for a batch of images."""
    _check_params(params, spec)
    x, single = _batch_images(images, spec)
    n = x.shape[0]
    limit = spec.context if max_tokens is None else min(max_tokens + 1, spec.context)
    tokens = np.full((n, 1), BOS, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    out = [[] for _ in range(n)]
    while tokens.shape[1] < limit and not done.all():
        logits = _forward(params, spec, x, tokens)[0][:, -1]
        nxt = np.argmax(logits, axis=-1)
        for i in np.flatnonzero(~done):
            if nxt[i] == EOS:
                done[i] = True
            else:
                out[i].append(int(nxt[i]))
        tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
    return out[0] if single else out
