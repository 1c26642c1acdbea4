"""Model specifications and seeded parameter initialization."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import InvalidConfigError
from ..numerics import ParamStore

BOS, EOS, PAD = 0, 1, 2
SPECIAL_TOKENS = ("<bos>", "<eos>", "<pad>")


@dataclass(frozen=True)
class ClassifierSpec:
    height: int = 12
    width: int = 12
    channels: int = 3
    hidden: tuple = (64,)
    classes: int = 16
    kind: str = field(default="classifier", init=False)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.classes < 2:
            raise InvalidConfigError("a classifier needs at least 2 classes")
        if min(self.height, self.width, self.channels) < 1 or any(h < 1 for h in self.hidden):
            raise InvalidConfigError("image and hidden sizes must be positive")

    @property
    def image_shape(self) -> tuple:
        return (self.height, self.width, self.channels)

    @property
    def input_size(self) -> int:
        return self.height * self.width * self.channels

    def validate_window(self, window) -> None:
        # room for at least one class ranked below the window
        if self.classes < window.k + 1:
            raise InvalidConfigError(
                f"{self.classes} classes cannot host window {window} with a class below it"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass(frozen=True)
class CaptionerSpec:
    height: int = 12
    width: int = 12
    channels: int = 3
    feature_hidden: int = 64
    d_model: int = 32
    mlp_hidden: int = 64
    vocab_size: int = 64
    context: int = 16
    heads: int = 1
    kind: str = field(default="captioner", init=False)

    def __post_init__(self):
        if self.vocab_size < 8:
            raise InvalidConfigError("vocabulary must hold at least 8 tokens")
        if self.context < 4:
            raise InvalidConfigError("context length must be at least 4")
        if self.heads != 1:
            raise InvalidConfigError("only single-head attention is supported")

    @property
    def image_shape(self) -> tuple:
        return (self.height, self.width, self.channels)

    @property
    def input_size(self) -> int:
        return self.height * self.width * self.channels

    @property
    def classes(self) -> int:
        return self.vocab_size

    def validate_window(self, window) -> None:
        if self.vocab_size < window.k + 1:
            raise InvalidConfigError(f"vocabulary too small for window {window}")

    def to_dict(self) -> dict:
        return asdict(self)


def spec_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("kind", "classifier")
    if kind == "classifier":
        return ClassifierSpec(**d)
    if kind == "captioner":
        return CaptionerSpec(**d)
    raise InvalidConfigError(f"unknown model kind {kind!r}")


def _layer_shapes(spec) -> list[tuple[str, tuple, int]]:
    """(name, shape, fan_in) in parameter order."""
    shapes = []
    if spec.kind == "classifier":
        sizes = [spec.input_size, *spec.hidden]
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            shapes += [(f"fc{i}.weight", (fan_out, fan_in), fan_in), (f"fc{i}.bias", (fan_out,), fan_in)]
        shapes += [
            ("head.weight", (spec.classes, sizes[-1]), sizes[-1]),
            ("head.bias", (spec.classes,), sizes[-1]),
        ]
        return shapes
    d, f, m, v = spec.d_model, spec.feature_hidden, spec.mlp_hidden, spec.vocab_size
    return [
        ("img.fc.weight", (f, spec.input_size), spec.input_size),
        ("img.fc.bias", (f,), spec.input_size),
        ("img.proj.weight", (d, f), f),
        ("img.proj.bias", (d,), f),
        ("tok_emb", (v, d), d),
        ("pos_emb", (spec.context + 1, d), d),
        ("attn.q", (d, d), d),
        ("attn.k", (d, d), d),
        ("attn.v", (d, d), d),
        ("attn.o", (d, d), d),
        ("mlp.fc.weight", (m, d), d),
        ("mlp.fc.bias", (m,), d),
        ("mlp.proj.weight", (d, m), m),
        ("mlp.proj.bias", (d,), m),
        ("head.weight", (v, d), d),
        ("head.bias", (v,), d),
    ]


def init_params(spec, seed) -> ParamStore:
    """Uniform ``[-s, s]`` with ``s = 1/sqrt(fan_in)`` for every tensor."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, shape, fan_in in _layer_shapes(spec):
        s = 1.0 / np.sqrt(fan_in)
        store.add(name, rng.uniform(-s, s, size=shape))
    return store


def zero_params(spec) -> ParamStore:
    return ParamStore((name, np.zeros(shape)) for name, shape, _ in _layer_shapes(spec))
