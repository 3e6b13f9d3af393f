"""Desk-scale network components: pyramid feature extractor, classifier head,
conditional domain discriminator and the gradient-reversal node."""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ShapeError
from .losses import ConditioningMap, condition

PROB_EPS = 1e-12


def _init(rng: np.random.Generator, fan_in: int, shape, name: str) -> Tensor:
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True, name=name)


def _check_width(op: str, x: Tensor, width: int):
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeError(op, x.shape, (x.shape[0] if x.ndim else 0, width))


class Module:
    """Minimal parameter container; subclasses fill ``self.params`` in order."""

    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()

    def parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        return OrderedDict((prefix + k, v) for k, v in self.params.items())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


class PyramidExtractor(Module):
    """Stacked dense relu stages whose outputs are each projected to ``d_f``
    and summed (additive multi-scale merge)."""

    def __init__(self, d_in: int, stage_widths=(64, 48, 32), d_f: int = 32,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_in, self.stage_widths, self.d_f = d_in, tuple(stage_widths), d_f
        fan_in = d_in
        for i, w in enumerate(self.stage_widths):
            self.params[f"stage{i}.weight"] = _init(rng, fan_in, (fan_in, w), f"stage{i}.weight")
            self.params[f"stage{i}.bias"] = _init(rng, fan_in, (w,), f"stage{i}.bias")
            fan_in = w
        for i, w in enumerate(self.stage_widths):
            self.params[f"lateral{i}.weight"] = _init(rng, w, (w, d_f), f"lateral{i}.weight")

    @property
    def num_stages(self) -> int:
        return len(self.stage_widths)

    def __call__(self, x: Tensor) -> Tensor:
        _check_width("extract_features", x, self.d_in)
        out = None
        h = x
        for i in range(self.num_stages):
            h = ag.relu(h @ self.params[f"stage{i}.weight"] + self.params[f"stage{i}.bias"])
            lat = h @ self.params[f"lateral{i}.weight"]
            out = lat if out is None else out + lat
        return out


class ClassifierHead(Module):
    def __init__(self, d_f: int, num_classes: int, rng: np.random.Generator | None = None):
        super().__init__()
        if num_classes < 2:
            raise ValueError("classifier needs at least 2 classes")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_f, self.num_classes = d_f, num_classes
        self.params["weight"] = _init(rng, d_f, (d_f, num_classes), "head.weight")
        self.params["bias"] = _init(rng, d_f, (num_classes,), "head.bias")

    def __call__(self, f: Tensor) -> Tensor:
        _check_width("classify", f, self.d_f)
        return f @ self.params["weight"] + self.params["bias"]


class DomainDiscriminator(Module):
    def __init__(self, in_dim: int, hidden: int = 256, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.hidden = in_dim, hidden
        self.params["fc1.weight"] = _init(rng, in_dim, (in_dim, hidden), "disc.fc1.weight")
        self.params["fc1.bias"] = _init(rng, in_dim, (hidden,), "disc.fc1.bias")
        self.params["fc2.weight"] = _init(rng, hidden, (hidden, 1), "disc.fc2.weight")
        self.params["fc2.bias"] = _init(rng, hidden, (1,), "disc.fc2.bias")

    def __call__(self, h: Tensor) -> Tensor:
        """Source-domain probabilities, shape ``(b,)``, clamped away from 0 and 1."""
        _check_width("discriminate", h, self.in_dim)
        p = self.params
        z = ag.relu(h @ p["fc1.weight"] + p["fc1.bias"]) @ p["fc2.weight"] + p["fc2.bias"]
        prob = ag.clamp(ag.sigmoid(z), PROB_EPS, 1.0 - PROB_EPS)
        return ag.reshape(prob, (h.shape[0],))


def grad_reverse(x: Tensor, coefficient: float) -> Tensor:
    """Identity forward; backward multiplies the upstream gradient by ``-coefficient``."""
    if coefficient < 0:
        raise ValueError(f"grad_reverse: coefficient must be >= 0, got {coefficient}")
    c = float(coefficient)
    return ag.custom_op("grad_reverse", (x,), x.data.copy(), lambda g: (-c * g,))


def extract_features(model: PyramidExtractor, x: Tensor) -> Tensor:
    return model(x)


def classify(head: ClassifierHead, f: Tensor) -> Tensor:
    return head(f)


def discriminate(disc: DomainDiscriminator, conditioned: Tensor) -> Tensor:
    return disc(conditioned)


class IdalNetwork:
    """Feature extractor + classifier + conditioned discriminator, built from one seed.

    Parameter names are prefixed ``extractor.``, ``head.`` and ``disc.``;
    the order of :meth:`parameters` is stable and is the checkpoint order.
    """

    def __init__(self, d_in: int, num_classes: int, stage_widths=(64, 48, 32), d_f: int = 32,
                 conditioning: str | None = None, disc_hidden: int = 256,
                 random_dim: int = 1024, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.extractor = PyramidExtractor(d_in, stage_widths, d_f, rng)
        self.head = ClassifierHead(d_f, num_classes, rng)
        kind = conditioning or ConditioningMap.default_kind(d_f, num_classes)
        self.cmap = ConditioningMap.create(kind, d_f, num_classes, random_dim,
                                           seed=int(rng.integers(2**31)))
        self.discriminator = DomainDiscriminator(self.cmap.output_dim, disc_hidden, rng)
        self.arch = dict(d_in=d_in, num_classes=num_classes, stage_widths=list(stage_widths),
                         d_f=d_f, conditioning=kind, disc_hidden=disc_hidden,
                         random_dim=random_dim, seed=seed)

    @property
    def num_classes(self) -> int:
        return self.head.num_classes

    def parameters(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        out.update(self.extractor.parameters("extractor."))
        out.update(self.head.parameters("head."))
        out.update(self.discriminator.parameters("disc."))
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def forward(self, x: Tensor):
        """Features and logits."""
        f = self.extractor(x)
        return f, self.head(f)

    def domain_probs(self, f: Tensor, logits: Tensor, reverse_coeff: float) -> Tensor:
        g = ag.softmax_rows(logits)
        h = grad_reverse(condition(self.cmap, f, g), reverse_coeff)
        return self.discriminator(h)

    def predict_proba(self, x: np.ndarray, chunk: int = 4096) -> np.ndarray:
        with ag.no_grad():
            rows = [ag.softmax_rows(self.forward(Tensor(x[i:i + chunk]))[1]).data
                    for i in range(0, len(x), chunk)]
        return np.concatenate(rows) if rows else np.zeros((0, self.num_classes))

    def features(self, x: np.ndarray) -> np.ndarray:
        with ag.no_grad():
            return self.extractor(Tensor(x)).data
