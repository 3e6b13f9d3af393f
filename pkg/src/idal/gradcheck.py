"""Finite-difference verification of every loss term on seeded random batches."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor, grad_check
from .losses import (ConditioningMap, KernelSpec, condition, cross_entropy, discriminator_bce,
                     info_max_loss, mcc_loss, median_bandwidth, mmd_loss, plmmd_loss,
                     plmmd_weights)
from .models import DomainDiscriminator

LOSS_NAMES = ("clc", "dis", "im", "mcc", "mmd", "plmmd")
TOLERANCE = 1e-5


def _problems(seed: int, b: int = 8, d: int = 6, k: int = 4):
    rng = np.random.default_rng(seed)
    logits = rng.uniform(-2, 2, (b, k))
    labels = rng.integers(0, k, b)
    feats = rng.uniform(-2, 2, (2 * b, d))

    # frozen bandwidth: the default multi-kernel family around the batch's median distance
    sq = ((feats[:, None] - feats[None]) ** 2).sum(-1)
    kernel = KernelSpec(mode="fixed", bandwidth=median_bandwidth(sq))

    src_onehot = np.zeros((b, k))
    src_onehot[np.arange(b), np.arange(b) % k] = 1.0
    pseudo = np.zeros((b, k))
    accepted = rng.random(b) < 0.75
    pseudo[np.flatnonzero(accepted), rng.integers(0, k, b)[accepted]] = 1.0
    weights = plmmd_weights(src_onehot, pseudo)

    head_w = Tensor(rng.uniform(-1, 1, (d, k)))
    cmap = ConditioningMap.create("multilinear", d, k)
    disc = DomainDiscriminator(cmap.output_dim, hidden=16, rng=rng)

    def dis_fn(x):
        g = ag.softmax_rows(x @ head_w)
        p = disc(condition(cmap, x, g))
        return discriminator_bce(p[:b], p[b:])

    return {
        "clc": (lambda x: cross_entropy(x, labels), logits),
        "dis": (dis_fn, feats),
        "im": (lambda x: info_max_loss(ag.softmax_rows(x)), logits),
        "mcc": (lambda x: mcc_loss(x, 2.5), logits),
        "mmd": (lambda x: mmd_loss(x[:b], x[b:], kernel), feats),
        "plmmd": (lambda x: plmmd_loss(x[:b], x[b:], weights, kernel), feats),
    }


def run_gradchecks(seed: int = 0, losses=None, step: float = 1e-6):
    """``[(loss name, max relative error)]`` in the canonical order."""
    problems = _problems(seed)
    names = [n for n in LOSS_NAMES if losses is None or n in losses]
    return [(n, grad_check(problems[n][0], Tensor(problems[n][1]), step)) for n in names]
