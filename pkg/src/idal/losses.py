"""Loss terms of the combined adaptation objective and discriminator conditioning maps.

All losses take and return :class:`~idal.autograd.Tensor` objects so they can
be composed and differentiated; label/weight arguments are plain arrays.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, NumericError, ShapeError

DEFAULT_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass(frozen=True)
class LossWeights:
    lambda_adv: float = 1.0
    beta: float = 0.0
    gamma: float = 0.0
    delta: float = 0.0
    eta: float = 0.0

    def __post_init__(self):
        for name in ("lambda_adv", "beta", "gamma", "delta", "eta"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"loss weight {name} must be finite and >= 0, got {v}")

    def scaled(self, factor: float) -> "LossWeights":
        """Every auxiliary weight (not lambda) multiplied by ``factor``."""
        return LossWeights(self.lambda_adv, self.beta * factor, self.gamma * factor,
                           self.delta * factor, self.eta * factor)


@dataclass(frozen=True)
class KernelSpec:
    """Sum of Gaussian kernels with bandwidths ``base * multiplier``.

    ``mode="median"`` sets ``base`` to the median pairwise distance of the
    pooled samples on every call; ``mode="fixed"`` uses ``bandwidth``.
    """

    mode: str = "median"
    bandwidth: float = 1.0
    multipliers: tuple = DEFAULT_MULTIPLIERS

    def __post_init__(self):
        if self.mode not in ("median", "fixed"):
            raise ConfigError(f"kernel mode must be 'median' or 'fixed', got {self.mode!r}")
        if not self.multipliers or any(m <= 0 for m in self.multipliers):
            raise ConfigError("kernel multipliers must be a non-empty list of positive reals")
        if not self.bandwidth > 0:
            raise ConfigError("fixed bandwidth must be positive")
        object.__setattr__(self, "multipliers", tuple(float(m) for m in self.multipliers))

    @property
    def count(self) -> int:
        return len(self.multipliers)

    @classmethod
    def single(cls, sigma: float) -> "KernelSpec":
        return cls(mode="fixed", bandwidth=sigma, multipliers=(1.0,))


# -- supervised / adversarial -------------------------------------------------

def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ConfigError(f"cross_entropy: labels must lie in [0, {k}), got "
                          f"[{labels.min()}, {labels.max()}]")
    onehot = np.zeros((b, k))
    onehot[np.arange(b), labels] = 1.0
    return -(ag.log_softmax_rows(logits) * onehot).sum() * (1.0 / b)


def discriminator_bce(d_source: Tensor, d_target: Tensor) -> Tensor:
    """Source labeled 1, target labeled 0; probabilities are clamped inside the logs."""
    if d_source.size == 0 or d_target.size == 0:
        raise ShapeError("discriminator_bce", d_source.shape, d_target.shape,
                         detail="empty batch")
    return -ag.log(d_source).mean() - ag.log(1.0 - d_target).mean()


# -- target-side regularizers ---------------------------------------------------

def _check_stochastic(op, probs: Tensor, tol=1e-6):
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ShapeError(op, probs.shape, detail="expected a non-empty n x K matrix")
    dev = np.abs(probs.data.sum(axis=1) - 1.0).max()
    if dev > tol:
        raise NumericError(f"{op}: rows must sum to 1 (max deviation {dev:.3g})")


def info_max_loss(target_probs: Tensor) -> Tensor:
    """Negative mutual information between inputs and predicted labels.

    ``mean row entropy - entropy of the mean row``; minimizing it favours
    confident per-sample predictions with a balanced marginal.
    """
    _check_stochastic("info_max_loss", target_probs)
    n = target_probs.shape[0]
    marginal = target_probs.mean(axis=0)
    marginal_entropy = -(marginal * ag.log(marginal)).sum()
    mean_entropy = -(target_probs * ag.log(target_probs)).sum() * (1.0 / n)
    return mean_entropy - marginal_entropy


def mcc_loss(target_logits: Tensor, temperature: float = 2.5) -> Tensor:
    if temperature <= 0:
        raise ConfigError(f"mcc_loss: temperature must be > 0, got {temperature}")
    b, c = target_logits.shape
    if b < 1 or c < 2:
        raise ShapeError("mcc_loss", target_logits.shape, detail="need b >= 1, c >= 2")
    probs = ag.softmax_rows(target_logits * (1.0 / temperature))
    entropy = -(probs * ag.log(probs)).sum(axis=1)
    # certainty weights: b * softmax(-entropy) over the batch
    weights = ag.softmax_rows(ag.reshape(-entropy, (1, b))) * float(b)
    confusion = (probs * ag.reshape(weights, (b, 1))).T @ probs
    confusion = confusion / ag.clamp(confusion.sum(axis=1, keepdims=True), lo=1e-12)
    off_diag = 1.0 - np.eye(c)
    return (ag.abs(confusion) * off_diag).sum() * (1.0 / c)


# -- kernel two-sample terms ------------------------------------------------------

def median_bandwidth(sq_dist: np.ndarray) -> float:
    """Median Euclidean distance over distinct pairs; 1.0 (with a warning) if zero."""
    n = sq_dist.shape[0]
    iu = np.triu_indices(n, k=1)
    pairs = sq_dist[iu] if len(iu[0]) else sq_dist.reshape(-1)
    med = float(np.median(np.sqrt(pairs))) if pairs.size else 0.0
    if not med > 0:
        warnings.warn("median pairwise distance is zero; falling back to bandwidth 1.0",
                      RuntimeWarning, stacklevel=3)
        return 1.0
    return med


def _kernel_from_sq(sq: Tensor, base: float, spec: KernelSpec) -> Tensor:
    total = None
    for m in spec.multipliers:
        sigma = base * m
        term = ag.exp(sq * (-1.0 / (2.0 * sigma * sigma)))
        total = term if total is None else total + term
    return total


def resolve_bandwidth(pooled_sq: np.ndarray, spec: KernelSpec) -> float:
    return median_bandwidth(pooled_sq) if spec.mode == "median" else spec.bandwidth


def gaussian_kernel_matrix(X: Tensor, Y: Tensor, spec: KernelSpec) -> Tensor:
    if X.ndim != 2 or Y.ndim != 2 or X.shape[1] != Y.shape[1]:
        raise ShapeError("gaussian_kernel_matrix", X.shape, Y.shape)
    sq = ag.sq_dists(X, Y)
    if spec.mode == "median":
        with ag.no_grad():
            Z = Tensor(np.concatenate([X.data, Y.data]) if X is not Y else X.data)
            base = median_bandwidth(ag.sq_dists(Z, Z).data)
    else:
        base = spec.bandwidth
    return _kernel_from_sq(sq, base, spec)


def pooled_kernels(source: Tensor, target: Tensor, spec: KernelSpec):
    """Kernel blocks (K_ss, K_st, K_tt) sharing one bandwidth from the pooled batch."""
    bs, bt = source.shape[0], target.shape[0]
    if bs == 0 or bt == 0:
        raise ShapeError("mmd", source.shape, target.shape, detail="empty batch")
    if source.ndim != 2 or target.ndim != 2 or source.shape[1] != target.shape[1]:
        raise ShapeError("mmd", source.shape, target.shape)
    pooled = ag.concat([source, target], axis=0)
    sq = ag.sq_dists(pooled, pooled)
    K = _kernel_from_sq(sq, resolve_bandwidth(sq.data, spec), spec)
    return K[:bs, :bs], K[:bs, bs:], K[bs:, bs:]


def mmd_loss(source_feats: Tensor, target_feats: Tensor, spec: KernelSpec) -> Tensor:
    """Biased (V-statistic) squared MMD."""
    kss, kst, ktt = pooled_kernels(source_feats, target_feats, spec)
    return kss.mean() + ktt.mean() - 2.0 * kst.mean()


@dataclass
class PlmmdWeights:
    w_xx: np.ndarray
    w_xy: np.ndarray
    w_yy: np.ndarray
    common_class_count: int = 0


def plmmd_weights(source_labels, target_pseudo) -> PlmmdWeights:
    """Class-normalized instance weights for the pseudo-label MMD.

    ``source_labels`` is ``b_s x K`` one-hot; ``target_pseudo`` is ``b_t x K``
    with rejected rows all zero.  Each class column is normalized to unit
    mass; only classes with mass in both domains contribute and the outer
    products are averaged over those classes.
    """
    S = np.asarray(source_labels, dtype=np.float64)
    T = np.asarray(target_pseudo, dtype=np.float64)
    bs, bt = S.shape[0], T.shape[0]
    w_xx, w_xy, w_yy = np.zeros((bs, bs)), np.zeros((bs, bt)), np.zeros((bt, bt))
    s_mass, t_mass = S.sum(axis=0), T.sum(axis=0)
    common = np.flatnonzero((s_mass > 0) & (t_mass > 0))
    for c in common:
        u = S[:, c] / s_mass[c]
        v = T[:, c] / t_mass[c]
        w_xx += np.outer(u, u)
        w_xy += np.outer(u, v)
        w_yy += np.outer(v, v)
    if len(common):
        w_xx /= len(common)
        w_xy /= len(common)
        w_yy /= len(common)
    return PlmmdWeights(w_xx, w_xy, w_yy, int(len(common)))


def plmmd_loss(source_feats: Tensor, target_feats: Tensor, weights: PlmmdWeights,
               spec: KernelSpec) -> Tensor:
    bs, bt = source_feats.shape[0], target_feats.shape[0]
    if (weights.w_xx.shape != (bs, bs) or weights.w_xy.shape != (bs, bt)
            or weights.w_yy.shape != (bt, bt)):
        raise ShapeError("plmmd_loss", weights.w_xy.shape, (bs, bt),
                         detail="weight matrices do not match batch sizes")
    if weights.common_class_count == 0:
        return Tensor(0.0)
    kss, kst, ktt = pooled_kernels(source_feats, target_feats, spec)
    return ((kss * weights.w_xx).sum() - 2.0 * (kst * weights.w_xy).sum()
            + (ktt * weights.w_yy).sum())


# -- conditioning -------------------------------------------------------------------

@dataclass
class ConditioningMap:
    """Maps the joint variable (features, predictions) to the discriminator input."""

    kind: str
    d_f: int
    d_g: int
    output_dim: int
    random_matrices: tuple | None = field(default=None, repr=False)

    @classmethod
    def create(cls, kind: str, d_f: int, d_g: int, output_dim: int = 1024,
               seed: int = 0) -> "ConditioningMap":
        if kind == "concat":
            return cls(kind, d_f, d_g, d_f + d_g)
        if kind == "multilinear":
            return cls(kind, d_f, d_g, d_f * d_g)
        if kind == "randomized":
            rng = np.random.default_rng(seed)
            rf = rng.standard_normal((d_f, output_dim))
            rg = rng.standard_normal((d_g, output_dim))
            rf.setflags(write=False)
            rg.setflags(write=False)
            return cls(kind, d_f, d_g, output_dim, (rf, rg))
        raise ConfigError(f"unknown conditioning kind {kind!r}")

    @staticmethod
    def default_kind(d_f: int, d_g: int) -> str:
        return "multilinear" if d_f * d_g <= 4096 else "randomized"


def condition(cmap: ConditioningMap, f: Tensor, g: Tensor) -> Tensor:
    if f.ndim != 2 or g.ndim != 2 or f.shape[0] != g.shape[0] \
            or f.shape[1] != cmap.d_f or g.shape[1] != cmap.d_g:
        raise ShapeError(f"condition[{cmap.kind}]", f.shape, g.shape,
                         detail=f"map expects d_f={cmap.d_f}, d_g={cmap.d_g}")
    b = f.shape[0]
    if cmap.kind == "concat":
        return ag.concat([f, g], axis=1)
    if cmap.kind == "multilinear":
        outer = ag.reshape(f, (b, cmap.d_f, 1)) * ag.reshape(g, (b, 1, cmap.d_g))
        return ag.reshape(outer, (b, cmap.d_f * cmap.d_g))
    rf, rg = cmap.random_matrices
    return (f @ rf) * (g @ rg) * (1.0 / math.sqrt(cmap.output_dim))


# -- combined objective -----------------------------------------------------------------

TERMS = ("clc", "dis", "im", "mcc", "mmd", "plmmd")


def total_loss(clc, im=0.0, mcc=0.0, mmd=0.0, plmmd=0.0, *, weights: LossWeights,
               dis=None):
    """Weighted sum of the loss terms and a per-term value breakdown.

    ``dis`` enters with coefficient 1: the discriminator minimizes it directly
    while a gradient-reversal node upstream of the discriminator hands the
    feature extractor and classifier ``-lambda`` times that gradient.
    """
    parts = {"clc": clc, "im": im, "mcc": mcc, "mmd": mmd, "plmmd": plmmd}
    if dis is not None:
        parts["dis"] = dis
    breakdown = {}
    for name, value in parts.items():
        v = value.item() if isinstance(value, Tensor) else float(value)
        if not math.isfinite(v):
            raise NumericError(f"loss term {name} is not finite ({v})", terms={name: v})
        breakdown[name] = v
    total = _as_loss(clc)
    for name, w in (("im", weights.beta), ("mcc", weights.gamma),
                    ("mmd", weights.delta), ("plmmd", weights.eta)):
        if w != 0.0:
            total = total + _as_loss(parts[name]) * w
    if dis is not None:
        total = total + _as_loss(dis)
    return total, breakdown


def _as_loss(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(float(v))
