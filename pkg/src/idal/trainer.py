"""Training loop: AdamW, adversarial ramp, pseudo labels, metrics and checkpoints."""

from __future__ import annotations

import json
import math
import os
import tempfile
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import Dataset, paired_batches
from .errors import CheckpointError, ConfigError, NumericError
from .losses import (KernelSpec, LossWeights, TERMS, cross_entropy, discriminator_bce,
                     info_max_loss, mcc_loss, mmd_loss, plmmd_loss, plmmd_weights, total_loss)
from .models import IdalNetwork

CHECKPOINT_FORMAT = "idal-checkpoint"
CHECKPOINT_VERSION = 1
METRICS_FORMAT = "idal-metrics"


# -- configuration ------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    loss_weights: LossWeights = field(default_factory=LossWeights)
    learning_rate: float = 1e-3
    weight_decay: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 64
    pseudo_label_warmup_epochs: int = 2
    pseudo_label_confidence: float = 0.8
    pseudo_label_refresh: str = "epoch"
    mcc_temperature: float = 2.5
    conditioning: str | None = None
    kernel: KernelSpec = field(default_factory=KernelSpec)
    stage_widths: tuple = (64, 48, 32)
    feature_dim: int = 32
    disc_hidden: int = 256
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not 0 <= self.pseudo_label_confidence <= 1:
            raise ConfigError("pseudo_label_confidence (tau) must lie in [0, 1]")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.pseudo_label_warmup_epochs < 0:
            raise ConfigError("pseudo_label_warmup_epochs must be >= 0")
        if self.pseudo_label_refresh not in ("epoch", "step"):
            raise ConfigError("pseudo_label_refresh must be 'epoch' or 'step'")
        if self.conditioning not in (None, "concat", "multilinear", "randomized"):
            raise ConfigError(f"unknown conditioning {self.conditioning!r}")
        if not 0 <= self.adam_beta1 < 1 or not 0 <= self.adam_beta2 < 1:
            raise ConfigError("adam betas must lie in [0, 1)")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["stage_widths"] = list(self.stage_widths)
        out["kernel"]["multipliers"] = list(self.kernel.multipliers)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if isinstance(d.get("loss_weights"), dict):
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        if isinstance(d.get("kernel"), dict):
            d["kernel"] = KernelSpec(**d["kernel"])
        return cls(**d)


def _benchmark_preset(beta, gamma, delta, eta) -> TrainConfig:
    return TrainConfig(loss_weights=LossWeights(1.0, beta, gamma, delta, eta),
                       learning_rate=1e-5, weight_decay=1e-3, batch_size=32, epochs=50)


PRESETS: dict[str, TrainConfig] = {
    "office31": _benchmark_preset(0.05, 0.1, 0.15, 0.15),
    "officehome": _benchmark_preset(0.05, 0.21, 0.25, 0.25),
    "visda": _benchmark_preset(0.05, 0.3, 0.25, 0.25),
    "domainnet": _benchmark_preset(0.05, 0.01, 0.2, 0.25),
    "desk-default": TrainConfig(loss_weights=LossWeights(1.0, 0.1, 0.3, 0.5, 0.5)),
}


# -- optimizer -----------------------------------------------------------------------

class AdamW:
    """AdamW with bias correction and decoupled weight decay, keyed by parameter name."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-3):
        self.lr, self.beta1, self.beta2 = lr, beta1, beta2
        self.eps, self.weight_decay = eps, weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(self, params: dict[str, Tensor]):
        for name, p in params.items():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NumericError(f"non-finite gradient for parameter {name}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            if m.shape != p.data.shape:
                raise NumericError(f"optimizer state shape mismatch for {name}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adamw_step(params: dict[str, Tensor], state: AdamW):
    state.step(params)
    return params, state


# -- schedules and pseudo labels ----------------------------------------------------------

def lambda_schedule(progress: float, lambda_max: float) -> float:
    if not 0.0 <= progress <= 1.0:
        warnings.warn(f"lambda_schedule: progress {progress} outside [0, 1], clamping",
                      RuntimeWarning, stacklevel=2)
        progress = min(max(progress, 0.0), 1.0)
    return lambda_max * (2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0)


@dataclass
class PseudoLabelState:
    predicted: np.ndarray
    confidence: np.ndarray
    accepted: np.ndarray

    @property
    def acceptance_rate(self) -> float:
        return float(self.accepted.mean()) if self.accepted.size else 0.0

    def onehot(self, num_classes: int, indices=None) -> np.ndarray:
        """Rows for PLMMD: one-hot for accepted samples, zero for rejected."""
        pred, acc = self.predicted, self.accepted
        if indices is not None:
            pred, acc = pred[indices], acc[indices]
        out = np.zeros((len(pred), num_classes))
        out[np.flatnonzero(acc), pred[acc]] = 1.0
        return out


def update_pseudo_labels(target_probs, epoch: int, config: TrainConfig) -> PseudoLabelState:
    P = np.asarray(target_probs.data if isinstance(target_probs, Tensor) else target_probs)
    predicted = P.argmax(axis=1)
    confidence = P.max(axis=1)
    live = epoch >= config.pseudo_label_warmup_epochs
    accepted = (confidence >= config.pseudo_label_confidence) & live
    return PseudoLabelState(predicted, confidence, accepted)


# -- evaluation -------------------------------------------------------------------------

def evaluate(net: IdalNetwork, dataset: Dataset):
    """Overall accuracy and per-class accuracy (``None`` for absent classes)."""
    if dataset.eval_labels is None:
        raise ConfigError(f"{dataset.domain} dataset has no evaluation labels")
    pred = net.predict_proba(dataset.features).argmax(axis=1)
    return accuracy_report(pred, dataset.eval_labels, dataset.num_classes)


def accuracy_report(pred, truth, num_classes: int):
    pred, truth = np.asarray(pred), np.asarray(truth)
    if len(truth) == 0:
        raise ConfigError("cannot score an empty dataset")
    correct = pred == truth
    per_class = []
    for c in range(num_classes):
        mask = truth == c
        per_class.append(float(correct[mask].mean()) if mask.any() else None)
    return float(correct.mean()), per_class


def proxy_a_distance(disc_accuracy: float) -> float:
    return 2.0 * (2.0 * disc_accuracy - 1.0)


def domain_separability(fs: np.ndarray, ft: np.ndarray, seed: int = 0, ridge: float = 1e-3) -> float:
    """Held-out accuracy of a ridge linear domain classifier (half train, half test)."""
    X = np.concatenate([fs, ft])
    y = np.concatenate([np.ones(len(fs)), -np.ones(len(ft))])
    order = np.random.default_rng([seed, 7]).permutation(len(X))
    half = len(X) // 2
    tr, te = order[:half], order[half:]
    if len(tr) == 0 or len(te) == 0:
        return 0.5
    mu, sd = X[tr].mean(0), X[tr].std(0) + 1e-12
    A = np.hstack([(X - mu) / sd, np.ones((len(X), 1))])
    w = np.linalg.solve(A[tr].T @ A[tr] + ridge * np.eye(A.shape[1]), A[tr].T @ y[tr])
    return float(((A[te] @ w >= 0) == (y[te] > 0)).mean())


@dataclass
class MetricsRecord:
    epoch: int
    loss_clc: float
    loss_dis: float
    loss_im: float
    loss_mcc: float
    loss_mmd: float
    loss_plmmd: float
    lambda_eff: float
    source_accuracy: float
    target_accuracy: float
    per_class_target_accuracy: list
    pseudo_label_acceptance_rate: float
    proxy_a_distance: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), allow_nan=False)


METRIC_FIELDS = [f.name for f in fields(MetricsRecord)]


# -- training --------------------------------------------------------------------------

def build_network(config: TrainConfig, d_in: int, num_classes: int) -> IdalNetwork:
    return IdalNetwork(d_in, num_classes, config.stage_widths, config.feature_dim,
                       config.conditioning, config.disc_hidden, seed=config.seed)


def _step_loss(net: IdalNetwork, config: TrainConfig, xs, ys, xt, lambda_eff: float,
               target_pseudo: np.ndarray | None):
    w = config.loss_weights
    K = net.num_classes
    fs, ls = net.forward(Tensor(xs))
    ft, lt = net.forward(Tensor(xt))
    clc = cross_entropy(ls, ys)

    d_s = net.domain_probs(fs, ls, lambda_eff)
    d_t = net.domain_probs(ft, lt, lambda_eff)
    dis = discriminator_bce(d_s, d_t)

    terms = {"im": 0.0, "mcc": 0.0, "mmd": 0.0, "plmmd": 0.0}
    if w.beta:
        terms["im"] = info_max_loss(ag.softmax_rows(lt))
    if w.gamma:
        terms["mcc"] = mcc_loss(lt, config.mcc_temperature)
    if w.delta:
        terms["mmd"] = mmd_loss(fs, ft, config.kernel)
    if w.eta and target_pseudo is not None:
        onehot_s = np.zeros((len(ys), K))
        onehot_s[np.arange(len(ys)), ys] = 1.0
        pw = plmmd_weights(onehot_s, target_pseudo)
        terms["plmmd"] = plmmd_loss(fs, ft, pw, config.kernel)
    return total_loss(clc, terms["im"], terms["mcc"], terms["mmd"], terms["plmmd"],
                      weights=w, dis=dis)


def train_step(net: IdalNetwork, opt: AdamW, config: TrainConfig, xs, ys, xt,
               lambda_eff: float, target_pseudo: np.ndarray | None) -> dict:
    """One forward/backward over a (source, target) batch pair and one AdamW update.

    ``target_pseudo`` holds the PLMMD rows for the target batch (one-hot for
    accepted samples, zero otherwise); ``None`` means nothing accepted.
    Returns the per-term loss values.
    """
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            loss, breakdown = _step_loss(net, config, xs, ys, xt, lambda_eff, target_pseudo)
    except NumericError:
        ag.current_tape().clear()
        raise
    net.zero_grad()
    ag.backward(loss)
    opt.step(net.parameters())
    return breakdown


class Trainer:
    """Owns the network, the optimizer and the epoch counter for one run.

    The target dataset's evaluation labels are only read by :meth:`metrics`;
    the training path sees an unlabeled view.
    """

    def __init__(self, config: TrainConfig, source: Dataset, target: Dataset,
                 net: IdalNetwork | None = None, opt: AdamW | None = None,
                 epochs_completed: int = 0):
        if source.dim != target.dim or source.num_classes != target.num_classes:
            raise ConfigError("source and target datasets disagree on d or K")
        self.config = config
        self.source = source
        self._target_train = Dataset(target.features, np.full(len(target), -1), "target",
                                     target.num_classes)
        self._target_eval = target
        self.net = net or build_network(config, source.dim, source.num_classes)
        self.opt = opt or AdamW(config.learning_rate, config.adam_beta1, config.adam_beta2,
                                config.adam_eps, config.weight_decay)
        self.epochs_completed = epochs_completed
        self.pseudo: PseudoLabelState | None = None

    @property
    def steps_per_epoch(self) -> int:
        b = self.config.batch_size
        return max(math.ceil(len(self.source) / b), math.ceil(len(self._target_train) / b))

    def _refresh_pseudo(self, epoch: int, probs=None):
        if probs is None:
            probs = self.net.predict_proba(self._target_train.features)
        self.pseudo = update_pseudo_labels(probs, epoch, self.config)

    def run_epoch(self) -> MetricsRecord:
        cfg = self.config
        epoch = self.epochs_completed
        total_steps = max(1, cfg.epochs * self.steps_per_epoch)
        use_plmmd = cfg.loss_weights.eta > 0
        if use_plmmd and cfg.pseudo_label_refresh == "epoch":
            self._refresh_pseudo(epoch)
        sums = dict.fromkeys(TERMS, 0.0)
        n_steps = 0
        lam = 0.0
        for step, (sb, tb) in enumerate(paired_batches(self.source, self._target_train,
                                                       cfg.batch_size, cfg.seed, epoch)):
            global_step = epoch * self.steps_per_epoch + step
            lam = lambda_schedule(min(1.0, global_step / total_steps), cfg.loss_weights.lambda_adv)
            pseudo_rows = None
            if use_plmmd:
                if cfg.pseudo_label_refresh == "step":
                    st = update_pseudo_labels(self.net.predict_proba(tb.features), epoch, cfg)
                    rows = st.onehot(self.net.num_classes)
                else:
                    rows = self.pseudo.onehot(self.net.num_classes, tb.indices)
                pseudo_rows = rows if rows.any() else None
            parts = train_step(self.net, self.opt, cfg, sb.features, sb.labels, tb.features,
                               lam, pseudo_rows)
            for k, v in parts.items():
                sums[k] += v
            n_steps += 1
        self.epochs_completed += 1
        means = {k: v / max(n_steps, 1) for k, v in sums.items()}
        return self.metrics(epoch, means, lam)

    def metrics(self, epoch: int, losses: dict, lam: float) -> MetricsRecord:
        src_acc, _ = evaluate(self.net, self.source)
        tgt_acc, per_class = evaluate(self.net, self._target_eval)
        probs = self.net.predict_proba(self._target_train.features)
        accept = update_pseudo_labels(probs, epoch, self.config).acceptance_rate
        eps_hat = domain_separability(self.net.features(self.source.features),
                                      self.net.features(self._target_train.features),
                                      seed=self.config.seed)
        return MetricsRecord(
            epoch=epoch, **{f"loss_{k}": float(losses.get(k, 0.0)) for k in TERMS},
            lambda_eff=float(lam), source_accuracy=src_acc, target_accuracy=tgt_acc,
            per_class_target_accuracy=per_class, pseudo_label_acceptance_rate=accept,
            proxy_a_distance=proxy_a_distance(eps_hat))

    def fit(self, epochs: int | None = None, metrics_path=None,
            on_epoch: Callable[[MetricsRecord], None] | None = None) -> list[MetricsRecord]:
        """Run until ``epochs`` (default: config.epochs) epochs are completed overall."""
        target_epochs = self.config.epochs if epochs is None else epochs
        records = []
        fh = None
        if metrics_path is not None:
            metrics_path = Path(metrics_path)
            fresh = self.epochs_completed == 0 or not metrics_path.exists()
            fh = open(metrics_path, "w" if fresh else "a", encoding="utf-8", newline="\n")
            if fresh:
                fh.write(metrics_header(self.config) + "\n")
                fh.flush()
        try:
            while self.epochs_completed < target_epochs:
                rec = self.run_epoch()
                records.append(rec)
                if fh:
                    fh.write(rec.to_json() + "\n")
                    fh.flush()
                if on_epoch:
                    on_epoch(rec)
        finally:
            if fh:
                fh.close()
        return records


def metrics_header(config: TrainConfig) -> str:
    return json.dumps({"format": METRICS_FORMAT, "version": 1, "fields": METRIC_FIELDS,
                       "config": config.to_dict()}, sort_keys=True)


# -- checkpoints -------------------------------------------------------------------------

def save_checkpoint(trainer: Trainer, path) -> Path:
    """Write ``manifest.json`` + ``params.bin`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    net, opt = trainer.net, trainer.opt
    entries, blobs, offset = [], [], 0

    def add(name, arr):
        nonlocal offset
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset,
                        "length": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes

    params = net.parameters()
    for name, p in params.items():
        add(name, p.data)
    for name in params:
        if name in opt.m:
            add(f"adam.m.{name}", opt.m[name])
            add(f"adam.v.{name}", opt.v[name])
    manifest = {
        "format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
        "arch": net.arch, "config": trainer.config.to_dict(),
        "optimizer": {"step": opt.step_count, "lr": opt.lr, "beta1": opt.beta1,
                      "beta2": opt.beta2, "eps": opt.eps, "weight_decay": opt.weight_decay},
        "seed_state": {"seed": trainer.config.seed, "epochs_completed": trainer.epochs_completed},
        "total_bytes": offset, "entries": entries,
    }
    _atomic_write(path / "params.bin", b"".join(blobs))
    _atomic_write(path / "manifest.json", json.dumps(manifest, indent=2).encode())
    return path


def _atomic_write(target: Path, payload: bytes):
    fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=target.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    """Returns ``(net, opt, manifest)``; nothing is constructed unless the blob validates."""
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
        blob = (path / "params.bin").read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint file missing: {exc.filename}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("not an idal checkpoint")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')}")
    entries = manifest["entries"]
    expected = sum(e["length"] for e in entries)
    if len(blob) != expected or manifest.get("total_bytes") != expected:
        raise CheckpointError(f"params.bin holds {len(blob)} bytes, manifest expects {expected}")
    arrays = {}
    for e in entries:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        if e["length"] != 8 * n or e["offset"] + e["length"] > len(blob):
            raise CheckpointError(f"entry {e['name']} has inconsistent length/offset")
        arrays[e["name"]] = np.frombuffer(blob, dtype="<f8", count=n,
                                          offset=e["offset"]).reshape(e["shape"]).astype(np.float64)

    a = manifest["arch"]
    net = IdalNetwork(a["d_in"], a["num_classes"], a["stage_widths"], a["d_f"],
                      a["conditioning"], a["disc_hidden"], a["random_dim"], a["seed"])
    params = net.parameters()
    missing = [n for n in params if n not in arrays]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {missing}")
    for name, p in params.items():
        if arrays[name].shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {name}")
    for name, p in params.items():
        p.data = arrays[name].copy()
    o = manifest["optimizer"]
    opt = AdamW(o["lr"], o["beta1"], o["beta2"], o["eps"], o["weight_decay"])
    opt.step_count = o["step"]
    for name in params:
        if f"adam.m.{name}" in arrays:
            opt.m[name] = arrays[f"adam.m.{name}"].copy()
            opt.v[name] = arrays[f"adam.v.{name}"].copy()
    return net, opt, manifest


def resume_trainer(path, source: Dataset, target: Dataset, config: TrainConfig | None = None) -> Trainer:
    net, opt, manifest = load_checkpoint(path)
    cfg = config or TrainConfig.from_dict(manifest["config"])
    return Trainer(cfg, source, target, net=net, opt=opt,
                   epochs_completed=manifest["seed_state"]["epochs_completed"])


def with_weights(config: TrainConfig, **weights) -> TrainConfig:
    return replace(config, loss_weights=replace(config.loss_weights, **weights))
