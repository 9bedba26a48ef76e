"""Small fully connected tanh networks, trained with Adam on a Minkowski/linear loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dynamics import wrap_angle

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, net: str = ""):
        super().__init__(f"non-finite loss in epoch {epoch} {net}".strip())
        self.epoch = epoch


@dataclass(frozen=True)
class MlpArchitecture:
    input_dim: int = 4
    hidden_layers: int = 3
    width: int = 50
    output_dim: int = 1

    def __post_init__(self):
        if min(self.input_dim, self.width, self.output_dim) < 1 or self.hidden_layers < 0:
            raise ValueError(f"inconsistent architecture {self}")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [self.width] * self.hidden_layers + [self.output_dim]


POLICY_ARCH = MlpArchitecture(hidden_layers=3, output_dim=1)
SENSITIVITY_ARCH = MlpArchitecture(hidden_layers=6, output_dim=5)


@dataclass
class Mlp:
    """Affine/tanh stack with input and output standardization.

    ``weights[i]`` has shape ``(n_out, n_in)``.  The last layer is linear.
    """

    weights: list
    biases: list
    in_mean: np.ndarray
    in_scale: np.ndarray
    out_mean: np.ndarray
    out_scale: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.in_scale) <= 0) or np.any(np.asarray(self.out_scale) <= 0):
            raise ValueError("normalizer scales must be positive")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> list:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, v) -> None:
        v = np.asarray(v, dtype=float)
        k = 0
        for p in self.params():
            p[...] = v[k: k + p.size].reshape(p.shape)
            k += p.size

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                   self.in_mean.copy(), self.in_scale.copy(), self.out_mean.copy(), self.out_scale.copy())

    def __call__(self, x) -> np.ndarray:
        return forward(self, x)


def init_mlp(arch: MlpArchitecture, seed=0) -> Mlp:
    """Xavier-uniform weights, zero biases, identity normalizers."""
    rng = np.random.default_rng(seed)
    sizes = arch.layer_sizes
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        a = np.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-a, a, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return Mlp(weights, biases, np.zeros(arch.input_dim), np.ones(arch.input_dim),
               np.zeros(arch.output_dim), np.ones(arch.output_dim))


def fit_normalizer(data, min_scale: float = 1e-12):
    data = np.atleast_2d(np.asarray(data, dtype=float))
    return data.mean(axis=0), np.maximum(data.std(axis=0), min_scale)


def _forward_normalized(net: Mlp, xn):
    """Hidden activations of every layer plus the linear output (normalized space)."""
    acts = [xn]
    h = xn
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        a = h @ W.T + b
        h = a if i == net.n_layers - 1 else np.tanh(a)
        acts.append(h)
    return acts


def forward(net: Mlp, x) -> np.ndarray:
    """Evaluate on one state ``(input_dim,)`` or a batch ``(n, input_dim)``.

    The caller is responsible for wrapping the angle.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xn = (np.atleast_2d(x) - net.in_mean) / net.in_scale
    out = _forward_normalized(net, xn)[-1] * net.out_scale + net.out_mean
    return out[0] if single else out


# ---------------------------------------------------------------- loss
@dataclass(frozen=True)
class TrainConfig:
    loss_lambda: float = 0.5
    minkowski_p: float = 4.0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    mirror: bool = False  # add the point-mirrored copy (-x, -u0, -sens) of every training record
    batch: int = 256
    epochs: int = 400
    val_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.loss_lambda <= 1.0:
            raise ValueError("loss_lambda must lie in [0, 1]")
        if self.minkowski_p < 1:
            raise ValueError("minkowski_p must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch < 1 or self.epochs < 0 or not 0.0 <= self.val_frac < 1.0:
            raise ValueError("invalid batch/epochs/val_frac")


# Settings used for the shipped controller: plain L1 loss on the mirrored training set.
# The default mixed loss fits the records about as well but gives a poor closed loop.
DEPLOY_TRAIN = TrainConfig(loss_lambda=1.0, mirror=True, epochs=2500, seed=0)


def loss(pred, target, cfg: TrainConfig = TrainConfig()) -> float:
    """``lam*mean|e| + (1-lam)*mean(|e|^p)/p`` over all batch entries and outputs."""
    e = np.abs(np.asarray(pred, dtype=float) - np.asarray(target, dtype=float))
    lam, p = cfg.loss_lambda, cfg.minkowski_p
    return float(lam * np.mean(e) + (1 - lam) * np.mean(e**p) / p)


def loss_grad(pred, target, cfg: TrainConfig = TrainConfig()) -> np.ndarray:
    e = np.asarray(pred, dtype=float) - np.asarray(target, dtype=float)
    lam, p = cfg.loss_lambda, cfg.minkowski_p
    return (lam * np.sign(e) + (1 - lam) * np.sign(e) * np.abs(e) ** (p - 1)) / e.size


def backprop(net: Mlp, xn, tn, cfg: TrainConfig = TrainConfig()):
    """Loss and parameter gradients in normalized coordinates."""
    acts = _forward_normalized(net, xn)
    val = loss(acts[-1], tn, cfg)
    delta = loss_grad(acts[-1], tn, cfg)
    gW = [None] * net.n_layers
    gb = [None] * net.n_layers
    for i in range(net.n_layers - 1, -1, -1):
        gW[i] = delta.T @ acts[i]
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ net.weights[i]) * (1.0 - acts[i] ** 2)
    return val, [g for pair in zip(gW, gb) for g in pair]


def _loss_extended(net: Mlp, params, xn, tn, cfg: TrainConfig):
    """Loss in extended precision for parameter arrays ordered like ``net.params()``."""
    h = xn.astype(np.longdouble)
    for i in range(net.n_layers):
        a = h @ params[2 * i].T + params[2 * i + 1]
        h = a if i == net.n_layers - 1 else np.tanh(a)
    e = np.abs(h - tn.astype(np.longdouble))
    lam, p = cfg.loss_lambda, cfg.minkowski_p
    return lam * np.mean(e) + (1 - lam) * np.mean(e**p) / p


def backprop_check(net: Mlp, batch, cfg: TrainConfig = TrainConfig(), n_params: int = 50,
                   h: float = 1e-6, seed=0) -> float:
    """Max relative error between backprop and central differences on random parameters.

    ``batch`` is ``(x, target)`` in raw units.  The differences are taken in extended
    precision: trained nets have gradients near 1e-8, where double-precision rounding
    of the loss alone exceeds the tolerance.
    """
    x, t = batch
    xn = (np.atleast_2d(x) - net.in_mean) / net.in_scale
    tn = (np.atleast_2d(t) - net.out_mean) / net.out_scale
    _, grads = backprop(net, xn, tn, cfg)
    g = np.concatenate([gg.ravel() for gg in grads])
    params = [p.astype(np.longdouble) for p in net.params()]
    offsets = np.cumsum([0] + [p.size for p in params])
    idx = np.random.default_rng(seed).choice(offsets[-1], size=min(n_params, offsets[-1]), replace=False)
    worst = 0.0
    for k in idx:
        j = np.searchsorted(offsets, k, side="right") - 1
        flat = params[j].reshape(-1)
        orig = flat[k - offsets[j]]
        flat[k - offsets[j]] = orig + h
        fp = _loss_extended(net, params, xn, tn, cfg)
        flat[k - offsets[j]] = orig - h
        fm = _loss_extended(net, params, xn, tn, cfg)
        flat[k - offsets[j]] = orig
        fd = float((fp - fm) / (2 * h))
        denom = max(abs(fd), abs(g[k]), 1e-8)
        worst = max(worst, abs(fd - g[k]) / denom)
    return worst


# ---------------------------------------------------------------- training
@dataclass
class FitReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_mae: np.ndarray | None = None  # per output, raw units
    val_rownorm_mae: float = np.nan  # mean ||pred - target||_2 over validation rows
    target_rownorm_std: float = np.nan  # rms distance of target rows to their mean


def fit(net: Mlp, x_train, t_train, x_val, t_val, cfg: TrainConfig, seed=0, name: str = "") -> FitReport:
    """Train ``net`` in place; normalizers are refit on the training split."""
    x_train = np.atleast_2d(np.asarray(x_train, dtype=float))
    t_train = np.asarray(t_train, dtype=float).reshape(len(x_train), -1)
    x_val = np.atleast_2d(np.asarray(x_val, dtype=float)).reshape(-1, x_train.shape[1])
    t_val = np.asarray(t_val, dtype=float).reshape(len(x_val), t_train.shape[1])
    net.in_mean, net.in_scale = fit_normalizer(x_train)
    net.out_mean, net.out_scale = fit_normalizer(t_train)
    xn = (x_train - net.in_mean) / net.in_scale
    tn = (t_train - net.out_mean) / net.out_scale
    xvn = (x_val - net.in_mean) / net.in_scale
    tvn = (t_val - net.out_mean) / net.out_scale

    rng = np.random.default_rng(seed)
    params = net.params()
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    step = 0
    report = FitReport()
    n = len(xn)
    for epoch in range(cfg.epochs):
        lr = cfg.lr * 0.5 * (1.0 + np.cos(np.pi * epoch / max(cfg.epochs, 1)))
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch):
            idx = perm[start: start + cfg.batch]
            val, grads = backprop(net, xn[idx], tn[idx], cfg)
            if not np.isfinite(val):
                raise TrainingDivergedError(epoch, name)
            total += val * len(idx)
            step += 1
            c1 = 1.0 - cfg.beta1**step
            c2 = 1.0 - cfg.beta2**step
            for p, g, mi, vi in zip(params, grads, m, v):
                mi *= cfg.beta1
                mi += (1 - cfg.beta1) * g
                vi *= cfg.beta2
                vi += (1 - cfg.beta2) * g * g
                if cfg.weight_decay:
                    p *= 1.0 - lr * cfg.weight_decay
                p -= lr * (mi / c1) / (np.sqrt(vi / c2) + cfg.eps)
        report.train_loss.append(total / n)
        if len(xvn):
            report.val_loss.append(loss(_forward_normalized(net, xvn)[-1], tvn, cfg))
        if not np.isfinite(report.train_loss[-1]):
            raise TrainingDivergedError(epoch, name)
        if epoch % 50 == 0 or epoch == cfg.epochs - 1:
            log.info("%s epoch %d train %.4g val %.4g", name, epoch, report.train_loss[-1],
                     report.val_loss[-1] if report.val_loss else np.nan)
    if len(x_val):
        err = forward(net, x_val) - t_val
        report.val_mae = np.mean(np.abs(err), axis=0)
        report.val_rownorm_mae = float(np.mean(np.linalg.norm(err, axis=1)))
        report.target_rownorm_std = float(np.sqrt(np.mean(np.sum((t_val - t_val.mean(0)) ** 2, axis=1))))
    else:
        report.val_mae = np.full(t_train.shape[1], np.nan)
    return report


@dataclass
class TrainReport:
    policy: FitReport
    sensitivity: FitReport
    n_train: int
    n_val: int


def train(dataset, cfg: TrainConfig = TrainConfig(), pi_arch: MlpArchitecture = POLICY_ARCH,
          grad_arch: MlpArchitecture = SENSITIVITY_ARCH):
    """Train the policy net on ``x -> u0`` and the sensitivity net on ``x -> sens``."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    tr, va = dataset.split(cfg.val_frac, cfg.seed)
    X, u0, sens = tr.X, tr.u0, tr.sens
    if cfg.mirror:
        # the optimal control problem is odd in (x, u), so u0 and its sensitivities are odd in x
        Xm = -X
        Xm[:, 2] = wrap_angle(Xm[:, 2])
        X, u0, sens = np.vstack([X, Xm]), np.concatenate([u0, -u0]), np.vstack([sens, -sens])
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    pi_nn = init_mlp(pi_arch, seeds[0])
    grad_nn = init_mlp(grad_arch, seeds[1])
    rep_pi = fit(pi_nn, X, u0, va.X, va.u0, cfg, seed=seeds[2], name="policy")
    rep_grad = fit(grad_nn, X, sens, va.X, va.sens, cfg, seed=seeds[3], name="sensitivity")
    return pi_nn, grad_nn, TrainReport(rep_pi, rep_grad, len(tr), len(va))


def save_nets(path, pi_nn: Mlp, grad_nn: Mlp) -> None:
    """Both networks in double precision as ``.npz``."""
    arrays = {}
    for tag, net in (("pi", pi_nn), ("grad", grad_nn)):
        for i, (W, b) in enumerate(zip(net.weights, net.biases)):
            arrays[f"{tag}_W{i}"] = W
            arrays[f"{tag}_b{i}"] = b
        for name in ("in_mean", "in_scale", "out_mean", "out_scale"):
            arrays[f"{tag}_{name}"] = getattr(net, name)
    np.savez(path, **arrays)


def load_nets(path) -> tuple[Mlp, Mlp]:
    with np.load(path) as data:
        nets = []
        for tag in ("pi", "grad"):
            n = sum(1 for k in data.files if k.startswith(f"{tag}_W"))
            nets.append(Mlp([data[f"{tag}_W{i}"] for i in range(n)], [data[f"{tag}_b{i}"] for i in range(n)],
                            *(data[f"{tag}_{k}"] for k in ("in_mean", "in_scale", "out_mean", "out_scale"))))
    return nets[0], nets[1]
