"""Losses, gradients, optimizers and the epoch loop."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from qpvm.data import Dataset, batch_iter
from qpvm.model import PVMClassifier, ParameterStore, backward, forward, forward_tape, predict

PROB_CLAMP = 1e-12
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossBreakdown:
    bce: float
    par: float
    total: float


def _clamp(p):
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def bce_loss(probs, label) -> float:
    p = _clamp(np.asarray(probs, dtype=np.float64))
    y = np.asarray(label, dtype=np.float64)
    return float(-np.sum(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def par_loss(unused_mass) -> float:
    u = np.asarray(unused_mass, dtype=np.float64)
    if u.size == 0:
        return 0.0
    return float(-np.sum(np.log(1.0 - np.minimum(u, 1.0 - PROB_CLAMP))))


def _per_sample_terms(probs, onehot, unused):
    """Per-sample BCE and PAR plus their derivatives w.r.t. probs and unused mass."""
    p = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    inside = (probs > PROB_CLAMP) & (probs < 1.0 - PROB_CLAMP)
    bce = -np.sum(onehot * np.log(p) + (1.0 - onehot) * np.log(1.0 - p), axis=1)
    d_bce = np.where(inside, -onehot / p + (1.0 - onehot) / (1.0 - p), 0.0)
    # only log(1 - u) can diverge, so PAR needs the upper bound alone
    u = np.minimum(unused, 1.0 - PROB_CLAMP)
    inside_u = unused < 1.0 - PROB_CLAMP
    par = -np.sum(np.log(1.0 - u), axis=1)
    d_par = np.where(inside_u, 1.0 / (1.0 - u), 0.0)
    return bce, par, d_bce, d_par


def _breakdown(bce, par, regularize: bool) -> LossBreakdown:
    b = float(np.sum(bce) / bce.size)
    r = float(np.sum(par) / par.size)
    return LossBreakdown(b, r, b + r if regularize else b)


def _onehot(labels, num_classes):
    return np.eye(num_classes)[np.asarray(labels, dtype=np.int64)]


def batch_loss(
    model: PVMClassifier, store: ParameterStore, images, labels, regularize: bool = True,
    workers: int = 1,
) -> LossBreakdown:
    """Batch-mean BCE and PAR. With ``regularize=False`` the total omits PAR."""
    probs, unused = forward(images, model, store, workers=workers)
    bce, par, _, _ = _per_sample_terms(probs, _onehot(labels, model.config.num_classes), unused)
    return _breakdown(bce, par, regularize)


def loss_and_grad(
    model: PVMClassifier, store: ParameterStore, images, labels, regularize: bool = True,
    selected=None, workers: int = 1,
) -> tuple[LossBreakdown, np.ndarray, np.ndarray]:
    """Loss, shift-rule gradient and class probabilities for one batch."""
    tape = forward_tape(images, model, store, selected=selected, workers=workers)
    n = tape.probs.shape[0]
    bce, par, d_bce, d_par = _per_sample_terms(
        tape.probs, _onehot(labels, model.config.num_classes), tape.unused
    )
    g_unused = d_par / n if regularize else np.zeros_like(d_par)
    grad = backward(model, tape, d_bce / n, g_unused)
    return _breakdown(bce, par, regularize), grad, tape.probs


def parameter_shift_grad(
    model: PVMClassifier, store: ParameterStore, images, labels, indices=None,
    regularize: bool = True, workers: int = 1,
) -> np.ndarray:
    """Gradient of the batch loss from circuit-level parameter shifts.

    Every rotation angle's effect on its circuit's measured outputs is
    obtained by the shift rule; those per-circuit derivatives are combined
    with the classical derivative of the loss (and of the inter-layer
    re-encoding) by the chain rule. ``indices`` restricts the gradient to a
    parameter subset; other entries are zero.
    """
    selected = None
    if indices is not None:
        selected = np.zeros(model.num_params, dtype=bool)
        selected[np.asarray(indices, dtype=np.int64)] = True
    _, grad, _ = loss_and_grad(model, store, images, labels, regularize, selected, workers)
    return grad


def finite_diff_grad(loss: Callable[[np.ndarray], float], theta, eps: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss`` around ``theta``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.empty(theta.size)
    for m in range(theta.size):
        e = np.zeros(theta.size)
        e[m] = eps
        grad[m] = (loss(theta + e) - loss(theta - e)) / (2.0 * eps)
    return grad


def model_loss_fn(model, store, images, labels, regularize=True):
    """``theta -> total batch loss`` closure for :func:`finite_diff_grad`."""
    def loss(theta):
        return batch_loss(model, store.with_theta(theta), images, labels, regularize).total
    return loss


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 8e-3
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def optimizer_step(state: OptimizerState, theta, grad) -> tuple[np.ndarray, OptimizerState]:
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != theta.shape:
        raise TrainingError(f"gradient length {grad.size} != parameter count {theta.size}")
    bad = np.flatnonzero(~np.isfinite(grad))
    if bad.size:
        raise TrainingError(f"non-finite gradient at parameter indices {bad[:10].tolist()}")
    lr = state.learning_rate
    t = state.t + 1
    if state.kind == "sgd":
        return theta - lr * grad, OptimizerState("sgd", lr, t)
    m = np.zeros_like(theta) if state.m is None else state.m
    v = np.zeros_like(theta) if state.v is None else state.v
    m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * grad
    v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * grad * grad
    m_hat = m / (1.0 - ADAM_BETA1**t)
    v_hat = v / (1.0 - ADAM_BETA2**t)
    theta = theta - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return theta, OptimizerState("adam", lr, t, m, v)


@dataclass
class EpochMetrics:
    loss: float
    bce: float
    par: float
    accuracy: float
    steps: int
    wall_seconds: float


def gradient_subset(num_params: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    k = max(1, int(round(fraction * num_params)))
    return np.sort(rng.choice(num_params, size=k, replace=False))


def train_epoch(
    model: PVMClassifier,
    store: ParameterStore,
    dataset: Dataset,
    batch_size: int,
    opt_state: OptimizerState,
    epoch: int = 0,
    seed: int = 0,
    regularize: bool = True,
    grad_fraction: float | None = None,
    workers: int = 1,
) -> tuple[ParameterStore, OptimizerState, EpochMetrics]:
    """One pass over ``dataset``: shuffled batches, gradient, optimizer step.

    Batch order and any coordinate subsets derive from ``(seed, epoch)`` only,
    so an epoch can be replayed from a checkpoint. Reported loss and accuracy
    are running means over the batches, each measured before its update.
    """
    if len(dataset) == 0:
        raise TrainingError("empty training set")
    start = time.perf_counter()
    subset_rng = np.random.default_rng([seed, epoch, 1])
    losses, bces, pars, correct, steps = [], [], [], 0, 0
    for images, labels in batch_iter(dataset, batch_size, seed=seed, epoch=epoch, shuffle=True):
        sel = None
        if grad_fraction is not None and grad_fraction < 1.0:
            sel = np.zeros(model.num_params, dtype=bool)
            sel[gradient_subset(model.num_params, grad_fraction, subset_rng)] = True
        parts, grad, probs = loss_and_grad(model, store, images, labels, regularize, sel, workers)
        if not np.isfinite(parts.total):
            raise TrainingError(f"non-finite loss at epoch {epoch}, step {steps}")
        theta, opt_state = optimizer_step(opt_state, store.theta, grad)
        store = store.with_theta(theta)
        w = len(labels)
        losses.append(parts.total * w)
        bces.append(parts.bce * w)
        pars.append(parts.par * w)
        correct += int(np.sum(predict(probs) == labels))
        steps += 1
    n = len(dataset)
    metrics = EpochMetrics(
        loss=sum(losses) / n,
        bce=sum(bces) / n,
        par=sum(pars) / n,
        accuracy=correct / n,
        steps=steps,
        wall_seconds=time.perf_counter() - start,
    )
    return store, opt_state, metrics


@dataclass
class EvalResult:
    accuracy: float
    loss: float
    bce: float
    par: float
    unused_mass_mean: float
    predictions: np.ndarray
    confusion: np.ndarray
    per_class_accuracy: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "loss": self.loss,
            "bce": self.bce,
            "par": self.par,
            "unused_mass_mean": self.unused_mass_mean,
            "per_class_accuracy": self.per_class_accuracy,
            "confusion": self.confusion.tolist(),
        }


def evaluate(
    model: PVMClassifier, store: ParameterStore, dataset: Dataset, regularize: bool = True,
    workers: int = 1, batch_size: int = 1024,
) -> EvalResult:
    if len(dataset) == 0:
        raise TrainingError("cannot evaluate on an empty dataset")
    K = model.config.num_classes
    all_probs, all_unused = [], []
    for lo in range(0, len(dataset), batch_size):
        p, u = forward(dataset.images[lo : lo + batch_size], model, store, workers=workers)
        all_probs.append(p)
        all_unused.append(u)
    probs = np.concatenate(all_probs)
    unused = np.concatenate(all_unused)
    labels = dataset.labels
    bce, par, _, _ = _per_sample_terms(probs, _onehot(labels, K), unused)
    parts = _breakdown(bce, par, regularize)
    preds = predict(probs)
    confusion = np.zeros((K, K), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    support = confusion.sum(axis=1)
    per_class = [
        float(confusion[k, k] / support[k]) if support[k] else None for k in range(K)
    ]
    return EvalResult(
        accuracy=float(np.mean(preds == labels)),
        loss=parts.total,
        bce=parts.bce,
        par=parts.par,
        unused_mass_mean=float(np.sum(unused.sum(axis=1)) / len(labels)),
        predictions=preds,
        confusion=confusion,
        per_class_accuracy=per_class,
    )
