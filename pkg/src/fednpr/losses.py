"""Balanced-softmax supervision, prototype regularisation, and their sum.

All losses are batch means and return analytic gradients with respect to
their direct inputs (logits or features). Prototypes are constants here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from .clustering import PrototypeBank, normalize_rows, normalize_rows_backward
from .errors import EmptyPriorError, LabelError, MissingPrototypeError


@dataclass(frozen=True)
class ClassPrior:
    pi: np.ndarray
    smoothing: float = 1.0

    @property
    def log_pi(self) -> np.ndarray:
        return np.log(self.pi)


@dataclass
class LossValue:
    total: float
    sup_term: float
    npr_term: float
    logit_grad: np.ndarray
    feature_grad: np.ndarray


def compute_class_prior(counts, smoothing: float = 1.0) -> ClassPrior:
    counts = np.asarray(counts, dtype=float)
    if np.any(counts < 0):
        raise ValueError("class counts must be non-negative")
    total = counts.sum() + smoothing * len(counts)
    if total <= 0:
        raise EmptyPriorError("no samples and no smoothing: class prior is undefined")
    pi = (counts + smoothing) / total
    if np.any(pi <= 0):
        raise EmptyPriorError("class prior has zero entries; use smoothing > 0 for locally absent classes")
    return ClassPrior(pi, smoothing)


def _check_labels(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelError(f"labels must lie in [0, {n_classes})")
    return labels.astype(int)


def balanced_softmax_loss(logits: np.ndarray, labels, prior: ClassPrior) -> tuple[float, np.ndarray]:
    """Cross-entropy on ``logits + log(pi)``; returns (loss, d loss / d logits)."""
    n, C = logits.shape
    labels = _check_labels(labels, C)
    shifted = logits + prior.log_pi[None, :]
    logp = log_softmax(shifted, axis=1)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def prototype_scores(Z: np.ndarray, bank: PrototypeBank) -> tuple[np.ndarray, np.ndarray, list[int]]:
    """Per-class best similarity ``max_k <z, p_ck>`` over classes present in the bank.

    Returns (scores (n, C_present), argmax column per class (n, C_present), classes).
    Ties resolve to the lowest prototype index.
    """
    classes = bank.present_classes()
    n = Z.shape[0]
    scores = np.empty((n, len(classes)))
    arg = np.empty((n, len(classes)), dtype=int)
    for j, c in enumerate(classes):
        sims = Z @ bank.prototypes[c]
        arg[:, j] = np.argmax(sims, axis=1)
        scores[:, j] = sims[np.arange(n), arg[:, j]]
    return scores, arg, classes


def npr_loss(Z: np.ndarray, labels, bank: PrototypeBank) -> tuple[float, np.ndarray]:
    """Softmax over per-class best prototype similarity; returns (loss, d loss / d Z).

    Z is expected to have unit rows. Classes without prototypes are left out of
    the denominator.
    """
    labels = _check_labels(labels, bank.n_classes)
    n = Z.shape[0]
    scores, arg, classes = prototype_scores(Z, bank)
    col_of = {c: j for j, c in enumerate(classes)}
    missing = sorted(set(labels.tolist()) - set(classes))
    if missing:
        raise MissingPrototypeError(f"labelled classes {missing} have no prototypes in this bank")
    target = np.array([col_of[int(y)] for y in labels], dtype=int)
    logp = log_softmax(scores, axis=1)
    loss = -logp[np.arange(n), target].mean()

    coef = np.exp(logp)
    coef[np.arange(n), target] -= 1.0
    coef /= n
    grad = np.zeros_like(Z)
    for j, c in enumerate(classes):
        grad += coef[:, j:j + 1] * bank.prototypes[c][:, arg[:, j]].T
    return float(loss), grad


def combined_loss(logits: np.ndarray, Z: np.ndarray, labels, prior: ClassPrior, bank: PrototypeBank | None,
                  lam: float, supervision: bool = True) -> LossValue:
    """``sup + lam * npr`` with gradients for logits and for the raw features.

    ``Z`` is the raw extractor output; it is normalised here and the NPR
    gradient is pulled back through the normalisation, so ``feature_grad`` can
    be handed straight to ``nn_core.backward``. ``supervision=False`` drops the
    balanced-softmax term (NPR-only training).
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if supervision:
        sup, logit_grad = balanced_softmax_loss(logits, labels, prior)
    else:
        _check_labels(labels, logits.shape[1])
        sup, logit_grad = 0.0, np.zeros_like(logits)

    if bank is None:
        return LossValue(sup, sup, 0.0, logit_grad, np.zeros_like(Z))
    U = normalize_rows(Z)
    npr, grad_unit = npr_loss(U, labels, bank)
    feature_grad = normalize_rows_backward(Z, lam * grad_unit)
    return LossValue(sup + lam * npr, sup, npr, logit_grad, feature_grad)
