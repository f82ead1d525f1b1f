"""Dense MLP split into a feature extractor and a linear classifier head.

Parameters live in a flat, ordered mapping keyed by parameter path::

    extractor.0.weight, extractor.0.bias, ..., classifier.weight, classifier.bias

Weights are stored as (in_features, out_features) so a layer is ``X @ W + b``.
Hidden extractor layers use ReLU; the last extractor layer (the feature
output) is linear. Everything is float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError

EXTRACTOR = "extractor"
CLASSIFIER = "classifier"


@dataclass
class ModelParams:
    tensors: dict[str, np.ndarray]

    @property
    def n_extractor_layers(self) -> int:
        return sum(1 for k in self.tensors if k.startswith(EXTRACTOR) and k.endswith(".weight"))

    def extractor_layer(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        return self.tensors[f"{EXTRACTOR}.{i}.weight"], self.tensors[f"{EXTRACTOR}.{i}.bias"]

    @property
    def classifier(self) -> tuple[np.ndarray, np.ndarray]:
        return self.tensors[f"{CLASSIFIER}.weight"], self.tensors[f"{CLASSIFIER}.bias"]

    @property
    def input_dim(self) -> int:
        return self.tensors[f"{EXTRACTOR}.0.weight"].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.tensors[f"{CLASSIFIER}.weight"].shape[0]

    @property
    def n_classes(self) -> int:
        return self.tensors[f"{CLASSIFIER}.weight"].shape[1]

    def extractor_keys(self) -> list[str]:
        return [k for k in self.tensors if k.startswith(EXTRACTOR + ".")]

    def classifier_keys(self) -> list[str]:
        return [k for k in self.tensors if k.startswith(CLASSIFIER + ".")]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams({k: np.zeros_like(v) for k, v in self.tensors.items()})

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.tensors.items()}

    def validate(self) -> None:
        prev = None
        for i in range(self.n_extractor_layers):
            w, b = self.extractor_layer(i)
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"extractor layer {i}: weight {w.shape} / bias {b.shape}")
            if prev is not None and w.shape[0] != prev:
                raise ShapeError(f"extractor layer {i} expects {w.shape[0]} inputs, previous layer gives {prev}")
            prev = w.shape[1]
        w, b = self.classifier
        if w.shape[0] != prev or b.shape != (w.shape[1],):
            raise ShapeError(f"classifier {w.shape} does not chain onto feature dim {prev}")


# Gradients share the parameter layout.
GradientSet = ModelParams


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: ModelParams, **kwargs) -> "AdamState":
        return cls(
            m={k: np.zeros_like(t) for k, t in params.tensors.items()},
            v={k: np.zeros_like(t) for k, t in params.tensors.items()},
            **kwargs,
        )

    def copy(self) -> "AdamState":
        return AdamState(
            {k: t.copy() for k, t in self.m.items()},
            {k: t.copy() for k, t in self.v.items()},
            self.step,
            self.beta1,
            self.beta2,
            self.eps,
        )


def init_params(input_dim: int, hidden: tuple[int, ...], feature_dim: int, n_classes: int,
                rng: np.random.Generator) -> ModelParams:
    """He-style uniform fan-in initialisation, zero biases."""
    sizes = [input_dim, *hidden, feature_dim]
    tensors: dict[str, np.ndarray] = {}

    def layer(fan_in, fan_out):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)

    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        tensors[f"{EXTRACTOR}.{i}.weight"], tensors[f"{EXTRACTOR}.{i}.bias"] = layer(a, b)
    tensors[f"{CLASSIFIER}.weight"], tensors[f"{CLASSIFIER}.bias"] = layer(feature_dim, n_classes)
    return ModelParams(tensors)


def _check_2d(X: np.ndarray, cols: int, what: str) -> None:
    if X.ndim != 2 or X.shape[1] != cols:
        raise ShapeError(f"{what}: expected (n, {cols}), got {X.shape}")


def _extractor_activations(params: ModelParams, X: np.ndarray) -> list[np.ndarray]:
    """Inputs to every extractor layer, followed by the feature output."""
    _check_2d(X, params.input_dim, "forward_features")
    acts = [X]
    h = X
    n_layers = params.n_extractor_layers
    for i in range(n_layers):
        w, b = params.extractor_layer(i)
        h = h @ w + b
        if i < n_layers - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def forward_features(params: ModelParams, X: np.ndarray) -> np.ndarray:
    return _extractor_activations(params, X)[-1]


def forward_logits(params: ModelParams, Z: np.ndarray) -> np.ndarray:
    w, b = params.classifier
    _check_2d(Z, w.shape[0], "forward_logits")
    return Z @ w + b


def backward(params: ModelParams, X: np.ndarray, upstream_logit_grad: np.ndarray,
             upstream_feature_grad: np.ndarray) -> GradientSet:
    """Parameter gradients of ``sum(logits * G_logit) + sum(Z * G_feat)``.

    Both upstream paths meet at the feature output Z and are summed there
    before flowing into the extractor.
    """
    acts = _extractor_activations(params, X)
    Z = acts[-1]
    n = X.shape[0]
    wc, _ = params.classifier
    if upstream_logit_grad.shape != (n, wc.shape[1]):
        raise ShapeError(f"logit grad shape {upstream_logit_grad.shape}, expected {(n, wc.shape[1])}")
    if upstream_feature_grad.shape != (n, wc.shape[0]):
        raise ShapeError(f"feature grad shape {upstream_feature_grad.shape}, expected {(n, wc.shape[0])}")

    grads: dict[str, np.ndarray] = {}
    grads[f"{CLASSIFIER}.weight"] = Z.T @ upstream_logit_grad
    grads[f"{CLASSIFIER}.bias"] = upstream_logit_grad.sum(axis=0)
    delta = upstream_logit_grad @ wc.T + upstream_feature_grad

    for i in reversed(range(params.n_extractor_layers)):
        w, _ = params.extractor_layer(i)
        h_in = acts[i]
        grads[f"{EXTRACTOR}.{i}.weight"] = h_in.T @ delta
        grads[f"{EXTRACTOR}.{i}.bias"] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ w.T) * (acts[i] > 0)
    return ModelParams({k: grads[k] for k in params.tensors})


def adam_step(params: ModelParams, grads: GradientSet, state: AdamState, lr: float,
              weight_decay: float = 0.0) -> tuple[ModelParams, AdamState]:
    """One Adam step with decoupled weight decay applied before the Adam delta."""
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    for k, g in grads.tensors.items():
        if g.shape != params.tensors[k].shape:
            raise ShapeError(f"gradient {k} has shape {g.shape}, parameter has {params.tensors[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {k}")

    new = state.copy()
    new.step += 1
    b1, b2 = new.beta1, new.beta2
    c1 = 1.0 - b1**new.step
    c2 = 1.0 - b2**new.step
    out = {}
    for k, p in params.tensors.items():
        g = grads.tensors[k]
        m = b1 * new.m[k] + (1.0 - b1) * g
        v = b2 * new.v[k] + (1.0 - b2) * g * g
        new.m[k], new.v[k] = m, v
        p = p - lr * weight_decay * p if weight_decay else p.copy()
        out[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + new.eps)
    return ModelParams(out), new


def lr_at_round(base_lr: float, round: int, total_rounds: int) -> float:
    """Step schedule: x0.1 from 75% of the run, x0.01 from 87.5%."""
    if not 1 <= round <= total_rounds:
        raise ValueError(f"round {round} outside 1..{total_rounds}")
    if round >= 0.875 * total_rounds:
        return base_lr * 0.01
    if round >= 0.75 * total_rounds:
        return base_lr * 0.1
    return base_lr
