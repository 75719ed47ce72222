"""Two-layer MLP with hand-written gradients, losses and plain SGD.

Parameters are float64 numpy arrays. The flat serialization order is fixed:
``w1`` (row-major), ``b1``, ``w2`` (row-major), ``b2``. Aggregation and
checkpoint files rely on it.

Random streams come from numpy's PCG64 bit generator seeded through a
``SeedSequence`` built from integer keys, so ``make_rng(seed, 3, 1)`` yields
the same numbers on every platform.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

HIDDEN = 128
PROB_CLAMP = 1e-7

OUTPUT_KINDS = ("sigmoid", "linear")


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    """Backward was called with a cache produced by different parameters."""


class NumericError(FloatingPointError):
    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """PCG64 generator keyed by ``(seed, *keys)``."""
    entropy = [int(seed)] + [int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def sigmoid(x):
    # split form avoids overflow in exp for large |x|
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass
class MlpParams:
    """Weights of ``out = W2 relu(W1 x + b1) + b2``.

    ``w1`` is ``(hidden, in)``, ``b1`` is ``(hidden,)``, ``w2`` is
    ``(1, hidden)`` and ``b2`` a float.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64).reshape(1, -1)
        self.b2 = float(self.b2)
        hidden = self.w1.shape[0]
        if self.w1.ndim != 2 or self.b1.shape != (hidden,) or self.w2.shape != (1, hidden):
            raise ShapeError(
                f"inconsistent MLP shapes w1={self.w1.shape} b1={self.b1.shape} w2={self.w2.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def size(self) -> int:
        return flat_size(self.in_dim, self.hidden)

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), [self.b2]])

    @classmethod
    def unflatten(cls, flat: np.ndarray, in_dim: int, hidden: int = HIDDEN) -> "MlpParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (flat_size(in_dim, hidden),):
            raise ShapeError(f"flat vector of length {flat.size} does not fit in={in_dim} hidden={hidden}")
        i = 0
        w1 = flat[i : i + hidden * in_dim].reshape(hidden, in_dim)
        i += hidden * in_dim
        b1 = flat[i : i + hidden]
        i += hidden
        w2 = flat[i : i + hidden].reshape(1, hidden)
        i += hidden
        return cls(w1.copy(), b1.copy(), w2.copy(), float(flat[i]))

    def copy(self) -> "MlpParams":
        return MlpParams(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2)

    @classmethod
    def zeros(cls, in_dim: int, hidden: int = HIDDEN) -> "MlpParams":
        return cls(np.zeros((hidden, in_dim)), np.zeros(hidden), np.zeros((1, hidden)), 0.0)


def flat_size(in_dim: int, hidden: int = HIDDEN) -> int:
    return hidden * in_dim + hidden + hidden + 1


def init_mlp(in_dim: int, rng: np.random.Generator, hidden: int = HIDDEN) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases of each layer."""
    k1 = 1.0 / np.sqrt(in_dim)
    k2 = 1.0 / np.sqrt(hidden)
    return MlpParams(
        w1=rng.uniform(-k1, k1, size=(hidden, in_dim)),
        b1=rng.uniform(-k1, k1, size=hidden),
        w2=rng.uniform(-k2, k2, size=(1, hidden)),
        b2=float(rng.uniform(-k2, k2)),
    )


@dataclass
class Cache:
    params: MlpParams
    inputs: np.ndarray
    pre_hidden: np.ndarray
    hidden: np.ndarray
    output: np.ndarray
    output_kind: str
    scalar_offset: bool
    single: bool


Offset = Union[float, np.ndarray]


def mlp_forward(p: MlpParams, inputs, bias_offset: Offset = 0.0, output_kind: str = "sigmoid"):
    """Forward pass for one input vector or a batch (rows).

    ``bias_offset`` is added after the second layer, before the sigmoid; it is
    either a scalar shared by the batch or one value per row.

    Returns ``(output, cache)``; ``output`` is a float for a single vector and
    an ``(n,)`` array for a batch.
    """
    if output_kind not in OUTPUT_KINDS:
        raise ValueError(f"unknown output kind {output_kind!r}")
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != p.in_dim:
        raise ShapeError(f"input of shape {np.shape(inputs)} does not match in_dim={p.in_dim}")
    scalar_offset = np.ndim(bias_offset) == 0
    offset = float(bias_offset) if scalar_offset else np.asarray(bias_offset, dtype=np.float64)
    if not scalar_offset and offset.shape != (x.shape[0],):
        raise ShapeError(f"offset of shape {offset.shape} for a batch of {x.shape[0]}")

    pre = x @ p.w1.T + p.b1
    act = np.maximum(pre, 0.0)
    logit = act @ p.w2[0] + p.b2 + offset
    out = sigmoid(logit) if output_kind == "sigmoid" else logit
    out = np.atleast_1d(out)
    cache = Cache(p, x, pre, act, out, output_kind, scalar_offset, single)
    return (float(out[0]) if single else out), cache


def mlp_backward(p: MlpParams, cache: Cache, upstream):
    """Gradient of a loss given ``upstream = dloss/doutput`` (one per row).

    Returns ``(grad, d_offset)``: ``grad`` holds per-parameter gradients summed
    over the batch; ``d_offset`` is the derivative with respect to the bias
    offset (summed when the offset was a scalar, per row otherwise).
    """
    if cache.params is not p:
        raise StaleCacheError("cache was produced by a different parameter object")
    up = np.atleast_1d(np.asarray(upstream, dtype=np.float64))
    if up.shape != (cache.inputs.shape[0],):
        raise ShapeError(f"upstream of shape {up.shape} for a batch of {cache.inputs.shape[0]}")
    if cache.output_kind == "sigmoid":
        d_logit = up * cache.output * (1.0 - cache.output)
    else:
        d_logit = up
    d_w2 = (d_logit @ cache.hidden)[None, :]
    d_b2 = float(d_logit.sum())
    d_act = np.outer(d_logit, p.w2[0])
    d_pre = d_act * (cache.pre_hidden > 0)
    d_w1 = d_pre.T @ cache.inputs
    d_b1 = d_pre.sum(axis=0)
    grad = MlpParams(d_w1, d_b1, d_w2, d_b2)
    if cache.scalar_offset:
        d_offset: Offset = d_b2
    else:
        d_offset = d_logit.copy()
    return grad, d_offset


def bce_loss(p, y):
    """Binary cross entropy with the probability clamped to [1e-7, 1 - 1e-7]."""
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    out = -y * np.log(pc) - (1.0 - y) * np.log(1.0 - pc)
    return float(out) if np.ndim(out) == 0 else out


def bce_grad(p, y):
    """d bce / d p, using the clamped probability."""
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return (pc - y) / (pc * (1.0 - pc))


def mse_loss(pred, y):
    out = (np.asarray(pred) - y) ** 2
    return float(out) if np.ndim(out) == 0 else out


def mse_grad(pred, y):
    return 2.0 * (np.asarray(pred) - y)


def loss_and_grad(output_kind: str):
    """Record-wise loss and its derivative for the given output head."""
    if output_kind == "sigmoid":
        return bce_loss, bce_grad
    return mse_loss, mse_grad


def sgd_step(p: MlpParams, g: MlpParams, lr: float) -> MlpParams:
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    flat_g = g.flatten()
    bad = np.flatnonzero(~np.isfinite(flat_g))
    if bad.size:
        raise NumericError(f"non-finite gradient entry at flat index {bad[0]}", int(bad[0]))
    return MlpParams(p.w1 - lr * g.w1, p.b1 - lr * g.b1, p.w2 - lr * g.w2, p.b2 - lr * g.b2)


def weighted_batch_grad(
    p: MlpParams,
    inputs: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray,
    output_kind: str,
    bias_offset: Offset = 0.0,
):
    """Gradient of ``mean_i w_i * loss(f(x_i), y_i)`` over the batch.

    Returns ``(grad, mean_loss)``.
    """
    loss_fn, grad_fn = loss_and_grad(output_kind)
    out, cache = mlp_forward(p, inputs, bias_offset, output_kind)
    n = inputs.shape[0]
    upstream = weights * grad_fn(out, targets) / n
    grad, _ = mlp_backward(p, cache, upstream)
    return grad, float(np.dot(weights, loss_fn(out, targets)) / n)


def minibatch_sgd(
    p: MlpParams,
    inputs: np.ndarray,
    targets: np.ndarray,
    weights: Optional[np.ndarray],
    *,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
    output_kind: str,
    bias_offset: Offset = 0.0,
) -> tuple[MlpParams, float]:
    """Shuffled mini-batch SGD on the weighted record loss.

    Returns the updated parameters and the mean batch loss of the last epoch
    (``nan`` when nothing ran).
    """
    n = inputs.shape[0]
    if weights is None:
        weights = np.ones(n)
    per_row_offset = np.ndim(bias_offset) != 0
    last = float("nan")
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            off = bias_offset[idx] if per_row_offset else bias_offset
            grad, loss = weighted_batch_grad(p, inputs[idx], targets[idx], weights[idx], output_kind, off)
            p = sgd_step(p, grad, lr)
            losses.append(loss)
        if losses:
            last = float(np.mean(losses))
    return p, last


def weighted_loss(
    p: MlpParams,
    inputs: np.ndarray,
    targets: np.ndarray,
    weights: Optional[np.ndarray],
    output_kind: str,
    bias_offset: Offset = 0.0,
) -> float:
    """Weighted mean loss ``sum w_i l_i / sum w_i`` (unweighted when ``weights`` is None)."""
    loss_fn, _ = loss_and_grad(output_kind)
    out, _ = mlp_forward(p, inputs, bias_offset, output_kind)
    losses = loss_fn(np.atleast_1d(out), targets)
    if weights is None:
        return float(np.mean(losses))
    total = float(np.sum(weights))
    return float(np.dot(weights, losses) / total) if total > 0 else float("nan")


def average_params(models: Sequence[MlpParams], coefficients: Sequence[float]) -> MlpParams:
    """Element-wise ``sum_k coefficients[k] * models[k]`` (coefficients used as given)."""
    flat = sum(c * m.flatten() for c, m in zip(coefficients, models))
    return MlpParams.unflatten(flat, models[0].in_dim, models[0].hidden)
