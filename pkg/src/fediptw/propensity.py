"""Treatment-probability model with a per-hospital strategy offset.

The model is ``f(x, h_c) = sigmoid(mlp(x) + h_c)``. Shared MLP weights are
trained with FedAvg; each hospital alternates between fitting its scalar
``h_c`` with the weights frozen and training the weights with ``h_c`` frozen.
``h_c`` never leaves its :class:`PropensityClient`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .datagen import ClientDataset
from .federation import BestRound, FederationConfig, run_rounds
from .numerics import (
    MlpParams,
    init_mlp,
    make_rng,
    minibatch_sgd,
    mlp_forward,
    sigmoid,
    weighted_loss,
)

log = logging.getLogger(__name__)

H_LIMIT = 50.0


@dataclass
class PropensityConfig:
    use_h: bool = True
    hc_epochs: int = 5
    hc_lr: float = 0.1
    eps_clip: float = 0.01


@dataclass
class PatientWeights:
    client_id: object
    w: np.ndarray


def has_both_classes(t: np.ndarray) -> bool:
    return bool(np.any(t == 1) and np.any(t == 0))


def base_logits(theta: MlpParams, X: np.ndarray) -> np.ndarray:
    out, _ = mlp_forward(theta, X, 0.0, "linear")
    return np.atleast_1d(out)


def fit_hc(theta: MlpParams, data: ClientDataset, h_init: float = 0.0, epochs: int = 5, lr: float = 0.1) -> float:
    """Gradient descent on the hospital offset with ``theta`` frozen.

    Minimizes the mean BCE of ``sigmoid(logit_i + h)`` against the treatments.
    Values beyond +-50 are clipped and reported.
    """
    s = base_logits(theta, data.X)
    h = float(h_init)
    for _ in range(epochs):
        h -= lr * float(np.mean(sigmoid(s + h) - data.t))
        if abs(h) > H_LIMIT:
            log.warning("client %s: h_c diverged to %.3g, clipped to +-%g", data.client_id, h, H_LIMIT)
            h = float(np.clip(h, -H_LIMIT, H_LIMIT))
            break
    return h


class PropensityClient:
    """Local trainer for the treatment model; owns its data and ``h_c``."""

    def __init__(self, data: ClientDataset, cfg: PropensityConfig, rng: np.random.Generator):
        self.client_id = data.client_id
        self.data = data
        self.cfg = cfg
        self.rng = rng
        self.h = 0.0
        self.n_records = len(data)
        self.hospital_weight = 1.0
        self.fit_offset = cfg.use_h and has_both_classes(data.t)
        if cfg.use_h and not self.fit_offset:
            log.warning("client %s has a single treatment class; h_c stays at 0", data.client_id)

    def train(self, params: MlpParams, cfg: FederationConfig, round_index: int) -> tuple[MlpParams, float]:
        if self.fit_offset:
            self.h = fit_hc(params, self.data, self.h, self.cfg.hc_epochs, self.cfg.hc_lr)
        return minibatch_sgd(
            params, self.data.X, self.data.t, None,
            epochs=cfg.local_epochs, batch_size=cfg.batch_size, lr=cfg.learning_rate,
            rng=self.rng, output_kind="sigmoid", bias_offset=self.h,
        )


def predict_propensity(theta: MlpParams, X: np.ndarray, h: float = 0.0) -> np.ndarray:
    out, _ = mlp_forward(theta, X, h, "sigmoid")
    return np.atleast_1d(out)


def train_propensity_federated(
    datasets: Sequence[ClientDataset],
    fed_cfg: FederationConfig,
    prop_cfg: PropensityConfig,
    seed: int,
    *,
    validation: Optional[Sequence[ClientDataset]] = None,
    log_path=None,
    executor=None,
):
    """FedAvg over the shared weights, coordinate descent on each ``h_c``.

    Aggregation is by record count. With ``validation`` sets, the round with
    the lowest pooled validation BCE is kept (with the offsets of that round).

    Returns ``(theta, offsets, logs)`` where ``offsets`` maps client id to
    ``h_c``.
    """
    d_x = datasets[0].d_x
    theta0 = init_mlp(d_x, make_rng(seed, 0))
    clients = [PropensityClient(d, prop_cfg, make_rng(seed, 1, k)) for k, d in enumerate(datasets)]
    best_offsets: dict = {}
    validate = None
    if validation is not None:
        def val_loss(theta):
            losses, sizes = [], []
            for cl, v in zip(clients, validation):
                losses.append(weighted_loss(theta, v.X, v.t, None, "sigmoid", cl.h) * len(v))
                sizes.append(len(v))
            return sum(losses) / sum(sizes)

        tracker = BestRound(val_loss)

        def validate(theta, r):
            loss = tracker(theta, r)
            if tracker.best_round == r:
                best_offsets.update({cl.client_id: cl.h for cl in clients})
            return loss

    theta, logs = run_rounds(theta0, clients, replace(fed_cfg, weights_mode="by_size"),
                             validate=validate, stage="propensity", log_path=log_path, executor=executor)
    offsets = {cl.client_id: cl.h for cl in clients}
    if validation is not None and tracker.best_params is not None:
        theta, offsets = tracker.best_params, dict(best_offsets)
    return theta, offsets, logs


def train_propensity_local(
    data: ClientDataset,
    fed_cfg: FederationConfig,
    seed: int,
    client_index: int,
    *,
    validation: Optional[ClientDataset] = None,
) -> MlpParams:
    """One hospital alone, for ``rounds * local_epochs`` epochs; best epoch by validation BCE."""
    theta = init_mlp(data.d_x, make_rng(seed, 0))
    rng = make_rng(seed, 1, client_index)
    best, best_loss = theta, float("inf")
    for _ in range(fed_cfg.rounds):
        theta, _ = minibatch_sgd(theta, data.X, data.t, None, epochs=fed_cfg.local_epochs,
                                 batch_size=fed_cfg.batch_size, lr=fed_cfg.learning_rate,
                                 rng=rng, output_kind="sigmoid")
        if validation is not None:
            loss = weighted_loss(theta, validation.X, validation.t, None, "sigmoid")
            if loss < best_loss:
                best, best_loss = theta, loss
    return best if validation is not None and best_loss < float("inf") else theta


def train_propensity_pooled(
    datasets: Sequence[ClientDataset],
    fed_cfg: FederationConfig,
    prop_cfg: PropensityConfig,
    seed: int,
    *,
    validation: Optional[Sequence[ClientDataset]] = None,
):
    """Centralized training on the union of all hospitals.

    With ``prop_cfg.use_h`` each hospital keeps its own offset, updated once
    per epoch with the weights frozen. Returns ``(theta, offsets)``.
    """
    d_x = datasets[0].d_x
    theta = init_mlp(d_x, make_rng(seed, 0))
    rng = make_rng(seed, 2)
    X = np.vstack([d.X for d in datasets])
    t = np.concatenate([d.t for d in datasets])
    owner = np.concatenate([np.full(len(d), k) for k, d in enumerate(datasets)])
    h = np.zeros(len(datasets))
    fit = [prop_cfg.use_h and has_both_classes(d.t) for d in datasets]
    best = (float("inf"), theta, h.copy())
    for _ in range(fed_cfg.rounds):
        for k, d in enumerate(datasets):
            if fit[k]:
                h[k] = fit_hc(theta, d, h[k], prop_cfg.hc_epochs, prop_cfg.hc_lr)
        theta, _ = minibatch_sgd(theta, X, t, None, epochs=fed_cfg.local_epochs,
                                 batch_size=fed_cfg.batch_size, lr=fed_cfg.learning_rate,
                                 rng=rng, output_kind="sigmoid", bias_offset=h[owner])
        if validation is not None:
            num = sum(weighted_loss(theta, v.X, v.t, None, "sigmoid", h[k]) * len(v)
                      for k, v in enumerate(validation))
            loss = num / sum(len(v) for v in validation)
            if loss < best[0]:
                best = (loss, theta, h.copy())
    if validation is not None and best[0] < float("inf"):
        _, theta, h = best
    return theta, {d.client_id: float(h[k]) for k, d in enumerate(datasets)}


def iptw_weights(p: np.ndarray, t: np.ndarray, treated_rate: float, eps_clip: float = 0.01) -> np.ndarray:
    """Stabilized inverse-probability weights.

    ``rate / p`` for treated records and ``(1 - rate) / (1 - p)`` for the rest,
    with ``p`` clipped to ``[eps_clip, 1 - eps_clip]``.
    """
    if not 0 < eps_clip < 0.5:
        raise ValueError("eps_clip must lie in (0, 0.5)")
    p = np.clip(np.asarray(p, dtype=np.float64), eps_clip, 1.0 - eps_clip)
    t = np.asarray(t, dtype=np.float64)
    return np.where(t == 1, treated_rate / p, (1.0 - treated_rate) / (1.0 - p))


def compute_patient_weights(
    theta: MlpParams,
    h_c: float,
    data: ClientDataset,
    eps_clip: float = 0.01,
    treated_rate: Optional[float] = None,
) -> PatientWeights:
    """Weights for one hospital's records.

    ``treated_rate`` defaults to the hospital's own treatment rate; pass the
    federation-wide rate for globally stabilized weights. A hospital with a
    single treatment class gets unit weights.
    """
    if not has_both_classes(data.t):
        log.warning("client %s has a single treatment class; unit patient weights", data.client_id)
        return PatientWeights(data.client_id, np.ones(len(data)))
    rate = data.treated_rate if treated_rate is None else float(treated_rate)
    p = predict_propensity(theta, data.X, h_c)
    return PatientWeights(data.client_id, iptw_weights(p, data.t, rate, eps_clip))
