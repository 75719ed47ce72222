"""Weighted outcome model g(x, t) and individual effect prediction.

The treatment flag is appended to the covariates as one extra input column.
Patient weights scale each record's loss during local training; hospital
weights only enter the server-side average.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .datagen import ClientDataset
from .federation import BestRound, FederationConfig, run_rounds
from .numerics import MlpParams, init_mlp, make_rng, minibatch_sgd, mlp_forward, weighted_loss


class WeightAlignmentError(ValueError):
    pass


@dataclass
class FactualModel:
    phi: MlpParams
    output_kind: str = "linear"

    @property
    def d_x(self) -> int:
        return self.phi.in_dim - 1


@dataclass
class ItePrediction:
    e_hat: np.ndarray

    @property
    def ate(self) -> float:
        return float(np.mean(self.e_hat))


def with_treatment(X: np.ndarray, t) -> np.ndarray:
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (X.shape[0],))
    return np.hstack([X, t[:, None]])


def outcome_kind(datasets: Sequence[ClientDataset]) -> str:
    """Sigmoid head for 0/1 outcomes, linear head otherwise."""
    ys = np.concatenate([d.y for d in datasets])
    return "sigmoid" if np.all((ys == 0) | (ys == 1)) else "linear"


def _check_weights(data: ClientDataset, weights: np.ndarray) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(data),):
        raise WeightAlignmentError(
            f"client {data.client_id}: {w.shape[0] if w.ndim else 'scalar'} weights for {len(data)} records"
        )
    return w


def local_weighted_train(
    phi_init: MlpParams,
    data: ClientDataset,
    weights: np.ndarray,
    cfg: FederationConfig,
    rng: np.random.Generator,
    output_kind: str = "linear",
) -> tuple[MlpParams, float]:
    """``cfg.local_epochs`` of mini-batch SGD on the patient-weighted loss."""
    w = _check_weights(data, weights)
    return minibatch_sgd(
        phi_init, with_treatment(data.X, data.t), data.y, w,
        epochs=cfg.local_epochs, batch_size=cfg.batch_size, lr=cfg.learning_rate,
        rng=rng, output_kind=output_kind,
    )


class FactualClient:
    def __init__(self, data: ClientDataset, weights: np.ndarray, hospital_weight: float,
                 rng: np.random.Generator, output_kind: str):
        self.client_id = data.client_id
        self.data = data
        self.weights = _check_weights(data, weights)
        self.hospital_weight = float(hospital_weight)
        self.n_records = len(data)
        self.rng = rng
        self.output_kind = output_kind

    def train(self, params: MlpParams, cfg: FederationConfig, round_index: int) -> tuple[MlpParams, float]:
        return local_weighted_train(params, self.data, self.weights, cfg, self.rng, self.output_kind)


def weighted_validation_loss(
    phi: MlpParams,
    datasets: Sequence[ClientDataset],
    patient_weights: Sequence[np.ndarray],
    hospital_weights: Sequence[float],
    output_kind: str,
) -> float:
    num = den = 0.0
    for d, w, wc in zip(datasets, patient_weights, hospital_weights):
        ww = wc * np.asarray(w)
        s = float(ww.sum())
        if s > 0:
            num += weighted_loss(phi, with_treatment(d.X, d.t), d.y, ww, output_kind) * s
            den += s
    return num / den if den > 0 else float("nan")


def train_factual_federated(
    datasets: Sequence[ClientDataset],
    patient_weights: Sequence[np.ndarray],
    hospital_weights: Optional[Mapping] = None,
    cfg: Optional[FederationConfig] = None,
    *,
    seed: int = 0,
    output_kind: Optional[str] = None,
    validation: Optional[Sequence[ClientDataset]] = None,
    validation_weights: Optional[Sequence[np.ndarray]] = None,
    log_path=None,
    executor=None,
):
    """FedAvg on the patient-weighted loss, aggregated by ``w_c * n_c``.

    Returns ``(model, logs, best_round)``; ``best_round`` is 0 when no
    validation data was given, in which case the last round is returned.
    """
    cfg = cfg or FederationConfig()
    output_kind = output_kind or outcome_kind(datasets)
    wc = [1.0 if hospital_weights is None else float(hospital_weights[d.client_id]) for d in datasets]
    phi0 = init_mlp(datasets[0].d_x + 1, make_rng(seed, 0))
    clients = [FactualClient(d, w, c, make_rng(seed, 1, k), output_kind)
               for k, (d, w, c) in enumerate(zip(datasets, patient_weights, wc))]
    tracker = None
    if validation is not None:
        vw = validation_weights or [np.ones(len(v)) for v in validation]
        tracker = BestRound(lambda phi: weighted_validation_loss(phi, validation, vw, wc, output_kind))
    run_cfg = replace(cfg, weights_mode="by_size_times_wc")
    phi, logs = run_rounds(phi0, clients, run_cfg, validate=tracker, stage="factual",
                           log_path=log_path, executor=executor)
    best_round = 0
    if tracker is not None and tracker.best_params is not None:
        phi, best_round = tracker.best_params, tracker.best_round
    return FactualModel(phi, output_kind), logs, best_round


def train_factual_pooled(
    datasets: Sequence[ClientDataset],
    patient_weights: Sequence[np.ndarray],
    cfg: Optional[FederationConfig] = None,
    *,
    seed: int = 0,
    output_kind: Optional[str] = None,
    validation: Optional[Sequence[ClientDataset]] = None,
    validation_weights: Optional[Sequence[np.ndarray]] = None,
):
    """Centralized weighted training on the union of all hospitals.

    Runs ``rounds * local_epochs`` epochs, keeping the epoch block with the
    lowest weighted validation loss. Returns ``(model, best_round)``.
    """
    cfg = cfg or FederationConfig()
    output_kind = output_kind or outcome_kind(datasets)
    pooled = ClientDataset("pooled", np.vstack([d.X for d in datasets]),
                           np.concatenate([d.t for d in datasets]),
                           np.concatenate([d.y for d in datasets]))
    w = np.concatenate([np.asarray(x, dtype=np.float64) for x in patient_weights])
    phi = init_mlp(pooled.d_x + 1, make_rng(seed, 0))
    rng = make_rng(seed, 2)
    best = (float("inf"), phi, 0)
    vw = None
    if validation is not None:
        vw = validation_weights or [np.ones(len(v)) for v in validation]
    for r in range(1, cfg.rounds + 1):
        phi, _ = local_weighted_train(phi, pooled, w, cfg, rng, output_kind)
        if validation is not None:
            loss = weighted_validation_loss(phi, validation, vw, [1.0] * len(validation), output_kind)
            if loss < best[0]:
                best = (loss, phi, r)
    if validation is not None and best[0] < float("inf"):
        return FactualModel(best[1], output_kind), best[2]
    return FactualModel(phi, output_kind), 0


def predict_ite(model: FactualModel, X: np.ndarray) -> ItePrediction:
    """``g(x, 1) - g(x, 0)`` for every row of ``X``."""
    y1, _ = mlp_forward(model.phi, with_treatment(X, 1.0), 0.0, model.output_kind)
    y0, _ = mlp_forward(model.phi, with_treatment(X, 0.0), 0.0, model.output_kind)
    return ItePrediction(np.atleast_1d(y1) - np.atleast_1d(y0))


def predict_outcome(model: FactualModel, X: np.ndarray, t) -> np.ndarray:
    out, _ = mlp_forward(model.phi, with_treatment(X, t), 0.0, model.output_kind)
    return np.atleast_1d(out)
