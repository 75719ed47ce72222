"""FedAvg rounds: broadcast, independent local training, weighted averaging.

Only parameter vectors travel between clients and the server here. Anything a
client learns for itself (such as a propensity offset) stays on the trainer
object and is never handed to :func:`aggregate`.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import Executor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence, Union

import numpy as np

from .numerics import MlpParams, ShapeError, average_params

log = logging.getLogger(__name__)

WEIGHT_MODES = ("by_size", "by_size_times_wc")


class AggregationError(ValueError):
    pass


class TrainerFailure(RuntimeError):
    def __init__(self, client_id, round_index: int, cause: BaseException):
        super().__init__(f"client {client_id} failed in round {round_index}: {cause!r}")
        self.client_id = client_id
        self.round_index = round_index


@dataclass
class FederationConfig:
    rounds: int = 50
    local_epochs: int = 1
    batch_size: int = 8
    learning_rate: float = 0.001
    weights_mode: str = "by_size"

    def validate(self) -> None:
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.local_epochs < 0:
            raise ValueError("local_epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.weights_mode not in WEIGHT_MODES:
            raise ValueError(f"weights_mode must be one of {WEIGHT_MODES}")


@dataclass
class RoundLog:
    round: int
    client_loss: dict
    global_loss: Optional[float]
    wall_time: float
    stage: str = ""

    def to_json(self) -> str:
        d = asdict(self)
        d["client_loss"] = {str(k): v for k, v in self.client_loss.items()}
        return json.dumps(d, sort_keys=True)


class LocalTrainer(Protocol):
    client_id: Union[int, str]
    n_records: int
    hospital_weight: float

    def train(self, params: MlpParams, cfg: FederationConfig, round_index: int) -> tuple[MlpParams, float]:
        ...


def aggregate(models: Sequence[MlpParams], weights: Sequence[float]) -> MlpParams:
    """``sum_c (weight_c / sum(weights)) * model_c``, element-wise."""
    if not models:
        raise AggregationError("nothing to aggregate")
    if len(models) != len(weights):
        raise AggregationError(f"{len(models)} models but {len(weights)} weights")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(~np.isfinite(w)) or np.any(w < 0):
        raise AggregationError(f"aggregation weights must be finite and non-negative: {w}")
    total = w.sum()
    if total <= 0:
        raise AggregationError("aggregation weights sum to zero")
    shape = (models[0].in_dim, models[0].hidden)
    for m in models[1:]:
        if (m.in_dim, m.hidden) != shape:
            raise AggregationError(f"model shape {(m.in_dim, m.hidden)} differs from {shape}")
    if len(models) == 1:
        return models[0].copy()
    return average_params(models, w / total)


def client_weights(trainers: Sequence[LocalTrainer], mode: str) -> list[float]:
    if mode == "by_size":
        return [float(tr.n_records) for tr in trainers]
    return [float(tr.n_records) * float(tr.hospital_weight) for tr in trainers]


def run_rounds(
    initial: MlpParams,
    trainers: Sequence[LocalTrainer],
    cfg: FederationConfig,
    *,
    validate: Optional[Callable[[MlpParams, int], float]] = None,
    executor: Optional[Executor] = None,
    stage: str = "",
    log_path: Optional[Union[str, Path]] = None,
) -> tuple[MlpParams, list[RoundLog]]:
    """Run ``cfg.rounds`` FedAvg rounds starting from ``initial``.

    ``validate`` is called with each round's aggregate and its 1-based index;
    its return value is logged as the round's global loss. Local training may
    be dispatched to ``executor``; the result does not depend on it because
    every trainer draws from its own random stream.
    """
    cfg.validate()
    global_params = initial.copy()
    weights = client_weights(trainers, cfg.weights_mode)
    logs = []
    for r in range(1, cfg.rounds + 1):
        start = time.perf_counter()

        def job(tr, params=global_params, r=r):
            try:
                return tr.train(params.copy(), cfg, r)
            except ShapeError:
                raise
            except Exception as exc:  # noqa: BLE001 - re-raised with client context
                raise TrainerFailure(tr.client_id, r, exc) from exc

        if executor is None:
            results = [job(tr) for tr in trainers]
        else:
            results = list(executor.map(job, trainers))
        global_params = aggregate([p for p, _ in results], weights)
        entry = RoundLog(
            round=r,
            client_loss={tr.client_id: res[1] for tr, res in zip(trainers, results)},
            global_loss=None if validate is None else float(validate(global_params, r)),
            wall_time=time.perf_counter() - start,
            stage=stage,
        )
        logs.append(entry)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(entry.to_json() + "\n")
    return global_params, logs


@dataclass
class BestRound:
    """Validation callback that remembers the lowest-loss parameters."""

    loss_fn: Callable[[MlpParams], float]
    best_loss: float = float("inf")
    best_round: int = 0
    best_params: Optional[MlpParams] = field(default=None, repr=False)

    def __call__(self, params: MlpParams, round_index: int) -> float:
        loss = float(self.loss_fn(params))
        if loss < self.best_loss:
            self.best_loss, self.best_round, self.best_params = loss, round_index, params.copy()
        return loss
