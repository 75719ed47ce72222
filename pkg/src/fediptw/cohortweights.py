"""Hospital-specific weights from shared summary statistics.

Each hospital reports ``(n_c, mean(x), mean(t))``. The server models the
hospital treatment average with a normal distribution and its dependence on
the covariate average with an RBF Gaussian process, then weights hospital
``c`` by ``N(tbar_c; mu0, sigma0) / N(tbar_c; mu_c, sigma_c)``.

By default ``(mu_c, sigma_c)`` is the leave-one-out predictive distribution,
i.e. the GP fitted on every other hospital. Evaluating the GP at its own
training inputs would interpolate the target and drive every ratio to the
lower clamp.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial.distance import cdist, pdist

from .datagen import ClientDataset

log = logging.getLogger(__name__)

NOISE_VAR = 1e-4
W_MIN, W_MAX = 0.1, 10.0
_MAX_JITTER_TRIES = 6


class DegenerateFitError(ValueError):
    pass


@dataclass
class ClientStats:
    client_id: object
    n: int
    mean_x: np.ndarray
    mean_t: float

    def __post_init__(self):
        self.mean_x = np.asarray(self.mean_x, dtype=np.float64)
        if self.n < 1 or not 0.0 <= self.mean_t <= 1.0:
            raise ValueError(f"invalid statistics for client {self.client_id}: n={self.n} mean_t={self.mean_t}")

    def to_json(self) -> str:
        d = asdict(self)
        d["mean_x"] = self.mean_x.tolist()
        d["client_id"] = str(self.client_id)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dataset(cls, data: ClientDataset) -> "ClientStats":
        return cls(data.client_id, len(data), data.X.mean(axis=0), data.treated_rate)


@dataclass
class GaussianFit:
    mu0: float
    sigma0: float


def fit_t_prior(stats: Sequence[ClientStats]) -> GaussianFit:
    """Record-count weighted mean and variance of the hospital treatment rates."""
    n = np.array([s.n for s in stats], dtype=np.float64)
    t = np.array([s.mean_t for s in stats])
    mu = float(np.dot(n, t) / n.sum())
    var = float(np.dot(n, (t - mu) ** 2) / n.sum())
    return GaussianFit(mu, math.sqrt(max(var, 0.0)))


def normal_pdf(t: float, mu: float, sigma: float) -> float:
    if not sigma > 0:
        raise DegenerateFitError(f"normal density with sigma={sigma}")
    z = (t - mu) / sigma
    return math.exp(-0.5 * z * z) / (sigma * math.sqrt(2.0 * math.pi))


def gaussian_pdf(fit: GaussianFit, t: float) -> float:
    return normal_pdf(t, fit.mu0, fit.sigma0)


def rbf_kernel(a: np.ndarray, b: np.ndarray, lengthscale: float, variance: float) -> np.ndarray:
    sq = cdist(np.atleast_2d(a), np.atleast_2d(b), "sqeuclidean")
    return variance * np.exp(-0.5 * sq / lengthscale**2)


def median_lengthscale(inputs: np.ndarray, floor: float = 1e-8) -> float:
    """Median pairwise Euclidean distance; 1.0 when that is (numerically) zero."""
    inputs = np.atleast_2d(inputs)
    if inputs.shape[0] < 2:
        return 1.0
    med = float(np.median(pdist(inputs)))
    return med if med > floor else 1.0


@dataclass
class GprModel:
    train_inputs: np.ndarray
    train_targets: np.ndarray
    lengthscale: float
    signal_var: float
    noise_var: float
    prior_mean: float
    chol: tuple
    alpha: np.ndarray

    def gram(self) -> np.ndarray:
        k = rbf_kernel(self.train_inputs, self.train_inputs, self.lengthscale, self.signal_var)
        return k + self.noise_var * np.eye(len(self.train_targets))


def fit_gpr(
    inputs,
    targets,
    *,
    lengthscale: Optional[float] = None,
    signal_var: Optional[float] = None,
    noise_var: float = NOISE_VAR,
    prior_mean: Optional[float] = None,
) -> GprModel:
    """RBF Gaussian process regression with a constant prior mean.

    Defaults: median pairwise distance for the lengthscale, variance of the
    targets for the signal variance, mean of the targets for the prior mean.
    Jitter is added tenfold at a time if the Gram matrix will not factor.
    """
    X = np.asarray(inputs, dtype=np.float64)
    X = X.reshape(-1, 1) if X.ndim == 1 else X
    y = np.asarray(targets, dtype=np.float64)
    if X.shape[0] != y.shape[0] or y.ndim != 1:
        raise ValueError("inputs and targets disagree in length")
    ell = median_lengthscale(X) if lengthscale is None else float(lengthscale)
    s2 = float(np.var(y)) if signal_var is None else float(signal_var)
    m = float(np.mean(y)) if prior_mean is None else float(prior_mean)
    K = rbf_kernel(X, X, ell, s2)
    jitter = 0.0
    for attempt in range(_MAX_JITTER_TRIES):
        try:
            chol = cho_factor(K + (noise_var + jitter) * np.eye(len(y)), lower=True)
            break
        except np.linalg.LinAlgError:
            jitter = 1e-10 if jitter == 0.0 else jitter * 10.0
    else:
        raise np.linalg.LinAlgError("GP Gram matrix is singular even with jitter")
    if jitter:
        log.warning("GP Gram matrix needed jitter %.1e", jitter)
    alpha = cho_solve(chol, y - m)
    return GprModel(X, y, ell, s2, noise_var + jitter, m, chol, alpha)


def fit_gpr_stats(stats: Sequence[ClientStats], **kw) -> GprModel:
    return fit_gpr(np.vstack([s.mean_x for s in stats]), [s.mean_t for s in stats], **kw)


def gpr_posterior(m: GprModel, x) -> tuple[float, float]:
    """Predictive mean and std for a new noisy target at ``x``."""
    k = rbf_kernel(m.train_inputs, np.atleast_2d(x), m.lengthscale, m.signal_var)[:, 0]
    mu = m.prior_mean + float(k @ m.alpha)
    v = cho_solve(m.chol, k)
    var = m.signal_var + m.noise_var - float(k @ v)
    return mu, math.sqrt(max(var, 0.0))


def gpr_loo(m: GprModel) -> tuple[np.ndarray, np.ndarray]:
    """Leave-one-out predictive means and stds at every training input.

    Uses ``mu_-i = y_i - [K^-1 (y - m)]_i / [K^-1]_ii`` and
    ``var_-i = 1 / [K^-1]_ii`` with the hyperparameters held fixed.
    """
    kinv = cho_solve(m.chol, np.eye(len(m.train_targets)))
    diag = np.diag(kinv)
    mu = m.train_targets - m.alpha / diag
    return mu, np.sqrt(1.0 / diag)


@dataclass
class HospitalWeights:
    weights: dict  # client_id -> w_c
    degenerate: bool = False

    def for_client(self, client_id) -> float:
        return self.weights[client_id]


def density_ratio_weights(
    t_values: Sequence[float],
    marginal: Callable[[float], float],
    conditional: Sequence[Callable[[float], float]],
) -> np.ndarray:
    """``marginal(t_c) / conditional_c(t_c)`` per hospital, unclamped."""
    return np.array([marginal(t) / cond(t) for t, cond in zip(t_values, conditional)])


def compute_hospital_weights(
    stats: Sequence[ClientStats],
    fit: Optional[GaussianFit] = None,
    gpr: Optional[GprModel] = None,
    *,
    w_min: float = W_MIN,
    w_max: float = W_MAX,
    leave_one_out: bool = True,
) -> HospitalWeights:
    """Density-ratio hospital weights, clamped to ``[w_min, w_max]``.

    Falls back to ``w_c = 1`` for everyone when there is a single hospital or
    either normal density is degenerate.
    """
    ids = [s.client_id for s in stats]
    ones = HospitalWeights({c: 1.0 for c in ids}, degenerate=True)
    if len(stats) < 2:
        log.warning("hospital weights need at least two hospitals; using w_c = 1")
        return ones
    fit = fit_t_prior(stats) if fit is None else fit
    gpr = fit_gpr_stats(stats) if gpr is None else gpr
    if leave_one_out:
        mus, sigmas = gpr_loo(gpr)
    else:
        post = [gpr_posterior(gpr, s.mean_x) for s in stats]
        mus, sigmas = np.array([p[0] for p in post]), np.array([p[1] for p in post])
    try:
        num = np.array([gaussian_pdf(fit, s.mean_t) for s in stats])
        den = np.array([normal_pdf(s.mean_t, mu, sd) for s, mu, sd in zip(stats, mus, sigmas)])
    except DegenerateFitError as exc:
        log.warning("degenerate treatment-average density (%s); using w_c = 1", exc)
        return ones
    ratio = np.divide(num, den, out=np.full_like(num, w_max), where=den > 0)
    w = np.clip(ratio, w_min, w_max)
    return HospitalWeights({c: float(v) for c, v in zip(ids, w)})
