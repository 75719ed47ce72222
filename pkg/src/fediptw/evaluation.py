"""Effect-estimation metrics, ranking metrics and weighted covariance diagnostics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .numerics import init_mlp, make_rng, minibatch_sgd, mlp_forward


class MetricError(ValueError):
    pass


def pehe(e_true, e_hat) -> tuple[float, float]:
    """Mean squared error between true and estimated effects, and its root."""
    e_true = np.asarray(e_true, dtype=np.float64)
    e_hat = np.asarray(e_hat, dtype=np.float64)
    if e_true.shape != e_hat.shape:
        raise MetricError(f"length mismatch: {e_true.shape} vs {e_hat.shape}")
    if e_true.size == 0:
        raise MetricError("empty input")
    v = float(np.mean((e_true - e_hat) ** 2))
    return v, math.sqrt(v)


def mae_ate(e_true, e_hat) -> float:
    e_true = np.asarray(e_true, dtype=np.float64)
    e_hat = np.asarray(e_hat, dtype=np.float64)
    if e_true.size == 0 or e_hat.size == 0:
        raise MetricError("empty input")
    return abs(float(np.mean(e_true)) - float(np.mean(e_hat)))


def influence_terms(t, y, pi, e_plugin, e_hat) -> dict:
    """Per-record pieces of the influence-function PEHE, as printed.

    ``Z = pi (1 - pi)``, ``W = t - pi``, ``B = 2 t (t - pi) / Z`` and
    ``l = (1 - B) e_hat^2 + B y (e - e_hat) - W (e - e_hat)^2 + e_hat^2``.
    """
    t, y, pi, e, eh = (np.asarray(a, dtype=np.float64) for a in (t, y, pi, e_plugin, e_hat))
    Z = pi * (1.0 - pi)
    W = t - pi
    B = 2.0 * t * (t - pi) / Z
    diff = e - eh
    ell = (1.0 - B) * eh**2 + B * y * diff - W * diff**2 + eh**2
    return {"Z": Z, "W": W, "B": B, "l": ell}


def if_pehe_from_plugins(t, y, pi, e_plugin, e_hat, pi_clip: float = 0.01) -> float:
    """IF-PEHE given plug-in effects ``e`` and propensities ``pi`` on the test set."""
    pi = np.clip(np.asarray(pi, dtype=np.float64), pi_clip, 1.0 - pi_clip)
    terms = influence_terms(t, y, pi, e_plugin, e_hat)
    diff = np.asarray(e_hat, dtype=np.float64) - np.asarray(e_plugin, dtype=np.float64)
    return float(np.sum(diff**2 + terms["l"]))


@dataclass
class PluginLearnerConfig:
    epochs: int = 50
    batch_size: int = 8
    learning_rate: float = 0.001
    seed: int = 0


def fit_plugins(X_train, t_train, y_train, cfg: Optional[PluginLearnerConfig] = None):
    """Two-layer MLP classifiers for mu0, mu1 and the propensity on a training fold.

    Returns three callables mapping covariate rows to probabilities, or
    ``None`` when an arm or the treatment has a single class.
    """
    cfg = cfg or PluginLearnerConfig()
    X_train = np.asarray(X_train, dtype=np.float64)
    t_train = np.asarray(t_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.float64)

    def fit(X, target, stream):
        if target.size == 0 or np.all(target == target[0]):
            return None
        p = init_mlp(X.shape[1], make_rng(cfg.seed, stream, 0))
        p, _ = minibatch_sgd(p, X, target, None, epochs=cfg.epochs, batch_size=cfg.batch_size,
                             lr=cfg.learning_rate, rng=make_rng(cfg.seed, stream, 1), output_kind="sigmoid")
        return lambda Z: np.atleast_1d(mlp_forward(p, Z, 0.0, "sigmoid")[0])

    mu0 = fit(X_train[t_train == 0], y_train[t_train == 0], 1)
    mu1 = fit(X_train[t_train == 1], y_train[t_train == 1], 2)
    pi = fit(X_train, t_train, 3)
    if mu0 is None or mu1 is None or pi is None:
        return None
    return mu0, mu1, pi


def if_pehe(X_train, t_train, y_train, X_test, t_test, y_test, e_hat_test,
            learner_cfg: Optional[PluginLearnerConfig] = None, plugins=None) -> Optional[float]:
    """Influence-function PEHE for binary outcomes; ``None`` when unavailable.

    ``plugins`` may supply externally fitted ``(mu0, mu1, pi)`` callables
    instead of the built-in MLP learners.
    """
    ys = np.concatenate([np.asarray(y_train), np.asarray(y_test)])
    if not np.all((ys == 0) | (ys == 1)):
        return None
    plugins = plugins or fit_plugins(X_train, t_train, y_train, learner_cfg)
    if plugins is None:
        return None
    mu0, mu1, pi = plugins
    e_plugin = mu1(X_test) - mu0(X_test)
    return if_pehe_from_plugins(t_test, y_test, pi(X_test), e_plugin, e_hat_test)


def auroc_auprc(scores, labels) -> tuple[float, float]:
    """Tie-aware ROC AUC and step-wise average precision."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape:
        raise MetricError("scores and labels differ in length")
    n_pos = float(np.sum(y == 1))
    n_neg = float(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise MetricError("both classes must be present")

    # AUROC via midranks (Mann-Whitney U)
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    auroc = (ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    # average precision over distinct thresholds, high to low
    desc = np.argsort(-s, kind="mergesort")
    s_d, y_d = s[desc], y[desc]
    last = np.r_[np.flatnonzero(np.diff(s_d)), len(s_d) - 1]
    tp = np.cumsum(y_d)[last]
    fp = (last + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n_pos
    auprc = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return float(auroc), auprc


# ---------------------------------------------------------------- covariance


@dataclass
class CovarianceResult:
    per_feature: np.ndarray  # (d,) for global, (C, d) for local
    summary: float
    per_client_summary: Optional[np.ndarray] = None


def _weighted_cov(X: np.ndarray, t: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, float]:
    ws = float(w.sum())
    if ws <= 0:
        raise MetricError("weights sum to zero")
    xbar = w @ X / ws
    tbar = float(w @ t / ws)
    return (w * (t - tbar)) @ (X - xbar), ws


def _standardizers(X_all: np.ndarray, t_all: np.ndarray) -> tuple[np.ndarray, float]:
    sd_x = X_all.std(axis=0)
    sd_t = float(t_all.std())
    return sd_x, sd_t


def _summary(cov: np.ndarray, ws: float, sd_x: np.ndarray, sd_t: float) -> float:
    keep = sd_x > 0
    if not np.any(keep) or sd_t <= 0:
        return 0.0
    return float(np.mean(np.abs(cov[keep]) / (ws * sd_x[keep] * sd_t)))


def weighted_cov(
    X: Sequence[np.ndarray],
    t: Sequence[np.ndarray],
    patient_weights: Optional[Sequence[np.ndarray]] = None,
    hospital_weights: Optional[Sequence[float]] = None,
    level: str = "global",
) -> CovarianceResult:
    """Weighted covariance between covariates and treatment.

    ``level="local"`` gives one covariance vector per hospital using its own
    weighted means; ``level="global"`` pools every record with combined
    weights ``w_c * w_ci`` around the pooled weighted means. Both are sums
    over records (not normalized). The scalar summary divides each feature's
    covariance by the weight total and the pooled (unweighted) standard
    deviations of that feature and of the treatment, then averages absolute
    values over features; for the local level the per-hospital summaries are
    averaged.
    """
    C = len(X)
    pw = [np.ones(len(tc)) for tc in t] if patient_weights is None else patient_weights
    hw = [1.0] * C if hospital_weights is None else hospital_weights
    X = [np.asarray(x, dtype=np.float64) for x in X]
    t = [np.asarray(v, dtype=np.float64) for v in t]
    sd_x, sd_t = _standardizers(np.vstack(X), np.concatenate(t))
    if level == "local":
        covs, sums = [], []
        for xc, tc, wc in zip(X, t, pw):
            cov, ws = _weighted_cov(xc, tc, np.asarray(wc, dtype=np.float64))
            covs.append(cov)
            sums.append(_summary(cov, ws, sd_x, sd_t))
        sums = np.array(sums)
        return CovarianceResult(np.vstack(covs), float(sums.mean()), sums)
    if level != "global":
        raise ValueError(f"unknown level {level!r}")
    w = np.concatenate([hc * np.asarray(wc, dtype=np.float64) for hc, wc in zip(hw, pw)])
    cov, ws = _weighted_cov(np.vstack(X), np.concatenate(t), w)
    return CovarianceResult(cov, _summary(cov, ws, sd_x, sd_t))


# ---------------------------------------------------------------- reports


@dataclass
class MetricReport:
    method: str
    rpehe: Optional[float] = None
    mae_ate: Optional[float] = None
    if_pehe: Optional[float] = None
    auroc: Optional[float] = None
    auprc: Optional[float] = None
    prop_auroc: Optional[float] = None
    prop_auprc: Optional[float] = None
    cov_local: Optional[float] = None
    cov_global: Optional[float] = None
    cov_local_per_client: list = field(default_factory=list)
    best_round: int = 0
    notes: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


METRIC_COLUMNS = ("auroc", "auprc", "if_pehe", "rpehe", "mae_ate", "prop_auroc", "prop_auprc",
                  "cov_local", "cov_global")


def mean_std(values: Sequence[Optional[float]]) -> tuple[Optional[float], Optional[float]]:
    """Mean and population std over the available (non-None, finite) values."""
    v = np.array([x for x in values if x is not None and np.isfinite(x)], dtype=np.float64)
    if v.size == 0:
        return None, None
    return float(v.mean()), float(v.std())
