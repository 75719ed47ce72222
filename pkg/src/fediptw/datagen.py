"""Synthetic multi-hospital observational data, CSV ingestion and fold splits.

Each record draws a latent category ``z`` (one-hot over 5 levels), binary
covariates that depend on ``z``, a treatment whose log-odds depend on ``z``
and on a hospital-specific strategy shift, and two potential outcomes whose
means pass through a softplus::

    z ~ Cat(rho_c)
    x_j ~ Bern(sigmoid(a_j0 + z . a_j1))
    t ~ Bern(sigmoid(b0 + z . (b1 + delta_c)))
    y(0) ~ N(softplus(c0 + z . (c1 + delta_c)), sigma0^2)
    y(1) ~ N(softplus(d0 + z . (d1 + delta_c)), sigma1^2)

``rho_c`` equals the shared ``rho`` unless ``rho_concentration`` is set, in
which case every hospital draws its own category mix from a Dirichlet around
``rho`` (covariate shift between hospitals).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .numerics import make_rng, sigmoid, softplus

DEFAULT_RHO = (0.11, 0.22, 0.35, 0.25, 0.15)
N_CATEGORIES = 5

# stream tags for make_rng
_TRUTH_STREAM = 0
_CLIENT_STREAM = 1


class ConfigError(ValueError):
    pass


class IngestionError(ValueError):
    pass


@dataclass
class SyntheticConfig:
    n_clients: int = 10
    n_per_client: int = 1000
    d_x: int = 30
    rho: tuple = DEFAULT_RHO
    c0: float = 0.85
    d0: float = 5.2
    coef_var: float = 2.0
    sigma0: float = 1.0
    sigma1: float = 1.0
    strategy_scale: float = 1.0
    rho_concentration: Optional[float] = None
    seed: int = 0
    replication: int = 0

    def validate(self) -> None:
        rho = np.asarray(self.rho, dtype=float)
        if rho.shape != (N_CATEGORIES,) or np.any(rho < 0) or rho.sum() <= 0:
            raise ConfigError(f"rho must be 5 non-negative weights, got {self.rho}")
        if self.d_x < 1:
            raise ConfigError("d_x must be >= 1")
        if self.n_clients < 1 or self.n_per_client < 1:
            raise ConfigError("n_clients and n_per_client must be >= 1")
        if not (self.sigma0 > 0 and self.sigma1 > 0):
            raise ConfigError("outcome noise std must be positive")
        if self.strategy_scale < 0 or self.coef_var < 0:
            raise ConfigError("scales must be non-negative")
        if self.rho_concentration is not None and self.rho_concentration <= 0:
            raise ConfigError("rho_concentration must be positive when set")

    @property
    def rho_normalized(self) -> np.ndarray:
        rho = np.asarray(self.rho, dtype=float)
        return rho / rho.sum()


@dataclass
class GroundTruth:
    """Every coefficient drawn for one replication."""

    rho: np.ndarray  # (5,), normalized
    rho_c: np.ndarray  # (C, 5)
    a0: np.ndarray  # (d_x,)
    a1: np.ndarray  # (d_x, 5)
    b0: float
    b1: np.ndarray  # (5,)
    c0: float
    c1: np.ndarray
    d0: float
    d1: np.ndarray
    delta: np.ndarray  # (C, 5)
    sigma0: float
    sigma1: float

    @property
    def n_clients(self) -> int:
        return self.delta.shape[0]

    def covariate_probs(self) -> np.ndarray:
        """(5, d_x) matrix of P(x_j = 1 | z = k)."""
        return sigmoid(self.a0[None, :] + self.a1.T)

    def to_json(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    @classmethod
    def from_json(cls, d: dict) -> "GroundTruth":
        kw = {}
        for k, v in d.items():
            kw[k] = np.asarray(v, dtype=float) if isinstance(v, list) else float(v)
        return cls(**kw)


@dataclass
class ClientDataset:
    client_id: Union[int, str]
    X: np.ndarray
    t: np.ndarray
    y: np.ndarray
    y0: Optional[np.ndarray] = None
    y1: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = field(default=None, repr=False)
    ite: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        n = self.X.shape[0]
        if self.t.shape != (n,) or self.y.shape != (n,):
            raise ValueError(f"client {self.client_id}: X, t, y lengths disagree")
        for name in ("y0", "y1", "ite"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.float64)
                if v.shape != (n,):
                    raise ValueError(f"client {self.client_id}: {name} length disagrees")
                setattr(self, name, v)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def d_x(self) -> int:
        return self.X.shape[1]

    @property
    def has_potential_outcomes(self) -> bool:
        return self.y0 is not None and self.y1 is not None

    @property
    def treated_rate(self) -> float:
        return float(self.t.mean()) if len(self) else float("nan")

    @property
    def true_ite(self) -> Optional[np.ndarray]:
        """Noise-free effect when known, else the realized ``y1 - y0``."""
        if self.ite is not None:
            return self.ite
        if not self.has_potential_outcomes:
            return None
        return self.y1 - self.y0

    def subset(self, idx) -> "ClientDataset":
        idx = np.asarray(idx)
        pick = lambda v: None if v is None else v[idx]
        return ClientDataset(self.client_id, self.X[idx], self.t[idx], self.y[idx],
                             pick(self.y0), pick(self.y1), pick(self.z), pick(self.ite))


def draw_ground_truth(cfg: SyntheticConfig) -> GroundTruth:
    cfg.validate()
    rng = make_rng(cfg.seed, cfg.replication, _TRUTH_STREAM)
    sd = math.sqrt(cfg.coef_var)
    K, C = N_CATEGORIES, cfg.n_clients
    rho = cfg.rho_normalized
    a0 = rng.normal(0.0, sd, size=cfg.d_x)
    a1 = rng.normal(0.0, sd, size=(cfg.d_x, K))
    b0 = float(rng.normal(0.0, sd))
    b1 = rng.normal(0.0, sd, size=K)
    c1 = rng.normal(0.0, sd, size=K)
    d1 = rng.normal(0.0, sd, size=K)
    delta = rng.normal(0.0, cfg.strategy_scale, size=(C, K))
    if cfg.rho_concentration is None:
        rho_c = np.tile(rho, (C, 1))
    else:
        rho_c = rng.dirichlet(cfg.rho_concentration * rho, size=C)
    return GroundTruth(rho, rho_c, a0, a1, b0, b1, cfg.c0, c1, cfg.d0, d1, delta,
                       cfg.sigma0, cfg.sigma1)


def true_propensity(truth: GroundTruth, client: int, z) -> np.ndarray:
    """P(t = 1 | z, hospital) for one-hot ``z`` (a vector or rows)."""
    z = np.asarray(z, dtype=float)
    return sigmoid(truth.b0 + z @ (truth.b1 + truth.delta[client]))


def potential_outcome_means(truth: GroundTruth, client: int, z) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(z, dtype=float)
    m0 = softplus(truth.c0 + z @ (truth.c1 + truth.delta[client]))
    m1 = softplus(truth.d0 + z @ (truth.d1 + truth.delta[client]))
    return m0, m1


def generate_client(cfg: SyntheticConfig, truth: GroundTruth, client: int) -> ClientDataset:
    rng = make_rng(cfg.seed, cfg.replication, _CLIENT_STREAM, client)
    n = cfg.n_per_client
    cats = rng.choice(N_CATEGORIES, size=n, p=truth.rho_c[client])
    z = np.eye(N_CATEGORIES)[cats]
    px = truth.covariate_probs()[cats]
    X = (rng.random(px.shape) < px).astype(np.float64)
    t = (rng.random(n) < true_propensity(truth, client, z)).astype(np.float64)
    m0, m1 = potential_outcome_means(truth, client, z)
    y0 = m0 + truth.sigma0 * rng.standard_normal(n)
    y1 = m1 + truth.sigma1 * rng.standard_normal(n)
    y = np.where(t == 1, y1, y0)
    return ClientDataset(client, X, t, y, y0, y1, z=cats, ite=m1 - m0)


def generate_synthetic(cfg: SyntheticConfig, truth: Optional[GroundTruth] = None) -> list[ClientDataset]:
    """One replication: a dataset per hospital, each from its own random stream."""
    if truth is None:
        truth = draw_ground_truth(cfg)
    return [generate_client(cfg, truth, c) for c in range(cfg.n_clients)]


def replication_config(cfg: SyntheticConfig, replication: int) -> SyntheticConfig:
    return replace(cfg, replication=replication)


@dataclass
class EnumeratedPopulation:
    """A hospital's exact (z, t) support with probability masses.

    Covariates are the conditional means E[x | z]; because treatment depends on
    the covariates only through ``z``, weighted covariances computed on this
    table equal the ones over the full covariate enumeration.
    """

    client_id: int
    X: np.ndarray
    t: np.ndarray
    mass: np.ndarray
    propensity: np.ndarray

    @property
    def treated_rate(self) -> float:
        return float(np.dot(self.mass, self.t) / self.mass.sum())


def enumerate_population(truth: GroundTruth, client: int, n: float = 1.0) -> EnumeratedPopulation:
    """Exact population of ``n`` records (fractional masses) for one hospital."""
    z = np.eye(N_CATEGORIES)
    p = true_propensity(truth, client, z)
    xz = truth.covariate_probs()
    rho = truth.rho_c[client]
    X = np.vstack([xz, xz])
    t = np.concatenate([np.ones(N_CATEGORIES), np.zeros(N_CATEGORIES)])
    mass = n * np.concatenate([rho * p, rho * (1.0 - p)])
    return EnumeratedPopulation(client, X, t, mass, np.concatenate([p, p]))


# ---------------------------------------------------------------- CSV files


def csv_header(d_x: int, with_potential: bool) -> list[str]:
    cols = ["client_id"] + [f"x_{j}" for j in range(d_x)] + ["t", "y"]
    return cols + (["y0", "y1"] if with_potential else [])


def write_csv(path: Union[str, Path], datasets: Sequence[ClientDataset]) -> None:
    with_po = all(d.has_potential_outcomes for d in datasets)
    d_x = datasets[0].d_x
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_header(d_x, with_po))
        for d in datasets:
            for i in range(len(d)):
                row = [str(d.client_id)] + [repr(float(v)) for v in d.X[i]]
                row += [str(int(d.t[i])), repr(float(d.y[i]))]
                if with_po:
                    row += [repr(float(d.y0[i])), repr(float(d.y1[i]))]
                w.writerow(row)


def _parse_client_id(raw: str) -> Union[int, str]:
    try:
        return int(raw)
    except ValueError:
        return raw


def load_csv(path: Union[str, Path]) -> list[ClientDataset]:
    """Read ``client_id,x_0..x_{d-1},t,y[,y0,y1]`` into per-hospital datasets.

    Hospitals keep their order of first appearance; rows keep file order.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        for required in ("client_id", "t", "y"):
            if required not in header:
                raise IngestionError(f"{path}: missing column {required!r}")
        x_cols = [h for h in header if h.startswith("x_")]
        if not x_cols:
            raise IngestionError(f"{path}: no covariate columns x_0..")
        expected = [f"x_{j}" for j in range(len(x_cols))]
        if x_cols != expected:
            raise IngestionError(f"{path}: covariate columns must be {expected[0]}..{expected[-1]} in order")
        has_po = "y0" in header or "y1" in header
        if has_po and not ("y0" in header and "y1" in header):
            raise IngestionError(f"{path}: missing column {'y0' if 'y0' not in header else 'y1'!r}")
        pos = {h: i for i, h in enumerate(header)}
        x_idx = [pos[c] for c in x_cols]

        groups: dict = {}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise IngestionError(f"{path}: row {lineno} has {len(row)} cells, expected {len(header)}")

            def num(col: str, raw: str) -> float:
                try:
                    v = float(raw)
                except ValueError:
                    raise IngestionError(f"{path}: row {lineno}, column {col!r}: not a number ({raw!r})") from None
                if not math.isfinite(v):
                    raise IngestionError(f"{path}: row {lineno}, column {col!r}: non-finite value ({raw!r})")
                return v

            cid = _parse_client_id(row[pos["client_id"]].strip())
            x = [num(c, row[i]) for c, i in zip(x_cols, x_idx)]
            t = num("t", row[pos["t"]])
            if t not in (0.0, 1.0):
                raise IngestionError(f"{path}: row {lineno}, column 't': treatment must be 0 or 1, got {row[pos['t']]!r}")
            rec = [x, t, num("y", row[pos["y"]])]
            if has_po:
                rec += [num("y0", row[pos["y0"]]), num("y1", row[pos["y1"]])]
            groups.setdefault(cid, []).append(rec)

    out = []
    for cid, recs in groups.items():
        X = np.array([r[0] for r in recs], dtype=np.float64).reshape(len(recs), len(x_cols))
        cols = list(zip(*[r[1:] for r in recs]))
        arrays = [np.array(c, dtype=np.float64) for c in cols]
        if has_po:
            out.append(ClientDataset(cid, X, arrays[0], arrays[1], arrays[2], arrays[3]))
        else:
            out.append(ClientDataset(cid, X, arrays[0], arrays[1]))
    return out


def write_truth(path: Union[str, Path], cfg: SyntheticConfig, truth: GroundTruth,
                datasets: Optional[Sequence[ClientDataset]] = None) -> None:
    """JSON sidecar with the config, the drawn coefficients and, when given,
    each record's latent category (enough to recover noise-free effects)."""
    payload = {"config": asdict(cfg), "ground_truth": truth.to_json()}
    payload["config"]["rho"] = list(cfg.rho)
    if datasets is not None:
        payload["latent_category"] = {str(d.client_id): [int(v) for v in d.z] for d in datasets if d.z is not None}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def read_truth(path: Union[str, Path]) -> tuple[GroundTruth, dict]:
    """Ground truth and the ``client_id -> category array`` map from a sidecar."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    latent = {k: np.asarray(v, dtype=np.int64) for k, v in payload.get("latent_category", {}).items()}
    return GroundTruth.from_json(payload["ground_truth"]), latent


def attach_truth(datasets: Sequence[ClientDataset], truth: GroundTruth, latent: dict) -> list[ClientDataset]:
    """Fill ``z`` and the noise-free effect on datasets loaded from CSV.

    Hospitals are matched to ground-truth rows by their position in the file.
    """
    out = []
    for k, d in enumerate(datasets):
        cats = latent.get(str(d.client_id))
        if cats is None or len(cats) != len(d):
            out.append(d)
            continue
        m0, m1 = potential_outcome_means(truth, k, np.eye(N_CATEGORIES)[cats])
        out.append(ClientDataset(d.client_id, d.X, d.t, d.y, d.y0, d.y1, z=cats, ite=m1 - m0))
    return out


# ---------------------------------------------------------------- folds


@dataclass
class FoldPlan:
    """Per-hospital assignment of every record to one of ``n_folds`` sets."""

    n_folds: int
    assignment: dict  # client_id -> (n,) int array

    def split_sizes(self) -> tuple[int, int, int]:
        n_test = max(1, round(0.2 * self.n_folds))
        n_val = max(1, round(0.1 * self.n_folds))
        n_train = self.n_folds - n_test - n_val
        if n_train < 1:
            raise ConfigError(f"{self.n_folds} folds cannot host a train/validation/test split")
        return n_train, n_val, n_test

    def roles(self, rotation: int) -> tuple[list[int], list[int], list[int]]:
        """Fold ids for (train, validation, test) in the given rotation.

        Rotation ``k`` tests on folds ``k, k+1`` (for 10 folds), validates on
        the next one and trains on the remaining seven.
        """
        n_train, n_val, n_test = self.split_sizes()
        order = [(rotation + i) % self.n_folds for i in range(self.n_folds)]
        test = order[:n_test]
        val = order[n_test : n_test + n_val]
        train = order[n_test + n_val :]
        return sorted(train), sorted(val), sorted(test)

    def indices(self, client_id, rotation: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        folds = self.assignment[client_id]
        return tuple(np.flatnonzero(np.isin(folds, f)) for f in self.roles(rotation))


def split_folds(datasets: Sequence[ClientDataset], n_folds: int = 10, seed: int = 0, *keys: int) -> FoldPlan:
    """Random balanced partition of each hospital's records into ``n_folds`` sets."""
    if n_folds < 3:
        raise ConfigError("need at least 3 folds")
    assignment = {}
    for k, d in enumerate(datasets):
        if len(d) < n_folds:
            raise ConfigError(f"client {d.client_id} has {len(d)} records, fewer than {n_folds} folds")
        rng = make_rng(seed, *keys, k)
        folds = np.empty(len(d), dtype=np.int64)
        folds[rng.permutation(len(d))] = np.arange(len(d)) % n_folds
        assignment[d.client_id] = folds
    return FoldPlan(n_folds, assignment)
