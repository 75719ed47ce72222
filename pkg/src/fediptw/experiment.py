"""One (replication, repeat) work item for one method: both training stages,
weight computation, evaluation and persistence.

Stage ``propensity`` writes the treatment model, per-client offsets, patient
weights and hospital weights. Stage ``factual`` reads them back, trains the
outcome model and writes predictions and metrics. Every random stream is
derived from ``(seed, replication, repeat, purpose)`` and never from the
method, so all methods see the same folds and initializations.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cohortweights import ClientStats, compute_hospital_weights
from .datagen import ClientDataset, split_folds
from .evaluation import (
    MetricError,
    MetricReport,
    PluginLearnerConfig,
    auroc_auprc,
    if_pehe,
    mae_ate,
    pehe,
    weighted_cov,
)
from .factual import outcome_kind, predict_ite, predict_outcome, train_factual_federated, train_factual_pooled
from .federation import FederationConfig
from .numerics import MlpParams
from .propensity import (
    PropensityConfig,
    has_both_classes,
    iptw_weights,
    predict_propensity,
    train_propensity_federated,
    train_propensity_local,
    train_propensity_pooled,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MethodSpec:
    """Switches that tell the variants apart.

    ``propensity``: how the treatment model is trained (``federated``,
    ``local`` per hospital, ``pooled`` centrally, or ``none`` for unit
    weights). ``global_rate`` puts the federation-wide treatment rate in the
    weight numerator instead of the hospital's own. ``hospital_weights``
    turns on the density-ratio ``w_c``. ``centralized`` trains the outcome
    model on the pooled data.
    """

    propensity: str
    use_h: bool
    global_rate: bool
    hospital_weights: bool
    centralized: bool


METHODS = {
    "fed-iptw": MethodSpec("federated", True, False, True, False),
    "fed-iptw-noh": MethodSpec("federated", False, False, True, False),
    "iptw-l": MethodSpec("local", False, False, False, False),
    "iptw-g": MethodSpec("federated", False, True, False, False),
    "fedavg-plain": MethodSpec("none", False, False, False, False),
    "global": MethodSpec("pooled", True, True, False, True),
    "global-noh": MethodSpec("pooled", False, True, False, True),
}

STAGES = ("propensity", "factual")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.detail = message

    def __reduce__(self):
        return (StageError, (self.stage, self.detail))


def derive_seed(seed: int, *keys: int) -> int:
    """A 63-bit integer seed derived from ``(seed, *keys)``."""
    state = np.random.SeedSequence([int(seed)] + [int(k) for k in keys]).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


# purposes for derive_seed
_FOLDS, _PROPENSITY, _FACTUAL, _PLUGIN = 1, 2, 3, 4


@dataclass
class RunSettings:
    """Everything a work item needs besides the data."""

    federation: FederationConfig = field(default_factory=FederationConfig)
    propensity: PropensityConfig = field(default_factory=PropensityConfig)
    w_min: float = 0.1
    w_max: float = 10.0
    gp_leave_one_out: bool = True
    n_folds: int = 10
    seed: int = 0
    plugin_epochs: int = 50


@dataclass
class ItemSplit:
    train: list
    val: list
    test: list
    rows: dict  # client_id -> (train_rows, val_rows, test_rows)


def make_split(datasets: Sequence[ClientDataset], settings: RunSettings, replication: int, repeat: int) -> ItemSplit:
    block, rotation = divmod(repeat, settings.n_folds)
    plan = split_folds(datasets, settings.n_folds, derive_seed(settings.seed, replication, block, _FOLDS))
    train, val, test, rows = [], [], [], {}
    for d in datasets:
        tr, va, te = plan.indices(d.client_id, rotation)
        rows[d.client_id] = (tr, va, te)
        train.append(d.subset(tr))
        val.append(d.subset(va))
        test.append(d.subset(te))
    return ItemSplit(train, val, test, rows)


def item_dir(out: Path, method: str, replication: int, repeat: int) -> Path:
    return Path(out) / "items" / method / f"rep{replication:03d}" / f"repeat{repeat:03d}"


# ---------------------------------------------------------------- persistence


def _write_rows(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return repr(float(v))


def save_params(path: Path, p: MlpParams) -> None:
    payload = {"in_dim": p.in_dim, "hidden": p.hidden, "flat": [_fmt(v) for v in p.flatten()]}
    path.write_text(json.dumps(payload) + "\n", encoding="utf-8")


def load_params(path: Path) -> MlpParams:
    payload = json.loads(path.read_text(encoding="utf-8"))
    return MlpParams.unflatten(np.array([float(v) for v in payload["flat"]]), payload["in_dim"], payload["hidden"])


def write_patient_weights(path: Path, ids, row_index: dict, weights: Sequence[np.ndarray]) -> None:
    rows = []
    for cid, w in zip(ids, weights):
        for r, v in zip(row_index[cid], w):
            rows.append([str(cid), int(r), _fmt(v)])
    _write_rows(path, ["client_id", "row", "w"], rows)


def read_patient_weights(path: Path, ids) -> list[np.ndarray]:
    by_client: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            by_client.setdefault(rec["client_id"], []).append(float(rec["w"]))
    return [np.array(by_client.get(str(c), []), dtype=np.float64) for c in ids]


def write_hospital_weights(path: Path, weights: dict) -> None:
    _write_rows(path, ["client_id", "w_c"], [[str(c), _fmt(v)] for c, v in weights.items()])


def read_hospital_weights(path: Path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        return {rec["client_id"]: float(rec["w_c"]) for rec in csv.DictReader(fh)}


# ---------------------------------------------------------------- stage 1


@dataclass
class PropensityArtifacts:
    """Per-client treatment predictors plus training/validation weights."""

    predictors: list  # callable X -> p, one per client (None for unit weights)
    train_weights: list
    val_weights: list
    hospital: dict  # client_id -> w_c
    best_round: int = 0


def _fit_propensity(spec: MethodSpec, split: ItemSplit, settings: RunSettings, seed: int, log_path):
    """Returns one ``X -> p`` callable per client (``None`` entries for unit weights)."""
    fed = settings.federation
    prop_cfg = PropensityConfig(use_h=spec.use_h, hc_epochs=settings.propensity.hc_epochs,
                                hc_lr=settings.propensity.hc_lr, eps_clip=settings.propensity.eps_clip)
    ids = [d.client_id for d in split.train]
    if spec.propensity == "none":
        return [None] * len(ids), {}, {}
    if spec.propensity == "local":
        thetas = {d.client_id: train_propensity_local(d, fed, seed, k, validation=v)
                  for k, (d, v) in enumerate(zip(split.train, split.val))}
        return [_predictor(thetas[c], 0.0) for c in ids], thetas, {c: 0.0 for c in ids}
    if spec.propensity == "federated":
        theta, offsets, _ = train_propensity_federated(split.train, fed, prop_cfg, seed,
                                                       validation=split.val, log_path=log_path)
    elif spec.propensity == "pooled":
        theta, offsets = train_propensity_pooled(split.train, fed, prop_cfg, seed, validation=split.val)
    else:
        raise ValueError(f"unknown propensity mode {spec.propensity!r}")
    return [_predictor(theta, offsets[c]) for c in ids], {"global": theta}, offsets


def _predictor(theta: MlpParams, h: float):
    return lambda X: predict_propensity(theta, X, h)


def _weights_for(d: ClientDataset, predictor, rate: float, eps_clip: float) -> np.ndarray:
    if predictor is None or not has_both_classes(d.t):
        return np.ones(len(d))
    return iptw_weights(predictor(d.X), d.t, rate, eps_clip)


def run_propensity_stage(spec: MethodSpec, split: ItemSplit, settings: RunSettings, seed: int,
                         out: Optional[Path] = None) -> PropensityArtifacts:
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "rounds_propensity.jsonl"
        log_path.write_text("", encoding="utf-8")
    predictors, thetas, offsets = _fit_propensity(spec, split, settings, seed, log_path)
    eps = settings.propensity.eps_clip
    pooled_rate = float(np.concatenate([d.t for d in split.train]).mean())
    train_w, val_w = [], []
    for d, v, pred in zip(split.train, split.val, predictors):
        rate = pooled_rate if spec.global_rate else d.treated_rate
        train_w.append(_weights_for(d, pred, rate, eps))
        val_w.append(_weights_for(v, pred, rate, eps))

    ids = [d.client_id for d in split.train]
    stats = [ClientStats.from_dataset(d) for d in split.train]
    if spec.hospital_weights:
        hw = compute_hospital_weights(stats, w_min=settings.w_min, w_max=settings.w_max,
                                      leave_one_out=settings.gp_leave_one_out).weights
    else:
        hw = {c: 1.0 for c in ids}

    if out is not None:
        for name, theta in thetas.items():
            save_params(out / f"theta_{name}.json", theta)
        hdir = out / "h_c"
        hdir.mkdir(exist_ok=True)
        for c, h in offsets.items():
            (hdir / f"client_{c}.json").write_text(json.dumps({"client_id": str(c), "h_c": _fmt(h)}) + "\n",
                                                  encoding="utf-8")
        with open(out / "client_stats.jsonl", "w", encoding="utf-8") as fh:
            for s in stats:
                fh.write(s.to_json() + "\n")
        rows = {c: split.rows[c][0] for c in ids}
        write_patient_weights(out / "patient_weights.csv", ids, rows, train_w)
        write_patient_weights(out / "val_weights.csv", ids, {c: split.rows[c][1] for c in ids}, val_w)
        write_hospital_weights(out / "hospital_weights.csv", hw)
    return PropensityArtifacts(predictors, train_w, val_w, hw)


def load_propensity_stage(out: Path, split: ItemSplit) -> PropensityArtifacts:
    ids = [d.client_id for d in split.train]
    need = [out / "patient_weights.csv", out / "val_weights.csv", out / "hospital_weights.csv"]
    missing = [p.name for p in need if not p.exists()]
    if missing:
        raise StageError("factual", f"missing cached propensity outputs in {out}: {', '.join(missing)}")
    train_w = read_patient_weights(need[0], ids)
    val_w = read_patient_weights(need[1], ids)
    for d, w in zip(split.train, train_w):
        if len(w) != len(d):
            raise StageError("factual", f"cached weights for client {d.client_id} do not match the fold split")
    raw = read_hospital_weights(need[2])
    hw = {c: raw[str(c)] for c in ids}
    predictors = []
    offsets = {}
    hdir = out / "h_c"
    for c in ids:
        f = hdir / f"client_{c}.json"
        if f.exists():
            offsets[c] = float(json.loads(f.read_text(encoding="utf-8"))["h_c"])
    if (out / "theta_global.json").exists():
        theta = load_params(out / "theta_global.json")
        predictors = [_predictor(theta, offsets.get(c, 0.0)) for c in ids]
    elif all((out / f"theta_{c}.json").exists() for c in ids):
        predictors = [_predictor(load_params(out / f"theta_{c}.json"), 0.0) for c in ids]
    else:
        predictors = [None] * len(ids)
    return PropensityArtifacts(predictors, train_w, val_w, hw)


# ---------------------------------------------------------------- stage 2


def run_factual_stage(spec: MethodSpec, split: ItemSplit, art: PropensityArtifacts, settings: RunSettings,
                      seed: int, plugin_seed: int, method: str, out: Optional[Path] = None) -> MetricReport:
    fed = settings.federation
    kind = outcome_kind(split.train)
    ids = [d.client_id for d in split.train]
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "rounds_factual.jsonl"
        log_path.write_text("", encoding="utf-8")
    if spec.centralized:
        model, best_round = train_factual_pooled(split.train, art.train_weights, fed, seed=seed, output_kind=kind,
                                                 validation=split.val, validation_weights=art.val_weights)
    else:
        model, _, best_round = train_factual_federated(
            split.train, art.train_weights, art.hospital, fed, seed=seed, output_kind=kind,
            validation=split.val, validation_weights=art.val_weights, log_path=log_path)

    e_hat = [predict_ite(model, d.X).e_hat for d in split.test]
    report = MetricReport(method=method, best_round=int(best_round))
    truths = [d.true_ite for d in split.test]
    if all(t is not None for t in truths):
        et, eh = np.concatenate(truths), np.concatenate(e_hat)
        report.rpehe = pehe(et, eh)[1]
        report.mae_ate = mae_ate(et, eh)
    if kind == "sigmoid":
        Xtr = np.vstack([d.X for d in split.train])
        ttr = np.concatenate([d.t for d in split.train])
        ytr = np.concatenate([d.y for d in split.train])
        report.if_pehe = if_pehe(
            Xtr, ttr, ytr,
            np.vstack([d.X for d in split.test]), np.concatenate([d.t for d in split.test]),
            np.concatenate([d.y for d in split.test]), np.concatenate(e_hat),
            PluginLearnerConfig(epochs=settings.plugin_epochs, batch_size=fed.batch_size,
                                learning_rate=fed.learning_rate, seed=plugin_seed))
        try:
            preds = [predict_outcome(model, d.X, d.t) for d in split.test]
            report.auroc, report.auprc = auroc_auprc(np.concatenate(preds), np.concatenate([d.y for d in split.test]))
        except MetricError:
            pass
    if all(p is not None for p in art.predictors):
        scores = np.concatenate([p(d.X) for p, d in zip(art.predictors, split.test)])
        try:
            report.prop_auroc, report.prop_auprc = auroc_auprc(scores, np.concatenate([d.t for d in split.test]))
        except MetricError:
            pass
    Xs = [d.X for d in split.train]
    ts = [d.t for d in split.train]
    local = weighted_cov(Xs, ts, art.train_weights, level="local")
    report.cov_local = local.summary
    report.cov_local_per_client = [float(v) for v in local.per_client_summary]
    report.cov_global = weighted_cov(Xs, ts, art.train_weights, [art.hospital[c] for c in ids],
                                     level="global").summary

    if out is not None:
        save_params(out / "phi.json", model.phi)
        rows = []
        for d, e in zip(split.test, e_hat):
            for r, v in zip(split.rows[d.client_id][2], e):
                rows.append([str(d.client_id), int(r), _fmt(v)])
        _write_rows(out / "e_hat.csv", ["client_id", "row", "e_hat"], rows)
        (out / "metrics.json").write_text(json.dumps(report.to_dict(), sort_keys=True) + "\n", encoding="utf-8")
    return report


# ---------------------------------------------------------------- one item


@dataclass
class WorkItem:
    method: str
    replication: int
    repeat: int


def item_seeds(settings: RunSettings, replication: int, repeat: int) -> dict:
    return {
        "propensity": derive_seed(settings.seed, replication, repeat, _PROPENSITY),
        "factual": derive_seed(settings.seed, replication, repeat, _FACTUAL),
        "plugin": derive_seed(settings.seed, replication, repeat, _PLUGIN),
    }


def run_item(item: WorkItem, datasets: Sequence[ClientDataset], settings: RunSettings,
             out: Optional[Path] = None, stage: str = "all") -> Optional[MetricReport]:
    """Run one method on one replication/repeat; ``stage`` is ``propensity``,
    ``factual`` (reusing cached stage-one outputs) or ``all``."""
    if item.method not in METHODS:
        raise StageError("config", f"unknown method {item.method!r}")
    spec = METHODS[item.method]
    seeds = item_seeds(settings, item.replication, item.repeat)
    try:
        split = make_split(datasets, settings, item.replication, item.repeat)
    except ValueError as exc:
        raise StageError("split", str(exc)) from exc
    d = None if out is None else item_dir(out, item.method, item.replication, item.repeat)
    if stage in ("propensity", "all"):
        try:
            art = run_propensity_stage(spec, split, settings, seeds["propensity"], d)
        except StageError:
            raise
        except Exception as exc:
            raise StageError("propensity", f"{item}: {exc!r}") from exc
        if stage == "propensity":
            return None
    else:
        if d is None:
            raise StageError("factual", "the factual stage alone needs an output directory with cached weights")
        art = load_propensity_stage(d, split)
    try:
        return run_factual_stage(spec, split, art, settings, seeds["factual"], seeds["plugin"], item.method, d)
    except StageError:
        raise
    except Exception as exc:
        raise StageError("factual", f"{item}: {exc!r}") from exc
