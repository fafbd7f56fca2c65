"""Experiment runners: metrics, linear baselines, CNN feature learning,
parameter transfer, CNN+LSTM dynamic features, best-b ensembles and
Fisher separability.

Every runner takes a master ``seed`` and derives one child stream per
(fold, repeat, learner), so tables are reproducible bit for bit.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .dataio import Dataset, balance, build_sequences, loso_splits
from .models import (CNN, assign_params, build_cnn, build_cnn_lstm, fit, load_model, predict_labels,
                     save_model)
from .optim import ParamSet, RMSProp, SGDMomentum
from .tensorcore import DTYPE, Rng

log = logging.getLogger(__name__)

BANDS_HZ = ((0.1, 1.0), (1.0, 3.0), (3.0, 5.0), (5.0, 10.0), (10.0, 20.0), (20.0, 45.0))


# --- metrics -------------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float


def compute_metrics(predictions, truth) -> Metrics:
    p = np.asarray(predictions).astype(np.int64)
    t = np.asarray(truth).astype(np.int64)
    if p.shape != t.shape:
        raise ValueError(f"{len(p)} predictions for {len(t)} labels")
    if p.size == 0:
        raise ValueError("cannot score an empty prediction set")
    tp = int(np.sum((p == 1) & (t == 1)))
    fp = int(np.sum((p == 1) & (t == 0)))
    fn = int(np.sum((p == 0) & (t == 1)))
    tn = int(np.sum((p == 0) & (t == 0)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if tp else 0.0
    return Metrics(tp, fp, fn, tn, precision, recall, f1)


def fisher_score(features, labels, eps: float = 1e-12) -> float:
    """Mean over dimensions of (mu1 - mu0)^2 / (var1 + var0 + eps)."""
    F = np.asarray(features, dtype=DTYPE)
    y = np.asarray(labels)
    if F.ndim == 1:
        F = F[:, None]
    if F.shape[0] != len(y):
        raise ValueError("one label per feature vector required")
    a, b = F[y == 1], F[y == 0]
    if len(a) == 0 or len(b) == 0:
        raise ValueError("Fisher score needs samples from both classes")
    num = (a.mean(axis=0) - b.mean(axis=0)) ** 2
    return float(np.mean(num / (a.var(axis=0) + b.var(axis=0) + eps)))


# --- linear baselines ------------------------------------------------------------

class LinearSVM:
    """L2-regularised hinge-loss classifier fit by mini-batch subgradient descent
    (Pegasos step size ``1/(lam*t)``) on standardised features."""

    def __init__(self, lam: float = 1e-3, epochs: int = 20, batch_size: int = 100):
        self.lam = lam
        self.epochs = epochs
        self.batch_size = batch_size

    def fit(self, X, y, rng: Rng) -> "LinearSVM":
        X = np.asarray(X, dtype=DTYPE)
        self.mu = X.mean(axis=0)
        sd = X.std(axis=0)
        self.sd = np.where(sd > 0, sd, 1.0)
        Z = (X - self.mu) / self.sd
        s = np.where(np.asarray(y) == 1, 1.0, -1.0)
        n, d = Z.shape
        self.w = np.zeros(d)
        self.b = 0.0
        t = 0
        for _ in range(self.epochs):
            order = rng.permutation(n)
            for start in range(0, n, self.batch_size):
                t += 1
                idx = order[start:start + self.batch_size]
                eta = 1.0 / (self.lam * (t + 10))
                margin = s[idx] * (Z[idx] @ self.w + self.b)
                act = margin < 1
                gw = self.lam * self.w - (s[idx][act, None] * Z[idx][act]).sum(axis=0) / len(idx)
                gb = -s[idx][act].sum() / len(idx)
                self.w -= eta * gw
                self.b -= eta * gb
        return self

    def decision_function(self, X):
        return ((np.asarray(X, dtype=DTYPE) - self.mu) / self.sd) @ self.w + self.b

    def predict(self, X):
        return (self.decision_function(X) >= 0).astype(np.int64)


def raw_features(X) -> np.ndarray:
    """All channels of each window collapsed into one vector (c * w long)."""
    X = np.asarray(X)
    return X.reshape(len(X), -1)


def _zero_crossings(Xc):
    scale = np.abs(Xc).max(axis=-1, keepdims=True)
    sgn = np.sign(np.where(np.abs(Xc) > 1e-12 * np.maximum(scale, 1e-300), Xc, 0.0))
    return ((sgn[..., 1:] * sgn[..., :-1]) < 0).sum(axis=-1)


def band_powers(X, rate: float, bands=BANDS_HZ) -> np.ndarray:
    """DFT power per band, ``(N, c, n_bands)``. Bands are (lo, hi]: a bin on a
    boundary belongs to the lower band; the DC bin is never counted."""
    X = np.asarray(X, dtype=DTYPE)
    w = X.shape[-1]
    spec = np.abs(np.fft.rfft(X, axis=-1)) ** 2 / (w * w)
    freqs = np.fft.rfftfreq(w, d=1.0 / rate)
    return np.stack([spec[..., (freqs > lo) & (freqs <= hi)].sum(axis=-1) for lo, hi in bands], axis=-1)


def handcrafted_features(X, rate: float) -> np.ndarray:
    """Per channel: mean, std, zero crossings, energy; all pairwise channel
    correlations; DFT band powers."""
    X = np.asarray(X, dtype=DTYPE)
    n, c, _ = X.shape
    mean = X.mean(axis=-1)
    Xc = X - mean[..., None]
    std = Xc.std(axis=-1)
    zc = _zero_crossings(Xc)
    energy = np.mean(X * X, axis=-1)
    corr = []
    for i, j in combinations(range(c), 2):
        denom = std[:, i] * std[:, j]
        cov = np.mean(Xc[:, i] * Xc[:, j], axis=-1)
        corr.append(np.divide(cov, denom, out=np.zeros(n), where=denom > 0))
    corr = np.stack(corr, axis=1) if corr else np.zeros((n, 0))
    bp = band_powers(X, rate).reshape(n, -1)
    return np.concatenate([mean, std, zc, energy, corr, bp], axis=1)


def raw_baseline(train: Dataset, test: Dataset, rng: Rng, **svm_kw) -> Metrics:
    clf = LinearSVM(**svm_kw).fit(raw_features(train.X), train.y, rng)
    return compute_metrics(clf.predict(raw_features(test.X)), test.y)


def handcrafted_baseline(train: Dataset, test: Dataset, rng: Rng, **svm_kw) -> Metrics:
    clf = LinearSVM(**svm_kw).fit(handcrafted_features(train.X, train.rate), train.y, rng)
    return compute_metrics(clf.predict(handcrafted_features(test.X, test.rate)), test.y)


# --- configuration and result tables ---------------------------------------------

@dataclass
class ExperimentConfig:
    seed: int = 0
    repeats: int = 10
    balanced: bool = True
    epochs: int = 10
    batch_size: int = 100
    lr: float = 0.01
    momentum: float = 0.9
    pool_mode: str = "max"
    init_std: float | str = "he"
    tau: int = 25
    q: int = 10
    lstm_epochs: int = 10
    lstm_lr: float = 1e-3
    lstm_hidden: int = 8
    cnn_balanced_for_lstm: bool = True
    freeze_cnn: bool = True
    l: int = 10
    jobs: int = 1

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class SubjectResult:
    subject: str
    config: str
    runs: list[Metrics] = field(default_factory=list)

    @property
    def f1s(self) -> np.ndarray:
        return np.array([m.f1 for m in self.runs])

    @property
    def mean_f1(self) -> float:
        return float(self.f1s.mean())

    @property
    def std_f1(self) -> float:
        return float(self.f1s.std())

    @property
    def precision(self) -> float:
        return float(np.mean([m.precision for m in self.runs]))

    @property
    def recall(self) -> float:
        return float(np.mean([m.recall for m in self.runs]))


@dataclass
class ResultTable:
    config: str
    rows: list[SubjectResult]
    extra: dict = field(default_factory=dict)

    @property
    def mean_f1(self) -> float:
        return float(np.mean([r.mean_f1 for r in self.rows]))

    def repeat_means(self, attr: str = "f1") -> np.ndarray:
        """Per-repeat average over subjects of one metric."""
        return np.array([[getattr(m, attr) for m in r.runs] for r in self.rows]).mean(axis=0)

    def summary(self) -> dict:
        return {"mean_f1": self.mean_f1,
                "std_f1": float(np.mean([r.std_f1 for r in self.rows])),
                "precision": float(np.mean([r.precision for r in self.rows])),
                "recall": float(np.mean([r.recall for r in self.rows]))}


CSV_FIELDS = ("subject", "config", "mean_f1", "std_f1", "precision", "recall")


def write_results_csv(tables, path) -> None:
    if isinstance(tables, ResultTable):
        tables = [tables]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for table in tables:
            for r in table.rows:
                w.writerow([r.subject, table.config, repr(r.mean_f1), repr(r.std_f1),
                            repr(r.precision), repr(r.recall)])
            s = table.summary()
            w.writerow(["mean", table.config, repr(s["mean_f1"]), repr(s["std_f1"]),
                        repr(s["precision"]), repr(s["recall"])])


def _map(fn, tasks, jobs: int):
    if jobs <= 1:
        return [fn(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, *zip(*tasks)))


def _collect(data: Dataset, label: str, results) -> ResultTable:
    rows = {s: SubjectResult(s, label) for s in data.subjects}
    for subject, metrics in results:
        rows[subject].runs.append(metrics)
    return ResultTable(label, [rows[s] for s in data.subjects])


# --- static feature learning (CNN) -------------------------------------------------

def train_cnn(train: Dataset, cfg: ExperimentConfig, rng: Rng, balanced: bool | None = None,
              init_params: ParamSet | None = None, init_names=None, epochs: int | None = None):
    """Build, optionally pre-initialise, and train one CNN. Returns (model, losses)."""
    balanced = cfg.balanced if balanced is None else balanced
    data = balance(train, rng.child(0)) if balanced else train
    model = build_cnn(train.X.shape[1], train.X.shape[2], rng=rng.child(1),
                      pool_mode=cfg.pool_mode, init_std=cfg.init_std)
    if init_params is not None:
        assign_params(model, init_params, init_names)
    n_epochs = cfg.epochs if epochs is None else epochs
    losses = fit(model, data, SGDMomentum(cfg.lr, cfg.momentum), n_epochs, rng.child(2), cfg.batch_size)
    return model, losses


def _feature_learning_task(split, cfg, rng, init_params=None, init_names=None):
    model, _ = train_cnn(split.train, cfg, rng, init_params=init_params, init_names=init_names)
    return split.test_subject, compute_metrics(predict_labels(model, split.test.X), split.test.y)


def run_feature_learning(data: Dataset, cfg: ExperimentConfig, label: str | None = None) -> ResultTable:
    """Leave-one-subject-out CNN training, ``cfg.repeats`` seeds per subject."""
    master = Rng(cfg.seed)
    splits = loso_splits(data)
    tasks = [(sp, cfg, master.child(k, r)) for k, sp in enumerate(splits) for r in range(cfg.repeats)]
    label = label or ("cnn_balanced" if cfg.balanced else "cnn_unbalanced")
    return _collect(data, label, _map(_feature_learning_task, tasks, cfg.jobs))


def run_baselines(data: Dataset, cfg: ExperimentConfig) -> list[ResultTable]:
    """Raw-feature and handcrafted-feature linear baselines on balanced training sets."""
    master = Rng(cfg.seed)
    raw, hand = [], []
    for k, sp in enumerate(loso_splits(data)):
        train = balance(sp.train, master.child(k, 0))
        raw.append((sp.test_subject, raw_baseline(train, sp.test, master.child(k, 1))))
        hand.append((sp.test_subject, handcrafted_baseline(train, sp.test, master.child(k, 2))))
    return [_collect(data, "raw_svm", raw), _collect(data, "handcrafted_svm", hand)]


# --- parameter transfer ------------------------------------------------------------

@dataclass
class TransferConfig:
    source: ParamSet
    source_tag: str = "source"
    target_tag: str = "target"
    scope: str = "all_layers"  # or "conv_only"

    def names(self, model: CNN):
        if self.scope == "all_layers":
            return list(model.params)
        if self.scope == "conv_only":
            return model.conv_param_names
        raise ValueError(f"unknown transfer scope {self.scope!r}")


def pretrain_source(source: Dataset, cfg: ExperimentConfig, rng: Rng) -> ParamSet:
    model, _ = train_cnn(source, cfg, rng, balanced=True)
    return model.params.copy()


def transfer_init(tcfg: TransferConfig, c: int, nu: int, cfg: ExperimentConfig, rng: Rng) -> CNN:
    model = build_cnn(c, nu, rng=rng, pool_mode=cfg.pool_mode, init_std=cfg.init_std)
    assign_params(model, tcfg.source, tcfg.names(model))
    return model


def run_transfer(tcfg: TransferConfig, data: Dataset, cfg: ExperimentConfig) -> ResultTable:
    """Experiment-1 protocol on ``data`` with every CNN pre-initialised from the source."""
    master = Rng(cfg.seed)
    probe = build_cnn(data.X.shape[1], data.X.shape[2], pool_mode=cfg.pool_mode)
    names = tcfg.names(probe)
    assign_params(probe, tcfg.source, names)  # fail fast on shape mismatch
    splits = loso_splits(data)
    tasks = [(sp, cfg, master.child(k, r), tcfg.source, names)
             for k, sp in enumerate(splits) for r in range(cfg.repeats)]
    label = f"transfer_{tcfg.scope}_{'balanced' if cfg.balanced else 'unbalanced'}"
    return _collect(data, label, _map(_feature_learning_task, tasks, cfg.jobs))


# --- dynamic feature learning (CNN + LSTM) ---------------------------------------------

def train_cnn_lstm(train: Dataset, cfg: ExperimentConfig, rng: Rng, cnn: CNN | None = None):
    """Train the CNN (unless given) then the LSTM head on unbalanced sequences."""
    if cnn is None:
        cnn, _ = train_cnn(train, cfg, rng.child(0), balanced=cfg.cnn_balanced_for_lstm)
    model = build_cnn_lstm(cnn, cfg.tau, cfg.q, rng=rng.child(1), hidden=cfg.lstm_hidden,
                           freeze_cnn=cfg.freeze_cnn, init_std=cfg.init_std)
    seqs = build_sequences(train, cfg.tau)
    losses = fit(model, seqs, RMSProp(cfg.lstm_lr), cfg.lstm_epochs, rng.child(2), cfg.batch_size)
    return model, losses


def _sequence_eval(model, test: Dataset, tau: int) -> Metrics:
    seqs = build_sequences(test, tau)
    inputs, labels = model.make_inputs(seqs)
    return compute_metrics(predict_labels(model, inputs), labels)


def _dynamic_task(split, cfg, rng):
    model, _ = train_cnn_lstm(split.train, cfg, rng)
    return split.test_subject, _sequence_eval(model, split.test, cfg.tau)


def run_dynamic(data: Dataset, cfg: ExperimentConfig) -> ResultTable:
    master = Rng(cfg.seed)
    tasks = [(sp, cfg, master.child(k, r)) for k, sp in enumerate(loso_splits(data))
             for r in range(cfg.repeats)]
    return _collect(data, f"cnn_lstm_tau{cfg.tau}_q{cfg.q}", _map(_dynamic_task, tasks, cfg.jobs))


# --- ensemble of the best base learners -------------------------------------------------

def majority_vote(predictions) -> np.ndarray:
    """Row-wise vote over ``(b, N)`` 0/1 predictions; a tie counts as SMM."""
    P = np.asarray(predictions, dtype=np.int64)
    return (2 * P.sum(axis=0) >= P.shape[0]).astype(np.int64)


def select_best(train_predictions, y):
    """Rank learners by training F1 and pick the prefix size with the best vote F1.

    Returns ``(ranking, alphas, sweep, b)``; ranking ties keep pool order and
    the sweep argmax prefers the smaller prefix.
    """
    P = np.asarray(train_predictions, dtype=np.int64)
    alphas = np.array([compute_metrics(p, y).f1 for p in P])
    ranking = np.argsort(-alphas, kind="stable")
    sweep = np.array([compute_metrics(majority_vote(P[ranking[:i]]), y).f1
                      for i in range(1, len(P) + 1)])
    b = int(np.argmax(sweep)) + 1
    return ranking, alphas, sweep, b


@dataclass
class EnsembleSpec:
    pool: list
    ranking: np.ndarray
    alphas: np.ndarray
    sweep: np.ndarray
    b: int
    tau: int

    @property
    def selected(self) -> list:
        return [self.pool[i] for i in self.ranking[:self.b]]

    def predict(self, seqs) -> np.ndarray:
        preds = []
        for model in self.selected:
            inputs, _ = model.make_inputs(seqs)
            preds.append(predict_labels(model, inputs))
        return majority_vote(preds)


def save_ensemble(spec: EnsembleSpec, directory) -> Path:
    """Writes every pool member as a parameter file plus ``ensemble.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    members = []
    for i, model in enumerate(spec.pool):
        save_model(model, directory / f"member{i}.params")
        members.append(f"member{i}.params")
    meta = {"tau": spec.tau, "b": spec.b, "members": members,
            "ranking": [int(i) for i in spec.ranking], "alphas": [float(a) for a in spec.alphas],
            "sweep": [float(f) for f in spec.sweep]}
    path = directory / "ensemble.json"
    path.write_text(json.dumps(meta, indent=1) + "\n")
    return path


def load_ensemble(path) -> EnsembleSpec:
    path = Path(path)
    meta = json.loads(path.read_text())
    pool = [load_model(path.parent / m) for m in meta["members"]]
    return EnsembleSpec(pool, np.array(meta["ranking"]), np.array(meta["alphas"]),
                        np.array(meta["sweep"]), meta["b"], meta["tau"])


def train_ensemble(train: Dataset, l: int, tau: int, q: int, rng: Rng,
                   cfg: ExperimentConfig | None = None, cnn: CNN | None = None) -> EnsembleSpec:
    """Train ``l`` independently seeded CNN+LSTM learners, then select the
    best-b subset on the training set.

    Each learner trains its own CNN. Passing ``cnn`` shares one frozen
    extractor across the pool instead, which is cheaper but makes the
    members fail together when that extractor generalises poorly.
    """
    if l < 1:
        raise ValueError("ensemble pool size must be >= 1")
    cfg = cfg or ExperimentConfig()
    cfg = ExperimentConfig(**{**asdict(cfg), "tau": tau, "q": q})
    pool = [train_cnn_lstm(train, cfg, rng.child(1, i), cnn=cnn)[0] for i in range(l)]
    seqs = build_sequences(train, tau)
    preds = []
    for model in pool:
        inputs, labels = model.make_inputs(seqs)
        preds.append(predict_labels(model, inputs))
    ranking, alphas, sweep, b = select_best(preds, seqs.labels)
    return EnsembleSpec(pool, ranking, alphas, sweep, b, tau)


def eval_ensemble(spec: EnsembleSpec, test: Dataset) -> Metrics:
    seqs = build_sequences(test, spec.tau)
    return compute_metrics(spec.predict(seqs), seqs.labels)


def _ensemble_task(split, cfg, rng):
    spec = train_ensemble(split.train, cfg.l, cfg.tau, cfg.q, rng, cfg)
    single = _sequence_eval(spec.pool[0], split.test, cfg.tau)
    return split.test_subject, eval_ensemble(spec, split.test), single, spec.b


def run_ensemble(data: Dataset, cfg: ExperimentConfig) -> tuple[ResultTable, ResultTable]:
    """Returns (ensemble table, single-learner table); the single learner is
    the first pool member, i.e. one independently seeded CNN+LSTM."""
    master = Rng(cfg.seed)
    tasks = [(sp, cfg, master.child(k, r)) for k, sp in enumerate(loso_splits(data))
             for r in range(cfg.repeats)]
    out = _map(_ensemble_task, tasks, cfg.jobs)
    ens = _collect(data, f"ensemble_l{cfg.l}_tau{cfg.tau}_q{cfg.q}", [(s, m) for s, m, _, _ in out])
    single = _collect(data, f"single_tau{cfg.tau}_q{cfg.q}", [(s, m) for s, _, m, _ in out])
    ens.extra["b"] = [b for *_, b in out]
    return ens, single
