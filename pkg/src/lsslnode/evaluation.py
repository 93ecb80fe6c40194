"""Downstream evaluation: age regression, next-visit grade AUCs, trajectory norms, NODE classifier."""

from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from . import _kernels
from .autodiff import Tensor, cross_entropy, mse, no_grad
from .models import (
    DynamicsNet,
    Encoder,
    MLPHead,
    ModelBundle,
    NodeClassifier,
    RecurrentHead,
    _component_rng,
    DYNAMICS_STREAM,
    ENCODER_STREAM,
    head_rng,
)
from .odesolve import SolverConfig, odeint
from .synthdata import Cohort, PairDataset, SequenceDataset, make_pair_dataset
from .training import fit

__all__ = [
    "FinetuneConfig",
    "MetricsReport",
    "GroupNormStats",
    "SplitLeakage",
    "auc",
    "auc_triplet",
    "welch_ttest",
    "finetune_age_regression",
    "finetune_predict_next_visit",
    "norm_groups",
    "tail_scores",
    "trajectory_norm_analysis",
    "evaluate_node_cls",
]

AGE_UNIT = 100.0  # regression target is age / 100
GRADE_CUTS = {"mild+": 1, "moderate+": 2, "severe+": 3}


class SplitLeakage(RuntimeError):
    pass


@dataclass
class FinetuneConfig:
    epochs: int = 30
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 64
    seed: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)


@dataclass
class MetricsReport:
    task: str
    mode: str
    metrics: dict[str, float]
    seed: int
    wall_time: float = 0.0
    artifacts: dict = field(default_factory=dict, repr=False)


@dataclass
class GroupNormStats:
    group: str
    n: int
    mean: float
    std: float
    t: float
    p_value: float


# ---------------------------------------------------------------- statistics


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted one half."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) + len(neg) != len(labels):
        raise ValueError("labels must be 0 or 1")
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC is undefined when only one class is present")
    return _kernels.mann_whitney_u(pos, neg) / (len(pos) * len(neg))


def tail_scores(probs: np.ndarray) -> dict[str, np.ndarray]:
    """P(grade >= k) for each binary threshold, from class probabilities."""
    tails = np.cumsum(probs[:, ::-1], axis=1)[:, ::-1]
    return {name: tails[:, k] for name, k in GRADE_CUTS.items()}


def auc_triplet(probs: np.ndarray, grades) -> dict[str, float]:
    grades = np.asarray(grades)
    out = {}
    for name, scores in tail_scores(probs).items():
        labels = (grades >= GRADE_CUTS[name]).astype(int)
        try:
            out[f"auc_{name}"] = auc(scores, labels)
        except ValueError:
            out[f"auc_{name}"] = float("nan")
    return out


def welch_ttest(a, b) -> tuple[float, float, float]:
    """One-sided Welch test of mean(a) > mean(b); returns (t, df, p)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each group needs at least two samples")
    va = a.var(ddof=1) / len(a)
    vb = b.var(ddof=1) / len(b)
    se2 = va + vb
    if se2 == 0.0:
        return 0.0, float(len(a) + len(b) - 2), 0.5
    t = (a.mean() - b.mean()) / math.sqrt(se2)
    df = se2**2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    return float(t), float(df), float(sps.t.sf(t, df))


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------- helpers


def _encoder_for(source, seed: int) -> Encoder:
    """A private copy of the pretrained encoder, or a fresh one for the from-scratch baseline."""
    if source is None:
        return Encoder(_component_rng(seed, ENCODER_STREAM))
    enc = source.encoder if isinstance(source, ModelBundle) else source
    return copy.deepcopy(enc)


def _check_splits(train_subjects: set[int], test_subjects: set[int]) -> None:
    if train_subjects & test_subjects:
        raise SplitLeakage(f"{len(train_subjects & test_subjects)} subjects appear in train and test")


def _predict(fn, n: int, chunk: int = 512) -> np.ndarray:
    with no_grad():
        return np.concatenate([fn(np.arange(k, min(n, k + chunk))) for k in range(0, n, chunk)])


# ---------------------------------------------------------------- age regression


def _visit_table(seqs: SequenceDataset, split: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xs, ages, sids = [], [], []
    for s in seqs.split(split).sequences():
        if s.split != split:
            raise SplitLeakage(f"subject {s.subject_id} tagged {s.split} served as {split}")
        for v in s.visits:
            xs.append(v.x)
            ages.append(v.age)
            sids.append(s.subject_id)
    return np.array(xs), np.array(ages), np.array(sids)


def finetune_age_regression(pretrained, seqs: SequenceDataset, cfg: FinetuneConfig,
                            mode: str = "scratch") -> MetricsReport:
    start = time.perf_counter()
    x_tr, age_tr, sid_tr = _visit_table(seqs, "train")
    encoder = _encoder_for(pretrained, cfg.seed)
    head = MLPHead(head_rng(cfg.seed, 0), n_out=1)
    params = encoder.parameters() + head.parameters()
    y_tr = (age_tr / AGE_UNIT).reshape(-1, 1)

    def loss_fn(idx):
        return mse(head(encoder(Tensor(x_tr[idx]))), Tensor(y_tr[idx]))

    fit(params, loss_fn, len(x_tr), cfg.epochs, cfg.lr, cfg.weight_decay, cfg.batch_size, cfg.seed, stream=11)
    # test data is read only after training
    x_te, age_te, sid_te = _visit_table(seqs, "test")
    _check_splits(set(sid_tr.tolist()), set(sid_te.tolist()))
    pred = _predict(lambda idx: head(encoder(Tensor(x_te[idx]))).data[:, 0], len(x_te)) * AGE_UNIT
    err = float(np.mean((pred - age_te) ** 2))
    return MetricsReport("age", mode, {"mse": err}, cfg.seed, time.perf_counter() - start,
                         {"pred": pred, "age": age_te})


# ---------------------------------------------------------------- next-visit prediction


def _windows(seqs: SequenceDataset, split: str, history: int = 3):
    xs, target, sids = [], [], []
    for s in seqs.split(split).sequences():
        if len(s.visits) < history + 1:
            raise ValueError(f"subject {s.subject_id} has {len(s.visits)} visits; need {history + 1}")
        for k in range(history, len(s.visits)):
            xs.append(np.stack([v.x for v in s.visits[k - history : k]]))
            target.append(s.visits[k].grade)
            sids.append(s.subject_id)
    return np.array(xs), np.array(target), np.array(sids)


def finetune_predict_next_visit(pretrained, seqs: SequenceDataset, cfg: FinetuneConfig,
                                mode: str = "scratch") -> MetricsReport:
    """Encoder + LSTM over the three previous visits, scored on the next visit's grade."""
    start = time.perf_counter()
    x_tr, g_tr, sid_tr = _windows(seqs, "train")
    encoder = _encoder_for(pretrained, cfg.seed)
    head = RecurrentHead(head_rng(cfg.seed, 1))
    params = encoder.parameters() + head.parameters()

    def logits(x):
        return head([encoder(Tensor(x[:, k])) for k in range(x.shape[1])])

    fit(params, lambda idx: cross_entropy(logits(x_tr[idx]), g_tr[idx]), len(x_tr), cfg.epochs, cfg.lr,
        cfg.weight_decay, cfg.batch_size, cfg.seed, stream=12)
    x_te, g_te, sid_te = _windows(seqs, "test")
    _check_splits(set(sid_tr.tolist()), set(sid_te.tolist()))
    probs = _softmax(_predict(lambda idx: logits(x_te[idx]).data, len(x_te)))
    return MetricsReport("next_visit", mode, auc_triplet(probs, g_te), cfg.seed, time.perf_counter() - start,
                         {"probs": probs, "grades": g_te})


# ---------------------------------------------------------------- NODE classifier


def evaluate_node_cls(pretrained: ModelBundle | None, pairs: PairDataset, cfg: FinetuneConfig,
                      mode: str = "scratch") -> MetricsReport:
    """Single visit plus elapsed time -> next grade, through the pretrained latent flow."""
    start = time.perf_counter()
    if pretrained is not None and not pretrained.node:
        raise ValueError(f"NODE classifier needs NODE pretraining weights, got mode {pretrained.mode}")
    encoder = _encoder_for(pretrained, cfg.seed)
    dynamics = (copy.deepcopy(pretrained.dynamics) if pretrained is not None
                else DynamicsNet(_component_rng(cfg.seed, DYNAMICS_STREAM)))
    model = NodeClassifier(encoder, dynamics, MLPHead(head_rng(cfg.seed, 2), n_out=5))
    tr = pairs.split("train").arrays()
    dt_tr = tr["t_j"] - tr["t_i"]

    def loss_fn(idx):
        return cross_entropy(model(Tensor(tr["x_i"][idx]), dt_tr[idx], cfg.solver), tr["grade_j"][idx])

    fit(model.parameters(), loss_fn, len(dt_tr), cfg.epochs, cfg.lr, cfg.weight_decay, cfg.batch_size,
        cfg.seed, stream=13)
    te = pairs.split("test").arrays()
    _check_splits(set(tr["subject"].tolist()), set(te["subject"].tolist()))
    dt_te = te["t_j"] - te["t_i"]
    logits = _predict(lambda idx: model(Tensor(te["x_i"][idx]), dt_te[idx], cfg.solver).data, len(dt_te))
    probs = _softmax(logits)
    return MetricsReport("node_cls", mode, auc_triplet(probs, te["grade_j"]), cfg.seed,
                         time.perf_counter() - start, {"probs": probs, "grades": te["grade_j"]})


# ---------------------------------------------------------------- trajectory norms


def norm_groups(cohort: Cohort, n_per_group: int = 100, seed: int = 0) -> dict[str, PairDataset]:
    """One random consecutive pair per held-out subject, drawn per speed class."""
    rng = np.random.default_rng(np.random.SeedSequence([int(cohort.seed), int(seed), 31]))
    groups = {}
    for speed in ("fast", "slow"):
        pool = [s for s in cohort.subjects if s.speed == speed and s.split != "train"]
        pick = sorted(rng.choice(len(pool), size=min(n_per_group, len(pool)), replace=False))
        chosen = [pool[i] for i in pick]
        ds = make_pair_dataset(cohort, require_grade_change=False, subjects=chosen)
        keep = []
        for s in chosen:
            options = [p for p in ds.pairs if p.subject_id == s.subject_id]
            keep.append(options[int(rng.integers(len(options)))])
        groups[speed] = PairDataset(cohort, keep)
    return groups


def trajectory_norm_analysis(pretrained, groups: dict[str, PairDataset], mode: str = "scratch", seed: int = 0,
                             solver: SolverConfig | None = None) -> dict[str, tuple[GroupNormStats, GroupNormStats]]:
    """Per-pair ``|dz|`` in the fast and slow groups with a one-sided Welch test (fast > slow).

    Returns results keyed ``"dz"`` and, for NODE bundles, also ``"dz_node"``.
    """
    for name, g in groups.items():
        if any(p.split == "train" for p in g.pairs):
            raise SplitLeakage(f"group {name} contains pretraining subjects")
        if len(g) < 2:
            raise ValueError(f"group {name} has fewer than two pairs")
    encoder = _encoder_for(pretrained, seed)
    dynamics = pretrained.dynamics if isinstance(pretrained, ModelBundle) else None
    norms: dict[str, dict[str, np.ndarray]] = {"dz": {}, "dz_node": {}}
    with no_grad():
        for name, g in groups.items():
            a = g.arrays()
            z_i = encoder(Tensor(a["x_i"])).data
            z_j = encoder(Tensor(a["x_j"])).data
            norms["dz"][name] = np.linalg.norm(z_j - z_i, axis=1)
            if dynamics is not None:
                dt = a["t_j"] - a["t_i"]
                zn = odeint(dynamics, Tensor(z_i), np.zeros_like(dt), dt, solver).data
                norms["dz_node"][name] = np.linalg.norm(zn - z_i, axis=1)
    out = {}
    for kind, vals in norms.items():
        if not vals:
            continue
        t, _, p = welch_ttest(vals["fast"], vals["slow"])
        out[kind] = tuple(
            GroupNormStats(name, len(vals[name]), float(vals[name].mean()), float(vals[name].std(ddof=1)), t, p)
            for name in ("fast", "slow")
        )
    return out
