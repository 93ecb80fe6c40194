"""Synthetic longitudinal cohort with monotone disease severity.

Each subject has a logistic severity curve ``s(t) = 4 * sigmoid(r (t - onset))``
with a subject-specific rate ``r`` (slow or fast class), a fixed nuisance
vector, and 2-6 irregular visits. An observation is
``tanh(W1 @ [s, a, nuisance] + b) + noise`` where ``a`` is the scaled age at
the visit and ``(W1, b)`` is one random embedding shared by the cohort. The
age factor drives half of the observation channels through staggered
sigmoid transitions so that ageing moves observations steadily at any age.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

__all__ = [
    "CohortParams",
    "Visit",
    "SubjectRecord",
    "Cohort",
    "VisitPair",
    "PairDataset",
    "SequenceDataset",
    "severity",
    "grade_of",
    "generate_cohort",
    "assign_splits",
    "make_pair_dataset",
    "make_sequence_dataset",
    "write_cohort",
    "read_cohort",
]

GRADE_THRESHOLDS = (0.5, 1.5, 2.5, 3.5)
SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.6, 0.2, 0.2)


@dataclass(frozen=True)
class CohortParams:
    obs_dim: int = 32
    nuisance_dim: int = 8
    noise_sigma: float = 0.05
    min_visits: int = 2
    max_visits: int = 6
    gap_range: tuple[float, float] = (0.5, 2.5)
    age_range: tuple[float, float] = (9.0, 91.0)
    slow_rate: tuple[float, float] = (0.1, 0.3)
    fast_rate: tuple[float, float] = (0.8, 1.6)
    fast_fraction: float = 0.5
    # onset drawn relative to the follow-up window [0, last visit]
    onset_margin: float = 1.0
    age_channels: int = 16
    age_center: float = 50.0
    age_scale: float = 10.0
    age_gain: float = 2.0
    severity_gain: float = 0.04
    nuisance_gain: float = 0.6
    bias_sigma: float = 0.3


@dataclass
class Visit:
    time: float
    age: float
    severity: float
    grade: int
    x: np.ndarray


@dataclass
class SubjectRecord:
    subject_id: int
    baseline_age: float
    speed: str
    rate: float
    onset: float
    nuisance: np.ndarray
    visits: list[Visit] = field(default_factory=list)
    split: str = ""

    @property
    def grades(self) -> list[int]:
        return [v.grade for v in self.visits]


@dataclass
class Cohort:
    seed: int
    params: CohortParams
    subjects: list[SubjectRecord]

    def by_split(self, split: str) -> list[SubjectRecord]:
        return [s for s in self.subjects if s.split == split]


def severity(t, rate: float, onset: float) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if not np.isfinite(onset):
        return np.zeros_like(t)
    return 4.0 / (1.0 + np.exp(-rate * (t - onset)))


def grade_of(s) -> np.ndarray:
    return np.searchsorted(np.asarray(GRADE_THRESHOLDS), np.asarray(s), side="right")


def _embedding(seed: int, p: CohortParams) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xE3B]))
    n_in = 2 + p.nuisance_dim
    w = np.zeros((p.obs_dim, n_in))
    b = rng.normal(0.0, p.bias_sigma, size=p.obs_dim)
    na = p.age_channels
    # ageing channels: staggered transitions across the age range
    lo = (p.age_range[0] - p.age_center) / p.age_scale
    hi = (p.age_range[1] + 12.0 - p.age_center) / p.age_scale
    centers = np.linspace(lo, hi, na)
    signs = rng.choice([-1.0, 1.0], size=na)
    w[:na, 1] = signs * p.age_gain
    b[:na] = -signs * p.age_gain * centers
    w[:, 0] = rng.normal(0.0, p.severity_gain, size=p.obs_dim)
    w[:, 2:] = rng.normal(0.0, p.nuisance_gain / np.sqrt(p.nuisance_dim), size=(p.obs_dim, p.nuisance_dim))
    w[:na, 2:] *= 0.25
    return w, b


def observe(factors: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Noise-free observation for factor rows ``[s, a, nuisance...]``."""
    return np.tanh(factors @ w.T + b)


def _subject(sid: int, seed: int, p: CohortParams, w: np.ndarray, b: np.ndarray) -> SubjectRecord:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 1, sid]))
    baseline_age = rng.uniform(*p.age_range)
    fast = rng.random() < p.fast_fraction
    rate = rng.uniform(*(p.fast_rate if fast else p.slow_rate))
    n_visits = int(rng.integers(p.min_visits, p.max_visits + 1))
    gaps = rng.uniform(*p.gap_range, size=n_visits - 1)
    times = np.concatenate([[0.0], np.cumsum(gaps)])
    onset = rng.uniform(-p.onset_margin, times[-1] + p.onset_margin)
    nuisance = rng.normal(size=p.nuisance_dim)
    s = severity(times, rate, onset)
    ages = baseline_age + times
    a = (ages - p.age_center) / p.age_scale
    factors = np.column_stack([s, a, np.tile(nuisance, (n_visits, 1))])
    xs = observe(factors, w, b) + rng.normal(0.0, p.noise_sigma, size=(n_visits, p.obs_dim))
    grades = grade_of(s)
    visits = [Visit(float(t), float(age), float(sv), int(g), x) for t, age, sv, g, x in zip(times, ages, s, grades, xs)]
    return SubjectRecord(sid, float(baseline_age), "fast" if fast else "slow", float(rate), float(onset), nuisance, visits)


def generate_cohort(n_subjects: int, seed: int, params: CohortParams | None = None) -> Cohort:
    if n_subjects < 10:
        raise ValueError("a cohort needs at least 10 subjects")
    p = params or CohortParams()
    w, b = _embedding(seed, p)
    subjects = [_subject(sid, seed, p, w, b) for sid in range(n_subjects)]
    assign_splits(subjects, seed)
    return Cohort(seed=int(seed), params=p, subjects=subjects)


def assign_splits(subjects: list[SubjectRecord], seed: int) -> None:
    """Subject-level 60/20/20 split, stratified by final grade and speed class."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
    strata: dict[tuple, list[SubjectRecord]] = {}
    for s in subjects:
        strata.setdefault((s.visits[-1].grade, s.visits[0].grade, s.speed), []).append(s)
    # leftovers from small strata are pooled so global proportions stay at 60/20/20
    pool: list[SubjectRecord] = []
    for key in sorted(strata):
        members = strata[key]
        order = rng.permutation(len(members))
        members = [members[i] for i in order]
        k = len(members) // 5
        for i, s in enumerate(members[: 5 * k]):
            s.split = SPLITS[0] if i % 5 < 3 else SPLITS[1 + (i % 5 == 4)]
        pool.extend(members[5 * k :])
    order = rng.permutation(len(pool))
    n = len(pool)
    cuts = np.round(np.cumsum(SPLIT_FRACTIONS) * n).astype(int)
    for rank, idx in enumerate(order):
        pool[idx].split = SPLITS[int(np.searchsorted(cuts, rank, side="right"))]


# ---------------------------------------------------------------- datasets


@dataclass(frozen=True)
class VisitPair:
    subject_id: int
    i: int
    j: int
    split: str


@dataclass
class PairDataset:
    cohort: Cohort
    pairs: list[VisitPair]

    def split(self, name: str) -> PairDataset:
        return PairDataset(self.cohort, [p for p in self.pairs if p.split == name])

    def __len__(self) -> int:
        return len(self.pairs)

    def arrays(self) -> dict[str, np.ndarray]:
        subj = {s.subject_id: s for s in self.cohort.subjects}
        vi = [subj[p.subject_id].visits[p.i] for p in self.pairs]
        vj = [subj[p.subject_id].visits[p.j] for p in self.pairs]
        return {
            "x_i": np.stack([v.x for v in vi]),
            "x_j": np.stack([v.x for v in vj]),
            "t_i": np.array([v.time for v in vi]),
            "t_j": np.array([v.time for v in vj]),
            "grade_i": np.array([v.grade for v in vi]),
            "grade_j": np.array([v.grade for v in vj]),
            "subject": np.array([p.subject_id for p in self.pairs]),
        }


@dataclass
class SequenceDataset:
    cohort: Cohort
    subject_ids: list[int]
    split_tags: list[str]

    def split(self, name: str) -> SequenceDataset:
        keep = [(s, t) for s, t in zip(self.subject_ids, self.split_tags) if t == name]
        return SequenceDataset(self.cohort, [s for s, _ in keep], [t for _, t in keep])

    def __len__(self) -> int:
        return len(self.subject_ids)

    def sequences(self) -> Iterator[SubjectRecord]:
        subj = {s.subject_id: s for s in self.cohort.subjects}
        for sid in self.subject_ids:
            yield subj[sid]


def make_pair_dataset(cohort: Cohort, require_grade_change: bool = True,
                      subjects: Iterable[SubjectRecord] | None = None) -> PairDataset:
    """Consecutive-visit pairs, optionally only from subjects whose grade changes."""
    pairs = []
    for s in cohort.subjects if subjects is None else subjects:
        if require_grade_change and len(set(s.grades)) < 2:
            continue
        pairs.extend(VisitPair(s.subject_id, k, k + 1, s.split) for k in range(len(s.visits) - 1))
    if not pairs:
        raise ValueError("no subject satisfies the pair selection")
    return PairDataset(cohort, pairs)


def make_sequence_dataset(cohort: Cohort, min_visits: int = 4) -> SequenceDataset:
    keep = [s for s in cohort.subjects if len(s.visits) >= min_visits]
    if not keep:
        raise ValueError(f"no subject has at least {min_visits} visits")
    return SequenceDataset(cohort, [s.subject_id for s in keep], [s.split for s in keep])


# ---------------------------------------------------------------- serialization


def _visit_rows(cohort: Cohort) -> Iterator[dict]:
    for s in cohort.subjects:
        for k, v in enumerate(s.visits):
            yield {
                "subject_id": s.subject_id,
                "split": s.split,
                "visit": k,
                "time": v.time,
                "age": v.age,
                "grade": v.grade,
                "severity": v.severity,
                "speed": s.speed,
                "rate": s.rate,
                "onset": s.onset,
                "x": [float(xi) for xi in v.x],
            }


def write_cohort(cohort: Cohort, path: str | Path) -> None:
    """One JSON object per visit; a leading header line carries seed and parameters."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        header = {"format": "lsslnode-cohort", "version": 1, "seed": cohort.seed, "params": asdict(cohort.params)}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for row in _visit_rows(cohort):
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_cohort(path: str | Path) -> Cohort:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != "lsslnode-cohort":
            raise ValueError(f"{path} is not a cohort file")
        params = header["params"]
        params = CohortParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in params.items()})
        subjects: dict[int, SubjectRecord] = {}
        for line in fh:
            row = json.loads(line)
            sid = row["subject_id"]
            if sid not in subjects:
                age0 = row["age"] - row["time"]
                subjects[sid] = SubjectRecord(sid, age0, row["speed"], row["rate"], row["onset"],
                                              np.zeros(params.nuisance_dim), [], row["split"])
            subjects[sid].visits.append(
                Visit(row["time"], row["age"], row["severity"], row["grade"], np.asarray(row["x"], dtype=np.float64))
            )
    return Cohort(seed=header["seed"], params=params, subjects=[subjects[k] for k in sorted(subjects)])
