"""Trial scoring: cosine similarity, adaptive symmetric normalization, fusion.

A trial is an (enroll, test) pair; its key says whether the two samples share
an identity. Raw scores are cosines of the two embeddings. AS-Norm
z-normalizes a raw score against each side's top-N cohort scores and averages
the two normalized values:

    s' = 0.5 * [ (s - mu_e) / sigma_e + (s - mu_t) / sigma_t ]

where mu/sigma are the mean and population standard deviation of the top-N
largest cosine scores of that side against the cohort.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericError


@dataclass(frozen=True)
class Trial:
    enroll_id: str
    test_id: str
    is_target: bool


@dataclass(frozen=True)
class ScoreSet:
    """Per-trial scores; ``normalized`` records whether AS-Norm was applied."""

    trials: tuple[Trial, ...]
    scores: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        object.__setattr__(self, "trials", tuple(self.trials))
        if scores.shape != (len(self.trials),):
            raise ConfigError("scores and trials differ in length")
        if not np.all(np.isfinite(scores)):
            raise NumericError("scores contain non-finite values")
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return len(self.trials)

    @property
    def is_target(self) -> np.ndarray:
        return np.asarray([t.is_target for t in self.trials], dtype=bool)


@dataclass(frozen=True)
class Cohort:
    """Impostor embeddings used for score-normalization statistics."""

    embeddings: np.ndarray

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] < 2:
            raise ConfigError("cohort needs a matrix of at least 2 embeddings")
        if not np.all(np.isfinite(emb)):
            raise NumericError("cohort embeddings contain non-finite values")
        object.__setattr__(self, "embeddings", emb)

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]


def _unit(vec: np.ndarray, label: str) -> np.ndarray:
    norm = np.linalg.norm(vec)
    if norm == 0:
        raise NumericError(f"zero-norm embedding for {label}")
    return vec / norm


def cosine_score(trials: Sequence[Trial], embeddings_by_id: Mapping[str, np.ndarray]) -> ScoreSet:
    """Cosine similarity of enroll and test embeddings per trial."""
    units: dict[str, np.ndarray] = {}

    def lookup(sample_id: str) -> np.ndarray:
        if sample_id not in units:
            if sample_id not in embeddings_by_id:
                raise DataError(f"unknown id in trial list: {sample_id!r}")
            units[sample_id] = _unit(
                np.asarray(embeddings_by_id[sample_id], dtype=np.float64), sample_id
            )
        return units[sample_id]

    scores = np.empty(len(trials), dtype=np.float64)
    for i, trial in enumerate(trials):
        scores[i] = float(lookup(trial.enroll_id) @ lookup(trial.test_id))
    return ScoreSet(trials=tuple(trials), scores=scores, normalized=False)


def topn_stats(cohort_scores: np.ndarray, top_n: int) -> tuple[float, float]:
    """Mean and population standard deviation of the top-N largest scores."""
    scores = np.asarray(cohort_scores, dtype=np.float64)
    if not 1 <= top_n <= scores.size:
        raise ConfigError(f"top_n must lie in [1, {scores.size}], got {top_n}")
    top = np.sort(scores)[-top_n:]
    mu = float(top.mean())
    sigma = float(np.sqrt(np.mean((top - mu) ** 2)))
    return mu, sigma


def asnorm_score(raw: float, enroll_cohort: np.ndarray, test_cohort: np.ndarray, top_n: int) -> float:
    """Normalize one raw score given both sides' cohort score vectors."""
    mu_e, sig_e = topn_stats(enroll_cohort, top_n)
    mu_t, sig_t = topn_stats(test_cohort, top_n)
    if sig_e == 0:
        raise NumericError("degenerate cohort: zero top-n variance on enroll side")
    if sig_t == 0:
        raise NumericError("degenerate cohort: zero top-n variance on test side")
    return 0.5 * ((raw - mu_e) / sig_e + (raw - mu_t) / sig_t)


def as_norm(
    raw: ScoreSet,
    embeddings_by_id: Mapping[str, np.ndarray],
    cohort: Cohort,
    top_n: int,
) -> ScoreSet:
    """Adaptive symmetric score normalization of a raw score set.

    Trial order is preserved. Raises a degenerate-cohort error naming the
    trial and side whenever a top-N score set has zero spread.
    """
    if not 1 <= top_n <= cohort.size:
        raise ConfigError(f"top_n must lie in [1, {cohort.size}], got {top_n}")
    cohort_units = cohort.embeddings / np.linalg.norm(cohort.embeddings, axis=1)[:, None]
    if not np.all(np.isfinite(cohort_units)):
        raise NumericError("zero-norm embedding in cohort")

    stats: dict[str, tuple[float, float]] = {}

    def side_stats(sample_id: str) -> tuple[float, float]:
        if sample_id not in stats:
            if sample_id not in embeddings_by_id:
                raise DataError(f"unknown id in trial list: {sample_id!r}")
            unit = _unit(np.asarray(embeddings_by_id[sample_id], dtype=np.float64), sample_id)
            stats[sample_id] = topn_stats(cohort_units @ unit, top_n)
        return stats[sample_id]

    out = np.empty(len(raw), dtype=np.float64)
    for i, trial in enumerate(raw.trials):
        mu_e, sig_e = side_stats(trial.enroll_id)
        mu_t, sig_t = side_stats(trial.test_id)
        if sig_e == 0:
            raise NumericError(
                f"degenerate cohort: zero top-n variance on enroll side of trial "
                f"({trial.enroll_id}, {trial.test_id})"
            )
        if sig_t == 0:
            raise NumericError(
                f"degenerate cohort: zero top-n variance on test side of trial "
                f"({trial.enroll_id}, {trial.test_id})"
            )
        s = raw.scores[i]
        out[i] = 0.5 * ((s - mu_e) / sig_e + (s - mu_t) / sig_t)
    return ScoreSet(trials=raw.trials, scores=out, normalized=True)


def fuse_scores(score_sets: Sequence[ScoreSet], weights: Sequence[float]) -> ScoreSet:
    """Per-trial weighted mean of several score sets over identical trials."""
    if not score_sets:
        raise ConfigError("need at least one score set")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(score_sets),):
        raise ConfigError("one weight per score set required")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ConfigError(f"weights must sum to 1, got {w.sum()!r}")
    first = score_sets[0]
    for other in score_sets[1:]:
        if other.trials != first.trials:
            raise ConfigError("score sets cover different trial lists")
    fused = np.zeros(len(first), dtype=np.float64)
    for weight, ss in zip(w, score_sets):
        fused += weight * ss.scores
    return ScoreSet(
        trials=first.trials,
        scores=fused,
        normalized=all(ss.normalized for ss in score_sets),
    )


# ---------------------------------------------------------------------------
# trial / score files
# ---------------------------------------------------------------------------


def write_trials(path, trials: Sequence[Trial]) -> None:
    lines = [f"{t.enroll_id} {t.test_id} {1 if t.is_target else 0}" for t in trials]
    Path(path).write_text("\n".join(lines) + "\n")


def read_trials(path) -> list[Trial]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read trial file {path}: {exc}") from exc
    trials = []
    for ln in text.splitlines():
        if not ln:
            continue
        parts = ln.split()
        if len(parts) != 3 or parts[2] not in ("0", "1"):
            raise DataError(f"malformed trial row in {path}: {ln!r}")
        trials.append(Trial(enroll_id=parts[0], test_id=parts[1], is_target=parts[2] == "1"))
    if not trials:
        raise DataError(f"trial file {path} is empty")
    return trials


def write_scores(path, score_set: ScoreSet) -> None:
    lines = [
        f"{t.enroll_id} {t.test_id} {s:.6f}" for t, s in zip(score_set.trials, score_set.scores)
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_scores(path, trials: Sequence[Trial]) -> ScoreSet:
    """Read a score file and bind it to a trial list (ids must match in order)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read score file {path}: {exc}") from exc
    rows = [ln for ln in text.splitlines() if ln]
    if len(rows) != len(trials):
        raise DataError(
            f"score file {path} has {len(rows)} rows but trial list has {len(trials)}"
        )
    scores = np.empty(len(rows), dtype=np.float64)
    for i, (ln, trial) in enumerate(zip(rows, trials)):
        parts = ln.split()
        if len(parts) != 3:
            raise DataError(f"malformed score row in {path}: {ln!r}")
        if parts[0] != trial.enroll_id or parts[1] != trial.test_id:
            raise DataError(
                f"score row {i} of {path} names trial ({parts[0]}, {parts[1]}) but the "
                f"trial list has ({trial.enroll_id}, {trial.test_id})"
            )
        try:
            scores[i] = float(parts[2])
        except ValueError as exc:
            raise DataError(f"non-numeric score in {path}: {ln!r}") from exc
    return ScoreSet(trials=tuple(trials), scores=scores)
