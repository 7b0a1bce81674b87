"""k-means with k-means++ seeding, WSS, K sweeps and elbow selection.

The assignment step runs over fixed-size row chunks. Worker threads only
parallelize chunk evaluation; partial results are always combined in chunk
order, so every result is bitwise independent of the worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ._kernels import assign_points, sq_residuals
from .errors import ConfigError, DataError

# Fixed chunking (not per-worker splits): the combine order never depends on
# how many threads ran, which is what makes kmeans() thread-count invariant.
_CHUNK_ROWS = 2048


@dataclass(frozen=True)
class Assignment:
    """Cluster label per sample, bound to the corpus ordinal order."""

    labels: np.ndarray
    k: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1:
            raise ConfigError("assignment labels must be a 1-d integer vector")
        if self.k < 1:
            raise ConfigError("assignment needs k >= 1")
        if labels.size and (labels.min() < 0 or labels.max() >= self.k):
            raise ConfigError(
                f"labels must lie in [0, {self.k}), found range "
                f"[{labels.min()}, {labels.max()}]"
            )
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.size


@dataclass(frozen=True)
class WssCurve:
    """Within-cluster sum of squares per candidate cluster count."""

    ks: np.ndarray
    wss: np.ndarray

    def __post_init__(self):
        ks = np.asarray(self.ks, dtype=np.int64)
        wss = np.asarray(self.wss, dtype=np.float64)
        if ks.ndim != 1 or wss.shape != ks.shape:
            raise ConfigError("curve requires matching 1-d ks and wss vectors")
        if ks.size and np.any(np.diff(ks) <= 0):
            raise ConfigError("ks must be strictly ascending")
        if np.any(wss < 0):
            raise ConfigError("wss values must be nonnegative")
        ks.setflags(write=False)
        wss.setflags(write=False)
        object.__setattr__(self, "ks", ks)
        object.__setattr__(self, "wss", wss)

    def __len__(self) -> int:
        return self.ks.size


def _seed_list(seed) -> list[int]:
    if isinstance(seed, (int, np.integer)):
        return [int(seed)]
    return [int(s) for s in seed]


def _chunk_slices(n: int) -> list[slice]:
    return [slice(s, min(s + _CHUNK_ROWS, n)) for s in range(0, n, _CHUNK_ROWS)]


def _assign(x: np.ndarray, centroids: np.ndarray, pool) -> np.ndarray:
    slices = _chunk_slices(x.shape[0])
    if pool is None or len(slices) == 1:
        parts = [assign_points(x[s], centroids) for s in slices]
    else:
        parts = list(pool.map(lambda s: assign_points(x[s], centroids), slices))
    return np.concatenate([p[0] for p in parts])


def _update_centroids(x: np.ndarray, labels: np.ndarray, k: int, c_old: np.ndarray) -> np.ndarray:
    counts = np.bincount(labels, minlength=k)
    c = np.empty_like(c_old)
    for j in range(x.shape[1]):
        c[:, j] = np.bincount(labels, weights=x[:, j], minlength=k)
    nonempty = counts > 0
    c[nonempty] /= counts[nonempty, None]
    empty = np.nonzero(~nonempty)[0]
    if empty.size:
        # Empty-cluster repair: hand the centroid to the point farthest from
        # its (freshly updated) assigned centroid, one empty cluster at a
        # time in ascending cluster order. Keeps K fixed.
        c[empty] = c_old[empty]
        residuals = sq_residuals(x, c, labels)
        for e in empty:
            far = int(np.argmax(residuals))
            c[e] = x[far]
            residuals[far] = 0.0
    return c


def _kmeanspp_init(x: np.ndarray, k: int, rng) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=np.float64)
    chosen = np.zeros(n, dtype=bool)
    first = int(rng.integers(n))
    centroids[0] = x[first]
    chosen[first] = True
    diff = x - centroids[0]
    d2 = (diff * diff).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            remaining = np.nonzero(~chosen)[0]
            idx = int(remaining[rng.integers(remaining.size)]) if remaining.size else int(rng.integers(n))
        centroids[j] = x[idx]
        chosen[idx] = True
        diff = x - centroids[j]
        np.minimum(d2, (diff * diff).sum(axis=1), out=d2)
    return centroids


def _lloyd(x, c0, max_iters, pool):
    k = c0.shape[0]
    c = c0
    labels = None
    history = []
    for _ in range(max_iters):
        new_labels = _assign(x, c, pool)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        c = _update_centroids(x, labels, k, c)
        history.append(float(sq_residuals(x, c, labels).sum()))
    else:
        labels = _assign(x, c, pool)
    w = float(sq_residuals(x, c, labels).sum())
    return c, labels, w, history


def kmeans(
    x: np.ndarray,
    k: int,
    restarts: int = 10,
    max_iters: int = 100,
    seed=0,
    workers: int = 1,
    return_history: bool = False,
):
    """Best-of-restarts Lloyd's algorithm with k-means++ seeding.

    Returns ``(centroids, assignment, w)`` where ``centroids`` has shape
    (k, d) and ``w`` equals ``wss(x, centroids, assignment)`` exactly (it is
    computed by that function). With ``return_history=True`` a fourth element
    is appended: one list of per-iteration WSS values per restart, each
    recorded after the assignment+update step.

    Restart r uses its own deterministic stream derived from (seed, r); the
    best restart is the one with the smallest final W (first wins ties).
    """
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    if x.ndim != 2 or x.shape[0] == 0:
        raise ConfigError("kmeans expects a nonempty 2-d matrix")
    if not np.all(np.isfinite(x)):
        raise ConfigError("kmeans input contains non-finite values")
    if k < 1 or k > x.shape[0]:
        raise ConfigError(f"k must be in [1, {x.shape[0]}], got {k}")
    if restarts < 1:
        raise ConfigError("restarts must be >= 1")
    if max_iters < 1:
        raise ConfigError("max_iters must be >= 1")

    prefix = _seed_list(seed)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        best = None
        histories = []
        for r in range(restarts):
            rng = np.random.default_rng(prefix + [r])
            c0 = _kmeanspp_init(x, k, rng)
            c, labels, w, history = _lloyd(x, c0, max_iters, pool)
            histories.append(history)
            if best is None or w < best[2]:
                best = (c, labels, w)
    finally:
        if pool is not None:
            pool.shutdown()

    centroids, labels, _ = best
    assignment = Assignment(labels=labels, k=k)
    w = wss(x, centroids, assignment)
    if return_history:
        return centroids, assignment, w, histories
    return centroids, assignment, w


def wss(x: np.ndarray, centroids: np.ndarray, assignment: Assignment) -> float:
    """Total within-cluster sum of squared distances."""
    x = np.ascontiguousarray(np.asarray(x, dtype=np.float64))
    centroids = np.ascontiguousarray(np.asarray(centroids, dtype=np.float64))
    labels = assignment.labels
    if labels.size != x.shape[0]:
        raise ConfigError("assignment length does not match data")
    if centroids.ndim != 2 or centroids.shape[1] != x.shape[1]:
        raise ConfigError("centroid matrix shape does not match data")
    if assignment.k > centroids.shape[0]:
        raise ConfigError("assignment refers to more clusters than centroids given")
    return float(sq_residuals(x, centroids, labels).sum())


def sweep_k(
    x: np.ndarray,
    k_grid: Sequence[int],
    restarts: int = 10,
    seed=0,
    max_iters: int = 100,
    workers: int = 1,
) -> WssCurve:
    """Best-of-restarts WSS for each candidate K, in ascending K order."""
    ks = [int(k) for k in k_grid]
    if not ks:
        raise ConfigError("k_grid must be nonempty")
    if sorted(set(ks)) != ks:
        raise ConfigError("k_grid must be strictly ascending")
    prefix = _seed_list(seed)
    values = []
    for k in ks:
        _, _, w = kmeans(
            x, k, restarts=restarts, max_iters=max_iters, seed=prefix + [k], workers=workers
        )
        values.append(w)
    return WssCurve(ks=np.asarray(ks), wss=np.asarray(values))


def select_k_elbow(curve: WssCurve) -> tuple[int, np.ndarray]:
    """Pick the K at the knee of a WSS-vs-K curve.

    Both axes are min-max normalized, then each point is scored by its
    perpendicular distance to the chord joining the curve's endpoints. The K
    with the highest score wins; exact ties go to the smallest K.
    """
    if len(curve) < 3:
        raise ConfigError("elbow selection needs a curve with at least 3 points")
    ks = curve.ks.astype(np.float64)
    ws = curve.wss.astype(np.float64)

    def _minmax(v):
        span = v.max() - v.min()
        if span == 0:
            return np.zeros_like(v)
        return (v - v.min()) / span

    u = _minmax(ks)
    v = _minmax(ws)
    sx, sy = u[0], v[0]
    ex, ey = u[-1], v[-1]
    chord = np.hypot(ex - sx, ey - sy)
    if chord == 0:
        scores = np.zeros_like(u)
    else:
        cross = (ex - sx) * (sy - v) - (sx - u) * (ey - sy)
        scores = np.abs(cross) / chord
    # scores within rounding noise of the maximum count as tied; the
    # smallest K among them wins (an exactly linear curve ties everywhere)
    tied = scores >= scores.max() - 1e-12
    best = int(np.argmax(tied))
    return int(curve.ks[best]), scores


# ---------------------------------------------------------------------------
# assignment / curve files
# ---------------------------------------------------------------------------


def write_assignment(path, sample_ids: Sequence[str], assignment: Assignment) -> None:
    if len(sample_ids) != len(assignment):
        raise ConfigError("sample id list and assignment differ in length")
    lines = [f"{sid}\t{int(lab)}" for sid, lab in zip(sample_ids, assignment.labels)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_assignment(path, k: int | None = None) -> tuple[list[str], Assignment]:
    """Read an assignment TSV. ``k`` defaults to max label + 1."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read assignment file {path}: {exc}") from exc
    sample_ids = []
    labels = []
    for ln in text.splitlines():
        if not ln:
            continue
        parts = ln.split("\t")
        if len(parts) != 2:
            raise DataError(f"malformed assignment row in {path}: {ln!r}")
        try:
            labels.append(int(parts[1]))
        except ValueError as exc:
            raise DataError(f"non-integer label in {path}: {ln!r}") from exc
        sample_ids.append(parts[0])
    if not labels:
        raise DataError(f"assignment file {path} is empty")
    arr = np.asarray(labels, dtype=np.int64)
    if k is None:
        k = int(arr.max()) + 1
    return sample_ids, Assignment(labels=arr, k=k)


def write_wss_curve(path, curve: WssCurve) -> None:
    lines = [f"{int(k)}\t{float(w)!r}" for k, w in zip(curve.ks, curve.wss)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_wss_curve(path) -> WssCurve:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read curve file {path}: {exc}") from exc
    ks, ws = [], []
    for ln in text.splitlines():
        if not ln:
            continue
        parts = ln.split("\t")
        if len(parts) != 2:
            raise DataError(f"malformed curve row in {path}: {ln!r}")
        ks.append(int(parts[0]))
        ws.append(float(parts[1]))
    return WssCurve(ks=np.asarray(ks), wss=np.asarray(ws))
