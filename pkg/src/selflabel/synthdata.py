"""Synthetic paired-modality corpus: generation, augmentation views, file I/O.

A corpus holds N = identities x groups x segments samples. Each sample is a
pair of feature vectors (audio-like and visual-like modality) generated as

    observation = identity prototype + group offset + observation noise

with prototypes drawn from a unit Gaussian independently per modality, group
offsets at a quarter of ``within_identity_spread`` and isotropic observation
noise. Identity labels and recording-group ids are carried for evaluation
only; nothing in the training path may read them.

On disk a corpus is a directory with ``meta.tsv`` (sample_id, group_id,
identity_gt), ``audio.emb`` and ``visual.emb``. Embedding files use the EMB1
layout: magic ``EMB1``, u32-LE row count, u32-LE dimension, then float32-LE
rows in meta order. Features are float32 in memory so file round-trips are
bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError

_EMB_MAGIC = b"EMB1"
_META_COLUMNS = ("sample_id", "group_id", "identity_gt")


@dataclass(frozen=True)
class SynthConfig:
    """Shape and noise parameters of the generated corpus."""

    num_identities: int = 200
    groups_per_identity: int = 3
    segments_per_group: int = 10
    audio_dim: int = 20
    visual_dim: int = 20
    within_identity_spread: float = 4.8
    observation_noise: float = 0.15
    augmentation_noise_range: tuple[float, float] = (1.0, 1.8)
    seed: int = 1234

    def __post_init__(self):
        counts = {
            "num_identities": self.num_identities,
            "groups_per_identity": self.groups_per_identity,
            "segments_per_group": self.segments_per_group,
            "audio_dim": self.audio_dim,
            "visual_dim": self.visual_dim,
        }
        for name, value in counts.items():
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.within_identity_spread < 0:
            raise ConfigError("within_identity_spread must be >= 0")
        if self.observation_noise < 0:
            raise ConfigError("observation_noise must be >= 0")
        low, high = self.augmentation_noise_range
        if low < 0 or high < low:
            raise ConfigError(
                "augmentation_noise_range must satisfy 0 <= low <= high, "
                f"got {self.augmentation_noise_range!r}"
            )
        if self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        object.__setattr__(
            self, "augmentation_noise_range", (float(low), float(high))
        )

    @property
    def num_samples(self) -> int:
        return self.num_identities * self.groups_per_identity * self.segments_per_group

    def to_dict(self) -> dict:
        return {
            "num_identities": self.num_identities,
            "groups_per_identity": self.groups_per_identity,
            "segments_per_group": self.segments_per_group,
            "audio_dim": self.audio_dim,
            "visual_dim": self.visual_dim,
            "within_identity_spread": self.within_identity_spread,
            "observation_noise": self.observation_noise,
            "augmentation_noise_range": list(self.augmentation_noise_range),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        kwargs = dict(data)
        if "augmentation_noise_range" in kwargs:
            kwargs["augmentation_noise_range"] = tuple(kwargs["augmentation_noise_range"])
        return cls(**kwargs)


@dataclass(frozen=True)
class Sample:
    """One corpus sample. identity_gt and group_id are evaluation-only."""

    sample_id: str
    audio: np.ndarray
    visual: np.ndarray
    identity_gt: int
    group_id: str


class MultiModalCorpus:
    """Ordered collection of paired-modality samples.

    Feature matrices are float32 and immutable; index = canonical sample
    ordinal. ``config`` may be None for corpora read from directories written
    by other tools (the optional ``config.json`` sidecar is absent).
    """

    def __init__(self, sample_ids, group_ids, identity_gt, audio, visual, config=None):
        self.sample_ids = list(sample_ids)
        self.group_ids = list(group_ids)
        self.identity_gt = np.asarray(identity_gt, dtype=np.int64)
        self.audio = np.asarray(audio, dtype=np.float32)
        self.visual = np.asarray(visual, dtype=np.float32)
        self.config = config
        n = len(self.sample_ids)
        if len(set(self.sample_ids)) != n:
            raise DataError("sample ids are not unique")
        if not (len(self.group_ids) == len(self.identity_gt) == n):
            raise DataError("metadata columns disagree in length")
        if self.audio.shape[0] != n or self.visual.shape[0] != n:
            raise DataError("feature row count does not match metadata row count")
        if not np.all(np.isfinite(self.audio)) or not np.all(np.isfinite(self.visual)):
            raise DataError("corpus features contain non-finite entries")
        self.audio.setflags(write=False)
        self.visual.setflags(write=False)
        self.identity_gt.setflags(write=False)

    def __len__(self) -> int:
        return len(self.sample_ids)

    def sample(self, i: int) -> Sample:
        return Sample(
            sample_id=self.sample_ids[i],
            audio=self.audio[i],
            visual=self.visual[i],
            identity_gt=int(self.identity_gt[i]),
            group_id=self.group_ids[i],
        )

    def __iter__(self) -> Iterator[Sample]:
        return (self.sample(i) for i in range(len(self)))

    def features(self, modality: str) -> np.ndarray:
        """Feature matrix of one modality; carries no ground-truth columns."""
        if modality == "audio":
            return self.audio
        if modality == "visual":
            return self.visual
        raise ConfigError(f"unknown modality {modality!r}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, MultiModalCorpus):
            return NotImplemented
        return (
            self.sample_ids == other.sample_ids
            and self.group_ids == other.group_ids
            and np.array_equal(self.identity_gt, other.identity_gt)
            and np.array_equal(self.audio, other.audio)
            and np.array_equal(self.visual, other.visual)
            and self.config == other.config
        )


def generate_corpus(config: SynthConfig) -> MultiModalCorpus:
    """Generate a corpus deterministically from ``config`` (seed included).

    Per identity one prototype per modality; per group one offset at
    spread/4; per segment isotropic observation noise. Modalities share only
    the identity index, never the subspace.
    """
    rng = np.random.default_rng(config.seed)
    ni, ng, ns = (
        config.num_identities,
        config.groups_per_identity,
        config.segments_per_group,
    )
    da, dv = config.audio_dim, config.visual_dim
    group_scale = config.within_identity_spread / 4.0

    proto_a = rng.standard_normal((ni, da))
    proto_v = rng.standard_normal((ni, dv))
    goff_a = rng.standard_normal((ni, ng, da)) * group_scale
    goff_v = rng.standard_normal((ni, ng, dv)) * group_scale
    noise_a = rng.standard_normal((ni, ng, ns, da)) * config.observation_noise
    noise_v = rng.standard_normal((ni, ng, ns, dv)) * config.observation_noise

    audio = proto_a[:, None, None, :] + goff_a[:, :, None, :] + noise_a
    visual = proto_v[:, None, None, :] + goff_v[:, :, None, :] + noise_v

    sample_ids = []
    group_ids = []
    identity_gt = np.empty(ni * ng * ns, dtype=np.int64)
    pos = 0
    for i in range(ni):
        for g in range(ng):
            gid = f"id{i:04d}_g{g:02d}"
            for s in range(ns):
                sample_ids.append(f"{gid}_s{s:02d}")
                group_ids.append(gid)
                identity_gt[pos] = i
                pos += 1

    return MultiModalCorpus(
        sample_ids=sample_ids,
        group_ids=group_ids,
        identity_gt=identity_gt,
        audio=audio.reshape(-1, da).astype(np.float32),
        visual=visual.reshape(-1, dv).astype(np.float32),
        config=config,
    )


def perturb_two_views(x: np.ndarray, low: float, high: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Two independent additive-noise views of each row of ``x``.

    Per view, one magnitude is drawn uniformly from [low, high] per row and
    scales a standard-normal perturbation, so each view's expectation is the
    clean row.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    views = []
    for _ in range(2):
        mag = rng.uniform(low, high, size=(x.shape[0], 1))
        views.append(x + mag * rng.standard_normal(x.shape))
    return views[0], views[1]


def make_contrastive_views(sample: Sample, modality: str, rng, noise_range) -> tuple[np.ndarray, np.ndarray]:
    """Two stochastic views of one sample's feature vector."""
    x = sample.audio if modality == "audio" else sample.visual
    if modality not in ("audio", "visual"):
        raise ConfigError(f"unknown modality {modality!r}")
    low, high = noise_range
    v1, v2 = perturb_two_views(np.asarray(x, dtype=np.float64), low, high, rng)
    return v1[0], v2[0]


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def write_embeddings(path, array: np.ndarray) -> None:
    """Write a float matrix in the EMB1 layout (float32, little-endian)."""
    arr = np.ascontiguousarray(np.asarray(array), dtype="<f4")
    if arr.ndim != 2:
        raise ConfigError("embedding array must be 2-dimensional")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_EMB_MAGIC)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_embeddings(path) -> np.ndarray:
    """Read an EMB1 file back into a float32 matrix."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read embedding file {path}: {exc}") from exc
    if len(blob) < 12 or blob[:4] != _EMB_MAGIC:
        raise DataError(f"malformed header in {path}")
    rows, dim = struct.unpack("<II", blob[4:12])
    expected = 12 + rows * dim * 4
    if len(blob) < expected:
        raise DataError(f"truncated payload in {path}")
    if len(blob) > expected:
        raise DataError(f"trailing bytes after payload in {path}")
    data = np.frombuffer(blob, dtype="<f4", count=rows * dim, offset=12)
    return data.reshape(rows, dim).copy()


def write_corpus(corpus: MultiModalCorpus, path) -> None:
    """Write a corpus directory: meta.tsv, audio.emb, visual.emb.

    A config.json sidecar is added when the corpus carries its generation
    config, so written corpora round-trip field-for-field.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(_META_COLUMNS)]
    for sid, gid, ident in zip(corpus.sample_ids, corpus.group_ids, corpus.identity_gt):
        lines.append(f"{sid}\t{gid}\t{int(ident)}")
    (path / "meta.tsv").write_text("\n".join(lines) + "\n")
    write_embeddings(path / "audio.emb", corpus.audio)
    write_embeddings(path / "visual.emb", corpus.visual)
    if corpus.config is not None:
        (path / "config.json").write_text(
            json.dumps(corpus.config.to_dict(), indent=2, sort_keys=True) + "\n"
        )


def read_meta(path) -> tuple[list[str], list[str], np.ndarray]:
    """Parse a meta.tsv file into (sample_ids, group_ids, identity_gt)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read metadata file {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln]
    if not lines or tuple(lines[0].split("\t")) != _META_COLUMNS:
        raise DataError(f"malformed header in {path}")
    sample_ids, group_ids, idents = [], [], []
    for ln in lines[1:]:
        parts = ln.split("\t")
        if len(parts) != 3:
            raise DataError(f"malformed row in {path}: {ln!r}")
        sid, gid, ident = parts
        if not sid or not gid:
            raise DataError(f"empty id in {path}: {ln!r}")
        try:
            idents.append(int(ident))
        except ValueError as exc:
            raise DataError(f"non-integer identity in {path}: {ln!r}") from exc
        sample_ids.append(sid)
        group_ids.append(gid)
    return sample_ids, group_ids, np.asarray(idents, dtype=np.int64)


def read_corpus(path) -> MultiModalCorpus:
    """Read a corpus directory written by :func:`write_corpus`."""
    path = Path(path)
    sample_ids, group_ids, identity_gt = read_meta(path / "meta.tsv")
    audio = read_embeddings(path / "audio.emb")
    visual = read_embeddings(path / "visual.emb")
    n = len(sample_ids)
    if audio.shape[0] != n:
        raise DataError(
            f"row count mismatch: meta.tsv has {n} rows, audio.emb has {audio.shape[0]}"
        )
    if visual.shape[0] != n:
        raise DataError(
            f"row count mismatch: meta.tsv has {n} rows, visual.emb has {visual.shape[0]}"
        )
    config = None
    config_path = path / "config.json"
    if config_path.exists():
        try:
            config = SynthConfig.from_dict(json.loads(config_path.read_text()))
        except (ValueError, TypeError, ConfigError) as exc:
            raise DataError(f"invalid config.json in {path}: {exc}") from exc
    return MultiModalCorpus(
        sample_ids=sample_ids,
        group_ids=group_ids,
        identity_gt=identity_gt,
        audio=audio,
        visual=visual,
        config=config,
    )


def randomize_ground_truth(corpus: MultiModalCorpus, seed: int) -> MultiModalCorpus:
    """Corpus copy with shuffled identity labels and group ids (audit helper)."""
    rng = np.random.default_rng(seed)
    n = len(corpus)
    new_gt = rng.integers(0, max(2, int(corpus.identity_gt.max()) + 1), size=n)
    perm = rng.permutation(n)
    new_groups = [corpus.group_ids[p] for p in perm]
    cfg = corpus.config
    if cfg is not None:
        cfg = replace(cfg)
    return MultiModalCorpus(
        sample_ids=corpus.sample_ids,
        group_ids=new_groups,
        identity_gt=new_gt,
        audio=corpus.audio,
        visual=corpus.visual,
        config=cfg,
    )
