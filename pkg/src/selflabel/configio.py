"""Key-value config files and construction of typed configs from them.

Config files are plain text: one ``key = value`` per line, ``#`` comments,
dotted keys for sections (``classifier.epochs = 40``). Comma-separated
values parse to tuples. Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

from pathlib import Path

from .encoder import TrainConfig
from .errors import ConfigError
from .metrics import DcfParams
from .pipeline import ClusterSettings, EvalSettings, PipelineConfig
from .synthdata import SynthConfig


def _parse_scalar(raw: str):
    text = raw.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", ""):
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_kv_text(text: str) -> dict:
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {lineno} is not 'key = value': {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"config line {lineno} has an empty key")
        if key in values:
            raise ConfigError(f"duplicate config key {key!r}")
        raw = raw.strip()
        if "," in raw:
            values[key] = tuple(_parse_scalar(p) for p in raw.split(","))
        else:
            values[key] = _parse_scalar(raw)
    return values


def parse_kv_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_kv_text(path.read_text())


def _section(mapping: dict, prefix: str) -> dict:
    out = {}
    for key, value in mapping.items():
        if key.startswith(prefix + "."):
            out[key[len(prefix) + 1 :]] = value
    return out


def _build(cls, kwargs: dict, what: str):
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"invalid {what} settings: {exc}") from exc


def build_synth_config(mapping: dict, seed_override: int | None = None) -> SynthConfig:
    kwargs = _section(mapping, "synth")
    low = kwargs.pop("augmentation_noise_low", None)
    high = kwargs.pop("augmentation_noise_high", None)
    if (low is None) != (high is None):
        raise ConfigError(
            "set both synth.augmentation_noise_low and synth.augmentation_noise_high"
        )
    if low is not None:
        kwargs["augmentation_noise_range"] = (float(low), float(high))
    if seed_override is not None:
        kwargs["seed"] = seed_override
    return _build(SynthConfig, kwargs, "synth")


def build_train_config(mapping: dict, section: str, **defaults) -> TrainConfig:
    kwargs = dict(defaults)
    kwargs.update(_section(mapping, section))
    return _build(TrainConfig, kwargs, section)


def build_classifier_settings(mapping: dict, **defaults):
    """Classifier TrainConfig plus its (range, prob) augmentation settings.

    The ``classifier.aug_*`` keys live beside the optimizer settings in the
    config file but are not TrainConfig fields.
    """
    kwargs = dict(defaults)
    kwargs.update(_section(mapping, "classifier"))
    low = kwargs.pop("aug_low", None)
    high = kwargs.pop("aug_high", None)
    prob = kwargs.pop("aug_prob", 0.6)
    if (low is None) != (high is None):
        raise ConfigError("set both classifier.aug_low and classifier.aug_high")
    aug_range = (float(low), float(high)) if low is not None else None
    return _build(TrainConfig, kwargs, "classifier"), aug_range, float(prob)


_TOP_LEVEL_KEYS = {
    "seed",
    "rounds",
    "corpus",
    "k_grid",
    "fixed_k",
    "use_group_consolidation",
}
_SECTIONS = ("synth", "contrastive", "classifier", "cluster", "eval", "dcf")


def build_pipeline_config(
    mapping: dict,
    output_dir,
    seed_override: int | None = None,
) -> PipelineConfig:
    for key in mapping:
        head = key.split(".", 1)[0]
        if key not in _TOP_LEVEL_KEYS and head not in _SECTIONS:
            raise ConfigError(f"unknown config key {key!r}")

    seed = seed_override if seed_override is not None else mapping.get("seed", 1234)
    classifier_cfg, aug_range, aug_prob = build_classifier_settings(
        mapping, optimizer="sgd", learning_rate=0.5, epochs=40, batch_size=128,
    )
    kwargs = {
        "output_dir": Path(output_dir),
        "seed": int(seed),
        "rounds": int(mapping.get("rounds", 3)),
        "use_group_consolidation": bool(mapping.get("use_group_consolidation", False)),
        "synth": build_synth_config(mapping),
        "contrastive": build_train_config(
            mapping, "contrastive",
            optimizer="adam", learning_rate=0.003, epochs=8, batch_size=128,
        ),
        "classifier": classifier_cfg,
        "classifier_augmentation_prob": aug_prob,
        "cluster": _build(ClusterSettings, _section(mapping, "cluster"), "cluster"),
        "eval": _build(EvalSettings, _section(mapping, "eval"), "eval"),
        "dcf": _build(DcfParams, _section(mapping, "dcf"), "dcf"),
    }
    if aug_range is not None:
        kwargs["classifier_augmentation"] = aug_range
    if mapping.get("corpus") is not None:
        kwargs["corpus_path"] = Path(mapping["corpus"])
    if "k_grid" in mapping and mapping["k_grid"] is not None:
        grid = mapping["k_grid"]
        if not isinstance(grid, tuple):
            grid = (grid,)
        kwargs["k_grid"] = tuple(int(k) for k in grid)
    if mapping.get("fixed_k") is not None:
        kwargs["fixed_k"] = int(mapping["fixed_k"])
    return _build(PipelineConfig, kwargs, "pipeline")
