"""Experiment configuration: YAML/JSON file plus command-line overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .losses import LossWeights, SimilarityParams
from .streams import KINDS, StreamSpec
from .trainer import Method, TrainConfig, TrainConfigError, validate_config


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    method: str = "dare"
    stream: StreamSpec = field(default_factory=StreamSpec)
    dataset_path: str | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    out: str = "runs"
    seeds: list[int] = field(default_factory=lambda: [0])
    save_checkpoint: bool = True
    save_buffer: bool = True

    @property
    def eval_every(self) -> int:
        return self.train.eval_every

    def to_dict(self) -> dict:
        train = dataclasses.asdict(self.train)
        train["ablate"] = list(self.train.ablate)
        return {
            "method": self.method,
            "stream": dataclasses.asdict(self.stream),
            "dataset_path": self.dataset_path,
            "train": train,
            "out": self.out,
            "seeds": list(self.seeds),
            "save_checkpoint": self.save_checkpoint,
            "save_buffer": self.save_buffer,
        }


_TOP_KEYS = {"method", "stream", "dataset_path", "train", "out", "seeds", "save_checkpoint", "save_buffer"}


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _check_keys(section: str, data: dict, allowed: set[str]) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{section or 'config'} must be a mapping, got {type(data).__name__}")
    for key in data:
        if key not in allowed:
            where = f"{section}." if section else ""
            raise ConfigError(f"unknown config key {where}{key}")


def _coerce(section: str, key: str, value, kind):
    try:
        if kind is bool and not isinstance(value, bool):
            raise TypeError
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{section}.{key} must be {kind.__name__}, got {value!r}") from None


def _build_train(data: dict) -> TrainConfig:
    data = dict(data)
    _check_keys("train", data, _field_names(TrainConfig))
    if "weights" in data and data["weights"] is not None:
        _check_keys("train.weights", data["weights"], _field_names(LossWeights))
        try:
            data["weights"] = LossWeights(**{k: float(v) for k, v in data["weights"].items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train.weights: {exc}") from None
    if "similarity" in data:
        _check_keys("train.similarity", data["similarity"], _field_names(SimilarityParams))
        try:
            data["similarity"] = SimilarityParams(**{k: float(v) for k, v in data["similarity"].items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train.similarity: {exc}") from None
    ints = ("epochs_per_task", "batch_size", "buffer_size", "eval_every", "seed", "ece_bins")
    floats = ("momentum", "ema_update_prob", "ema_decay")
    for key in ints:
        if key in data:
            data[key] = _coerce("train", key, data[key], int)
    for key in floats:
        if key in data:
            data[key] = _coerce("train", key, data[key], float)
    for key in ("learning_rate", "irs_sigma"):
        if data.get(key) is not None:
            data[key] = _coerce("train", key, data[key], float)
    if "hidden_dims" in data:
        if not isinstance(data["hidden_dims"], list) or not data["hidden_dims"]:
            raise ConfigError("train.hidden_dims must be a nonempty list of positive ints")
        data["hidden_dims"] = [_coerce("train", "hidden_dims", h, int) for h in data["hidden_dims"]]
    if "ablate" in data:
        data["ablate"] = tuple(data["ablate"] or ())
    if "symmetric_discrepancy" in data:
        data["symmetric_discrepancy"] = _coerce("train", "symmetric_discrepancy", data["symmetric_discrepancy"], bool)
    return TrainConfig(**data)


def _build_stream(data: dict) -> StreamSpec:
    _check_keys("stream", data, _field_names(StreamSpec))
    data = dict(data)
    if "kind" in data and data["kind"] not in KINDS:
        raise ConfigError(f"stream.kind must be one of {list(KINDS)}, got {data['kind']!r}")
    for key in ("num_domains", "num_classes", "input_dim", "samples_per_domain", "seed"):
        if key in data:
            data[key] = _coerce("stream", key, data[key], int)
    for key in ("test_fraction", "radius", "noise", "domain_offset"):
        if key in data:
            data[key] = _coerce("stream", key, data[key], float)
    spec = StreamSpec(**data)
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(f"stream: {exc}") from None
    return spec


def parse_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Load ``path`` (YAML or JSON), apply flag ``overrides``, fill and validate defaults.

    ``overrides`` keys: method, buffer_size, seeds, out, learning_rate,
    epochs_per_task, eval_every.
    """
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file {p} does not exist")
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from None
    _check_keys("", raw, _TOP_KEYS)
    raw = dict(raw)
    train_raw = dict(raw.get("train") or {})
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    for key in ("buffer_size", "learning_rate", "epochs_per_task", "eval_every"):
        if key in overrides:
            train_raw[key] = overrides.pop(key)
    raw.update(overrides)

    method = raw.get("method", "dare")
    try:
        method = Method(method)
    except ValueError:
        raise ConfigError(f"method must be one of {[m.value for m in Method]}, got {method!r}") from None
    seeds = raw.get("seeds", [0])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("seeds must be a nonempty list of ints")
    seeds = [_coerce("", "seeds", s, int) for s in seeds]

    train = _build_train(train_raw)
    try:
        validate_config(method, train)
        train = train.resolved(method)
    except (TrainConfigError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    cfg = ExperimentConfig(
        method=method.value,
        stream=_build_stream(raw.get("stream") or {}),
        dataset_path=raw.get("dataset_path"),
        train=train,
        out=str(raw.get("out", "runs")),
        seeds=seeds,
        save_checkpoint=_coerce("", "save_checkpoint", raw.get("save_checkpoint", True), bool),
        save_buffer=_coerce("", "save_buffer", raw.get("save_buffer", True), bool),
    )
    return cfg
