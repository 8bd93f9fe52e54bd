"""Experiment configuration: JSON in, validated dataclasses out.

Unknown keys are hard errors (sweep configs die on typos, not silently).
Every validation message carries the dotted path of the offending field.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace

from .model import EncoderConfig, ModelConfigError
from .pipeline import ExperimentSpec, TrainConfig, derive_seed
from .synthlang import (CorpusSpec, DEFAULT_LANGUAGE_DEFS, LanguageSpec, Utterance,
                        VOCAB_SIZE, build_corpus, default_pretrain_shares,
                        make_embedding_table, make_language)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LanguageDef:
    id: str
    seed: int
    parent: str | None = None
    alpha: float | None = None
    alphabet_size: int = 10
    mean_len: float = 8.0


@dataclass(frozen=True)
class GridConfig:
    upstreams: tuple[str, ...]
    downstreams: tuple[str, ...]
    sparsities: tuple[float, ...]
    mask_source: tuple
    seeds: tuple[int, ...]


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    model: EncoderConfig
    languages: tuple[LanguageDef, ...]
    pretrain_corpus: CorpusSpec
    finetune_corpus: CorpusSpec
    pretrain: TrainConfig
    upstream: TrainConfig
    downstream: TrainConfig
    noise_sigma: float
    grid: GridConfig

    def build_languages(self) -> dict[str, LanguageSpec]:
        specs: dict[str, LanguageSpec] = {}
        for d in self.languages:
            parent = specs[d.parent] if d.parent else None
            specs[d.id] = make_language(d.seed, parent=parent, alpha=d.alpha,
                                        language_id=d.id,
                                        alphabet_size=d.alphabet_size,
                                        mean_len=d.mean_len)
        return specs

    def experiment_specs(self) -> list[ExperimentSpec]:
        return [ExperimentSpec(up, down, self.grid.sparsities,
                               self.grid.mask_source, self.grid.seeds)
                for up in self.grid.upstreams for down in self.grid.downstreams]

    def build_corpora(self) -> tuple[dict[str, list[Utterance]], dict[str, list[Utterance]]]:
        """(pretraining corpus, fine-tuning corpus), sharing one acoustic codebook."""
        languages = self.build_languages()
        table = make_embedding_table(self.seed, self.model.input_dim)
        pretrain = build_corpus(self.pretrain_corpus, languages,
                                derive_seed(self.seed, "pretrain_corpus"),
                                input_dim=self.model.input_dim,
                                noise_sigma=self.noise_sigma, embedding_table=table)
        finetune = build_corpus(self.finetune_corpus, languages,
                                derive_seed(self.seed, "finetune_corpus"),
                                input_dim=self.model.input_dim,
                                noise_sigma=self.noise_sigma, embedding_table=table)
        return pretrain, finetune


def _require_keys(obj: dict, allowed: set[str], where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")


def _get(obj: dict, key: str, default, where: str, kind=None):
    value = obj.get(key, default)
    if kind is not None and value is not None and not isinstance(value, kind):
        names = kind if isinstance(kind, tuple) else (kind,)
        raise ConfigError(f"{where}.{key}: expected {'/'.join(t.__name__ for t in names)}, "
                          f"got {type(value).__name__}")
    return value


def _parse_train(obj: dict, where: str, default_epochs: int) -> TrainConfig:
    _require_keys(obj, {"epochs", "batch_size", "lr"}, where)
    try:
        return TrainConfig(
            epochs=_get(obj, "epochs", default_epochs, where, int),
            batch_size=_get(obj, "batch_size", 16, where, int),
            lr=float(_get(obj, "lr", 3e-4, where, (int, float))))
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _parse_corpus(obj: dict, where: str, default_proportions: dict[str, float],
                  default_total: int, default_splits: tuple[float, float, float],
                  language_ids: set[str]) -> CorpusSpec:
    _require_keys(obj, {"proportions", "total_utterances", "splits"}, where)
    proportions = _get(obj, "proportions", default_proportions, where, dict)
    for lang in proportions:
        if lang not in language_ids:
            raise ConfigError(f"{where}.proportions: unknown language {lang!r}")
    splits = _get(obj, "splits", list(default_splits), where, (list, tuple))
    if len(splits) != 3:
        raise ConfigError(f"{where}.splits: need exactly 3 fractions")
    try:
        return CorpusSpec(
            proportions={k: float(v) for k, v in proportions.items()},
            total_utterances=_get(obj, "total_utterances", default_total, where, int),
            splits=tuple(float(s) for s in splits))
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _parse_mask_source(value, where: str) -> tuple:
    if value == "self":
        return ("self",)
    if isinstance(value, dict):
        _require_keys(value, {"other", "union"}, where)
        if list(value) == ["other"]:
            return ("other", str(value["other"]))
        if list(value) == ["union"]:
            langs = value["union"]
            if not isinstance(langs, list) or not langs:
                raise ConfigError(f"{where}.union: need a non-empty list of language ids")
            return ("union", tuple(str(x) for x in langs))
    raise ConfigError(f"{where}: expected \"self\", {{\"other\": id}} or "
                      f"{{\"union\": [ids]}}")


def parse_config_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("top level: expected a JSON object")
    _require_keys(data, {"seed", "model", "languages", "pretrain_corpus",
                         "finetune_corpus", "pretrain", "upstream", "downstream",
                         "noise_sigma", "grid"}, "top level")
    seed = _get(data, "seed", 0, "top level", int)

    model_obj = _get(data, "model", {}, "top level", dict)
    _require_keys(model_obj, {"num_layers", "model_dim", "num_heads", "ffn_dim",
                              "input_dim", "vocab_size", "max_len"}, "model")
    try:
        model = EncoderConfig(**{k: int(v) for k, v in model_obj.items()})
    except ModelConfigError as exc:
        raise ConfigError(f"model: {exc}") from exc
    if model.vocab_size != VOCAB_SIZE:
        raise ConfigError(f"model.vocab_size: must be {VOCAB_SIZE} "
                          f"(global alphabet + blank), got {model.vocab_size}")

    lang_objs = _get(data, "languages", None, "top level", list)
    if lang_objs is None:
        languages = tuple(LanguageDef(i, s, p, a) for i, s, p, a in DEFAULT_LANGUAGE_DEFS)
    else:
        languages = []
        for n, obj in enumerate(lang_objs):
            where = f"languages[{n}]"
            if not isinstance(obj, dict):
                raise ConfigError(f"{where}: expected an object")
            _require_keys(obj, {"id", "seed", "parent", "alpha", "alphabet_size",
                                "mean_len"}, where)
            if "id" not in obj or "seed" not in obj:
                raise ConfigError(f"{where}: id and seed are required")
            d = LanguageDef(
                id=str(obj["id"]), seed=_get(obj, "seed", None, where, int),
                parent=_get(obj, "parent", None, where, str),
                alpha=obj.get("alpha"),
                alphabet_size=_get(obj, "alphabet_size", 10, where, int),
                mean_len=float(_get(obj, "mean_len", 8.0, where, (int, float))))
            if d.parent is not None and all(x.id != d.parent for x in languages):
                raise ConfigError(f"{where}.parent: {d.parent!r} not defined earlier")
            if (d.parent is None) != (d.alpha is None):
                raise ConfigError(f"{where}: parent and alpha go together")
            if d.alpha is not None and not 0.0 <= d.alpha <= 1.0:
                raise ConfigError(f"{where}.alpha: {d.alpha} outside [0, 1]")
            languages.append(d)
        languages = tuple(languages)
    ids = {d.id for d in languages}
    if len(ids) != len(languages):
        raise ConfigError("languages: duplicate ids")

    pretrain_corpus = _parse_corpus(
        _get(data, "pretrain_corpus", {}, "top level", dict), "pretrain_corpus",
        default_pretrain_shares() if lang_objs is None else
        {d.id: 1.0 / len(languages) for d in languages},
        600, (1.0, 0.0, 0.0), ids)
    finetune_corpus = _parse_corpus(
        _get(data, "finetune_corpus", {}, "top level", dict), "finetune_corpus",
        {d.id: 1.0 / len(languages) for d in languages},
        800, (0.8, 0.1, 0.1), ids)

    pretrain = _parse_train(_get(data, "pretrain", {}, "top level", dict), "pretrain", 10)
    upstream = _parse_train(_get(data, "upstream", {}, "top level", dict), "upstream", 30)
    downstream = _parse_train(_get(data, "downstream", {}, "top level", dict), "downstream", 10)

    noise_sigma = float(_get(data, "noise_sigma", 0.1, "top level", (int, float)))
    if noise_sigma < 0:
        raise ConfigError("noise_sigma: must be >= 0")

    grid_obj = _get(data, "grid", {}, "top level", dict)
    _require_keys(grid_obj, {"upstreams", "downstreams", "sparsities", "mask_source",
                             "seeds"}, "grid")
    pretrain_langs = sorted(k for k, v in pretrain_corpus.proportions.items() if v > 0)
    upstreams = tuple(_get(grid_obj, "upstreams", pretrain_langs, "grid", list))
    downstreams = tuple(_get(grid_obj, "downstreams", pretrain_langs, "grid", list))
    for name, vals in (("upstreams", upstreams), ("downstreams", downstreams)):
        for lang in vals:
            if lang not in ids:
                raise ConfigError(f"grid.{name}: unknown language {lang!r}")
    sparsities = tuple(float(s) for s in
                       _get(grid_obj, "sparsities", [0.7, 0.8, 0.9], "grid", list))
    for s in sparsities:
        if not 0.0 <= s <= 1.0:
            raise ConfigError(f"grid.sparsities: {s} outside [0, 1]")
    mask_source = _parse_mask_source(grid_obj.get("mask_source", "self"), "grid.mask_source")
    seeds = tuple(_get(grid_obj, "seeds", [0], "grid", list))
    if not seeds:
        raise ConfigError("grid.seeds: need at least one seed")

    return ExperimentConfig(
        seed=seed, model=model, languages=languages,
        pretrain_corpus=pretrain_corpus, finetune_corpus=finetune_corpus,
        pretrain=pretrain, upstream=upstream, downstream=downstream,
        noise_sigma=noise_sigma,
        grid=GridConfig(upstreams, downstreams, sparsities, mask_source, seeds))


def parse_config(path: str) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config_dict(data)


def with_seed(config: ExperimentConfig, seed: int) -> ExperimentConfig:
    return replace(config, seed=seed)
