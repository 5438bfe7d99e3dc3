"""Service configuration: one YAML file, env-var overrides.

Every leaf can be overridden with ``DIALOGMEM_<SECTION>__<FIELD>`` (double
underscore between section and field), e.g.
``DIALOGMEM_UPDATE__THRESHOLD=50`` or ``DIALOGMEM_STORAGE__DATA_DIR=/var/lib/dm``.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigInvalid

ENV_PREFIX = "DIALOGMEM_"


@dataclass
class ListenConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    console_dir: str = ""  # serve the built web console at /console when set


@dataclass
class EmbeddingConfig:
    kind: str = "mock"  # mock | http
    endpoint: str = ""
    dim: int = 576
    tag: str = ""
    timeout_s: float = 30.0


@dataclass
class ChatConfig:
    kind: str = "mock"  # mock | http
    endpoint: str = ""
    model_tag: str = "v1"
    rules_file: str = ""
    timeout_s: float = 30.0


@dataclass
class RetrievalSection:
    tau_img: float = 0.80
    tau_text: float = 0.75


@dataclass
class DialogueSection:
    max_clarification_rounds: int = 5
    retrieval_enabled: bool = True


@dataclass
class UpdateSection:
    threshold: int = 100
    trainer: str = "mock"  # mock | http
    trainer_endpoint: str = ""
    auto: bool = True


@dataclass
class StorageSection:
    data_dir: str = "./data"
    fsync: bool = True


@dataclass
class ServiceConfig:
    listen: ListenConfig = field(default_factory=ListenConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    chat: ChatConfig = field(default_factory=ChatConfig)
    retrieval: RetrievalSection = field(default_factory=RetrievalSection)
    dialogue: DialogueSection = field(default_factory=DialogueSection)
    update: UpdateSection = field(default_factory=UpdateSection)
    storage: StorageSection = field(default_factory=StorageSection)

    def validate(self) -> None:
        if self.embedding.dim < 1:
            raise ConfigInvalid("embedding.dim must be >= 1")
        if self.embedding.kind not in ("mock", "http"):
            raise ConfigInvalid(f"embedding.kind {self.embedding.kind!r} is not mock|http")
        if self.embedding.kind == "http" and not self.embedding.endpoint:
            raise ConfigInvalid("embedding.endpoint required when embedding.kind is http")
        if self.chat.kind not in ("mock", "http"):
            raise ConfigInvalid(f"chat.kind {self.chat.kind!r} is not mock|http")
        if self.chat.kind == "http" and not self.chat.endpoint:
            raise ConfigInvalid("chat.endpoint required when chat.kind is http")
        for name in ("tau_img", "tau_text"):
            value = getattr(self.retrieval, name)
            if not -1.0 <= value <= 1.0:
                raise ConfigInvalid(f"retrieval.{name} must lie in [-1, 1]")
        if self.dialogue.max_clarification_rounds < 1:
            raise ConfigInvalid("dialogue.max_clarification_rounds must be >= 1")
        if self.update.threshold < 1:
            raise ConfigInvalid("update.threshold must be >= 1")
        if self.update.trainer not in ("mock", "http"):
            raise ConfigInvalid(f"update.trainer {self.update.trainer!r} is not mock|http")
        if self.update.trainer == "http" and not self.update.trainer_endpoint:
            raise ConfigInvalid("update.trainer_endpoint required when update.trainer is http")
        if not self.storage.data_dir:
            raise ConfigInvalid("storage.data_dir must be set")
        try:
            Path(self.storage.data_dir).mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigInvalid(f"storage.data_dir is not creatable: {exc}") from exc


def _coerce(section: str, name: str, raw, target_type):
    try:
        if target_type is bool:
            if isinstance(raw, bool):
                return raw
            return str(raw).strip().lower() in ("1", "true", "yes", "on")
        return target_type(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"{section}.{name}: cannot parse {raw!r}") from exc


def _fill_section(section_name: str, obj, data: dict) -> None:
    known = {f.name: f.type for f in fields(obj)}
    for key, value in data.items():
        if key not in known:
            raise ConfigInvalid(f"unknown config key {section_name}.{key}")
        current = getattr(obj, key)
        setattr(obj, key, _coerce(section_name, key, value, type(current)))


def load_config(path: str | Path | None = None, env: dict | None = None) -> ServiceConfig:
    """Build a config from defaults, then the YAML file, then env overrides."""
    config = ServiceConfig()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigInvalid("config file must hold a mapping at top level")
        sections = {f.name: getattr(config, f.name) for f in fields(config)}
        for section_name, section_data in data.items():
            if section_name not in sections:
                raise ConfigInvalid(f"unknown config section {section_name}")
            if not isinstance(section_data, dict):
                raise ConfigInvalid(f"config section {section_name} must be a mapping")
            _fill_section(section_name, sections[section_name], section_data)

    env = dict(os.environ) if env is None else env
    for raw_key, raw_value in env.items():
        if not raw_key.startswith(ENV_PREFIX) or "__" not in raw_key:
            continue
        section_name, field_name = raw_key[len(ENV_PREFIX) :].lower().split("__", 1)
        section = getattr(config, section_name, None)
        if section is None or not dataclasses.is_dataclass(section):
            raise ConfigInvalid(f"env override names unknown section {section_name!r}")
        if field_name not in {f.name for f in fields(section)}:
            raise ConfigInvalid(f"env override names unknown key {section_name}.{field_name}")
        current = getattr(section, field_name)
        setattr(section, field_name, _coerce(section_name, field_name, raw_value, type(current)))

    config.validate()
    return config
