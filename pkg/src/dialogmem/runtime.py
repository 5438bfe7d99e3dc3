"""Assemble the service core from a configuration."""

from __future__ import annotations

import base64
from dataclasses import dataclass
from pathlib import Path

from .config import ServiceConfig
from .distill import DistillationPipeline
from .gateway import (
    HttpChatProvider,
    HttpEmbeddingProvider,
    MockEmbeddingProvider,
    ModelGateway,
    ScriptedChatProvider,
)
from .orchestrator import DialogueConfig, DialogueOrchestrator
from .store import EventStore
from .store_types import RetrievalConfig
from .templates import TemplateSet
from .update import HttpTrainer, MockTrainer, UpdateManager


@dataclass
class Runtime:
    config: ServiceConfig
    store: EventStore
    gateway: ModelGateway
    templates: TemplateSet
    pipeline: DistillationPipeline
    orchestrator: DialogueOrchestrator
    update_manager: UpdateManager

    def close(self) -> None:
        self.store.close()


def build_runtime(config: ServiceConfig) -> Runtime:
    config.validate()
    store = EventStore(config.storage.data_dir, fsync=config.storage.fsync)

    if config.embedding.kind == "mock":
        embedder = MockEmbeddingProvider(dim=config.embedding.dim, tag=config.embedding.tag or None)
    else:
        embedder = HttpEmbeddingProvider(
            config.embedding.endpoint,
            dim=config.embedding.dim,
            tag=config.embedding.tag or "http",
            timeout=config.embedding.timeout_s,
        )

    if config.chat.kind == "mock":
        if config.chat.rules_file:
            chatter = ScriptedChatProvider.from_file(
                config.chat.rules_file, model_tag=config.chat.model_tag
            )
        else:
            chatter = ScriptedChatProvider([], model_tag=config.chat.model_tag)
    else:
        chatter = HttpChatProvider(
            config.chat.endpoint,
            model_tag=config.chat.model_tag,
            timeout=config.chat.timeout_s,
        )
        chatter.image_encoder = lambda ref: base64.b64encode(store.images.get(ref)).decode()

    gateway = ModelGateway(embedder=embedder, chatter=chatter, image_loader=store.images.get)
    templates = TemplateSet()
    pipeline = DistillationPipeline(
        gateway,
        store,
        templates,
        audit_path=Path(config.storage.data_dir) / "distill_audit.jsonl",
    )
    orchestrator = DialogueOrchestrator(
        gateway,
        store,
        pipeline,
        templates,
        retrieval_config=RetrievalConfig(
            tau_img=config.retrieval.tau_img, tau_text=config.retrieval.tau_text
        ),
        dialogue_config=DialogueConfig(
            max_clarification_rounds=config.dialogue.max_clarification_rounds,
            retrieval_enabled=config.dialogue.retrieval_enabled,
        ),
    )

    def activate(version: str) -> None:
        gateway.chatter.model_tag = version

    trainer = (
        MockTrainer()
        if config.update.trainer == "mock"
        else HttpTrainer(config.update.trainer_endpoint)
    )
    update_manager = UpdateManager(
        store,
        trainer=trainer,
        threshold=config.update.threshold,
        model_activator=activate,
        initial_model_version=config.chat.model_tag,
    )
    # the active version may have advanced in a previous process
    gateway.chatter.model_tag = update_manager.state.active_model_version

    return Runtime(
        config=config,
        store=store,
        gateway=gateway,
        templates=templates,
        pipeline=pipeline,
        orchestrator=orchestrator,
        update_manager=update_manager,
    )
