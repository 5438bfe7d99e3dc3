"""Prompt template loading and rendering.

Templates are editable text assets shipped with the package (override with
a directory of the same filenames via ``TemplateSet(directory=...)``).
Placeholders use ``{name}`` syntax; unknown placeholders are left intact so
a template edit cannot crash a session.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

TEMPLATE_IDS = (
    "clarify",
    "finalize",
    "localize",
    "answer_plain",
    "answer_with_reference",
    "feedback_classify",
    "distill",
)


class _Tolerant(dict):
    def __missing__(self, key):
        return "{" + key + "}"


class TemplateSet:
    """The prompt templates for one service instance."""

    def __init__(self, directory: str | Path | None = None):
        self._texts: dict[str, str] = {}
        for template_id in TEMPLATE_IDS:
            if directory is not None:
                text = (Path(directory) / f"{template_id}.txt").read_text(encoding="utf-8")
            else:
                text = (
                    resources.files("dialogmem")
                    .joinpath("templates", f"{template_id}.txt")
                    .read_text(encoding="utf-8")
                )
            self._texts[template_id] = text

    def render(self, template_id: str, **placeholders: str) -> str:
        return self._texts[template_id].format_map(_Tolerant(placeholders))
