"""Versioned prompt templates shipped with the package."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

TEMPLATE_VERSION = "1"


@lru_cache(maxsize=None)
def load(name: str) -> str:
    """Return template ``name`` without its trailing newline."""
    text = resources.files(__package__).joinpath(f"{name}.txt").read_text(encoding="utf-8")
    return text[:-1] if text.endswith("\n") else text


def agent_system_prompt() -> str:
    return load("agentic_ocr_system")


def generator_system_prompt() -> str:
    return load("generator_system")


def reranker_instruction() -> str:
    return load("reranker_instruction")
