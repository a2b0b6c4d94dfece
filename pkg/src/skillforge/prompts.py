"""Prompt asset loading and placeholder substitution.

Templates use `{name}` placeholders and `{{`/`}}` escapes for literal braces
(templates embed example code that must render with single braces). Binding
values are inserted verbatim and never rescanned, so braces inside values
cannot trigger further substitution.
"""

from __future__ import annotations

import re
from importlib import resources

_PLACEHOLDER_RE = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z_][A-Za-z0-9_]*)*)\}")
_OPEN_SENTINEL = "\x00SF_OPEN\x00"
_CLOSE_SENTINEL = "\x00SF_CLOSE\x00"

META_PROMPT = "meta_prompt.md"
BASE_PROMPT = "base_prompt.md"
BASE_PROMPT_NO_SKILL = "base_prompt_no_skill.md"


class UnboundPlaceholderError(KeyError):
    def __init__(self, name: str):
        super().__init__(name)
        self.name = name

    def __str__(self) -> str:
        return f"unbound placeholder {self.name}"


def load_asset(name: str) -> str:
    return resources.files("skillforge.assets").joinpath(name).read_text(encoding="utf-8")


def render_prompt(template: str, bindings: dict[str, object]) -> str:
    """Substitute every `{name}` placeholder; error on any without a binding."""
    staged = template.replace("{{", _OPEN_SENTINEL).replace("}}", _CLOSE_SENTINEL)

    def _sub(match: re.Match) -> str:
        name = match.group(1)
        if name not in bindings:
            raise UnboundPlaceholderError(name)
        return str(bindings[name])

    rendered = _PLACEHOLDER_RE.sub(_sub, staged)
    return rendered.replace(_OPEN_SENTINEL, "{").replace(_CLOSE_SENTINEL, "}")


def placeholders(template: str) -> set[str]:
    staged = template.replace("{{", _OPEN_SENTINEL).replace("}}", _CLOSE_SENTINEL)
    return {m.group(1) for m in _PLACEHOLDER_RE.finditer(staged)}
