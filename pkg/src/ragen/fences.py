"""Three-backtick fenced block parsing."""

from __future__ import annotations

import json
import re
from typing import Optional

from .model import Language

FENCE = "```"

# Opening fence at line start with an optional tag; the body runs to the next
# line that starts with a fence.
_BLOCK = re.compile(r"(?m)^```[ \t]*([^\s`]*)[^\n]*\n(.*?)\n?^```", re.DOTALL)

_TAG_ALIASES = {
    "python": Language.PYTHON, "py": Language.PYTHON, "python3": Language.PYTHON,
    "c": Language.C, "h": Language.C,
    "cpp": Language.CPP, "c++": Language.CPP, "cxx": Language.CPP, "cc": Language.CPP, "hpp": Language.CPP,
}


def find_blocks(text: str) -> list[tuple[str, str]]:
    """All fenced blocks as ``(tag, body)`` in document order. The tag is lower-cased."""
    return [(m.group(1).lower(), m.group(2)) for m in _BLOCK.finditer(text)]


def tag_language(tag: str) -> Optional[Language]:
    return _TAG_ALIASES.get(tag.lower())


def fence(language: Language | str, body: str) -> str:
    tag = language.value if isinstance(language, Language) else language
    return f"{FENCE}{tag}\n{body}\n{FENCE}"


def first_json_block(text: str):
    """Parse the first fenced block tagged json (or untagged) that holds valid JSON.

    Falls back to the outermost ``{...}`` span of the text. Returns None when
    nothing parses.
    """
    for tag, body in find_blocks(text):
        if tag in ("json", ""):
            try:
                return json.loads(body)
            except json.JSONDecodeError:
                continue
    start, end = text.find("{"), text.rfind("}")
    if 0 <= start < end:
        try:
            return json.loads(text[start:end + 1])
        except json.JSONDecodeError:
            return None
    return None
