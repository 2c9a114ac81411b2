"""Prompt template loading.

Templates are plain text files with ``{name}`` placeholders. Only names that
are passed to :func:`render` are substituted, so literal braces (for
example JSON samples) need no escaping.
"""

from __future__ import annotations

import os
import re
from importlib import resources
from pathlib import Path
from typing import Optional

_PLACEHOLDER = re.compile(r"\{(\w+)\}")


def render(template: str, **values: object) -> str:
    def sub(m: re.Match) -> str:
        name = m.group(1)
        return str(values[name]) if name in values else m.group(0)

    return _PLACEHOLDER.sub(sub, template)


class Templates:
    """Looks up ``<name>.txt`` in an override directory, then in the bundled set."""

    def __init__(self, directory: Optional[str | os.PathLike] = None):
        self.directory = Path(directory) if directory else None
        self._cache: dict[str, str] = {}

    def get(self, name: str) -> str:
        if name not in self._cache:
            text = None
            if self.directory is not None:
                path = self.directory / f"{name}.txt"
                if path.exists():
                    text = path.read_text(encoding="utf-8")
            if text is None:
                text = resources.files("ragen").joinpath(f"prompts/{name}.txt").read_text(encoding="utf-8")
            self._cache[name] = text
        return self._cache[name]

    def render(self, name: str, **values: object) -> str:
        return render(self.get(name), **values)
