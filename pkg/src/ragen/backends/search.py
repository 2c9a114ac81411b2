"""Search tool adapters: an offline fixture corpus and a generic HTTP endpoint."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

import httpx

from ..errors import ToolUnavailableError


@dataclass(frozen=True)
class SearchHit:
    title: str
    url: str
    snippet: str
    score: float = 0.0


def _normalize_query(query: str) -> str:
    return " ".join(query.lower().split())


def render_hits(hits: list[SearchHit]) -> str:
    return "\n".join(f"[{i}] {h.title} ({h.url}): {h.snippet}" for i, h in enumerate(hits, 1))


class FixtureSearch:
    """Serves results from a JSON corpus ``{query: [{title, url, snippet, score}]}``.

    Queries are matched case- and whitespace-insensitively. Unknown queries
    return no hits rather than failing.
    """

    def __init__(self, corpus: dict[str, list[dict]]):
        self.corpus = {
            _normalize_query(q): [SearchHit(**h) for h in hits] for q, hits in corpus.items()
        }

    @classmethod
    def from_file(cls, path: str | os.PathLike | None = None) -> "FixtureSearch":
        if path is None:
            text = resources.files("ragen.data").joinpath("search_corpus.json").read_text(encoding="utf-8")
        else:
            try:
                text = Path(path).read_text(encoding="utf-8")
            except OSError as exc:
                raise ToolUnavailableError(f"search corpus unreadable: {exc}") from exc
        return cls(json.loads(text))

    def search(self, query: str, k: int = 5) -> list[SearchHit]:
        if k < 1:
            raise ValueError("k must be at least 1")
        return list(self.corpus.get(_normalize_query(query), []))[:k]


class HttpSearch:
    """GET ``{endpoint}?q=<query>&k=<k>`` returning ``{"results": [...]}``."""

    def __init__(self, endpoint: str, timeout_s: float = 10.0, transport: Optional[httpx.BaseTransport] = None):
        self.endpoint = endpoint
        self._client = httpx.Client(timeout=timeout_s, transport=transport)

    def search(self, query: str, k: int = 5) -> list[SearchHit]:
        if k < 1:
            raise ValueError("k must be at least 1")
        try:
            resp = self._client.get(self.endpoint, params={"q": query, "k": k})
            resp.raise_for_status()
            rows = resp.json()["results"]
            hits = [
                SearchHit(
                    title=str(r.get("title", "")),
                    url=str(r.get("url", "")),
                    snippet=str(r.get("snippet", "")),
                    score=float(r.get("score", 0.0)),
                )
                for r in rows
            ]
        except (httpx.HTTPError, ValueError, KeyError, TypeError) as exc:
            raise ToolUnavailableError(f"search endpoint failed: {exc}") from exc
        return hits[:k]


def search(adapter, query: str, k: int = 5) -> list[tuple[str, str, str]]:
    return [(h.title, h.url, h.snippet) for h in adapter.search(query, k)]
