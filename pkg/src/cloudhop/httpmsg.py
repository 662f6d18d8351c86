"""Ordered, case-insensitive HTTP header multimap plus the exchange type
passed through request translation."""

from __future__ import annotations

from dataclasses import dataclass, field
from urllib.parse import urlsplit


class Headers:
    """Preserves insertion order and original casing; lookups are
    case-insensitive. Duplicate names are allowed."""

    def __init__(self, items=()):
        self._items: list[tuple[str, str]] = [(str(n), str(v)) for n, v in items]

    def add(self, name: str, value: str) -> None:
        self._items.append((name, value))

    def get(self, name: str, default=None):
        low = name.lower()
        for n, v in self._items:
            if n.lower() == low:
                return v
        return default

    def get_all(self, name: str) -> list[str]:
        low = name.lower()
        return [v for n, v in self._items if n.lower() == low]

    def set(self, name: str, value: str) -> None:
        self.remove(name)
        self.add(name, value)

    def remove(self, name: str) -> None:
        low = name.lower()
        self._items = [(n, v) for n, v in self._items if n.lower() != low]

    def items(self) -> list[tuple[str, str]]:
        return list(self._items)

    def names(self) -> list[str]:
        return [n for n, _ in self._items]

    def copy(self) -> "Headers":
        return Headers(self._items)

    def __contains__(self, name: str) -> bool:
        return self.get(name) is not None

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def __eq__(self, other) -> bool:
        return isinstance(other, Headers) and self._items == other._items

    def __repr__(self) -> str:
        return f"Headers({self._items!r})"


@dataclass
class HttpExchange:
    """One request or response flowing through translation."""

    method: str = "GET"          # request side: GET or POST
    target: str = ""             # request side: absolute URL
    headers: Headers = field(default_factory=Headers)
    body: bytes = b""
    status: int | None = None    # response side only

    @property
    def host(self) -> str:
        return urlsplit(self.target).netloc

    @property
    def path(self) -> str:
        parts = urlsplit(self.target)
        path = parts.path or "/"
        if parts.query:
            path += "?" + parts.query
        return path

    @property
    def scheme(self) -> str:
        return urlsplit(self.target).scheme
