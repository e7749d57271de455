"""Protocol knowledge store with deterministic ranked retrieval.

Entries live in a JSON-lines file, one :class:`RuleEntry` per line, so new
anomaly and strategy records can be appended while a campaign runs.

Scoring is weighted term overlap: each query term contributes 2 if it is a
keyword of the entry, else 1.5 if it appears in the title, else 1 if it
appears in the body. The sum is divided by ``2 * len(terms)``, the best score
any entry could reach, so scores fall in [0, 1] and do not depend on the rest
of the store.
"""

from __future__ import annotations

import json
import logging
import math
import re
import threading
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Protocol, Sequence, Union

logger = logging.getLogger(__name__)

KINDS = frozenset(
    {"command-format", "field-constraint", "vulnerability-note", "anomaly-record", "strategy-record"}
)
DEFAULT_THRESHOLD = 0.85
DEFAULT_CONTEXT_BUDGET = 2048
TRUNCATION_MARKER = "\n[context truncated]"

KEYWORD_WEIGHT = 2.0
TITLE_WEIGHT = 1.5
BODY_WEIGHT = 1.0

_STOP = frozenset({"a", "an", "the", "of", "for", "and", "to", "in", "on", "is", "with", "by"})
_TOKEN = re.compile(r"[a-z0-9_]+")


class KnowledgeError(Exception):
    pass


class ParseError(KnowledgeError):
    def __init__(self, message: str, line: int, path: str = "<store>"):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


class DuplicateId(KnowledgeError):
    pass


def normalize_term(token: str) -> str:
    token = token.lower()
    if token.isdigit():
        return str(int(token))
    if token.startswith("0x"):
        try:
            return str(int(token, 16))
        except ValueError:
            return token
    return token


def terms(text: str) -> list[str]:
    """Normalized, de-duplicated query terms in first-seen order."""
    out: list[str] = []
    for tok in _TOKEN.findall(text.lower()):
        if tok in _STOP:
            continue
        t = normalize_term(tok)
        if t not in out:
            out.append(t)
    return out


@dataclass(frozen=True)
class RuleEntry:
    id: str
    protocol_id: str
    kind: str
    title: str
    body: str
    keywords: tuple[str, ...]
    source: str = ""

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise KnowledgeError(f"entry {self.id}: unknown kind {self.kind!r}")
        if not self.keywords:
            raise KnowledgeError(f"entry {self.id}: keywords must not be empty")
        object.__setattr__(self, "keywords", tuple(self.keywords))

    @classmethod
    def from_dict(cls, doc: dict) -> "RuleEntry":
        return cls(
            id=str(doc["id"]),
            protocol_id=str(doc["protocol_id"]),
            kind=str(doc["kind"]),
            title=str(doc.get("title", "")),
            body=str(doc.get("body", "")),
            keywords=tuple(str(k) for k in doc["keywords"]),
            source=str(doc.get("source", "")),
        )

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["keywords"] = list(self.keywords)
        return doc


@dataclass(frozen=True)
class RetrievalResult:
    entry: RuleEntry
    score: float


class Retriever(Protocol):
    def retrieve(self, query: str, k: int = 1) -> list[RetrievalResult]: ...


class _Indexed:
    __slots__ = ("entry", "keywords", "title", "body")

    def __init__(self, entry: RuleEntry):
        self.entry = entry
        self.keywords = {normalize_term(t) for kw in entry.keywords for t in _split_keyword(kw)}
        self.title = set(terms(entry.title))
        self.body = set(terms(entry.body))

    def weight(self, term: str) -> float:
        if term in self.keywords:
            return KEYWORD_WEIGHT
        if term in self.title:
            return TITLE_WEIGHT
        if term in self.body:
            return BODY_WEIGHT
        return 0.0


def _split_keyword(keyword: str) -> list[str]:
    # "function_code" stays whole; "read holding" contributes both words
    return _TOKEN.findall(keyword.lower()) or [keyword.lower()]


class KnowledgeStore:
    """Keyword-indexed rule entries, optionally backed by an append-only file."""

    def __init__(
        self,
        entries: Iterable[RuleEntry] = (),
        path: Optional[Union[str, Path]] = None,
        threshold: float = DEFAULT_THRESHOLD,
    ):
        self.path = Path(path) if path is not None else None
        self.threshold = threshold
        self._lock = threading.Lock()
        self._entries: dict[str, _Indexed] = {}
        self._by_term: dict[str, set[str]] = {}
        for entry in entries:
            self._index(entry)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, entry_id: str) -> bool:
        return entry_id in self._entries

    def get(self, entry_id: str) -> RuleEntry:
        return self._entries[entry_id].entry

    def entries(self) -> list[RuleEntry]:
        return [ix.entry for ix in self._entries.values()]

    def _index(self, entry: RuleEntry) -> None:
        if entry.id in self._entries:
            raise DuplicateId(entry.id)
        ix = _Indexed(entry)
        self._entries[entry.id] = ix
        for t in ix.keywords | ix.title | ix.body:
            self._by_term.setdefault(t, set()).add(entry.id)

    def score(self, entry_id: str, query: str) -> float:
        qterms = terms(query)
        if not qterms:
            return 0.0
        ix = self._entries[entry_id]
        return sum(ix.weight(t) for t in qterms) / (KEYWORD_WEIGHT * len(qterms))

    def retrieve(self, query: str, k: int = 1, threshold: Optional[float] = None) -> list[RetrievalResult]:
        """Top ``k`` entries scoring at least ``threshold``; ties broken by id."""
        if k < 1:
            raise ValueError("k must be >= 1")
        qterms = terms(query)
        if not qterms:
            return []
        cutoff = self.threshold if threshold is None else threshold
        best = KEYWORD_WEIGHT * len(qterms)
        with self._lock:
            candidates = set().union(*(self._by_term.get(t, set()) for t in qterms))
            scored = []
            for entry_id in candidates:
                ix = self._entries[entry_id]
                s = sum(ix.weight(t) for t in qterms) / best
                if s >= cutoff - 1e-12:
                    scored.append((-s, entry_id, ix.entry))
        scored.sort(key=lambda item: (item[0], item[1]))
        return [RetrievalResult(entry, -neg) for neg, _, entry in scored[:k]]

    def append(self, entry: RuleEntry) -> RuleEntry:
        """Index ``entry`` and, for file-backed stores, append it to the file."""
        with self._lock:
            self._index(entry)
            if self.path is not None:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry.to_dict(), sort_keys=True) + "\n")
        return entry

    def next_id(self, prefix: str) -> str:
        n = sum(1 for eid in self._entries if eid.startswith(prefix)) + 1
        while f"{prefix}{n:05d}" in self._entries:
            n += 1
        return f"{prefix}{n:05d}"


def load_store(path: Union[str, Path], threshold: float = DEFAULT_THRESHOLD) -> KnowledgeStore:
    path = Path(path)
    store = KnowledgeStore(path=path, threshold=threshold)
    text = path.read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            entry = RuleEntry.from_dict(json.loads(line))
        except (ValueError, KeyError, TypeError, KnowledgeError) as exc:
            raise ParseError(str(exc), lineno, str(path)) from None
        if entry.id in store:
            raise DuplicateId(f"{path}:{lineno}: duplicate id {entry.id!r}")
        store._index(entry)
    return store


def append_entry(store: KnowledgeStore, entry: RuleEntry) -> KnowledgeStore:
    store.append(entry)
    return store


def retrieve(store: Retriever, query: str, k: int = 1) -> list[RetrievalResult]:
    return store.retrieve(query, k)


def format_context(results: Sequence[RetrievalResult], budget: int = DEFAULT_CONTEXT_BUDGET) -> tuple[str, bool]:
    """Render results as prompt context within ``budget`` characters.

    Returns ``(text, truncated)``; a truncated text ends with a visible marker.
    """
    text = "\n\n".join(f"[{r.entry.id}] {r.entry.title}\n{r.entry.body}" for r in results)
    return truncate(text, budget)


def truncate(text: str, budget: int) -> tuple[str, bool]:
    if len(text) <= budget:
        return text, False
    keep = max(0, budget - len(TRUNCATION_MARKER))
    return text[:keep] + TRUNCATION_MARKER, True


def bundled_store_path() -> Path:
    return Path(str(resources.files("icsfuzz") / "data" / "knowledge" / "ics_rules.jsonl"))


class EmbeddingRetriever:
    """Cosine-similarity retrieval over vectors from a remote embedding service.

    The service answers ``POST /embed`` with ``{"texts": [...]}`` by
    ``{"vectors": [[...], ...]}``. Entry vectors are fetched once and cached.
    """

    def __init__(self, store: KnowledgeStore, url: str, threshold: float = DEFAULT_THRESHOLD, timeout: float = 5.0):
        self.store = store
        self.url = url.rstrip("/")
        self.threshold = threshold
        self.timeout = timeout
        self._vectors: dict[str, list[float]] = {}

    def _embed(self, texts: list[str]) -> list[list[float]]:
        from urllib import request

        body = json.dumps({"texts": texts}).encode()
        req = request.Request(self.url + "/embed", data=body, headers={"Content-Type": "application/json"})
        with request.urlopen(req, timeout=self.timeout) as resp:
            return json.loads(resp.read())["vectors"]

    def retrieve(self, query: str, k: int = 1) -> list[RetrievalResult]:
        if k < 1:
            raise ValueError("k must be >= 1")
        missing = [e for e in self.store.entries() if e.id not in self._vectors]
        if missing:
            vecs = self._embed([f"{e.title}\n{e.body}\n{' '.join(e.keywords)}" for e in missing])
            self._vectors.update({e.id: v for e, v in zip(missing, vecs)})
        (qvec,) = self._embed([query])
        scored = []
        for entry in self.store.entries():
            s = _cosine(qvec, self._vectors[entry.id])
            if s >= self.threshold:
                scored.append((-s, entry.id, entry))
        scored.sort(key=lambda item: (item[0], item[1]))
        return [RetrievalResult(e, min(1.0, max(0.0, -neg))) for neg, _, e in scored[:k]]


def _cosine(a: Sequence[float], b: Sequence[float]) -> float:
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    if na == 0 or nb == 0:
        return 0.0
    return dot / (na * nb)
