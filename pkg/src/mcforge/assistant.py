"""Retrieval-augmented question answering over a local document folder.

Documents are cut into overlapping character chunks that never split a short
LaTeX span, embedded, and kept in a store directory holding ``manifest.json``
and ``vectors.jsonl``.  Re-ingesting only touches documents whose content hash
is new.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import shlex
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from filelock import FileLock

from .errors import AssistantError, EmptyStore, ExtractionFailed, ProviderError

log = logging.getLogger(__name__)

CHUNK_SIZE = 1000
OVERLAP = 200
EMBED_DIM = 256
TEXT_SUFFIXES = {".txt", ".md", ".markdown", ".tex", ".rst"}

MANIFEST = "manifest.json"
VECTORS = "vectors.jsonl"
LOCK = ".lock"

MATH_RE = re.compile(
    r"\$\$.+?\$\$"
    r"|\\begin\{equation\*?\}.*?\\end\{equation\*?\}"
    r"|\\\[.*?\\\]"
    r"|\\\(.*?\\\)"
    r"|(?<![\\$])\$[^$\n]+?\$",
    re.DOTALL,
)
TOKEN_RE = re.compile(r"[a-z0-9]+")

PREAMBLE = (
    "Answer the question using the context passages below. Cite the passage ids you rely on "
    "in square brackets. If the context does not contain the answer, say so."
)


@dataclass(frozen=True)
class DocumentChunk:
    doc_id: str
    chunk_index: int
    text: str
    char_span: tuple[int, int]
    preserved_math: tuple[str, ...] = ()

    @property
    def chunk_id(self) -> str:
        return f"{self.doc_id[:12]}:{self.chunk_index}"


@dataclass(frozen=True)
class EmbeddedChunk:
    chunk: DocumentChunk
    vector: np.ndarray

    def to_json(self) -> str:
        c = self.chunk
        return json.dumps({
            "doc_id": c.doc_id,
            "chunk_index": c.chunk_index,
            "text": c.text,
            "char_span": list(c.char_span),
            "preserved_math": list(c.preserved_math),
            "vector": [float(v) for v in self.vector],
        }, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> EmbeddedChunk:
        d = json.loads(line)
        chunk = DocumentChunk(d["doc_id"], d["chunk_index"], d["text"], tuple(d["char_span"]),
                              tuple(d["preserved_math"]))
        return cls(chunk, np.asarray(d["vector"], dtype=float))


# ------------------------------------------------------------------ chunking


def math_spans(text: str) -> list[tuple[int, int]]:
    return [m.span() for m in MATH_RE.finditer(text)]


def chunk_spans(text: str, chunk_size: int = CHUNK_SIZE, overlap: int = OVERLAP) -> list[tuple[int, int]]:
    """Character windows of ``chunk_size`` advancing by ``chunk_size - overlap``.

    A window that would end inside a math span shorter than ``chunk_size`` is
    cut just before the span, and the next window starts early enough to hold
    the span whole.  The last window always ends at the end of the text.
    """
    if chunk_size <= 0 or not 0 <= overlap < chunk_size:
        raise AssistantError("need chunk_size > 0 and 0 <= overlap < chunk_size")
    n = len(text)
    spans_math = [s for s in math_spans(text) if s[1] - s[0] < chunk_size]
    out = []
    start = 0
    while start < n:
        end = min(start + chunk_size, n)
        floor = end - overlap
        for a, b in spans_math:
            if a < end < b and a > start:
                end = a
                floor = max(a - overlap, b - chunk_size)
                break
        out.append((start, end))
        if end >= n:
            break
        start = max(floor, start + 1)
    return out


def chunk_document(text: str, doc_id: str, chunk_size: int = CHUNK_SIZE, overlap: int = OVERLAP) -> list[DocumentChunk]:
    spans_math = math_spans(text)
    chunks = []
    for i, (a, b) in enumerate(chunk_spans(text, chunk_size, overlap)):
        inside = tuple(text[s:e] for s, e in spans_math if a <= s and e <= b)
        chunks.append(DocumentChunk(doc_id, i, text[a:b], (a, b), inside))
    return chunks


def reconstruct(chunks: list[DocumentChunk]) -> str:
    """Join chunks back into the source text, dropping the overlapping prefixes."""
    out = []
    pos = 0
    for c in sorted(chunks, key=lambda c: c.chunk_index):
        a, b = c.char_span
        if a > pos:
            raise AssistantError(f"gap between chunks at {pos}..{a}")
        out.append(c.text[pos - a:])
        pos = max(pos, b)
    return "".join(out)


# ------------------------------------------------------------------ embedders


class Embedder(Protocol):
    name: str
    dim: int

    def embed(self, texts: list[str]) -> np.ndarray:
        """Unit-norm row vectors, one per text."""


def _unit(v: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    if norm == 0:
        out = np.zeros_like(v)
        out[0] = 1.0
        return out
    return v / norm


class HashEmbedder:
    """Hashed bag of words; deterministic and dependency free."""

    name = "hash"

    def __init__(self, dim: int = EMBED_DIM):
        self.dim = dim

    def _one(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim)
        for tok in TOKEN_RE.findall(text.lower()):
            h = int.from_bytes(hashlib.blake2b(tok.encode("utf-8"), digest_size=8).digest(), "little")
            v[h % self.dim] += 1.0 if (h >> 63) & 1 else -1.0
        return _unit(v)

    def embed(self, texts):
        return np.array([self._one(t) for t in texts]).reshape(len(texts), self.dim)


class HttpEmbedder:
    """Embeddings endpoint speaking the common ``/embeddings`` JSON shape."""

    name = "http"

    def __init__(self, url: str, model: str, dim: int, api_key_env: str = "MCFORGE_EMBED_KEY", timeout: float = 60.0):
        self.url, self.model, self.dim = url, model, dim
        self.api_key_env = api_key_env
        self.timeout = timeout

    def embed(self, texts):
        import httpx

        headers = {}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        try:
            resp = httpx.post(self.url, json={"model": self.model, "input": list(texts)}, headers=headers,
                              timeout=self.timeout)
            resp.raise_for_status()
            rows = [d["embedding"] for d in sorted(resp.json()["data"], key=lambda d: d["index"])]
        except (httpx.HTTPError, KeyError, ValueError) as exc:
            raise ProviderError(f"embedding endpoint {self.url}: {exc}") from exc
        arr = np.asarray(rows, dtype=float)
        if arr.shape != (len(texts), self.dim):
            raise ProviderError(f"embedding endpoint returned shape {arr.shape}, expected {(len(texts), self.dim)}")
        return np.array([_unit(r) for r in arr]).reshape(len(texts), self.dim)


def get_embedder(name: str = "hash", **options) -> Embedder:
    if name == "hash":
        return HashEmbedder(int(options.get("dim", EMBED_DIM)))
    if name == "http":
        return HttpEmbedder(options["url"], options["model"], int(options["dim"]))
    raise ProviderError(f"unknown embedder {name!r}")


# ------------------------------------------------------------------ store


@dataclass
class VectorStore:
    path: Path
    entries: list[EmbeddedChunk] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    @classmethod
    def open(cls, path) -> VectorStore:
        path = Path(path)
        store = cls(path)
        mf = path / MANIFEST
        if mf.exists():
            store.manifest = json.loads(mf.read_text(encoding="utf-8"))
            vf = path / VECTORS
            if vf.exists():
                with open(vf, encoding="utf-8") as fh:
                    store.entries = [EmbeddedChunk.from_json(l) for l in fh if l.strip()]
        return store

    @property
    def documents(self) -> dict:
        return self.manifest.get("documents", {})

    def __len__(self) -> int:
        return len(self.entries)

    def _write(self) -> None:
        self.path.mkdir(parents=True, exist_ok=True)
        tmp_v = self.path / (VECTORS + ".tmp")
        with open(tmp_v, "w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(e.to_json() + "\n")
        tmp_m = self.path / (MANIFEST + ".tmp")
        tmp_m.write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp_v, self.path / VECTORS)
        os.replace(tmp_m, self.path / MANIFEST)


def _read_document(path: Path, extract_cmd: str | None) -> str | None:
    if path.suffix.lower() in TEXT_SUFFIXES:
        return path.read_text(encoding="utf-8", errors="replace")
    if path.suffix.lower() == ".pdf":
        if not extract_cmd:
            log.warning("%s: skipped, no PDF extraction command configured", path.name)
            return None
        cmd = extract_cmd.replace("{input}", shlex.quote(str(path))) if "{input}" in extract_cmd \
            else f"{extract_cmd} {shlex.quote(str(path))}"
        try:
            proc = subprocess.run(shlex.split(cmd), capture_output=True, text=True, timeout=300)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise ExtractionFailed(f"{path}: {exc}", file=str(path)) from exc
        if proc.returncode != 0:
            raise ExtractionFailed(f"{path}: extractor exited {proc.returncode}: {proc.stderr.strip()}",
                                   file=str(path))
        return proc.stdout
    return None


def ingest(directory, store: VectorStore, embedder: Embedder, chunk_size: int = CHUNK_SIZE,
           overlap: int = OVERLAP, extract_cmd: str | None = None) -> tuple[int, int]:
    """Embed documents not yet in the store; returns (new documents, new chunks)."""
    directory = Path(directory)
    files = sorted(p for p in directory.rglob("*") if p.is_file()) if directory.exists() else []
    store.path.mkdir(parents=True, exist_ok=True)
    with FileLock(str(store.path / LOCK)):
        fresh = VectorStore.open(store.path)
        store.entries, store.manifest = fresh.entries, fresh.manifest
        if store.manifest.get("embedder") not in (None, embedder.name) or \
                store.manifest.get("dim") not in (None, embedder.dim):
            raise ProviderError(f"store was built with {store.manifest.get('embedder')}/"
                                f"{store.manifest.get('dim')}, not {embedder.name}/{embedder.dim}")
        docs = dict(store.documents)
        new_docs = new_chunks = 0
        added: list[EmbeddedChunk] = []
        for path in files:
            if path.name.startswith("."):
                continue
            doc_id = hashlib.sha256(path.read_bytes()).hexdigest()
            if doc_id in docs:
                continue
            text = _read_document(path, extract_cmd)
            if text is None:
                continue
            chunks = chunk_document(text, doc_id, chunk_size, overlap)
            vectors = embedder.embed([c.text for c in chunks]) if chunks else np.zeros((0, embedder.dim))
            added += [EmbeddedChunk(c, v) for c, v in zip(chunks, vectors)]
            docs[doc_id] = {"source": path.relative_to(directory).as_posix(), "chunks": len(chunks),
                            "chunk_size": chunk_size, "overlap": overlap}
            new_docs += 1
            new_chunks += len(chunks)
        if new_docs:
            store.entries = store.entries + added
            store.manifest = {"embedder": embedder.name, "dim": embedder.dim, "documents": docs}
            store._write()
    return new_docs, new_chunks


def retrieve(query: str, store: VectorStore, embedder: Embedder, k: int = 4) -> list[tuple[EmbeddedChunk, float]]:
    if not store.entries:
        raise EmptyStore("vector store is empty")
    q = embedder.embed([query])[0]
    mat = np.array([e.vector for e in store.entries])
    scores = mat @ q
    order = sorted(range(len(store.entries)),
                   key=lambda i: (-scores[i], store.entries[i].chunk.doc_id, store.entries[i].chunk.chunk_index))
    return [(store.entries[i], float(scores[i])) for i in order[:max(0, k)]]


# ------------------------------------------------------------------ answering


class ChatEndpoint(Protocol):
    def complete(self, messages: list[dict], tools: list[dict]) -> dict:
        ...


class EchoEndpoint:
    """Returns the final user message verbatim; records every request."""

    def __init__(self):
        self.requests: list[list[dict]] = []

    def complete(self, messages, tools=()):
        self.requests.append(json.loads(json.dumps(messages)))
        return {"role": "assistant", "content": messages[-1]["content"]}


@dataclass
class Answer:
    text: str
    cited: list[str]
    scores: list[float]


def answer(question: str, store: VectorStore, embedder: Embedder, endpoint: ChatEndpoint,
           memory: list[dict] | None = None, k: int = 4) -> Answer:
    """Retrieve context, ask the endpoint, and append the exchange to ``memory``."""
    hits = retrieve(question, store, embedder, k)
    context = "\n\n".join(f"[{e.chunk.chunk_id}]\n{e.chunk.text}" for e, _ in hits)
    messages = [{"role": "system", "content": f"{PREAMBLE}\n\nContext:\n{context}"}]
    if memory:
        messages += memory
    ids = [e.chunk.chunk_id for e, _ in hits]
    messages.append({"role": "user", "content": f"{question}\n\n(passages: {', '.join(ids)})"})
    reply = endpoint.complete(messages, [])
    text = reply.get("content") or ""
    if memory is not None:
        memory.append({"role": "user", "content": question})
        memory.append({"role": "assistant", "content": text})
    return Answer(text, ids, [s for _, s in hits])

