"""Embedding-based example retrieval and prompt assembly.

The embedding provider is a pluggable contract (text -> fixed-dim vector);
the default is deterministic L2-normalized tf-idf over corpus unigrams, so
the whole retrieval path is reproducible without a neural encoder. An
optional reranker hook reorders the initial candidates and defaults to
identity.
"""
from __future__ import annotations

import datetime as dt
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import SvcRecError

EmbeddingProvider = Callable[[str], np.ndarray]
Reranker = Callable[[str, list["CorpusRecord"]], list["CorpusRecord"]]

_WORD_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class CorpusRecord:
    rid: int
    description: str
    categories: tuple[str, ...]
    apis: tuple[str, ...]
    date: dt.date

    def __post_init__(self):
        if not self.description.strip():
            raise SvcRecError(f"record {self.rid} has an empty description")

    def to_json(self) -> dict:
        return {
            "id": self.rid,
            "description": self.description,
            "categories": list(self.categories),
            "apis": list(self.apis),
            "date": self.date.isoformat(),
        }

    @classmethod
    def from_json(cls, payload: dict) -> "CorpusRecord":
        return cls(
            rid=int(payload["id"]),
            description=str(payload["description"]),
            categories=tuple(payload.get("categories", ())),
            apis=tuple(payload.get("apis", ())),
            date=dt.date.fromisoformat(payload["date"]),
        )


def load_corpus(path: str | Path) -> list[CorpusRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(CorpusRecord.from_json(json.loads(line)))
        except (KeyError, ValueError, TypeError) as exc:
            raise SvcRecError(f"{path}:{lineno}: malformed corpus record: {exc}") from None
    return records


def save_corpus(records: Sequence[CorpusRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


class TfidfEmbedder:
    """Deterministic tf-idf unigram embedder fit on corpus descriptions."""

    def __init__(self, texts: Sequence[str]):
        if not texts:
            raise SvcRecError("cannot fit an embedder on an empty corpus")
        df: dict[str, int] = {}
        for text in texts:
            for word in set(_WORD_RE.findall(text.casefold())):
                df[word] = df.get(word, 0) + 1
        self.vocab = {w: i for i, w in enumerate(sorted(df))}
        n = len(texts)
        self.idf = np.array(
            [np.log((1 + n) / (1 + df[w])) + 1.0 for w in sorted(df)], dtype=float
        )

    @property
    def dim(self) -> int:
        return len(self.vocab)

    def __call__(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim)
        for word in _WORD_RE.findall(text.casefold()):
            idx = self.vocab.get(word)
            if idx is not None:
                vec[idx] += 1.0
        vec *= self.idf
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise SvcRecError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise SvcRecError("cosine similarity is undefined for zero-norm vectors")
    return float(a @ b / (na * nb))


def top_k(
    query: str,
    corpus: Sequence[CorpusRecord],
    k: int,
    provider: EmbeddingProvider,
    reranker: Optional[Reranker] = None,
) -> list[CorpusRecord]:
    """k most similar records, descending; excludes exact self-matches.

    Ties break by record id. A zero-norm query embedding scores 0 against
    everything rather than erroring, so fully out-of-vocabulary queries
    degrade to id order.
    """
    if k < 1:
        raise SvcRecError(f"k must be >= 1, got {k}")
    candidates = [rec for rec in corpus if rec.description != query]
    if not candidates:
        return []
    qv = provider(query)
    if np.linalg.norm(qv) == 0.0:
        sims = [0.0] * len(candidates)
    else:
        sims = []
        for rec in candidates:
            rv = provider(rec.description)
            sims.append(0.0 if np.linalg.norm(rv) == 0.0 else cosine_sim(qv, rv))
    ranked = sorted(zip(candidates, sims), key=lambda t: (-t[1], t[0].rid))
    chosen = [rec for rec, _ in ranked[:k]]
    if reranker is not None:
        chosen = reranker(query, chosen)
    return chosen


@dataclass(frozen=True)
class PromptBundle:
    instruction: str
    description: str
    categories: tuple[str, ...]
    neighbors: tuple[CorpusRecord, ...]

    def render(self) -> str:
        lines = [
            self.instruction,
            "",
            f"Input description: {self.description}",
            f"Categories: {', '.join(self.categories)}",
            "",
            "Similar examples:",
        ]
        for i, rec in enumerate(self.neighbors, 1):
            lines.append(f"  {i}. Description: {rec.description}")
            lines.append(f"     Categories: {', '.join(rec.categories)}")
            lines.append(f"     Related APIs: {', '.join(rec.apis)}")
        lines.append("")
        lines.append("Output:")
        return "\n".join(lines)


_INSTRUCTION = (
    "You are an expert in API and service recommendation for mashup applications.\n"
    "Your task is to read a short description of an application idea and output "
    "a list of the most relevant APIs that can support its implementation."
)


def build_prompt(
    query: str,
    categories: Sequence[str],
    neighbors: Sequence[CorpusRecord],
    k: int = 5,
) -> PromptBundle:
    """Assemble the instruction/input/examples prompt from retrieved neighbors."""
    return PromptBundle(
        instruction=_INSTRUCTION,
        description=query,
        categories=tuple(categories),
        neighbors=tuple(neighbors[:k]),
    )
