"""Service lexicon: deterministic tokenizer and token trie over a service catalog.

The trie is the single source of lexical validity for constrained decoding:
every service name maps to a unique token path, terminal nodes carry the
service id, and every node caches the set of service ids reachable in its
subtree so the decoder can prune exhausted branches in O(1).
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .errors import LexiconError

EOS_TOKEN = "<|EOS|>"
SEP_TOKEN = "<|SEP|>"
BOS_TOKEN = "<|BOS|>"
_RESERVED = (EOS_TOKEN, SEP_TOKEN, BOS_TOKEN)

# A fragment is a run of non-delimiter characters plus any adjacent delimiter
# run, so "google-maps" splits into ("google-", "maps") and the two names
# "google-maps" / "google-api" share their first token.
_FRAGMENT_RE = re.compile(r"[-_\s]*[^-_\s]+[-_\s]*")


def _fragments(text: str) -> list[str]:
    return _FRAGMENT_RE.findall(text)


class Tokenizer:
    """Deterministic longest-match tokenizer over delimiter-attached fragments.

    Ids are dense in 0..|V|-1 with eos=0, sep=1, bos=2 reserved; the reserved
    tokens are never produced by encoding text.
    """

    def __init__(self, vocab: Mapping[str, int], lowercase: bool = True):
        self.vocab = dict(vocab)
        self.lowercase = lowercase
        self.eos_id = self.vocab[EOS_TOKEN]
        self.sep_id = self.vocab[SEP_TOKEN]
        self.bos_id = self.vocab[BOS_TOKEN]
        ids = sorted(self.vocab.values())
        if ids != list(range(len(self.vocab))):
            raise LexiconError("tokenizer ids must be dense in 0..|V|-1")
        self.id_to_token = {i: t for t, i in self.vocab.items()}
        self._max_len = max(len(t) for t in self.vocab)

    def __len__(self) -> int:
        return len(self.vocab)

    def canonical(self, text: str) -> str:
        return text.casefold() if self.lowercase else text

    def encode(self, text: str) -> list[int]:
        """Greedy longest-match encoding; raises on any unmatchable span."""
        s = self.canonical(text)
        out: list[int] = []
        i = 0
        while i < len(s):
            for j in range(min(len(s), i + self._max_len), i, -1):
                tid = self.vocab.get(s[i:j])
                if tid is not None:
                    out.append(tid)
                    i = j
                    break
            else:
                raise LexiconError(
                    f"cannot encode {text!r}: no vocabulary token matches at offset {i}"
                )
        return out

    def decode(self, ids: Iterable[int]) -> str:
        try:
            return "".join(self.id_to_token[i] for i in ids)
        except KeyError as exc:
            raise LexiconError(f"unknown token id {exc.args[0]}") from None

    def to_dict(self) -> dict:
        return {
            "vocab": self.vocab,
            "sep": self.sep_id,
            "eos": self.eos_id,
            "bos": self.bos_id,
            "lowercase": self.lowercase,
        }

    @classmethod
    def from_dict(cls, payload: Mapping) -> "Tokenizer":
        tok = cls(payload["vocab"], bool(payload.get("lowercase", True)))
        if tok.sep_id != payload["sep"] or tok.eos_id != payload["eos"]:
            raise LexiconError("tokenizer file is inconsistent with its vocab")
        return tok


def build_tokenizer(
    names: Sequence[str],
    extra_texts: Sequence[str] = (),
    lowercase: bool = True,
) -> Tokenizer:
    """Build a tokenizer whose vocabulary covers the catalog names.

    `extra_texts` (e.g. requirement descriptions) extend the vocabulary so
    prompts built from them stay encodable; they do not affect name ids.
    """
    if not names:
        raise LexiconError("cannot build a tokenizer from an empty name list")
    fragments: set[str] = set()
    for idx, name in enumerate(names):
        canon = name.casefold() if lowercase else name
        frags = _fragments(canon)
        if not frags:
            raise LexiconError(f"service name at index {idx} is empty: {name!r}")
        fragments.update(frags)
    for text in extra_texts:
        canon = text.casefold() if lowercase else text
        fragments.update(_fragments(canon))
    # Bare and space-attached cores keep arbitrary word windows of known
    # text encodable (a word may gain or lose its trailing delimiter);
    # longest-match still prefers the original delimiter-attached form, so
    # name token paths are unchanged.
    cores = {frag.strip("-_ \t\r\n") for frag in fragments} - {""}
    fragments.update(cores)
    fragments.update(core + " " for core in cores)
    clash = fragments.intersection(_RESERVED)
    if clash:
        raise LexiconError(f"input text collides with reserved tokens: {sorted(clash)}")
    vocab = {EOS_TOKEN: 0, SEP_TOKEN: 1, BOS_TOKEN: 2}
    for i, frag in enumerate(sorted(fragments)):
        vocab[frag] = 3 + i
    return Tokenizer(vocab, lowercase)


@dataclass(frozen=True)
class ServiceEntry:
    """A catalog service: unique id, display name, token-id path."""

    sid: int
    name: str
    tokens: tuple[int, ...]

    def __post_init__(self):
        if self.sid < 0:
            raise LexiconError(f"service id must be non-negative, got {self.sid}")
        if not self.tokens:
            raise LexiconError(f"service {self.name!r} has an empty token sequence")


class TrieNode:
    __slots__ = ("children", "terminal_sid", "subtree_sids")

    def __init__(self):
        self.children: dict[int, TrieNode] = {}
        self.terminal_sid: Optional[int] = None
        self.subtree_sids: frozenset[int] = frozenset()


class TokenTrie:
    """Prefix tree over service token paths with cached subtree id sets."""

    def __init__(self, root: TrieNode, n_entries: int):
        self.root = root
        self.n_entries = n_entries

    @property
    def is_empty(self) -> bool:
        return not self.root.children

    def lookup(self, tokens: Sequence[int]) -> Optional[int]:
        """Return the sid whose token path is exactly `tokens`, else None."""
        node = self.root
        for t in tokens:
            node = node.children.get(t)
            if node is None:
                return None
        return node.terminal_sid

    def nodes(self) -> Iterable[TrieNode]:
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(node.children.values())

    def to_dict(self) -> dict:
        def walk(node: TrieNode) -> dict:
            return {
                "terminal_sid": node.terminal_sid,
                "children": {str(t): walk(c) for t, c in sorted(node.children.items())},
            }

        return walk(self.root)


def build_trie(entries: Sequence[ServiceEntry]) -> TokenTrie:
    """Build the token trie; duplicate sids or colliding token paths are errors."""
    seen_sids: set[int] = set()
    root = TrieNode()
    for entry in entries:
        if entry.sid in seen_sids:
            raise LexiconError(f"duplicate service id {entry.sid}")
        seen_sids.add(entry.sid)
        node = root
        for t in entry.tokens:
            node = node.children.setdefault(t, TrieNode())
        if node.terminal_sid is not None:
            raise LexiconError(
                f"services {node.terminal_sid} and {entry.sid} share the same "
                f"token sequence; names must not collide lexically"
            )
        node.terminal_sid = entry.sid

    def annotate(node: TrieNode) -> frozenset[int]:
        sids = set() if node.terminal_sid is None else {node.terminal_sid}
        for child in node.children.values():
            sids |= annotate(child)
        node.subtree_sids = frozenset(sids)
        return node.subtree_sids

    annotate(root)
    return TokenTrie(root, len(entries))


class Lexicon:
    """Tokenizer + catalog entries + trie, built and persisted together."""

    def __init__(self, tokenizer: Tokenizer, entries: Sequence[ServiceEntry]):
        self.tokenizer = tokenizer
        self.entries = tuple(entries)
        self.trie = build_trie(self.entries)
        self.by_sid = {e.sid: e for e in self.entries}
        self.sid_by_name = {tokenizer.canonical(e.name): e.sid for e in self.entries}

    @classmethod
    def build(
        cls,
        names: Sequence[str],
        extra_texts: Sequence[str] = (),
        lowercase: bool = True,
    ) -> "Lexicon":
        """Assign sids by sorted name order and build everything."""
        unique = sorted(set(names))
        return cls.from_pairs(list(enumerate(unique)), extra_texts, lowercase)

    @classmethod
    def from_pairs(
        cls,
        pairs: Sequence[tuple[int, str]],
        extra_texts: Sequence[str] = (),
        lowercase: bool = True,
    ) -> "Lexicon":
        tokenizer = build_tokenizer([n for _, n in pairs], extra_texts, lowercase)
        entries = []
        reserved = {tokenizer.sep_id, tokenizer.eos_id, tokenizer.bos_id}
        for sid, name in pairs:
            tokens = tuple(tokenizer.encode(name))
            if reserved.intersection(tokens):
                raise LexiconError(f"service name {name!r} encodes to reserved tokens")
            entries.append(ServiceEntry(sid=sid, name=name, tokens=tokens))
        return cls(tokenizer, entries)

    def sid_of(self, name: str) -> int:
        canon = self.tokenizer.canonical(name)
        if canon not in self.sid_by_name:
            raise LexiconError(f"unknown service name {name!r}")
        return self.sid_by_name[canon]

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with (out / "lexicon.jsonl").open("w", encoding="utf-8") as fh:
            for e in sorted(self.entries, key=lambda e: e.sid):
                fh.write(json.dumps({"sid": e.sid, "name": e.name}, sort_keys=True) + "\n")
        (out / "tokenizer.json").write_text(
            json.dumps(self.tokenizer.to_dict(), sort_keys=True), encoding="utf-8"
        )
        (out / "trie.json").write_text(
            json.dumps(self.trie.to_dict(), sort_keys=True), encoding="utf-8"
        )

    @classmethod
    def load(cls, in_dir: str | Path) -> "Lexicon":
        """Rebuild from lexicon.jsonl + tokenizer.json (trie.json is derived)."""
        src = Path(in_dir)
        tokenizer = Tokenizer.from_dict(
            json.loads((src / "tokenizer.json").read_text(encoding="utf-8"))
        )
        entries = []
        reserved = {tokenizer.sep_id, tokenizer.eos_id, tokenizer.bos_id}
        for line in (src / "lexicon.jsonl").read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            tokens = tuple(tokenizer.encode(rec["name"]))
            if reserved.intersection(tokens):
                raise LexiconError(f"service name {rec['name']!r} encodes to reserved tokens")
            entries.append(ServiceEntry(sid=int(rec["sid"]), name=rec["name"], tokens=tokens))
        return cls(tokenizer, entries)
