"""Trie-guided, automaton-constrained greedy decoding with deduplication.

Decoding alternates between two phases: START (at the trie root, a new
service may begin or the sequence may end) and IN_SERVICE (tokens must
follow a trie path). A branch is allowed only while its subtree still
reaches at least one unused service; completing a service via separator or
eos marks its id as used, which prunes exhausted subtrees without banning
tokens shared with still-unused names.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, FrozenSet, Iterable, Optional, Sequence

import numpy as np

from .analysis import DecodeTrace, TraceStep
from .errors import DecodeError
from .lexicon import TokenTrie, TrieNode
from .numerics import entropy_nats, log_softmax, softmax

LogitProvider = Callable[[Sequence[int]], np.ndarray]

PHASE_START = "START"
PHASE_IN_SERVICE = "IN_SERVICE"


@dataclass(frozen=True)
class DecoderConfig:
    """max_tokens caps emitted tokens; renormalize_masked only affects the
    recorded masked distribution, never the argmax selection."""

    max_tokens: int = 256
    renormalize_masked: bool = True

    def __post_init__(self):
        if self.max_tokens < 1:
            raise DecodeError(f"max_tokens must be >= 1, got {self.max_tokens}")


@dataclass
class DecoderState:
    node: TrieNode
    root: TrieNode
    used: set[int] = field(default_factory=set)
    emitted: list[int] = field(default_factory=list)
    sids: list[int] = field(default_factory=list)
    done: bool = False
    boundary: int = 0  # emitted length after the last completed service

    @property
    def phase(self) -> str:
        return PHASE_START if self.node is self.root else PHASE_IN_SERVICE


@dataclass(frozen=True)
class DecodeResult:
    tokens: tuple[int, ...]
    sids: tuple[int, ...]
    trace: DecodeTrace
    truncated: bool


def allowed_set(
    node: TrieNode,
    used: Iterable[int],
    trie: TokenTrie,
    sep_id: int,
    eos_id: int,
) -> set[int]:
    """Reachable token set at `node` given already-used service ids.

    At the root: children whose subtrees still hold unused ids, plus eos.
    Elsewhere: such children, plus {sep, eos} when the node terminates an
    unused service.
    """
    used = set(used)
    allowed = {
        tok
        for tok, child in node.children.items()
        if not child.subtree_sids <= used
    }
    if node is trie.root:
        allowed.add(eos_id)
    elif node.terminal_sid is not None and node.terminal_sid not in used:
        allowed.add(sep_id)
        allowed.add(eos_id)
    return allowed


def masked_distribution(
    logits: np.ndarray,
    allowed: Iterable[int],
    renormalize: bool = True,
) -> np.ndarray:
    """Raw softmax with zero mass outside `allowed`; optionally renormalized.

    Renormalization is a softmax over the allowed subset (computed in log
    space), so it stays exact even when the raw mass inside the allowed set
    underflows to zero.
    """
    logits = np.asarray(logits, dtype=float)
    idx = sorted(allowed)
    out = np.zeros_like(logits)
    if renormalize:
        out[idx] = softmax(logits[idx])
    else:
        out[idx] = softmax(logits)[idx]
    return out


def step(
    state: DecoderState,
    logits: np.ndarray,
    trie: TokenTrie,
    sep_id: int,
    eos_id: int,
    config: DecoderConfig = DecoderConfig(),
) -> tuple[int, DecoderState, TraceStep]:
    """One constrained-greedy step: mask, argmax, advance the automaton.

    Ties among allowed tokens break toward the lowest token id so repeated
    runs are bit-identical. Returns the chosen token, the updated state and
    the per-step trace record.
    """
    logits = np.asarray(logits, dtype=float)
    allowed = allowed_set(state.node, state.used, trie, sep_id, eos_id)
    if logits.ndim != 1:
        raise DecodeError("logits must be a 1-d score vector")
    if max(allowed) >= logits.shape[0]:
        raise DecodeError(
            f"logits length {logits.shape[0]} smaller than vocabulary"
        )

    order = sorted(allowed)
    chosen = order[int(np.argmax(logits[order]))]

    raw_logp = log_softmax(logits)
    raw_probs = np.exp(raw_logp)
    raw_argmax = int(np.argmax(logits))
    masked = masked_distribution(logits, allowed, config.renormalize_masked)
    conditional = masked_distribution(logits, allowed, renormalize=True)
    record = TraceStep(
        h_raw=entropy_nats(raw_probs),
        h_masked=entropy_nats(conditional),
        p_raw_argmax=float(raw_probs[raw_argmax]),
        p_raw_selected=float(raw_probs[chosen]),
        lp_raw_argmax=float(raw_logp[raw_argmax]),
        lp_raw_selected=float(raw_logp[chosen]),
        p_masked_selected=float(masked[chosen]),
        allowed_size=len(allowed),
        raw_token=raw_argmax,
        selected_token=chosen,
    )

    state.emitted.append(chosen)
    if chosen in (sep_id, eos_id):
        sid = state.node.terminal_sid
        if sid is not None and sid not in state.used:
            state.used.add(sid)
            state.sids.append(sid)
        state.boundary = len(state.emitted)
        if chosen == eos_id:
            state.done = True
        else:
            state.node = state.root
    else:
        state.node = state.node.children[chosen]
    return chosen, state, record


def decode(
    provider: LogitProvider,
    trie: TokenTrie,
    config: DecoderConfig = DecoderConfig(),
    prompt: Sequence[int] = (),
    *,
    sep_id: int,
    eos_id: int,
    exclude_sids: FrozenSet[int] = frozenset(),
    query_id: Optional[str] = None,
) -> DecodeResult:
    """Constrained greedy decode until eos or the token cap.

    `exclude_sids` seeds the used set, which prunes those services from the
    reachable space up front (retired-service exclusion). On truncation the
    trailing partial service is discarded and never marked used.
    """
    if trie.is_empty:
        raise DecodeError("cannot decode against an empty trie")
    state = DecoderState(node=trie.root, root=trie.root, used=set(exclude_sids))
    prompt = list(prompt)
    records: list[TraceStep] = []
    while not state.done and len(state.emitted) < config.max_tokens:
        logits = provider(prompt + state.emitted)
        _, state, record = step(state, logits, trie, sep_id, eos_id, config)
        records.append(record)
    truncated = not state.done
    tokens = tuple(state.emitted if state.done else state.emitted[: state.boundary])
    return DecodeResult(
        tokens=tokens,
        sids=tuple(state.sids),
        trace=DecodeTrace(query_id=query_id, steps=tuple(records)),
        truncated=truncated,
    )


def unconstrained_greedy(
    provider: LogitProvider,
    prompt: Sequence[int] = (),
    *,
    eos_id: int,
    max_tokens: int = 256,
) -> list[int]:
    """Plain greedy argmax decode (no mask); used for raw-validity analysis."""
    prompt = list(prompt)
    emitted: list[int] = []
    while len(emitted) < max_tokens:
        logits = np.asarray(provider(prompt + emitted), dtype=float)
        tok = int(np.argmax(logits))
        emitted.append(tok)
        if tok == eos_id:
            break
    return emitted
