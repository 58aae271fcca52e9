"""Diagnostics of constrained decoding: probability cost, entropy, validity.

A DecodeTrace records, for every step of a constrained decode, summaries of
the raw model distribution and of the masked distribution actually used for
selection. The aggregate statistics here quantify how much the automaton
bends generation away from the model's own preferences.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import SvcRecError
from .lexicon import TokenTrie
from .numerics import entropy_nats


@dataclass(frozen=True)
class TraceStep:
    """Per-step record of a constrained decode.

    h_raw / h_masked are entropies (nats) of the raw softmax and of the
    renormalized masked distribution; p_raw_argmax / p_raw_selected are the
    raw probabilities of the unconstrained argmax and of the token the
    automaton actually selected (lp_* are their logs, kept separately so
    extreme logits cannot underflow the cost statistics); p_masked_selected
    reflects the recorded masked distribution (renormalized or not, per
    decoder config).
    """

    h_raw: float
    h_masked: float
    p_raw_argmax: float
    p_raw_selected: float
    lp_raw_argmax: float
    lp_raw_selected: float
    p_masked_selected: float
    allowed_size: int
    raw_token: int
    selected_token: int


@dataclass(frozen=True)
class DecodeTrace:
    query_id: Optional[str]
    steps: tuple[TraceStep, ...]

    def __len__(self) -> int:
        return len(self.steps)

    def to_records(self) -> list[dict]:
        rows = []
        for i, s in enumerate(self.steps):
            rows.append(
                {
                    "query_id": self.query_id,
                    "step": i,
                    "h_raw": s.h_raw,
                    "h_masked": s.h_masked,
                    "p_raw_argmax": s.p_raw_argmax,
                    "p_raw_selected": s.p_raw_selected,
                    "lp_raw_argmax": s.lp_raw_argmax,
                    "lp_raw_selected": s.lp_raw_selected,
                    "p_masked_selected": s.p_masked_selected,
                    "allowed_size": s.allowed_size,
                    "raw_token": s.raw_token,
                    "selected_token": s.selected_token,
                }
            )
        return rows

    @classmethod
    def from_records(cls, rows: Sequence[dict]) -> "DecodeTrace":
        rows = sorted(rows, key=lambda r: r["step"])
        steps = tuple(
            TraceStep(
                h_raw=float(r["h_raw"]),
                h_masked=float(r["h_masked"]),
                p_raw_argmax=float(r["p_raw_argmax"]),
                p_raw_selected=float(r["p_raw_selected"]),
                lp_raw_argmax=float(r["lp_raw_argmax"]),
                lp_raw_selected=float(r["lp_raw_selected"]),
                p_masked_selected=float(r["p_masked_selected"]),
                allowed_size=int(r["allowed_size"]),
                raw_token=int(r["raw_token"]),
                selected_token=int(r["selected_token"]),
            )
            for r in rows
        )
        qid = rows[0]["query_id"] if rows else None
        return cls(query_id=qid, steps=steps)


def probability_cost(trace: DecodeTrace) -> float:
    """Mean log-probability gap between the selected and the raw-argmax token.

    Both probabilities are read from the raw softmax, so the cost is <= 0,
    with equality exactly when the mask never overrode the model's argmax.
    """
    if not trace.steps:
        raise SvcRecError("probability_cost requires a non-empty trace")
    total = 0.0
    for s in trace.steps:
        total += s.lp_raw_selected - s.lp_raw_argmax
    return total / len(trace.steps)


def step_entropy(probs: Sequence[float] | np.ndarray) -> float:
    """Entropy in nats of a token distribution; validates the input."""
    p = np.asarray(probs, dtype=float)
    if np.any(p < 0.0):
        raise SvcRecError("negative probability mass")
    if abs(float(p.sum()) - 1.0) > 1e-9:
        raise SvcRecError(f"probabilities sum to {float(p.sum())!r}, not 1")
    return entropy_nats(p)


def parse_service_sequence(
    tokens: Sequence[int],
    trie: TokenTrie,
    sep_id: int,
    eos_id: int,
) -> Optional[list[int]]:
    """Parse tokens as sep-separated service names ending in eos.

    Returns the ordered sid list, or None when the sequence is invalid:
    missing/misplaced eos, a span that is not exactly one catalog name, an
    empty span anywhere but directly before eos, or a repeated service.
    A bare [eos] parses as the empty recommendation; a trailing separator
    before eos is accepted because the automaton can emit one.
    """
    toks = list(tokens)
    if not toks or toks[-1] != eos_id:
        return None
    body = toks[:-1]
    if eos_id in body:
        return None
    if not body:
        return []
    spans: list[list[int]] = [[]]
    for t in body:
        if t == sep_id:
            spans.append([])
        else:
            spans[-1].append(t)
    if spans[-1] == [] and len(spans) > 1:
        spans.pop()  # trailing separator directly before eos
    sids: list[int] = []
    for span in spans:
        if not span:
            return None
        sid = trie.lookup(span)
        if sid is None or sid in sids:
            return None
        sids.append(sid)
    return sids


def validity_rate(
    sequences: Iterable[Sequence[int]],
    trie: TokenTrie,
    sep_id: int,
    eos_id: int,
) -> float:
    """Fraction of sequences parsing as valid duplicate-free service lists."""
    seqs = list(sequences)
    if not seqs:
        return 0.0
    ok = sum(
        1 for s in seqs if parse_service_sequence(s, trie, sep_id, eos_id) is not None
    )
    return ok / len(seqs)


def tradeoff_report(
    entries: Iterable[tuple[DecodeTrace, bool]],
    n_buckets: int = 5,
) -> str:
    """CSV relating raw-decode validity to constraint cost and entropy.

    Each entry pairs a constrained-decode trace with whether the raw
    (unconstrained) greedy decode of the same query was valid. Entries are
    bucketed by validity into `n_buckets` equal-width bins over [0, 1];
    empty buckets are omitted. Columns: bucket midpoint validity, mean |cost|,
    mean raw entropy, mean masked entropy, count.
    """
    if n_buckets < 1:
        raise SvcRecError("n_buckets must be >= 1")
    buckets: dict[int, list[DecodeTrace]] = {}
    for trace, raw_valid in entries:
        rate = 1.0 if raw_valid else 0.0
        idx = min(int(rate * n_buckets), n_buckets - 1)
        buckets.setdefault(idx, []).append(trace)
    lines = ["validity_bucket,mean_abs_cost,mean_raw_entropy,mean_masked_entropy,n_traces"]
    for idx in sorted(buckets):
        traces = buckets[idx]
        costs = [abs(probability_cost(t)) for t in traces if t.steps]
        h_raw = [s.h_raw for t in traces for s in t.steps]
        h_masked = [s.h_masked for t in traces for s in t.steps]
        mid = (idx + 0.5) / n_buckets
        lines.append(
            f"{mid:.3f},{_mean(costs):.6f},{_mean(h_raw):.6f},{_mean(h_masked):.6f},{len(traces)}"
        )
    return "\n".join(lines) + "\n"


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values) if values else 0.0
