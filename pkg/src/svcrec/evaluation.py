"""Ranking metrics, chronological splits and the service-evolution scenario."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np

from .errors import SvcRecError
from .lexicon import Lexicon
from .retrieval import CorpusRecord


@dataclass(frozen=True)
class EvalRecord:
    query_id: str
    gold: frozenset[int]
    predicted: tuple[int, ...]

    def __post_init__(self):
        if not self.gold:
            raise SvcRecError(f"{self.query_id}: gold set must be non-empty")
        if len(self.predicted) != len(set(self.predicted)):
            raise SvcRecError(f"{self.query_id}: predicted list contains duplicates")


def recall_at_k(rec: EvalRecord, k: int) -> float:
    if k < 1:
        raise SvcRecError(f"K must be >= 1, got {k}")
    hits = len(set(rec.predicted[:k]) & rec.gold)
    return hits / len(rec.gold)


def precision_at_k(
    rec: EvalRecord,
    k: int,
    denominator: Literal["returned", "k"] = "returned",
) -> float:
    """TP / (TP + FP); by default FP counts only actually returned items.

    The generative decoder may emit fewer than K services, so the default
    denominator is min(K, len(predicted)); pass denominator="k" to divide
    by K regardless.
    """
    if k < 1:
        raise SvcRecError(f"K must be >= 1, got {k}")
    top = rec.predicted[:k]
    hits = len(set(top) & rec.gold)
    denom = k if denominator == "k" else len(top)
    return hits / denom if denom else 0.0


def ap_at_k(rec: EvalRecord, k: int) -> float:
    """(1/m) * sum over cutoffs of precision(cutoff) * rel(cutoff), m = min(|gold|, K)."""
    if k < 1:
        raise SvcRecError(f"K must be >= 1, got {k}")
    m = min(len(rec.gold), k)
    hits = 0
    total = 0.0
    for i, sid in enumerate(rec.predicted[:k], 1):
        if sid in rec.gold:
            hits += 1
            total += hits / i
    return total / m


def map_at_k(records: Sequence[EvalRecord], k: int) -> float:
    if not records:
        return 0.0
    return sum(ap_at_k(r, k) for r in records) / len(records)


# ----------------------------------------------------------------------
# chronological split
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class Segment:
    train: tuple[CorpusRecord, ...]
    test: tuple[CorpusRecord, ...]

    @property
    def records(self) -> tuple[CorpusRecord, ...]:
        return self.train + self.test


@dataclass(frozen=True)
class SplitPlan:
    segments: tuple[Segment, ...]


def chronological_split(
    records: Sequence[CorpusRecord],
    n_segments: int = 3,
    train_frac: float = 0.7,
) -> SplitPlan:
    """Sort by (date, id), cut into n equal-count segments, split each by date.

    Date ties break by record id so segment boundaries are reproducible.
    """
    if n_segments < 1:
        raise SvcRecError("n_segments must be >= 1")
    if not 0.0 < train_frac < 1.0:
        raise SvcRecError("train_frac must be in (0, 1)")
    if not records:
        raise SvcRecError("cannot split an empty corpus")
    ordered = sorted(records, key=lambda r: (r.date, r.rid))
    segments = []
    for chunk in np.array_split(np.arange(len(ordered)), n_segments):
        seg = [ordered[i] for i in chunk]
        n_train = int(np.floor(len(seg) * train_frac + 0.5))
        if len(seg) >= 2:
            n_train = min(max(n_train, 1), len(seg) - 1)
        segments.append(Segment(train=tuple(seg[:n_train]), test=tuple(seg[n_train:])))
    return SplitPlan(segments=tuple(segments))


# ----------------------------------------------------------------------
# evolution scenario
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class EvolutionScenario:
    """Newborn/dying/volatile classification plus the edit and test splits.

    edit_train holds one seeded-random record per newborn sid; test_new are
    the remaining newborn-bearing records of the last segment (condition 2);
    test_preserve are its records without any newborn sid; later_test is the
    last segment's chronological test part (condition 1).
    """

    newborn: frozenset[int]
    dying: frozenset[int]
    volatile: frozenset[int]
    edit_train: tuple[CorpusRecord, ...]
    test_new: tuple[CorpusRecord, ...]
    test_preserve: tuple[CorpusRecord, ...]
    later_test: tuple[CorpusRecord, ...]
    edit_targets: tuple[tuple[int, int], ...]  # (record id, newborn sid) pairs


def _record_sids(rec: CorpusRecord, lexicon: Lexicon) -> set[int]:
    return {lexicon.sid_of(name) for name in rec.apis}


def build_evolution_scenario(
    split: SplitPlan,
    lexicon: Lexicon,
    volatility_threshold: float = 0.5,
    min_count: int = 3,
    seed: int = 0,
) -> EvolutionScenario:
    """Classify service evolution across the split and stage the edit data.

    Newborn: absent from every earlier segment's train data, present in at
    least `min_count` last-segment records. Dying: present earlier, absent
    from the last segment. Volatile: usage share changes by at least the
    threshold (relative) between consecutive segments.
    """
    if len(split.segments) < 2:
        raise SvcRecError("an evolution scenario needs at least 2 segments")
    rng = np.random.default_rng(seed)
    early = split.segments[:-1]
    later = split.segments[-1]

    early_train_sids: set[int] = set()
    for seg in early:
        for rec in seg.train:
            early_train_sids |= _record_sids(rec, lexicon)
    early_all_sids: set[int] = set()
    for seg in early:
        for rec in seg.records:
            early_all_sids |= _record_sids(rec, lexicon)

    later_records = sorted(later.records, key=lambda r: r.rid)
    later_counts: dict[int, int] = {}
    for rec in later_records:
        for sid in _record_sids(rec, lexicon):
            later_counts[sid] = later_counts.get(sid, 0) + 1

    newborn = frozenset(
        sid
        for sid, cnt in later_counts.items()
        if cnt >= min_count and sid not in early_train_sids
    )
    dying = frozenset(early_all_sids - set(later_counts))

    volatile: set[int] = set()
    shares = []
    for seg in split.segments:
        counts: dict[int, int] = {}
        for rec in seg.records:
            for sid in _record_sids(rec, lexicon):
                counts[sid] = counts.get(sid, 0) + 1
        total = sum(counts.values())
        shares.append({sid: c / total for sid, c in counts.items()} if total else {})
    for prev, nxt in zip(shares, shares[1:]):
        for sid, share_prev in prev.items():
            if sid in nxt:
                if abs(nxt[sid] - share_prev) / share_prev >= volatility_threshold:
                    volatile.add(sid)

    if not newborn:
        warnings.warn("no newborn services found; edit set is empty", stacklevel=2)

    edit_records: dict[int, CorpusRecord] = {}
    edit_targets: list[tuple[int, int]] = []
    for sid in sorted(newborn):
        holders = [r for r in later_records if sid in _record_sids(r, lexicon)]
        pick = holders[int(rng.integers(len(holders)))]
        edit_records[pick.rid] = pick
        edit_targets.append((pick.rid, sid))

    edit_train = tuple(edit_records[rid] for rid in sorted(edit_records))
    edit_ids = set(edit_records)
    test_new = tuple(
        r
        for r in later_records
        if r.rid not in edit_ids and _record_sids(r, lexicon) & newborn
    )
    test_preserve = tuple(
        r for r in later_records if not _record_sids(r, lexicon) & newborn
    )
    return EvolutionScenario(
        newborn=newborn,
        dying=dying,
        volatile=frozenset(volatile),
        edit_train=edit_train,
        test_new=test_new,
        test_preserve=test_preserve,
        later_test=tuple(sorted(later.test, key=lambda r: r.rid)),
        edit_targets=tuple(edit_targets),
    )


def scenario_manifest(scenario: EvolutionScenario) -> dict:
    """JSON-ready summary listing classifications and record assignments."""
    return {
        "newborn_sids": sorted(scenario.newborn),
        "dying_sids": sorted(scenario.dying),
        "volatile_sids": sorted(scenario.volatile),
        "edit_train_ids": [r.rid for r in scenario.edit_train],
        "edit_targets": [list(t) for t in scenario.edit_targets],
        "test_new_ids": [r.rid for r in scenario.test_new],
        "test_preserve_ids": [r.rid for r in scenario.test_preserve],
        "later_test_ids": [r.rid for r in scenario.later_test],
        "n_test_new": len(scenario.test_new),
        "n_test_preserve": len(scenario.test_preserve),
    }
