"""Structural checks that the stage covariance increments are invertible.

Each event ``E`` is described by its incidence vector ``Psi_E`` over the model
transitions (1 where the transition starts outside ``E`` and enters it).  For
the all-entries statistic, invertibility is equivalent to linear independence
of the ``Psi`` vectors.  For the first-hitting statistic only sufficient
conditions exist:

I1
    every event has an exclusive transition, i.e. one entering it that enters
    no other event of the collection;
I2
    the events with an exclusive transition can be split off and the rest is
    invertible by some criterion (applied recursively);
D
    per connected block of the "shares an entering transition" graph (D1),
    each entering transition is shared with at most one other event (D2) and
    some event of the block has an exclusive transition (D3).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

from .cohort import ALL_ENTRIES, EventDefinition
from .model import MultiStateModel

GUARANTEED = "guaranteed-invertible"
NOT_GUARANTEED = "not-guaranteed"
SINGULAR = "provably-singular"


def psi_vectors(model: MultiStateModel, events: Sequence[EventDefinition]) -> list[tuple[int, ...]]:
    """Incidence vectors over ``model.transitions`` (in model order)."""
    return [tuple(int(e.contributes(j, k)) for j, k in model.transitions) for e in events]


def exact_rank(vectors: Sequence[Sequence[int]]) -> int:
    """Rank over the rationals by fraction-exact Gaussian elimination."""
    rows = [[Fraction(x) for x in v] for v in vectors]
    rank = 0
    ncols = len(rows[0]) if rows else 0
    for col in range(ncols):
        pivot = next((r for r in range(rank, len(rows)) if rows[r][col] != 0), None)
        if pivot is None:
            continue
        rows[rank], rows[pivot] = rows[pivot], rows[rank]
        for r in range(len(rows)):
            if r != rank and rows[r][col] != 0:
                factor = rows[r][col] / rows[rank][col]
                rows[r] = [a - factor * b for a, b in zip(rows[r], rows[rank])]
        rank += 1
    return rank


def _entering(psi: Sequence[tuple[int, ...]], c: int) -> set[int]:
    return {i for i, x in enumerate(psi[c]) if x}


def exclusive_transitions(psi, c: int, collection: Sequence[int]) -> set[int]:
    """Transitions entering event ``c`` and no other event of ``collection``."""
    others = [o for o in collection if o != c]
    return {i for i in _entering(psi, c) if not any(psi[o][i] for o in others)}


def _blocks(psi, collection: Sequence[int]) -> list[list[int]]:
    """Connected components of the graph linking events that share an entering transition."""
    remaining = list(collection)
    blocks = []
    while remaining:
        block = [remaining.pop(0)]
        grew = True
        while grew:
            grew = False
            for o in list(remaining):
                if any(_entering(psi, o) & _entering(psi, b) for b in block):
                    block.append(o)
                    remaining.remove(o)
                    grew = True
        blocks.append(sorted(block))
    return blocks


def _dominance(psi, block: Sequence[int]) -> tuple[bool, bool]:
    """(D2, D3) for one connected block."""
    d2 = all(
        sum(psi[o][i] for o in block if o != c) <= 1 for c in block for i in _entering(psi, c)
    )
    d3 = any(exclusive_transitions(psi, c, block) for c in block)
    return d2, d3


@dataclass(frozen=True)
class InvertibilityReport:
    transitions: tuple[tuple[int, int], ...]
    psi: tuple[tuple[int, ...], ...]
    psi_rank: int
    psi_independent: bool
    exclusive: tuple[tuple[tuple[int, int], ...], ...]
    criterion_i1: bool
    criterion_i2: bool
    blocks: tuple[tuple[int, ...], ...]
    criterion_d1: bool
    criterion_d: bool
    verdict: str
    reasons: tuple[str, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "transitions": [list(t) for t in self.transitions],
            "psi": [list(p) for p in self.psi],
            "psi_rank": self.psi_rank,
            "psi_independent": self.psi_independent,
            "exclusive": [[list(t) for t in ex] for ex in self.exclusive],
            "I1": self.criterion_i1,
            "I2": self.criterion_i2,
            "blocks": [list(b) for b in self.blocks],
            "D1": self.criterion_d1,
            "D": self.criterion_d,
            "verdict": self.verdict,
            "reasons": list(self.reasons),
        }


def _criterion_d(psi, collection) -> bool:
    # A block-diagonal matrix is invertible only if every block is, so every
    # block must pass D2 and D3 (not just one of them).
    blocks = _blocks(psi, collection)
    return bool(collection) and all(all(_dominance(psi, b)) for b in blocks)


def _criterion_i1(psi, collection) -> bool:
    return all(exclusive_transitions(psi, c, collection) for c in collection)


def _guaranteed(psi, collection) -> bool:
    """Whether I1, D or the recursive split I2 proves invertibility of ``collection``."""
    if not collection:
        return True
    if _criterion_i1(psi, collection) or _criterion_d(psi, collection):
        return True
    return _criterion_i2(psi, collection)


def _criterion_i2(psi, collection) -> bool:
    split = [c for c in collection if exclusive_transitions(psi, c, collection)]
    rest = [c for c in collection if c not in split]
    return bool(split) and bool(rest) and _guaranteed(psi, rest)


def invertibility_report(model: MultiStateModel, events: Sequence[EventDefinition]) -> InvertibilityReport:
    """Structural invertibility verdict for the covariance increments of ``events``."""
    psi = psi_vectors(model, events)
    d = len(events)
    rank = exact_rank(psi) if d else 0
    independent = rank == d
    collection = list(range(d))
    transitions = model.transitions
    exclusive = tuple(
        tuple(transitions[i] for i in sorted(exclusive_transitions(psi, c, collection))) for c in collection
    )
    i1 = _criterion_i1(psi, collection)
    i2 = _criterion_i2(psi, collection)
    blocks = _blocks(psi, collection)
    d1 = len(blocks) == 1
    dcrit = _criterion_d(psi, collection)

    reasons = []
    state_sets = [e.states for e in events]
    duplicates = [(b, c) for b in range(d) for c in range(b + 1, d) if state_sets[b] == state_sets[c]]
    empty = [c for c in collection if not any(psi[c])]
    for b, c in duplicates:
        reasons.append(f"events {b} and {c} coincide")
    for c in empty:
        reasons.append(f"no model transition enters event {c}")
    all_entries = bool(events) and all(e.mode == ALL_ENTRIES for e in events)

    if duplicates or empty:
        verdict = SINGULAR
    elif all_entries:
        verdict = GUARANTEED if independent else SINGULAR
        reasons.append("incidence vectors are " + ("linearly independent" if independent else "linearly dependent"))
    elif i1 or i2 or dcrit:
        verdict = GUARANTEED
        reasons.append("criterion " + ("I1" if i1 else "I2" if i2 else "D") + " holds")
    else:
        verdict = NOT_GUARANTEED
        reasons.append("no sufficient criterion applies")
    return InvertibilityReport(
        transitions,
        tuple(psi),
        rank,
        independent,
        exclusive,
        i1,
        i2,
        tuple(tuple(b) for b in blocks),
        d1,
        dcrit,
        verdict,
        tuple(reasons),
    )
