"""Edit distance and micro-averaged Character Error Rate."""
from __future__ import annotations

from typing import Sequence


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, sym_a in enumerate(a, start=1):
        cur = [i]
        for j, sym_b in enumerate(b, start=1):
            cur.append(min(prev[j] + 1,
                           cur[j - 1] + 1,
                           prev[j - 1] + (sym_a != sym_b)))
        prev = cur
    return prev[-1]


def cer(references: Sequence[Sequence], hypotheses: Sequence[Sequence]) -> float:
    """100 * (sum of edit distances) / (sum of reference lengths)."""
    if len(references) != len(hypotheses):
        raise ValueError(f"{len(references)} references vs {len(hypotheses)} hypotheses")
    total_len = sum(len(r) for r in references)
    if total_len == 0:
        raise ValueError("total reference length is zero")
    total_dist = sum(edit_distance(r, h) for r, h in zip(references, hypotheses))
    return 100.0 * total_dist / total_len
