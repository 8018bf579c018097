"""Character-level edit distance and error rates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class EditStats:
    distance: int
    substitutions: int
    deletions: int
    insertions: int
    rate: float
    degenerate: bool = False


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance with unit costs."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i in range(1, len(a) + 1):
        cur = [i] + [0] * len(b)
        ai = a[i - 1]
        for j in range(1, len(b) + 1):
            cost = 0 if ai == b[j - 1] else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev = cur
    return prev[-1]


def cer(reference: str, hypothesis: str) -> EditStats:
    """Character error rate (S + D + I) / len(reference), with the edit
    split resolved by preferring substitution over deletion over insertion.

    An empty reference with a non-empty hypothesis is reported with the
    degenerate flag set and a rate of len(hypothesis) / 1.
    """
    if not reference:
        n = len(hypothesis)
        return EditStats(
            distance=n, substitutions=0, deletions=0, insertions=n,
            rate=float(n), degenerate=bool(n),
        )
    n, m = len(reference), len(hypothesis)
    dp = np.zeros((n + 1, m + 1), dtype=np.int64)
    dp[:, 0] = np.arange(n + 1)
    dp[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        ri = reference[i - 1]
        for j in range(1, m + 1):
            cost = 0 if ri == hypothesis[j - 1] else 1
            dp[i, j] = min(dp[i - 1, j] + 1, dp[i, j - 1] + 1, dp[i - 1, j - 1] + cost)

    subs = dels = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dp[i, j] == dp[i - 1, j - 1] + (0 if reference[i - 1] == hypothesis[j - 1] else 1):
            if reference[i - 1] != hypothesis[j - 1]:
                subs += 1
            i -= 1
            j -= 1
        elif i > 0 and dp[i, j] == dp[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    distance = int(dp[n, m])
    return EditStats(
        distance=distance, substitutions=subs, deletions=dels, insertions=ins,
        rate=distance / n,
    )
