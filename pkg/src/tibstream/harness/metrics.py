"""Syllable-level WER with a deterministic Levenshtein backtrace."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence


@dataclass
class Metrics:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    ref_len: int = 0
    utterances: int = 0
    apl_seconds: float | None = None

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer_percent(self) -> float:
        return 100.0 * self.errors / max(1, self.ref_len)

    def __add__(self, other: "Metrics") -> "Metrics":
        return Metrics(self.substitutions + other.substitutions, self.insertions + other.insertions,
                       self.deletions + other.deletions, self.ref_len + other.ref_len,
                       self.utterances + other.utterances)

    def as_dict(self) -> dict:
        return {"wer_percent": self.wer_percent, "substitutions": self.substitutions,
                "insertions": self.insertions, "deletions": self.deletions,
                "ref_len": self.ref_len, "utterances": self.utterances,
                "apl_seconds": self.apl_seconds}


def align(ref: Sequence, hyp: Sequence) -> list[tuple[str, int | None, int | None]]:
    """Edit operations turning ``ref`` into ``hyp``.

    Ops are ``("ok"|"sub"|"del"|"ins", ref_index, hyp_index)``. When several
    backtrace moves are optimal the order of preference is match or
    substitution, then deletion, then insertion.
    """
    n, m = len(ref), len(hyp)
    dp = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        dp[i][0] = i
    for j in range(m + 1):
        dp[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            dp[i][j] = min(dp[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]),
                           dp[i - 1][j] + 1, dp[i][j - 1] + 1)
    ops = []
    i, j = n, m
    while i or j:
        if i and j and dp[i][j] == dp[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            ops.append(("ok" if ref[i - 1] == hyp[j - 1] else "sub", i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i and dp[i][j] == dp[i - 1][j] + 1:
            ops.append(("del", i - 1, None))
            i -= 1
        else:
            ops.append(("ins", None, j - 1))
            j -= 1
    ops.reverse()
    return ops


def compute_wer(ref: Sequence, hyp: Sequence) -> Metrics:
    ops = align(ref, hyp)
    count = {k: sum(1 for o in ops if o[0] == k) for k in ("sub", "ins", "del")}
    return Metrics(count["sub"], count["ins"], count["del"], len(ref), 1)


def corpus_wer(pairs) -> Metrics:
    total = Metrics()
    for ref, hyp in pairs:
        total = total + compute_wer(ref, hyp)
    return total
