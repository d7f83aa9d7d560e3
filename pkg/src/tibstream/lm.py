"""Back-off n-gram language model over unit ids.

Training uses interpolated Witten-Bell smoothing down to a uniform
distribution over the predictable vocabulary (every non-reserved unit plus
``unk`` and ``eos``). Interpolated Witten-Bell is exactly representable in
back-off form: a seen n-gram stores its interpolated probability, and a
context's back-off weight is its Witten-Bell mass ``N1+(h.) / (c(h) + N1+(h.))``.
That is the table written to and read from ARPA files.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from pathlib import Path
from typing import Iterable, Sequence

from .hypothesis import Hypothesis
from .tibetan import EOS, RESERVED, SOS, UNK

LOG10 = math.log(10.0)
_ARPA_SPECIAL = {SOS: "<s>", EOS: "</s>", UNK: "<unk>"}


class NGramLM:
    def __init__(self, order: int, vocab_size: int, symbols: Sequence[str] | None = None):
        if order < 1:
            raise ValueError("order must be >= 1")
        self.order = order
        self.vocab_size = vocab_size
        self.symbols = list(symbols) if symbols is not None else [str(i) for i in range(vocab_size)]
        # log10 tables keyed by id tuples (history + word)
        self.prob: dict[tuple[int, ...], float] = {}
        self.bow: dict[tuple[int, ...], float] = {}

    @property
    def predictable(self) -> list[int]:
        return [UNK, EOS] + list(range(len(RESERVED), self.vocab_size))

    # ------------------------------------------------------------- query

    def log10_prob(self, word: int, history: Sequence[int]) -> float:
        h = tuple(history)[-(self.order - 1):] if self.order > 1 else ()
        penalty = 0.0
        while True:
            p = self.prob.get(h + (word,))
            if p is not None:
                return penalty + p
            if not h:
                return penalty + self.prob.get((UNK,), -99.0)
            penalty += self.bow.get(h, 0.0)
            h = h[1:]

    def logprob(self, word: int, history: Sequence[int]) -> float:
        """Natural-log probability of ``word`` after ``history`` (sos is prepended by callers)."""
        return self.log10_prob(word, history) * LOG10

    def score_token(self, prefix: tuple[int, ...], token: int) -> float:
        return self.logprob(token, (SOS,) + tuple(prefix))

    def score_end(self, prefix: tuple[int, ...]) -> float:
        return self.logprob(EOS, (SOS,) + tuple(prefix))

    # ------------------------------------------------------------ ARPA

    def _sym(self, i: int) -> str:
        return _ARPA_SPECIAL.get(i, self.symbols[i])

    def to_arpa(self) -> str:
        by_order: dict[int, list] = defaultdict(list)
        for gram in self.prob:
            by_order[len(gram)].append(gram)
        by_order[1].append((SOS,))
        lines = ["\\data\\"]
        for k in range(1, self.order + 1):
            lines.append(f"ngram {k}={len(by_order[k])}")
        for k in range(1, self.order + 1):
            lines += ["", f"\\{k}-grams:"]
            for gram in sorted(by_order[k]):
                p = -99.0 if gram == (SOS,) else self.prob[gram]
                row = f"{p!r}\t{' '.join(self._sym(i) for i in gram)}"
                if k < self.order and gram in self.bow:
                    row += f"\t{self.bow[gram]!r}"
                lines.append(row)
        lines += ["", "\\end\\", ""]
        return "\n".join(lines)

    def save_arpa(self, path) -> None:
        Path(path).write_text(self.to_arpa(), encoding="utf-8")

    @classmethod
    def from_arpa(cls, text: str, symbols: Sequence[str]) -> "NGramLM":
        index = {s: i for i, s in enumerate(symbols)}
        index.update({v: k for k, v in _ARPA_SPECIAL.items()})
        counts: dict[int, int] = {}
        section = None
        lm = None
        for raw in text.splitlines():
            line = raw.strip()
            if not line:
                continue
            if line == "\\data\\":
                section = "data"
                continue
            if line == "\\end\\":
                break
            if line.startswith("\\") and line.endswith("-grams:"):
                section = int(line[1:line.index("-")])
                if lm is None:
                    lm = cls(max(counts), len(symbols), symbols)
                continue
            if section == "data":
                k, n = line.split()[1].split("=")
                counts[int(k)] = int(n)
                continue
            parts = line.split()
            k = section
            gram = tuple(index[w] for w in parts[1:1 + k])
            if gram != (SOS,):
                lm.prob[gram] = float(parts[0])
            if len(parts) > 1 + k:
                lm.bow[gram] = float(parts[1 + k])
        if lm is None:
            raise ValueError("no n-gram sections found in ARPA text")
        return lm

    @classmethod
    def load_arpa(cls, path, symbols: Sequence[str]) -> "NGramLM":
        return cls.from_arpa(Path(path).read_text(encoding="utf-8"), symbols)


def train_ngram(sentences: Iterable[Sequence[int]], order: int = 3, vocab_size: int | None = None,
                symbols: Sequence[str] | None = None, smoothing: str = "witten-bell") -> NGramLM:
    """Interpolated Witten-Bell n-gram model from id sentences (no sos/eos inside)."""
    if smoothing != "witten-bell":
        raise ValueError(f"unsupported smoothing {smoothing!r}")
    sentences = [list(s) for s in sentences]
    if not sentences:
        raise ValueError("cannot train a language model on an empty corpus")
    if vocab_size is None:
        vocab_size = len(symbols) if symbols is not None else \
            max([len(RESERVED) - 1] + [max(s) for s in sentences if s]) + 1
    lm = NGramLM(order, vocab_size, symbols)

    # follow[h] counts words seen after history h (len(h) < order)
    follow: dict[tuple, Counter] = defaultdict(Counter)
    for s in sentences:
        seq = [SOS] + s + [EOS]
        for t in range(1, len(seq)):
            for k in range(order):
                if t - k < 0:
                    break
                follow[tuple(seq[t - k:t])][seq[t]] += 1

    vocab = lm.predictable
    uniform = 1.0 / len(vocab)
    memo: dict[tuple, float] = {}

    def wb_lambda(h) -> float:
        c = follow[h]
        total = sum(c.values())
        return len(c) / (total + len(c))

    def interp(word, h) -> float:
        key = h + (word,)
        if key in memo:
            return memo[key]
        lower = interp(word, h[1:]) if h else uniform
        c = follow.get(h)
        if not c:
            p = lower
        else:
            total = sum(c.values())
            p = (c[word] + len(c) * lower) / (total + len(c))
        memo[key] = p
        return p

    for w in vocab:
        lm.prob[(w,)] = math.log10(interp(w, ()))
    for h, c in follow.items():
        if h:
            for w in c:
                lm.prob[h + (w,)] = math.log10(interp(w, h))
            if len(h) < order:
                lm.bow[h] = math.log10(wb_lambda(h))
    return lm


def lm_score(lm: NGramLM, ids: Sequence[int]) -> float:
    """Natural-log probability of a full sentence, end-of-sentence included."""
    hist = [SOS]
    total = 0.0
    for u in ids:
        total += lm.logprob(u, hist)
        hist.append(u)
    return total + lm.logprob(EOS, hist)


def fused_score(hyp: Hypothesis, lm_weight: float = 0.3, bonus: float = 0.0) -> float:
    if lm_weight < 0:
        raise ValueError("lm_weight must be non-negative")
    return hyp.am_logp + lm_weight * hyp.lm_logp + bonus * len(hyp.ids)
