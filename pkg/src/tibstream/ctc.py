"""CTC objective, greedy decoding and prefix beam search (blank id 0)."""

from __future__ import annotations

from collections import defaultdict
from typing import Protocol, Sequence

import numpy as np

from .hypothesis import Hypothesis, rank_key
from .numerics import Tensor, as_tensor, custom_op

BLANK = 0
NEG_INF = -np.inf


class InfeasibleAlignmentError(ValueError):
    pass


class TokenScorer(Protocol):
    def score_token(self, prefix: tuple[int, ...], token: int) -> float: ...

    def score_end(self, prefix: tuple[int, ...]) -> float: ...


def min_frames(target: Sequence[int]) -> int:
    """Shortest input able to emit ``target`` (repeats need a blank between)."""
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def _lse3(a, b, c):
    m = np.maximum(np.maximum(a, b), c)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.where(np.isfinite(m),
                        safe + np.log(np.exp(a - safe) + np.exp(b - safe) + np.exp(c - safe)),
                        NEG_INF)


def ctc_loss_batch(log_probs: Tensor, input_lengths: Sequence[int],
                   targets: Sequence[Sequence[int]]) -> Tensor:
    """Per-utterance CTC negative log-likelihood, shape ``(B,)``.

    ``log_probs`` is ``B x T x V``; rows beyond each input length are
    ignored. The gradient is the exact forward-backward occupancy.
    """
    lp = log_probs.data
    B, Tmax, V = lp.shape
    lens = np.asarray(input_lengths, dtype=np.int64)
    L = np.array([len(t) for t in targets])
    for b, tgt in enumerate(targets):
        if len(tgt) == 0:
            raise ValueError("CTC target must be non-empty")
        if any(u == BLANK or not 0 <= u < V for u in tgt):
            raise ValueError(f"CTC target {list(tgt)} contains blank or out-of-range ids")
        if lens[b] < min_frames(tgt):
            raise InfeasibleAlignmentError(
                f"utterance {b}: {lens[b]} frames cannot emit {len(tgt)} labels")
    S = 2 * int(L.max()) + 1
    ext = np.zeros((B, S), dtype=np.int64)
    for b, tgt in enumerate(targets):
        ext[b, 1:2 * len(tgt):2] = tgt
    state_ok = np.arange(S)[None, :] < (2 * L + 1)[:, None]
    skip = np.zeros((B, S), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != BLANK) & (ext[:, 2:] != ext[:, :-2])
    # emissions per state, T x B x S
    em = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (B, Tmax, S)), axis=2)
    em = np.where(state_ok[:, None, :], em, NEG_INF).transpose(1, 0, 2)

    alpha = np.full((Tmax, B, S), NEG_INF)
    alpha[0, :, 0] = em[0, :, 0]
    alpha[0, :, 1] = em[0, :, 1]
    for t in range(1, Tmax):
        a = alpha[t - 1]
        a1 = np.concatenate([np.full((B, 1), NEG_INF), a[:, :-1]], axis=1)
        a2 = np.concatenate([np.full((B, 2), NEG_INF), a[:, :-2]], axis=1)
        alpha[t] = _lse3(a, a1, np.where(skip, a2, NEG_INF)) + em[t]

    rows = np.arange(B)
    last = alpha[lens - 1, rows]
    ll = np.logaddexp(last[rows, 2 * L], last[rows, 2 * L - 1])
    if not np.all(np.isfinite(ll)):
        raise InfeasibleAlignmentError("no valid alignment for at least one utterance")

    def bwd(g):
        beta = np.full((Tmax, B, S), NEG_INF)
        init = np.full((B, S), NEG_INF)
        init[rows, 2 * L] = 0.0
        init[rows, 2 * L - 1] = 0.0
        skip_next = np.zeros((B, S), dtype=bool)
        skip_next[:, :-2] = skip[:, 2:]
        for t in range(Tmax - 1, -1, -1):
            if t == Tmax - 1:
                rec = np.full((B, S), NEG_INF)
            else:
                nb = beta[t + 1] + em[t + 1]
                n1 = np.concatenate([nb[:, 1:], np.full((B, 1), NEG_INF)], axis=1)
                n2 = np.concatenate([nb[:, 2:], np.full((B, 2), NEG_INF)], axis=1)
                rec = _lse3(nb, n1, np.where(skip_next, n2, NEG_INF))
            here = (lens - 1 == t)[:, None]
            live = (t < lens - 1)[:, None]
            beta[t] = np.where(here, init, np.where(live, rec, NEG_INF))
        occ = np.exp(alpha + beta - ll[None, :, None])            # T x B x S
        occ = np.where(np.isfinite(occ), occ, 0.0).transpose(1, 0, 2)
        grad = np.zeros((B, Tmax, V))
        bi, ti, si = np.nonzero(occ)
        np.add.at(grad, (bi, ti, ext[bi, si]), -occ[bi, ti, si])
        return (grad * np.asarray(g)[:, None, None],)

    return custom_op(-ll, (log_probs,), bwd, "ctc_loss")


def ctc_loss(grid, target: Sequence[int]) -> Tensor:
    """Scalar CTC negative log-likelihood for one ``T x V`` log-posterior grid."""
    grid = as_tensor(grid)
    out = ctc_loss_batch(grid.reshape(1, *grid.shape), [grid.shape[0]], [list(target)])
    return out.reshape(())


def ctc_greedy(grid) -> list[int]:
    return [u for u, _ in ctc_greedy_alignment(grid)]


def ctc_greedy_alignment(grid) -> list[tuple[int, int]]:
    """Greedy labels with the first frame at which each was emitted."""
    lp = grid.data if isinstance(grid, Tensor) else np.asarray(grid)
    best = lp.argmax(axis=-1)  # argmax picks the lowest id on ties
    out = []
    prev = BLANK
    for t, u in enumerate(best):
        u = int(u)
        if u != BLANK and u != prev:
            out.append((u, t))
        prev = u
    return out


def ctc_prefix_beam_search(grid, beam: int = 10, lm: TokenScorer | None = None,
                           lm_weight: float = 0.0, bonus: float = 0.0,
                           nbest: int | None = None, exclude: Sequence[int] = ()) -> list[Hypothesis]:
    """Prefix beam search over a ``T x V`` log-posterior grid.

    Each prefix carries the log mass of paths ending in blank and in a
    non-blank. With an LM attached every new label adds
    ``lm_weight * log P_LM(label | prefix)`` and pruning ranks by that fused
    score; the end-of-sentence LM term is added when the n-best is formed.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    lp = grid.data if isinstance(grid, Tensor) else np.asarray(grid, dtype=np.float64)
    T, V = lp.shape
    tokens = [k for k in range(V) if k != BLANK and k not in set(exclude)]
    use_lm = lm is not None and lm_weight != 0.0

    # prefix -> [log p_blank, log p_nonblank]; lm cache: prefix -> summed LM log-prob
    beams: dict[tuple, list[float]] = {(): [0.0, NEG_INF]}
    lm_cum: dict[tuple, float] = {(): 0.0}

    def fused(prefix, pb, pnb):
        s = np.logaddexp(pb, pnb) + bonus * len(prefix)
        if use_lm:
            s += lm_weight * lm_cum[prefix]
        return s

    for t in range(T):
        row = lp[t]
        nxt: dict[tuple, list[float]] = defaultdict(lambda: [NEG_INF, NEG_INF])
        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            cell = nxt[prefix]
            cell[0] = np.logaddexp(cell[0], total + row[BLANK])
            last = prefix[-1] if prefix else None
            for k in tokens:
                p = row[k]
                ext = prefix + (k,)
                if ext not in lm_cum:
                    lm_cum[ext] = lm_cum[prefix] + (lm.score_token(prefix, k) if use_lm else 0.0)
                ecell = nxt[ext]
                if k == last:
                    cell[1] = np.logaddexp(cell[1], pnb + p)
                    ecell[1] = np.logaddexp(ecell[1], pb + p)
                else:
                    ecell[1] = np.logaddexp(ecell[1], total + p)
        live = [(k, v) for k, v in nxt.items() if v[0] > NEG_INF or v[1] > NEG_INF]
        ranked = sorted(live, key=lambda kv: (-fused(kv[0], *kv[1]), kv[0]))
        beams = dict(ranked[:beam])

    hyps = []
    for prefix, (pb, pnb) in beams.items():
        am = float(np.logaddexp(pb, pnb))
        lm_lp = lm_cum[prefix] + lm.score_end(prefix) if use_lm else 0.0
        total = am + (lm_weight * lm_lp if use_lm else 0.0) + bonus * len(prefix)
        hyps.append(Hypothesis(tuple(prefix), am_logp=am, lm_logp=float(lm_lp), combined=float(total)))
    hyps.sort(key=rank_key)
    return hyps[:nbest] if nbest else hyps
