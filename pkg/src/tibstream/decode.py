"""Decoding strategies: attention beam search, attention rescoring, CTC greedy and prefix beam."""

from __future__ import annotations

import enum
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .chunking import ChunkPlan, LatencyRecord, build_attention_mask, dynamic_plan, full_plan, \
    latency_from_alignment, static_plan
from .ctc import ctc_greedy_alignment, ctc_prefix_beam_search
from .hypothesis import Hypothesis, rank_key
from .lm import NGramLM, lm_score
from .model import ASRModel
from .numerics import Tensor, no_grad
from .tibetan import BLANK, EOS, SOS, UNK


class Mode(enum.Enum):
    ATT = "att"
    ATT_RESCORE = "att-rescore"
    CTC_GREEDY = "ctc-greedy"
    CTC_PREFIX_BEAM = "ctc-pbs"


@dataclass
class DecodeConfig:
    mode: Mode = Mode.ATT_RESCORE
    beam: int = 10
    global_norm: bool = True
    rescore_weight: float = 0.5
    lm_weight: float = 0.0
    bonus: float = 0.0
    max_len: int | None = None

    def __post_init__(self):
        if isinstance(self.mode, str):
            self.mode = Mode(self.mode)
        if self.beam < 1:
            raise ValueError("beam must be >= 1")
        if not 0.0 <= self.rescore_weight <= 1.0:
            raise ValueError("rescore weight must lie in [0, 1]")


@dataclass(frozen=True)
class PlanSpec:
    """How to chunk an utterance: ``global``, ``static`` (width, stride) or ``dynamic``."""

    kind: str = "global"
    width: int = 16
    stride: int = 16
    carry_over: int = 8
    context_decay: float = 0.9


def make_plan(model: ASRModel, feat: np.ndarray, spec: PlanSpec) -> ChunkPlan:
    T = -(-len(feat) // model.enc.subsample)
    if spec.kind == "global":
        return full_plan(T)
    if spec.kind == "static":
        return static_plan(T, spec.width, spec.stride)
    if spec.kind == "dynamic":
        return dynamic_plan(model.encode_prefix_fn(feat), T, model.controller,
                            spec.carry_over, spec.context_decay)
    raise ValueError(f"unknown plan kind {spec.kind!r}")


def _normalized(score: float, length: int, on: bool) -> float:
    return score / (length + 1) if on else score


def _allowed_tokens(V: int) -> np.ndarray:
    return np.array([k for k in range(V) if k not in (BLANK, SOS)])


def attention_beam_search(model: ASRModel, states: Tensor, state_len: int, cfg: DecodeConfig,
                          lm: NGramLM | None = None) -> list[Hypothesis]:
    """Label-synchronous beam search over the attention decoder.

    Partial hypotheses are ranked by ``attn + lm_weight * lm + bonus * len``.
    Every step keeps the ``beam`` best unfinished extensions alive and retires
    any eos extension that ranks inside the top ``beam``. Without length
    normalization and with a non-positive bonus, scores only fall as a
    hypothesis grows, so search stops once ``beam`` hypotheses have retired
    and the best of them outscores everything still alive. Otherwise it runs
    until the length cap forces eos. The final n-best is ranked by the same
    score, divided by ``len + 1`` under global normalization.
    """
    V = model.vocab_size
    max_len = cfg.max_len if cfg.max_len is not None else 2 + state_len // 2
    tokens = _allowed_tokens(V)
    use_lm = lm is not None and cfg.lm_weight != 0.0
    can_stop_early = not cfg.global_norm and cfg.bonus <= 0.0
    alive = [Hypothesis((), finished=False)]
    finished: list[Hypothesis] = []
    step = 0
    while alive:
        with no_grad():
            B = len(alive)
            st = Tensor(np.broadcast_to(states.data, (B,) + states.shape[1:]).copy())
            logp = model.decode_forward(st, [state_len] * B, [[SOS] + list(h.ids) for h in alive]).data
        cands = []
        for b, h in enumerate(alive):
            row = logp[b, len(h.ids)]
            options = [EOS] if step >= max_len else tokens
            for k in options:
                k = int(k)
                lm_lp = h.lm_logp
                if use_lm:
                    lm_lp += lm.score_end(h.ids) if k == EOS else lm.score_token(h.ids, k)
                ids = h.ids if k == EOS else h.ids + (k,)
                attn = h.attn_logp + float(row[k])
                score = attn + (cfg.lm_weight * lm_lp if use_lm else 0.0) + cfg.bonus * len(ids)
                cands.append(Hypothesis(ids, attn_logp=attn, lm_logp=lm_lp, combined=score,
                                        finished=k == EOS))
        cands.sort(key=lambda c: (-c.combined, c.ids, not c.finished))
        finished += [c for c in cands[: cfg.beam] if c.finished]
        alive = [c for c in cands if not c.finished][: cfg.beam]
        step += 1
        if can_stop_early and len(finished) >= cfg.beam and alive and \
                max(f.combined for f in finished) >= alive[0].combined:
            break
    out = finished
    if not out:
        out = alive
        for h in out:
            h.warnings.append("no hypothesis emitted eos within max length")
    for h in out:
        h.combined = _normalized(h.combined, len(h.ids), cfg.global_norm)
    out.sort(key=rank_key)
    return out


def attention_rescore(nbest: list[Hypothesis], model: ASRModel, states: Tensor, state_len: int,
                      cfg: DecodeConfig, lm: NGramLM | None = None) -> Hypothesis:
    """Re-rank CTC candidates with teacher-forced decoder scores; returns the winner."""
    return rescore_all(nbest, model, states, state_len, cfg, lm)[0]


def rescore_all(nbest, model, states, state_len, cfg, lm=None) -> list[Hypothesis]:
    if not nbest:
        raise ValueError("attention rescoring needs a non-empty n-best list")
    attn = model.sequence_logprob(states, state_len, [h.ids for h in nbest])
    mu = cfg.rescore_weight
    use_lm = lm is not None and cfg.lm_weight != 0.0
    out = []
    for h, a in zip(nbest, attn):
        lm_lp = lm_score(lm, h.ids) if use_lm else 0.0
        score = mu * h.am_logp + (1.0 - mu) * float(a) + cfg.bonus * len(h.ids)
        if use_lm:
            score += cfg.lm_weight * lm_lp
        out.append(Hypothesis(h.ids, am_logp=h.am_logp, attn_logp=float(a), lm_logp=lm_lp,
                              combined=_normalized(score, len(h.ids), cfg.global_norm)))
    out.sort(key=rank_key)
    return out


@dataclass
class DecodeResult:
    hypothesis: Hypothesis
    latency: LatencyRecord
    plan: ChunkPlan
    mode: Mode
    extras: dict = field(default_factory=dict)

    @property
    def ids(self) -> tuple[int, ...]:
        return self.hypothesis.ids

    def to_json(self, utt_id: str, text: str, wer_ref: float | None = None) -> str:
        h = self.hypothesis
        apl = None
        if self.latency.t_decode:
            apl = float(np.mean(np.subtract(self.latency.t_decode, self.latency.t_input)))
        return json.dumps({"id": utt_id, "mode": self.mode.value, "text": text, "wer_ref": wer_ref,
                           "channels": {k: (v if np.isfinite(v) else None) for k, v in
                                        (("am_logp", h.am_logp), ("attn_logp", h.attn_logp),
                                         ("lm_logp", h.lm_logp), ("combined", h.combined))},
                           "apl_seconds": apl}, ensure_ascii=False)


def run_decode(feat: np.ndarray, model: ASRModel, spec: PlanSpec, cfg: DecodeConfig,
               lm: NGramLM | None = None, plan: ChunkPlan | None = None,
               wall_clock: bool = False) -> DecodeResult:
    """Plan, encode and decode one utterance with the configured strategy."""
    t0 = time.perf_counter()
    plan = plan or make_plan(model, feat, spec)
    mask = None if spec.kind == "global" else build_attention_mask(plan, spec.carry_over)
    with no_grad():
        states, lens = model.encode([feat], None if mask is None else [mask])
        ctc_lp = model.ctc_log_probs(states).data[0, : lens[0]]
    n = int(lens[0])
    single = Tensor(states.data[:, :n])
    use_lm = lm if cfg.lm_weight else None
    if cfg.mode is Mode.CTC_GREEDY:
        ids = tuple(u for u, _ in ctc_greedy_alignment(ctc_lp))
        hyp = Hypothesis(ids, am_logp=float("nan"), combined=float("nan"))
    elif cfg.mode is Mode.CTC_PREFIX_BEAM:
        hyp = ctc_prefix_beam_search(ctc_lp, cfg.beam, use_lm, cfg.lm_weight, cfg.bonus,
                                     exclude=(SOS, EOS, UNK))[0]
        hyp.combined = _normalized(hyp.combined, len(hyp.ids), cfg.global_norm)
    elif cfg.mode is Mode.ATT_RESCORE:
        nbest = ctc_prefix_beam_search(ctc_lp, cfg.beam, use_lm, cfg.lm_weight, 0.0,
                                       exclude=(SOS, EOS, UNK))
        hyp = attention_rescore(nbest, model, single, n, cfg, use_lm)
    else:
        hyp = attention_beam_search(model, single, n, cfg, use_lm)[0]
    align = ctc_greedy_alignment(ctc_lp)
    compute = None
    if wall_clock:
        elapsed = time.perf_counter() - t0
        compute = [elapsed / len(plan)] * len(plan)
    latency = latency_from_alignment([f for _, f in align], plan, model.enc.subsample,
                                     compute_time=compute)
    return DecodeResult(hyp, latency, plan, cfg.mode)
