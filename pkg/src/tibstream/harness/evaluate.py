"""Corpus-level decoding, WER and latency."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..chunking import dynamic_plans
from ..decode import DecodeConfig, DecodeResult, PlanSpec, run_decode
from ..lm import NGramLM
from ..model import ASRModel
from ..tibetan import TSHEG
from .metrics import Metrics, compute_wer
from .synth import Utterance


@dataclass
class Evaluation:
    metrics: Metrics
    results: list[DecodeResult]
    mean_w_hat: float | None = None

    def as_dict(self) -> dict:
        out = self.metrics.as_dict()
        out["mean_w_hat"] = self.mean_w_hat
        return out


def evaluate(model: ASRModel, utts: Sequence[Utterance], spec: PlanSpec, cfg: DecodeConfig,
             lm: NGramLM | None = None) -> Evaluation:
    """Decode every utterance (in id order) and pool WER and per-label latency."""
    utts = sorted(utts, key=lambda u: u.uid)
    plans = [None] * len(utts)
    if spec.kind == "dynamic":
        feats = [u.feats for u in utts]
        Ts = [-(-len(f) // model.enc.subsample) for f in feats]
        plans = dynamic_plans(model.encode_prefix_batch_fn(feats), Ts, model.controller,
                              spec.carry_over, spec.context_decay)
    total = Metrics()
    delays: list[float] = []
    results = []
    for u, plan in zip(utts, plans):
        res = run_decode(u.feats, model, spec, cfg, lm, plan=plan)
        results.append(res)
        total = total + compute_wer(u.ids, list(res.ids))
        delays.extend(np.subtract(res.latency.t_decode, res.latency.t_input).tolist())
    total.apl_seconds = float(np.mean(delays)) if delays else None
    w_hat = None
    if spec.kind == "dynamic":
        w_hat = float(np.mean([d["w_hat"] for r in results for d in r.plan.diagnostics]))
    return Evaluation(total, results, w_hat)


def concatenate(utts: Sequence[Utterance], min_frames: int,
                same_speaker: bool = True) -> list[Utterance]:
    """Join consecutive utterances until each piece has at least ``min_frames`` raw frames.

    With ``same_speaker`` a piece never spans two speakers, like one long
    recording. A remainder shorter than ``min_frames`` is dropped.
    """
    out: list[Utterance] = []
    cur: list[Utterance] = []
    for u in sorted(utts, key=lambda u: u.uid):
        if same_speaker and cur and u.speaker != cur[-1].speaker:
            cur = []
        cur.append(u)
        if sum(len(x.feats) for x in cur) >= min_frames:
            out.append(Utterance(f"concat{min_frames}_{len(out):04d}",
                                 np.concatenate([x.feats for x in cur]),
                                 TSHEG.join(x.text for x in cur),
                                 [i for x in cur for i in x.ids], speaker=cur[0].speaker))
            cur = []
    return out
