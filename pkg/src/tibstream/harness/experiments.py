"""Experiment grids: trains the needed models once and emits result tables."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..chunking import Bounds
from ..decode import DecodeConfig, Mode, PlanSpec
from ..lm import NGramLM, train_ngram
from ..model import ASRModel, EncoderConfig, Stage, TrainConfig
from .evaluate import concatenate, evaluate
from .synth import SynthConfig, SyntheticCorpus, gen_synthetic
from .train import run_stage

STATIC_WIDTHS = (8, 14, 16, 20)
CARRY_SWEEP = (2, 4, 6, 8)
LAMBDA_SWEEP = (0.1, 0.3, 0.5, 0.7)
BEAM_SWEEP = (5, 10, 15, 20)
LONGFORM_FRAMES = (1000, 1500, 2000)
LATENCY_GRID = ((8, 8), (16, 16), (16, 12), (32, 32), (32, 24))


@dataclass
class ExperimentConfig:
    synth: SynthConfig = field(default_factory=lambda: SynthConfig(noise=0.7, channel=1.5, speakers=100,
                                                                   test_speakers=2))
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    bounds: Bounds = field(default_factory=Bounds)
    global_epochs: int = 30
    static_epochs: int = 5
    dynamic_epochs: int = 5
    static_width: int = 16
    carry_over: int = 8
    ctc_weight: float = 0.5
    latency_weight: float = 0.0
    lm_order: int = 3
    lm_weight: float = 0.3
    decode_mode: Mode = Mode.ATT_RESCORE
    beam: int = 10
    seed: int = 0


@dataclass
class Table:
    name: str
    columns: list[str]
    rows: list[list]

    def to_json(self) -> str:
        return json.dumps({"name": self.name, "columns": self.columns,
                           "rows": [dict(zip(self.columns, r)) for r in self.rows]},
                          ensure_ascii=False, indent=1)

    def to_text(self) -> str:
        cells = [self.columns] + [[_fmt(v) for v in r] for r in self.rows]
        widths = [max(len(row[i]) for row in cells) for i in range(len(self.columns))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join([self.name] + lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.3f}"
    return "-" if v is None else str(v)


class Pipeline:
    """Lazily trains and caches the models an experiment grid needs.

    Keys describe the training path, e.g. ``("static", 16, 8, 0.5)`` is the
    static stage with width 16 and carry 8 fine-tuned from the global model
    trained with ctc weight 0.5.
    """

    def __init__(self, cfg: ExperimentConfig, corpus: SyntheticCorpus | None = None,
                 log: Callable[[str], None] | None = None):
        self.cfg = cfg
        self.corpus = corpus or gen_synthetic(cfg.synth)
        self.models: dict[tuple, ASRModel] = {}
        self.lms: dict[str, NGramLM] = {}
        self.log = log or (lambda msg: None)

    def _train(self, key, base: ASRModel | None, tc: TrainConfig) -> ASRModel:
        if key not in self.models:
            if base is None:
                model = ASRModel(len(self.corpus.vocab), self.cfg.encoder, bounds=self.cfg.bounds,
                                 seed=self.cfg.seed)
            else:
                model = base.copy()
            logs = run_stage(model, self.corpus.train, tc)
            self.log(f"trained {key}: final loss {logs[-1]['loss']:.3f}")
            self.models[key] = model
        return self.models[key]

    def _tc(self, stage: Stage, epochs: int, **kw) -> TrainConfig:
        base = dict(stage=stage, epochs=epochs, ctc_weight=self.cfg.ctc_weight,
                    carry_over=self.cfg.carry_over, bounds=self.cfg.bounds, seed=self.cfg.seed)
        base.update(kw)
        return TrainConfig(**base)

    def global_model(self, lam: float | None = None) -> ASRModel:
        lam = self.cfg.ctc_weight if lam is None else lam
        return self._train(("global", lam), None,
                           self._tc(Stage.GLOBAL, self.cfg.global_epochs, ctc_weight=lam))

    def reference_model(self, lam: float | None = None) -> ASRModel:
        """Full-attention model trained from scratch for the dynamic model's total epochs.

        The global stage alone gets fewer epochs than global + static +
        dynamic, so comparing it with chunked models would be confounded by
        the extra training.
        """
        lam = self.cfg.ctc_weight if lam is None else lam
        total = self.cfg.global_epochs + self.cfg.static_epochs + self.cfg.dynamic_epochs
        return self._train(("reference", lam), None, self._tc(Stage.GLOBAL, total, ctc_weight=lam))

    def static_model(self, width: int, carry: int | None = None, lam: float | None = None) -> ASRModel:
        carry = self.cfg.carry_over if carry is None else carry
        lam = self.cfg.ctc_weight if lam is None else lam
        return self._train(("static", width, carry, lam), self.global_model(lam),
                           self._tc(Stage.STATIC, self.cfg.static_epochs, static_width=width,
                                    static_stride=width, carry_over=carry, ctc_weight=lam))

    def dynamic_model(self, latency_weight: float | None = None, carry: int | None = None,
                      lam: float | None = None) -> ASRModel:
        a = self.cfg.latency_weight if latency_weight is None else latency_weight
        carry = self.cfg.carry_over if carry is None else carry
        lam = self.cfg.ctc_weight if lam is None else lam
        base = self.static_model(self.cfg.static_width, carry, lam)
        return self._train(("dynamic", a, carry, lam), base,
                           self._tc(Stage.DYNAMIC, self.cfg.dynamic_epochs, latency_weight=a,
                                    carry_over=carry, ctc_weight=lam))

    def lm(self, part: str = "full") -> NGramLM:
        if part not in self.lms:
            text = self.corpus.lm_text
            if part == "part":
                text = text[: max(1, len(text) // 10)]
            self.lms[part] = train_ngram(text, self.cfg.lm_order, len(self.corpus.vocab),
                                         self.corpus.vocab.units)
        return self.lms[part]

    def decode_cfg(self, **kw) -> DecodeConfig:
        base = dict(mode=self.cfg.decode_mode, beam=self.cfg.beam)
        base.update(kw)
        return DecodeConfig(**base)

    def spec(self, kind: str, width: int | None = None, stride: int | None = None,
             carry: int | None = None) -> PlanSpec:
        width = width or self.cfg.static_width
        return PlanSpec(kind, width, stride or width,
                        self.cfg.carry_over if carry is None else carry)


# ------------------------------------------------------------ grids

def exp_chunk(p: Pipeline) -> Table:
    rows = []
    setups = [("global", p.reference_model(), p.spec("global"))]
    setups += [(f"static W={w}", p.static_model(w), p.spec("static", w)) for w in STATIC_WIDTHS]
    setups.append(("dynamic", p.dynamic_model(), p.spec("dynamic")))
    for name, model, spec in setups:
        row = [name]
        for mode in Mode:
            ev = evaluate(model, p.corpus.test, spec, p.decode_cfg(mode=mode))
            row.append(ev.metrics.wer_percent)
        row.append(ev.metrics.apl_seconds)
        rows.append(row)
    return Table("WER (%) by chunking and decode mode", ["chunking"] + [m.value for m in Mode]
                 + ["apl_s"], rows)


def exp_carry(p: Pipeline) -> Table:
    rows = []
    for carry in CARRY_SWEEP:
        st = evaluate(p.static_model(p.cfg.static_width, carry), p.corpus.test,
                      p.spec("static", carry=carry), p.decode_cfg())
        dy = evaluate(p.dynamic_model(carry=carry), p.corpus.test, p.spec("dynamic", carry=carry),
                      p.decode_cfg())
        rows.append([carry, st.metrics.wer_percent, dy.metrics.wer_percent])
    return Table("WER (%) by carry-over frames", ["carry_over", "static", "dynamic"], rows)


def exp_lambda(p: Pipeline) -> Table:
    rows = []
    for lam in LAMBDA_SWEEP:
        ev = evaluate(p.dynamic_model(lam=lam), p.corpus.test, p.spec("dynamic"), p.decode_cfg())
        rows.append([lam, ev.metrics.wer_percent])
    return Table("WER (%) by CTC weight", ["ctc_weight", "dynamic"], rows)


def exp_latency(p: Pipeline) -> Table:
    rows = []
    model = p.static_model(p.cfg.static_width)
    for w, s in LATENCY_GRID:
        ev = evaluate(model, p.corpus.test, p.spec("static", w, s), p.decode_cfg())
        rows.append([f"{w}/{s}", ev.metrics.wer_percent, ev.metrics.apl_seconds])
    ev = evaluate(p.dynamic_model(), p.corpus.test, p.spec("dynamic"), p.decode_cfg())
    rows.append(["dynamic", ev.metrics.wer_percent, ev.metrics.apl_seconds])
    return Table("WER and APL by chunk width/stride", ["width/stride", "wer", "apl_s"], rows)


def exp_longform(p: Pipeline) -> Table:
    model = p.dynamic_model()
    cfg = p.decode_cfg(mode=Mode.CTC_PREFIX_BEAM)
    base = evaluate(model, p.corpus.test, p.spec("dynamic"), cfg)
    rows = [["original", float(np.mean([len(u.feats) for u in p.corpus.test])),
             len(p.corpus.test), base.metrics.wer_percent]]
    for frames in LONGFORM_FRAMES:
        long = concatenate(p.corpus.test, frames)
        ev = evaluate(model, long, p.spec("dynamic"), cfg)
        rows.append([str(frames), float(np.mean([len(u.feats) for u in long])), len(long),
                     ev.metrics.wer_percent])
    return Table("Long-form WER (%) on concatenated test utterances",
                 ["target_frames", "mean_frames", "utterances", "wer"], rows)


def exp_beam(p: Pipeline) -> Table:
    model = p.dynamic_model()
    rows = []
    for beam in BEAM_SWEEP:
        row = [beam]
        for norm in (False, True):
            ev = evaluate(model, p.corpus.test, p.spec("dynamic"),
                          p.decode_cfg(mode=Mode.ATT, beam=beam, global_norm=norm))
            row.append(ev.metrics.wer_percent)
        rows.append(row)
    return Table("Attention decoding WER (%) by beam", ["beam", "no_norm", "global_norm"], rows)


def exp_lm(p: Pipeline) -> Table:
    rows = []
    for name, model, spec in (("global", p.reference_model(), p.spec("global")),
                              ("dynamic", p.dynamic_model(), p.spec("dynamic"))):
        row = [name, evaluate(model, p.corpus.test, spec, p.decode_cfg()).metrics.wer_percent]
        for part in ("part", "full"):
            ev = evaluate(model, p.corpus.test, spec, p.decode_cfg(lm_weight=p.cfg.lm_weight),
                          p.lm(part))
            row.append(ev.metrics.wer_percent)
        rows.append(row)
    return Table("WER (%) with n-gram shallow fusion", ["model", "no_lm", "part_lm", "full_lm"], rows)


EXPERIMENTS: dict[str, Callable[[Pipeline], Table]] = {
    "chunk": exp_chunk, "carry": exp_carry, "lambda": exp_lambda, "latency": exp_latency,
    "longform": exp_longform, "beam": exp_beam, "lm": exp_lm,
}


def run_experiment(name: str, cfg: ExperimentConfig | None = None,
                   pipeline: Pipeline | None = None) -> Table:
    if name not in EXPERIMENTS:
        raise KeyError(f"unknown experiment {name!r}; choose from {sorted(EXPERIMENTS)}")
    pipeline = pipeline or Pipeline(cfg or ExperimentConfig())
    return EXPERIMENTS[name](pipeline)


def acceptance_config(seed: int = 0) -> ExperimentConfig:
    """The configuration behind the end-to-end trend checks: one seed drives data and weights."""
    return ExperimentConfig(synth=SynthConfig(noise=0.7, channel=1.5, speakers=100, test_speakers=2,
                                              seed=seed), seed=seed)


def tiny_config(seed: int = 0) -> ExperimentConfig:
    """A seconds-scale configuration for smoke runs."""
    return ExperimentConfig(
        synth=SynthConfig(n_train=12, n_test=4, n_lm=50, sentence_len=(2, 4), seed=seed),
        encoder=EncoderConfig(layers=1, d=16, heads=2, ffn=32),
        global_epochs=1, static_epochs=1, dynamic_epochs=1, seed=seed)


__all__ = ["ExperimentConfig", "Pipeline", "Table", "run_experiment", "EXPERIMENTS", "acceptance_config",
           "tiny_config"]
