"""Command-line entry point: ``tibstream <command> ...``.

Every command accepts ``--config FILE``; keys in the section named after
the command (``[train]``, ``[decode]``, ...) supply defaults and explicit
flags override them. Exit codes: 0 success, 2 config error, 3 data error,
4 numeric error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..decode import DecodeConfig, Mode, PlanSpec, run_decode
from ..lm import NGramLM, train_ngram
from ..model import ASRModel, EncoderConfig, Stage, TrainConfig
from ..numerics import CheckpointError, NumericError
from ..tibetan import Granularity, Vocabulary, build_vocab, decode_ids, dump_lexicon, \
    encode_text, segment_syllables
from .config import ConfigError, load_config, merged
from .evaluate import evaluate
from .experiments import EXPERIMENTS, ExperimentConfig, Pipeline, tiny_config
from .metrics import Metrics, compute_wer
from .synth import DataError, SynthConfig, gen_synthetic, load_manifest, write_corpus
from .train import TrainingError, load_model, run_stage

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

DEFAULTS = {
    "synth": {"out": None, "seed": 0, "noise": 0.1, "channel": 0.0, "speakers": 0,
              "test_speakers": 1, "symbols": 30, "feature_dim": 20, "n_train": 500, "n_test": 100,
              "n_lm": 2000, "grammar_seed": 1234},
    "train": {"data": None, "stage": "global", "checkpoint_in": None, "checkpoint_out": None,
              "log": None, "epochs": 10, "batch_size": 25, "lr": 0.002, "ctc_weight": 0.5,
              "latency_weight": 0.0, "width": 16, "stride": 16, "carry_over": 8, "seed": 0,
              "layers": 2, "d": 64, "heads": 4, "ffn": 128, "subsample": 2},
    "decode": {"data": None, "split": "test", "checkpoint": None, "mode": "att-rescore",
               "plan": "dynamic", "width": 16, "stride": 16, "carry_over": 8, "beam": 10,
               "global_norm": True, "rescore_weight": 0.5, "lm": None, "lm_weight": 0.3,
               "bonus": 0.0, "out": None},
    "lm": {"data": None, "order": 3, "out": None},
}


def _load_section(args, name: str) -> dict:
    if getattr(args, "config", None):
        return load_config(args.config).get(name, {})
    return {}


def _opts(args, name: str) -> dict:
    flags = {k: getattr(args, k, None) for k in DEFAULTS[name]}
    return merged(_load_section(args, name), flags, DEFAULTS[name])


def _require(opts: dict, *keys):
    for k in keys:
        if opts.get(k) in (None, ""):
            raise ConfigError(f"missing required option --{k.replace('_', '-')}")


def _vocab(data_dir) -> Vocabulary:
    p = Path(data_dir) / "vocab.tsv"
    if not p.exists():
        raise DataError(f"{p} does not exist")
    return Vocabulary.load(p)


# ---------------------------------------------------------------- commands

def cmd_lexicon(args) -> int:
    text = Path(args.corpus).read_text(encoding="utf-8") if Path(args.corpus).exists() else None
    if text is None:
        raise DataError(f"corpus {args.corpus} does not exist")
    if args.action == "build":
        vocab = build_vocab(text.splitlines(), Granularity(args.granularity))
        vocab.save(args.out)
        print(f"{len(vocab)} units -> {args.out}")
    else:
        n = dump_lexicon(segment_syllables(text), args.out)
        print(f"{n} syllables -> {args.out}")
    return 0


def cmd_synth(args) -> int:
    o = _opts(args, "synth")
    _require(o, "out")
    out = o.pop("out")
    corpus = gen_synthetic(SynthConfig(**o))
    paths = write_corpus(corpus, out)
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return 0


def cmd_train(args) -> int:
    o = _opts(args, "train")
    _require(o, "data", "checkpoint_out")
    vocab = _vocab(o["data"])
    data = load_manifest(Path(o["data"]) / "train.jsonl", vocab)
    stage = Stage(o["stage"])
    model = None
    if stage is Stage.GLOBAL and not o["checkpoint_in"]:
        enc = EncoderConfig(input_dim=data[0].feats.shape[1], layers=o["layers"], d=o["d"],
                            heads=o["heads"], ffn=o["ffn"], subsample=o["subsample"])
        model = ASRModel(len(vocab), enc, seed=o["seed"])
    elif not o["checkpoint_in"]:
        raise TrainingError(f"{stage.value} stage needs --checkpoint-in from the previous stage")
    cfg = TrainConfig(stage=stage, ctc_weight=o["ctc_weight"], latency_weight=o["latency_weight"],
                      static_width=o["width"], static_stride=o["stride"], carry_over=o["carry_over"],
                      epochs=o["epochs"], batch_size=o["batch_size"], lr=o["lr"], seed=o["seed"])
    logs = run_stage(model, data, cfg, o["checkpoint_in"], o["checkpoint_out"], o["log"],
                     on_step=lambda r: print(json.dumps(r), file=sys.stderr) if args.verbose else None)
    print(json.dumps({"steps": len(logs), "final_loss": logs[-1]["loss"],
                      "checkpoint": o["checkpoint_out"]}))
    return 0


def cmd_decode(args) -> int:
    o = _opts(args, "decode")
    _require(o, "data", "checkpoint")
    vocab = _vocab(o["data"])
    utts = load_manifest(Path(o["data"]) / f"{o['split']}.jsonl", vocab)
    model = load_model(o["checkpoint"])
    lm = NGramLM.load_arpa(o["lm"], vocab.units) if o["lm"] else None
    cfg = DecodeConfig(mode=Mode(o["mode"]), beam=o["beam"], global_norm=o["global_norm"],
                       rescore_weight=o["rescore_weight"], lm_weight=o["lm_weight"] if lm else 0.0,
                       bonus=o["bonus"])
    spec = PlanSpec(o["plan"], o["width"], o["stride"], o["carry_over"])
    lines = []
    for u in sorted(utts, key=lambda u: u.uid):
        res = run_decode(u.feats, model, spec, cfg, lm)
        wer = compute_wer(u.ids, list(res.ids)).wer_percent
        lines.append(res.to_json(u.uid, decode_ids(res.ids, vocab), wer))
    text = "\n".join(lines) + "\n"
    if o["out"]:
        Path(o["out"]).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_lm(args) -> int:
    o = _opts(args, "lm")
    _require(o, "data", "out")
    vocab = _vocab(o["data"])
    p = Path(o["data"]) / "lm_text.txt"
    if not p.exists():
        raise DataError(f"{p} does not exist")
    sents = [encode_text(line, vocab) for line in p.read_text(encoding="utf-8").splitlines() if line]
    lm = train_ngram(sents, o["order"], len(vocab), vocab.units)
    lm.save_arpa(o["out"])
    print(f"order-{o['order']} model over {len(sents)} sentences -> {o['out']}")
    return 0


def _read_jsonl(path) -> list[dict]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{p} does not exist")
    return [json.loads(line) for line in p.read_text(encoding="utf-8").splitlines() if line.strip()]


def cmd_eval(args) -> int:
    hyps = {r["id"]: r for r in _read_jsonl(args.hyp)}
    if args.what == "latency":
        apl = [r["apl_seconds"] for r in hyps.values() if r.get("apl_seconds") is not None]
        print(json.dumps({"utterances": len(hyps), "apl_seconds": float(np.mean(apl)) if apl else None}))
        return 0
    if not args.ref or not args.vocab:
        raise ConfigError("eval wer needs --ref and --vocab")
    vocab = Vocabulary.load(args.vocab)
    total = Metrics()
    for r in _read_jsonl(args.ref):
        if r["id"] not in hyps:
            raise DataError(f"no hypothesis for utterance {r['id']}")
        total = total + compute_wer(encode_text(r["transcript"], vocab),
                                    encode_text(hyps[r["id"]]["text"], vocab))
    print(json.dumps(total.as_dict()))
    return 0


def cmd_experiment(args) -> int:
    cfg = tiny_config(args.seed) if args.tiny else ExperimentConfig(seed=args.seed)
    if not args.tiny:
        cfg.synth.seed = args.seed
    if args.config:
        sec = load_config(args.config).get("experiment", {})
        flat = {k: v for k, v in asdict(cfg).items() if not isinstance(v, dict)}
        flat.pop("decode_mode")
        for k, v in merged(sec, {}, flat).items():
            setattr(cfg, k, v)
    table = EXPERIMENTS[args.name](Pipeline(cfg, log=lambda m: print(m, file=sys.stderr)))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{args.name}.json").write_text(table.to_json(), encoding="utf-8")
        (out / f"{args.name}.txt").write_text(table.to_text(), encoding="utf-8")
    print(table.to_text())
    return 0


# ------------------------------------------------------------------ parser

def _bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _add_flags(p: argparse.ArgumentParser, name: str) -> None:
    p.add_argument("--config")
    for key, default in DEFAULTS[name].items():
        flag = "--" + key.replace("_", "-")
        if isinstance(default, bool):
            p.add_argument(flag, dest=key, type=_bool, default=None)
        elif key == "stage":
            p.add_argument(flag, dest=key, choices=[s.value for s in Stage], default=None)
        elif key == "mode":
            p.add_argument(flag, dest=key, choices=[m.value for m in Mode], default=None)
        elif key == "plan":
            p.add_argument(flag, dest=key, choices=["global", "static", "dynamic"], default=None)
        else:
            typ = type(default) if default is not None else str
            p.add_argument(flag, dest=key, type=typ, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tibstream")
    sub = ap.add_subparsers(dest="command", required=True)

    lex = sub.add_parser("lexicon", help="Tibetan vocabularies and lexicons")
    lex.add_argument("action", choices=["build", "dump"])
    lex.add_argument("--corpus", required=True)
    lex.add_argument("--granularity", choices=[g.value for g in Granularity], default="syllable")
    lex.add_argument("--out", required=True)
    lex.set_defaults(fn=cmd_lexicon)

    syn = sub.add_parser("synth", help="synthetic corpus generation")
    syn.add_argument("action", choices=["gen"])
    _add_flags(syn, "synth")
    syn.set_defaults(fn=cmd_synth)

    tr = sub.add_parser("train", help="run one training stage")
    _add_flags(tr, "train")
    tr.add_argument("--verbose", action="store_true")
    tr.set_defaults(fn=cmd_train)

    de = sub.add_parser("decode", help="decode a manifest split")
    _add_flags(de, "decode")
    de.set_defaults(fn=cmd_decode)

    lm = sub.add_parser("lm", help="n-gram language model")
    lm.add_argument("action", choices=["train"])
    _add_flags(lm, "lm")
    lm.set_defaults(fn=cmd_lm)

    ev = sub.add_parser("eval", help="score decode output")
    ev.add_argument("what", choices=["wer", "latency"])
    ev.add_argument("--hyp", required=True, help="decode JSON-lines output")
    ev.add_argument("--ref", help="reference manifest")
    ev.add_argument("--vocab")
    ev.set_defaults(fn=cmd_eval)

    ex = sub.add_parser("experiment", help="run an experiment grid")
    ex.add_argument("action", choices=["run"])
    ex.add_argument("name", choices=sorted(EXPERIMENTS))
    ex.add_argument("--config")
    ex.add_argument("--seed", type=int, default=0)
    ex.add_argument("--tiny", action="store_true", help="seconds-scale smoke configuration")
    ex.add_argument("--out")
    ex.set_defaults(fn=cmd_experiment)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, TrainingError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
