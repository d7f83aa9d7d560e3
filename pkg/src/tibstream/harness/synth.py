"""Seeded synthetic speech-like corpus with variable speaking rate.

Each symbol owns a random template vector. An utterance is a sentence drawn
from a sparse bigram grammar; every symbol is rendered as its template
repeated ``round(duration * rate)`` frames (at least one) plus Gaussian
noise, where ``duration`` is drawn per symbol and ``rate`` per utterance.
An optional recording-channel offset is shared by all frames of an
utterance; with ``speakers`` set it belongs to a speaker instead, and test
speakers are disjoint from training speakers.
Symbols are named by Tibetan syllables so transcripts run through the
regular syllable vocabulary.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..tibetan import TSHEG, Granularity, Vocabulary, build_vocab, encode_text

FEATURE_MAGIC = b"CSFEAT01"

_CONSONANTS = "ཀཁགངཅཆཇཉཏཐདནཔཕབམཙཚཛཝཞཟའཡརལཤསཧཨ"
_VOWELS = ("", "ི", "ུ", "ེ", "ོ")


class DataError(ValueError):
    pass


@dataclass
class SynthConfig:
    symbols: int = 30
    feature_dim: int = 20
    duration: tuple[int, int] = (4, 12)
    rate: tuple[float, float] = (0.6, 1.6)
    noise: float = 0.1
    channel: float = 0.0
    speakers: int = 0
    test_speakers: int = 1
    sentence_len: tuple[int, int] = (4, 10)
    successors: int = 4
    grammar_seed: int = 1234
    n_train: int = 500
    n_test: int = 100
    n_lm: int = 2000
    seed: int = 0

    def __post_init__(self):
        for name in ("duration", "rate", "sentence_len"):
            lo, hi = getattr(self, name)
            if lo > hi or lo <= 0:
                raise ValueError(f"{name} range {lo, hi} is empty or non-positive")
        if self.noise < 0 or self.channel < 0:
            raise ValueError("noise and channel scales must be non-negative")
        if self.speakers < 0 or self.test_speakers < 1:
            raise ValueError("speakers must be >= 0 and test_speakers >= 1")
        if self.symbols > len(_CONSONANTS) * len(_VOWELS):
            raise ValueError("too many symbols")


def symbol_names(k: int) -> list[str]:
    return [c + v for v in _VOWELS for c in _CONSONANTS][:k]


@dataclass
class Utterance:
    uid: str
    feats: np.ndarray
    text: str
    ids: list[int]
    rate: float = 1.0
    speaker: str = ""


@dataclass
class Grammar:
    start: np.ndarray
    trans: np.ndarray

    def sample(self, rng: np.random.Generator, length: int) -> list[int]:
        k = len(self.start)
        seq = [int(rng.choice(k, p=self.start))]
        while len(seq) < length:
            seq.append(int(rng.choice(k, p=self.trans[seq[-1]])))
        return seq


def make_grammar(k: int, successors: int, seed: int) -> Grammar:
    rng = np.random.default_rng(seed)
    trans = np.zeros((k, k))
    for a in range(k):
        nxt = rng.choice(k, size=min(successors, k), replace=False)
        trans[a, nxt] = rng.dirichlet(np.ones(len(nxt)))
    return Grammar(np.full(k, 1.0 / k), trans)


def render(symbols: list[int], templates: np.ndarray, durations: list[int], rate: float,
           noise: float, rng: np.random.Generator, channel: float = 0.0,
           offset: np.ndarray | None = None) -> np.ndarray:
    """Features of one utterance; ``offset`` replaces the per-utterance channel draw."""
    frames = [np.repeat(templates[s][None], max(1, int(round(d * rate))), axis=0)
              for s, d in zip(symbols, durations)]
    x = np.concatenate(frames, axis=0)
    if offset is not None:
        x = x + offset
    elif channel > 0:
        x = x + rng.normal(0.0, channel, templates.shape[1])
    if noise > 0:
        x = x + rng.normal(0.0, noise, x.shape)
    return x.astype(np.float32).astype(np.float64)


@dataclass
class SyntheticCorpus:
    config: SynthConfig
    vocab: Vocabulary
    grammar: Grammar
    templates: np.ndarray
    train: list[Utterance] = field(default_factory=list)
    test: list[Utterance] = field(default_factory=list)
    lm_text: list[list[int]] = field(default_factory=list)


def gen_synthetic(cfg: SynthConfig) -> SyntheticCorpus:
    names = symbol_names(cfg.symbols)
    vocab = build_vocab(names, Granularity.SYLLABLE)
    grammar = make_grammar(cfg.symbols, cfg.successors, cfg.grammar_seed)
    rng = np.random.default_rng(cfg.seed)
    templates = rng.normal(0.0, 1.0, (cfg.symbols, cfg.feature_dim))
    to_id = [vocab.id_of(n) for n in names]
    n_spk = cfg.speakers + cfg.test_speakers if cfg.speakers else 0
    spk_offsets = np.random.default_rng([cfg.seed, 1]).normal(0.0, cfg.channel, (n_spk, cfg.feature_dim))

    def speaker_of(prefix: str, i: int, n: int) -> int | None:
        if not n_spk:
            return None
        if prefix == "train":
            return i % cfg.speakers
        return cfg.speakers + i * cfg.test_speakers // n

    def utterances(prefix: str, n: int) -> list[Utterance]:
        out = []
        for i in range(n):
            length = int(rng.integers(cfg.sentence_len[0], cfg.sentence_len[1] + 1))
            syms = grammar.sample(rng, length)
            durs = rng.integers(cfg.duration[0], cfg.duration[1] + 1, size=length).tolist()
            rate = float(rng.uniform(*cfg.rate))
            spk = speaker_of(prefix, i, n)
            feats = render(syms, templates, durs, rate, cfg.noise, rng, cfg.channel,
                           None if spk is None else spk_offsets[spk])
            text = TSHEG.join(names[s] for s in syms)
            out.append(Utterance(f"{prefix}{i:05d}", feats, text, [to_id[s] for s in syms], rate,
                                 "" if spk is None else f"spk{spk:03d}"))
        return out

    corpus = SyntheticCorpus(cfg, vocab, grammar, templates)
    corpus.train = utterances("train", cfg.n_train)
    corpus.test = utterances("test", cfg.n_test)
    lm_rng = np.random.default_rng(cfg.grammar_seed + 1)
    corpus.lm_text = [[to_id[s] for s in grammar.sample(
        lm_rng, int(lm_rng.integers(cfg.sentence_len[0], cfg.sentence_len[1] + 1)))]
        for _ in range(cfg.n_lm)]
    assert all(encode_text(u.text, vocab) == u.ids for u in corpus.train[:5])
    return corpus


# ------------------------------------------------------------------ files

def write_features(path, feats: np.ndarray) -> None:
    arr = np.ascontiguousarray(feats, dtype="<f4")
    Path(path).write_bytes(FEATURE_MAGIC + struct.pack("<II", *arr.shape) + arr.tobytes())


def read_features(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 16 or buf[:8] != FEATURE_MAGIC:
        raise DataError(f"{path}: not a feature file")
    T, D = struct.unpack_from("<II", buf, 8)
    if len(buf) != 16 + 4 * T * D:
        raise DataError(f"{path}: expected {T}x{D} floats")
    return np.frombuffer(buf, dtype="<f4", offset=16).reshape(T, D).astype(np.float64)


def write_split(utts: list[Utterance], outdir, name: str) -> Path:
    outdir = Path(outdir)
    featdir = outdir / "feats"
    featdir.mkdir(parents=True, exist_ok=True)
    manifest = outdir / f"{name}.jsonl"
    with manifest.open("w", encoding="utf-8") as fh:
        for u in utts:
            fp = featdir / f"{u.uid}.f32"
            write_features(fp, u.feats)
            fh.write(json.dumps({"id": u.uid, "feature_path": str(fp.relative_to(outdir)),
                                 "T": int(len(u.feats)), "transcript": u.text,
                                 "rate": u.rate, "speaker": u.speaker}, ensure_ascii=False) + "\n")
    return manifest


def write_corpus(corpus: SyntheticCorpus, outdir) -> dict[str, Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {"train": write_split(corpus.train, outdir, "train"),
             "test": write_split(corpus.test, outdir, "test")}
    corpus.vocab.save(outdir / "vocab.tsv")
    (outdir / "lm_text.txt").write_text(
        "".join(TSHEG.join(corpus.vocab.unit_of(i) for i in s) + "\n" for s in corpus.lm_text),
        encoding="utf-8")
    cfg = asdict(corpus.config)
    (outdir / "synth_config.json").write_text(json.dumps(cfg, indent=1))
    paths["vocab"] = outdir / "vocab.tsv"
    return paths


def load_manifest(path, vocab: Vocabulary) -> list[Utterance]:
    path = Path(path)
    out = []
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            feats = read_features(path.parent / row["feature_path"])
        except (KeyError, json.JSONDecodeError, OSError) as exc:
            raise DataError(f"{path}:{n + 1}: {exc}") from exc
        if len(feats) != row["T"]:
            raise DataError(f"{path}:{n + 1}: T={row['T']} but file holds {len(feats)} frames")
        out.append(Utterance(row["id"], feats, row["transcript"],
                             encode_text(row["transcript"], vocab), row.get("rate", 1.0),
                             row.get("speaker", "")))
    return out
