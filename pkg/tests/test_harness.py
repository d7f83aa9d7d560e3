import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tibstream.chunking import static_plan
from tibstream.decode import DecodeConfig, Mode, PlanSpec
from tibstream.harness import cli
from tibstream.harness.config import ConfigError, coerce, load_config, merged
from tibstream.harness.evaluate import concatenate, evaluate
from tibstream.harness.experiments import CARRY_SWEEP, LAMBDA_SWEEP, Pipeline, Table, \
    run_experiment, tiny_config
from tibstream.harness.metrics import align, compute_wer, corpus_wer
from tibstream.harness.synth import FEATURE_MAGIC, DataError, SynthConfig, Utterance, \
    gen_synthetic, load_manifest, read_features, render, symbol_names, write_corpus, write_features
from tibstream.harness.train import TrainingError, batch_objective, epoch_means, load_model, \
    run_stage, save_model
from tibstream.model import ASRModel, EncoderConfig, Stage, TrainConfig
from tibstream.tibetan import Vocabulary

from oracles import edit_distance, tiny_model


# ------------------------------------------------------------------ WER

def test_wer_identical_is_zero():
    m = compute_wer([4, 5, 6], [4, 5, 6])
    assert m.wer_percent == 0.0 and m.errors == 0


def test_wer_one_substitution_in_four():
    m = compute_wer([4, 5, 6, 7], [4, 9, 6, 7])
    assert m.wer_percent == 25.0
    assert (m.substitutions, m.insertions, m.deletions) == (1, 0, 0)


def test_wer_empty_reference_counts_insertions():
    m = compute_wer([], [4, 5])
    assert m.insertions == 2 and m.wer_percent == 200.0


def test_backtrace_prefers_substitution_then_deletion():
    assert [o[0] for o in align([1, 2], [3])] == ["del", "sub"]
    assert [o[0] for o in align([1], [2, 3])] == ["ins", "sub"]
    m = compute_wer([1, 2], [3])
    assert (m.substitutions, m.deletions) == (1, 1)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(0, 3), max_size=6), st.lists(st.integers(0, 3), max_size=6))
def test_wer_matches_edit_distance_oracle(ref, hyp):
    m = compute_wer(ref, hyp)
    assert m.errors == edit_distance(tuple(ref), tuple(hyp))
    ops = align(ref, hyp)
    assert [o[1] for o in ops if o[1] is not None] == list(range(len(ref)))
    assert [o[2] for o in ops if o[2] is not None] == list(range(len(hyp)))


def test_corpus_wer_pools_counts():
    m = corpus_wer([([1, 2, 3, 4], [1, 2, 3, 4]), ([1, 2], [1])])
    assert m.ref_len == 6 and m.deletions == 1 and m.utterances == 2
    assert m.wer_percent == pytest.approx(100 / 6)


# ------------------------------------------------------------------ synthetic data

def test_noiseless_single_symbol_renders_template(rng):
    templates = rng.normal(size=(3, 5))
    x = render([1], templates, [4], 1.0, 0.0, rng)
    assert x.shape == (4, 5)
    np.testing.assert_array_equal(x, np.repeat(templates[1:2].astype(np.float32), 4, axis=0))


def test_rate_ratio_is_within_one_frame_per_symbol(rng):
    templates = rng.normal(size=(3, 2))
    for durs in ([4, 5, 6], [7, 8, 9, 10], [11, 12], list(range(4, 13))):
        syms = [i % 3 for i in range(len(durs))]
        fast = len(render(syms, templates, durs, 1.6, 0.0, rng))
        slow = len(render(syms, templates, durs, 0.6, 0.0, rng))
        assert abs(fast - slow * 1.6 / 0.6) <= len(durs)


def _files(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}


def test_same_seed_gives_byte_identical_dataset(tmp_path):
    cfg = SynthConfig(n_train=6, n_test=3, n_lm=10, seed=5, noise=0.3, channel=0.5)
    write_corpus(gen_synthetic(cfg), tmp_path / "a")
    write_corpus(gen_synthetic(cfg), tmp_path / "b")
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert a == b and len(a) > 9
    write_corpus(gen_synthetic(SynthConfig(n_train=6, n_test=3, n_lm=10, seed=6)), tmp_path / "c")
    assert _files(tmp_path / "c") != a


def test_manifest_is_self_contained(tmp_path):
    corpus = gen_synthetic(SynthConfig(n_train=5, n_test=2, n_lm=5, seed=1))
    paths = write_corpus(corpus, tmp_path / "data")
    vocab = Vocabulary.load(tmp_path / "data" / "vocab.tsv")
    for split, utts in (("train", corpus.train), ("test", corpus.test)):
        rows = [json.loads(line) for line in Path(paths[split]).read_text(encoding="utf-8").splitlines()]
        assert {"id", "feature_path", "T", "transcript"} <= set(rows[0])
        for row in rows:
            feats = read_features(Path(paths[split]).parent / row["feature_path"])
            assert feats.shape == (row["T"], corpus.config.feature_dim)
        loaded = load_manifest(paths[split], vocab)
        for u, v in zip(utts, loaded):
            assert u.uid == v.uid and u.ids == v.ids and u.text == v.text and u.speaker == v.speaker
            np.testing.assert_array_equal(u.feats, v.feats)


def test_feature_file_layout(tmp_path):
    x = np.arange(6, dtype=np.float64).reshape(3, 2) / 4
    write_features(tmp_path / "f.f32", x)
    raw = (tmp_path / "f.f32").read_bytes()
    assert len(raw) == 16 + 6 * 4
    assert raw[:8] == FEATURE_MAGIC
    assert np.frombuffer(raw[8:16], "<u4").tolist() == [3, 2]
    np.testing.assert_array_equal(np.frombuffer(raw[16:], "<f4").reshape(3, 2), x)
    np.testing.assert_array_equal(read_features(tmp_path / "f.f32"), x)


def test_corrupt_feature_file_raises(tmp_path):
    (tmp_path / "bad.f32").write_bytes(b"NOTMAGIC" + bytes(8))
    with pytest.raises(DataError):
        read_features(tmp_path / "bad.f32")


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(duration=(5, 4))
    with pytest.raises(ValueError):
        SynthConfig(noise=-1.0)
    with pytest.raises(ValueError):
        SynthConfig(speakers=4, test_speakers=0)


def test_speaker_channel_is_shared_and_test_speakers_are_held_out():
    cfg = SynthConfig(n_train=8, n_test=6, n_lm=5, noise=0.0, channel=1.0, speakers=4,
                      test_speakers=2, sentence_len=(2, 3), seed=2)
    corpus = gen_synthetic(cfg)
    train_spk = {u.speaker for u in corpus.train}
    test_spk = [u.speaker for u in corpus.test]
    assert len(train_spk) == 4 and not train_spk & set(test_spk)
    assert test_spk == sorted(test_spk) and len(set(test_spk)) == 2

    names = symbol_names(cfg.symbols)

    def offset(u):
        return u.feats[0] - corpus.templates[names.index(corpus.vocab.unit_of(u.ids[0]))]

    by_spk = {}
    for u in corpus.train + corpus.test:
        by_spk.setdefault(u.speaker, []).append(offset(u))
    for offs in by_spk.values():
        for o in offs[1:]:
            np.testing.assert_allclose(o, offs[0], atol=1e-5)
    # without speakers every utterance draws its own channel
    assert all(u.speaker == "" for u in gen_synthetic(SynthConfig(n_train=3, n_test=2, n_lm=5)).train)


def test_transcripts_follow_the_grammar():
    corpus = gen_synthetic(SynthConfig(n_train=30, n_test=1, n_lm=1, seed=2))
    symbol = {corpus.vocab.id_of(n): i for i, n in enumerate(symbol_names(corpus.config.symbols))}
    for u in corpus.train:
        for a, b in zip(u.ids, u.ids[1:]):
            assert corpus.grammar.trans[symbol[a], symbol[b]] > 0


# ------------------------------------------------------------------ training driver

def toy_data(n, seed=0, noise=0.05):
    corpus = gen_synthetic(SynthConfig(symbols=6, feature_dim=3, duration=(4, 6), rate=(0.9, 1.1),
                                       sentence_len=(2, 3), noise=noise, n_train=n, n_test=2,
                                       n_lm=5, seed=seed))
    return corpus


def toy_model(corpus, seed=0):
    return tiny_model(V=len(corpus.vocab), d=16, layers=1, seed=seed)


@pytest.mark.slow
def test_global_stage_converges_on_toy_set():
    corpus = toy_data(50)
    logs = run_stage(toy_model(corpus), corpus.train,
                     TrainConfig(epochs=200, batch_size=25, lr=0.005, max_position_offset=0))
    means = epoch_means(logs)
    assert means[-1] <= 0.1 * means[0]


def test_static_stage_with_ctc_weight_one_is_pure_ctc():
    corpus = toy_data(10)
    logs = run_stage(toy_model(corpus), corpus.train,
                     TrainConfig(stage=Stage.STATIC, ctc_weight=1.0, epochs=2, batch_size=5,
                                 static_width=4, static_stride=4, carry_over=2))
    assert all(r["loss"] == r["ctc"] for r in logs)


def test_dynamic_stage_without_latency_weight_equals_static_loss():
    corpus = toy_data(4)
    m = toy_model(corpus)
    feats = [u.feats for u in corpus.train]
    targets = [u.ids for u in corpus.train]
    dyn = TrainConfig(stage=Stage.DYNAMIC, latency_weight=0.0, carry_over=2)
    stat = TrainConfig(stage=Stage.STATIC, carry_over=2)
    plans = batch_objective(m, feats, targets, dyn)["plans"]
    a = batch_objective(m, feats, targets, dyn, plans=plans)
    b = batch_objective(m, feats, targets, stat, plans=plans)
    assert float(a["objective"].data) == float(b["objective"].data)
    assert a["apl_surrogate"] is not None and b["apl_surrogate"] is None


def test_later_stage_needs_a_prior_model(tmp_path):
    corpus = toy_data(3)
    with pytest.raises(TrainingError):
        run_stage(None, corpus.train, TrainConfig(stage=Stage.STATIC))
    with pytest.raises(TrainingError):
        run_stage(None, corpus.train, TrainConfig(stage=Stage.DYNAMIC),
                  checkpoint_in=tmp_path / "missing.ckpt")


def test_training_is_reproducible_and_logged(tmp_path):
    corpus = toy_data(6)
    cfg = TrainConfig(epochs=2, batch_size=3, seed=4)
    trained = toy_model(corpus)
    a = run_stage(trained, corpus.train, cfg, log_path=tmp_path / "log.jsonl",
                  checkpoint_out=tmp_path / "m.ckpt")
    b = run_stage(toy_model(corpus), corpus.train, cfg)
    strip = lambda logs: [{k: v for k, v in r.items() if k != "seconds"} for r in logs]  # noqa: E731
    assert strip(a) == strip(b)
    rows = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert len(rows) == 4
    assert {"stage", "step", "loss", "ctc", "attn", "apl_surrogate"} <= set(rows[0])
    reloaded = load_model(tmp_path / "m.ckpt")
    for k, v in reloaded.state_dict().items():
        np.testing.assert_array_equal(v, trained.params[k].data)


def test_checkpoint_chain_across_stages(tmp_path):
    corpus = toy_data(6)
    m = toy_model(corpus)
    run_stage(m, corpus.train, TrainConfig(epochs=1, batch_size=6), checkpoint_out=tmp_path / "g.ckpt")
    logs = run_stage(None, corpus.train, TrainConfig(stage=Stage.STATIC, epochs=1, batch_size=6,
                                                     static_width=4, static_stride=4),
                     checkpoint_in=tmp_path / "g.ckpt", checkpoint_out=tmp_path / "s.ckpt")
    assert logs[0]["stage"] == "static"
    s = load_model(tmp_path / "s.ckpt")
    assert s.enc == m.enc and s.vocab_size == m.vocab_size


def test_save_and_load_model_roundtrip(tmp_path):
    m = tiny_model(V=9, d=8)
    save_model(m, tmp_path / "x.ckpt")
    r = load_model(tmp_path / "x.ckpt")
    assert r.enc == m.enc and r.dec == m.dec and r.controller.bounds == m.controller.bounds
    for k in m.params:
        np.testing.assert_array_equal(m.params[k].data, r.params[k].data)


# ------------------------------------------------------------------ experiments

@pytest.fixture(scope="module")
def tiny_pipeline():
    return Pipeline(tiny_config(0))


def test_carry_sweep_has_four_rows(tiny_pipeline):
    t = run_experiment("carry", pipeline=tiny_pipeline)
    assert [r[0] for r in t.rows] == list(CARRY_SWEEP)
    assert t.columns == ["carry_over", "static", "dynamic"]


def test_lambda_sweep_has_four_rows(tiny_pipeline):
    t = run_experiment("lambda", pipeline=tiny_pipeline)
    assert [r[0] for r in t.rows] == list(LAMBDA_SWEEP)
    assert all(len(r) == 2 for r in t.rows)


def test_unknown_experiment_raises():
    with pytest.raises(KeyError):
        run_experiment("nonsense")


def test_table_renderings():
    t = Table("demo", ["a", "bb"], [[1, 2.5], ["x", None]])
    assert json.loads(t.to_json())["rows"] == [{"a": 1, "bb": 2.5}, {"a": "x", "bb": None}]
    lines = t.to_text().splitlines()
    assert lines[0] == "demo" and lines[1].split() == ["a", "bb"] and lines[3].split() == ["1", "2.500"]


def test_pipeline_is_deterministic():
    a = run_experiment("lambda", tiny_config(3))
    b = run_experiment("lambda", tiny_config(3))
    assert a.rows == b.rows


def test_concatenation_joins_in_id_order():
    us = [Utterance(f"u{i}", np.full((10, 2), float(i)), t, [4 + i]) for i, t in enumerate("abc")]
    out = concatenate(us[::-1], 15)
    assert len(out) == 1 and out[0].ids == [4, 5] and len(out[0].feats) == 20


def test_concatenation_respects_speakers():
    us = [Utterance(f"u{i}", np.zeros((10, 2)), "x", [4 + i], speaker=s) for i, s in enumerate("aabbb")]
    assert [u.ids for u in concatenate(us, 20)] == [[4, 5], [6, 7]]
    assert [u.ids for u in concatenate(us, 20, same_speaker=False)] == [[4, 5], [6, 7]]
    assert [u.ids for u in concatenate(us, 30, same_speaker=False)] == [[4, 5, 6]]
    assert [u.ids for u in concatenate(us, 30)] == [[6, 7, 8]]


@pytest.mark.slow
def test_concatenated_copies_decode_to_repeated_transcript():
    corpus = toy_data(1, noise=0.0)
    u = corpus.train[0]
    m = toy_model(corpus)
    run_stage(m, [u], TrainConfig(epochs=150, batch_size=1, lr=0.01))
    run_stage(m, [u], TrainConfig(stage=Stage.STATIC, epochs=150, batch_size=1, lr=0.01,
                                  static_width=4, static_stride=4, carry_over=2))
    spec = PlanSpec("static", 4, 4, 2)
    cfg = DecodeConfig(mode=Mode.CTC_GREEDY)
    assert evaluate(m, [u], spec, cfg).results[0].ids == tuple(u.ids)
    for k in (2, 3):
        copies = [Utterance(f"c{i}", u.feats, u.text, u.ids) for i in range(k)]
        joined = concatenate(copies, k * len(u.feats))
        assert evaluate(m, joined, spec, cfg).results[0].ids == tuple(u.ids) * k


# ------------------------------------------------------------------ config and CLI

def test_config_flags_shadow_file_values(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("[train]\nepochs = 7\nlr = 0.01  # faster\nstage = static\n")
    sec = load_config(p)["train"]
    out = merged(sec, {"epochs": 3, "lr": None}, {"epochs": 10, "lr": 0.002, "stage": "global"})
    assert out == {"epochs": 3, "lr": 0.01, "stage": "static"}


def test_config_rejects_unknown_keys_and_bad_values(tmp_path):
    with pytest.raises(ConfigError):
        merged({"bogus": "1"}, {}, {"epochs": 1})
    with pytest.raises(ConfigError):
        merged({"epochs": "many"}, {}, {"epochs": 1})
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")
    assert coerce("off", True) is False and coerce("2, 3", (1,)) == (2, 3)


@pytest.fixture(scope="module")
def cli_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "gen", "--out", str(root / "data"), "--n-train", "6", "--n-test", "2",
                     "--n-lm", "20", "--feature-dim", "4", "--symbols", "5"]) == 0
    return root


def test_cli_end_to_end(cli_data, capsys):
    root = cli_data
    data = str(root / "data")
    cfg = root / "train.cfg"
    cfg.write_text("[train]\nepochs = 1\nbatch_size = 3\nlayers = 1\nd = 8\nheads = 2\nffn = 16\n")
    assert cli.main(["train", "--config", str(cfg), "--data", data,
                     "--checkpoint-out", str(root / "g.ckpt")]) == 0
    assert cli.main(["train", "--config", str(cfg), "--data", data, "--stage", "dynamic",
                     "--checkpoint-in", str(root / "g.ckpt"), "--checkpoint-out", str(root / "d.ckpt"),
                     "--log", str(root / "d.jsonl")]) == 0
    assert cli.main(["lm", "train", "--data", data, "--out", str(root / "lm.arpa")]) == 0
    assert cli.main(["decode", "--data", data, "--checkpoint", str(root / "d.ckpt"), "--lm",
                     str(root / "lm.arpa"), "--out", str(root / "hyp.jsonl")]) == 0
    hyps = [json.loads(x) for x in (root / "hyp.jsonl").read_text(encoding="utf-8").splitlines()]
    assert len(hyps) == 2 and hyps[0]["mode"] == "att-rescore"
    capsys.readouterr()
    assert cli.main(["eval", "wer", "--hyp", str(root / "hyp.jsonl"), "--ref",
                     str(root / "data" / "test.jsonl"), "--vocab", str(root / "data" / "vocab.tsv")]) == 0
    assert "wer_percent" in json.loads(capsys.readouterr().out)
    assert cli.main(["eval", "latency", "--hyp", str(root / "hyp.jsonl")]) == 0


def test_cli_lexicon(tmp_path):
    corpus = tmp_path / "corpus.txt"
    corpus.write_text("བཀྲ་ཤིས་བདེ་ལེགས།\nབཀྲ་ཤིས།\n", encoding="utf-8")
    assert cli.main(["lexicon", "build", "--corpus", str(corpus), "--granularity", "component",
                     "--out", str(tmp_path / "v.tsv")]) == 0
    assert len(Vocabulary.load(tmp_path / "v.tsv")) > 4
    assert cli.main(["lexicon", "dump", "--corpus", str(corpus), "--out", str(tmp_path / "lex.txt")]) == 0
    assert (tmp_path / "lex.txt").read_text(encoding="utf-8").strip()


def test_cli_exit_codes(cli_data, tmp_path):
    data = str(cli_data / "data")
    # config error: missing required option, unknown config key
    assert cli.main(["train", "--data", data]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("[train]\nwhatever = 1\n")
    assert cli.main(["train", "--config", str(bad), "--data", data, "--checkpoint-out", "x"]) == 2
    # data error: missing checkpoint and missing data directory
    assert cli.main(["decode", "--data", data, "--checkpoint", str(tmp_path / "none.ckpt")]) == 3
    assert cli.main(["train", "--data", str(tmp_path / "nodata"), "--checkpoint-out", "x"]) == 3
    assert cli.main(["train", "--data", data, "--stage", "static", "--checkpoint-out", "x"]) == 3


def test_cli_numeric_error_exit_code(cli_data, tmp_path):
    m = load_model_or_train(cli_data, tmp_path)
    for p in m.params.values():
        p.data[...] = np.nan
    save_model(m, tmp_path / "nan.ckpt")
    assert cli.main(["decode", "--data", str(cli_data / "data"), "--checkpoint", str(tmp_path / "nan.ckpt"),
                     "--plan", "dynamic"]) == 4


def load_model_or_train(cli_data, tmp_path):
    corpus_vocab = Vocabulary.load(cli_data / "data" / "vocab.tsv")
    enc = EncoderConfig(input_dim=4, layers=1, d=8, heads=2, ffn=16)
    return ASRModel(len(corpus_vocab), enc)


def test_cli_experiment_writes_tables(tmp_path):
    assert cli.main(["experiment", "run", "carry", "--tiny", "--out", str(tmp_path)]) == 0
    data = json.loads((tmp_path / "carry.json").read_text(encoding="utf-8"))
    assert len(data["rows"]) == 4
    assert (tmp_path / "carry.txt").exists()
