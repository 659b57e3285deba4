import json
import random
import subprocess
import sys
from collections import Counter

import pytest

from zen.cli import main
from zen.lexicon import load as load_lexicon


@pytest.fixture
def corpus(tmp_path):
    rng = random.Random(0)
    words = ["abc", "de", "fgh", "ab", "cde"]
    lines = []
    for _ in range(40):
        lines.append("".join(rng.choice(words) for _ in range(rng.randrange(2, 5))))
    text = ""
    for i in range(0, len(lines), 4):
        text += "\n".join(lines[i:i + 4]) + "\n\n"
    path = tmp_path / "corpus.txt"
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({
        "model": {"char_layers": 1, "ngram_layers": 1, "hidden": 16, "heads": 2,
                  "ffn": 32, "max_len": 32, "dropout": 0.0, "dtype": "float64"},
        "train": {"steps": 6, "batch_size": 2, "lr": 3e-3},
    }), encoding="utf-8")
    return path


@pytest.fixture
def task_file(tmp_path):
    path = tmp_path / "task.json"
    path.write_text(json.dumps({"name": "seg", "kind": "tagging",
                                "labels": ["B", "M", "E", "S"], "scheme": "BMES"}),
                    encoding="utf-8")
    return path


def write_tagging(path, examples):
    with open(path, "w", encoding="utf-8") as fh:
        for chars, labels in examples:
            for ch, lab in zip(chars, labels):
                fh.write(f"{ch}\t{lab}\n")
            fh.write("\n")


@pytest.fixture
def seg_data(tmp_path):
    # single-character "words": constant S labels, trivially separable
    path = tmp_path / "seg.tsv"
    rng = random.Random(1)
    examples = [("".join(rng.choice("abcdef") for _ in range(rng.randrange(2, 6))),)
                for _ in range(10)]
    write_tagging(path, [(chars, "S" * len(chars)) for (chars,) in examples])
    return path


class TestBuildLexicon:
    def test_threshold_sweep_sizes_non_increasing(self, tmp_path, corpus, capsys):
        sizes = []
        for threshold in (2, 5, 15, 40):
            out = tmp_path / f"lex-{threshold}.tsv"
            assert main(["build-lexicon", "--corpus", str(corpus), "--out", str(out),
                         "--threshold", str(threshold)]) == 0
            first_line = capsys.readouterr().out.splitlines()[0]
            sizes.append(int(first_line.split(":")[1]))
            assert len(load_lexicon(out)) == sizes[-1]
        assert sizes == sorted(sizes, reverse=True)

    def test_missing_corpus_names_path(self, tmp_path, capsys):
        missing = tmp_path / "nope.txt"
        code = main(["build-lexicon", "--corpus", str(missing),
                     "--out", str(tmp_path / "x.tsv")])
        assert code == 1
        assert str(missing) in capsys.readouterr().err

    def test_counts_match_oracle(self, tmp_path, corpus):
        out = tmp_path / "lex.tsv"
        assert main(["build-lexicon", "--corpus", str(corpus), "--out", str(out),
                     "--n-min", "2", "--n-max", "3", "--threshold", "4"]) == 0
        counts = Counter()
        for line in corpus.read_text().splitlines():
            line = line.strip()
            for n in (2, 3):
                for i in range(len(line) - n + 1):
                    counts[line[i:i + n]] += 1
        expected = {g: c for g, c in counts.items() if c >= 4}
        assert dict(load_lexicon(out).entries) == expected

    def test_writes_config_sidecar(self, tmp_path, corpus):
        out = tmp_path / "lex.tsv"
        main(["build-lexicon", "--corpus", str(corpus), "--out", str(out)])
        sidecar = json.loads((tmp_path / "lex.tsv.config.json").read_text())
        assert sidecar["command"] == "build-lexicon" and sidecar["threshold"] == 15


class TestPretrainCommand:
    def test_requires_seed(self, tmp_path, corpus, capsys):
        assert main(["pretrain", "--corpus", str(corpus),
                     "--out", str(tmp_path / "o")]) == 1

    def test_deterministic_rerun_byte_identical(self, tmp_path, corpus, config_file):
        for tag in ("one", "two"):
            assert main(["pretrain", "--corpus", str(corpus), "--lexicon", "none",
                         "--out", str(tmp_path / tag), "--seed", "3",
                         "--config", str(config_file)]) == 0
        assert (tmp_path / "one" / "metrics.csv").read_bytes() == \
               (tmp_path / "two" / "metrics.csv").read_bytes()
        assert (tmp_path / "one" / "effective-config.json").read_bytes() == \
               (tmp_path / "two" / "effective-config.json").read_bytes()

    def test_lexicon_none_equals_empty_lexicon_file(self, tmp_path, corpus, config_file):
        empty = tmp_path / "empty.tsv"
        empty.write_text("#zen-lexicon v1 n_min=2 n_max=8 threshold=99\n", encoding="utf-8")
        assert main(["pretrain", "--corpus", str(corpus), "--lexicon", "none",
                     "--out", str(tmp_path / "none"), "--seed", "3",
                     "--config", str(config_file)]) == 0
        assert main(["pretrain", "--corpus", str(corpus), "--lexicon", str(empty),
                     "--out", str(tmp_path / "empty"), "--seed", "3",
                     "--config", str(config_file)]) == 0
        assert (tmp_path / "none" / "metrics.csv").read_bytes() == \
               (tmp_path / "empty" / "metrics.csv").read_bytes()

    def test_divergence_exits_2(self, tmp_path, corpus, config_file, monkeypatch):
        from zen import cli
        from zen.pretrain import TrainingDiverged

        def explode(*args, **kwargs):
            raise TrainingDiverged("non-finite loss at step 3")

        monkeypatch.setattr(cli, "train", explode)
        code = main(["pretrain", "--corpus", str(corpus), "--lexicon", "none",
                     "--out", str(tmp_path / "div"), "--seed", "0",
                     "--config", str(config_file)])
        assert code == 2

    def test_unwritable_output_exits_2(self, tmp_path, corpus, config_file):
        # --out nested under an existing *file* makes directory creation fail
        code = main(["pretrain", "--corpus", str(corpus), "--lexicon", "none",
                     "--out", str(corpus / "sub"), "--seed", "0",
                     "--config", str(config_file)])
        assert code == 2


def run_small_pipeline(tmp_path, corpus, config_file, task_file, seg_data, lexicon="none"):
    ckpt_dir = tmp_path / "pre"
    assert main(["pretrain", "--corpus", str(corpus), "--lexicon", lexicon,
                 "--out", str(ckpt_dir), "--seed", "7",
                 "--config", str(config_file)]) == 0
    ft_dir = tmp_path / "ft"
    assert main(["finetune", "--task", str(task_file), "--train", str(seg_data),
                 "--checkpoint", str(ckpt_dir / "checkpoint-final.bin"),
                 "--lexicon", lexicon, "--out", str(ft_dir), "--seed", "7",
                 "--config", str(config_file), "--steps", "8", "--lr", "1e-2",
                 "--batch-size", "2"]) == 0
    return ft_dir / "task-model.bin"


class TestFinetuneAndEval:
    def test_eval_perfect_fixture_prints_f1(self, tmp_path, corpus, config_file,
                                            task_file, seg_data, capsys):
        model_path = run_small_pipeline(tmp_path, corpus, config_file, task_file, seg_data)
        capsys.readouterr()
        assert main(["eval", "--model", str(model_path), "--data", str(seg_data)]) == 0
        out = capsys.readouterr().out
        assert "f1\t1.0000" in out

    def test_eval_writes_report(self, tmp_path, corpus, config_file, task_file,
                                seg_data):
        model_path = run_small_pipeline(tmp_path, corpus, config_file, task_file, seg_data)
        out_dir = tmp_path / "evalout"
        assert main(["eval", "--model", str(model_path), "--data", str(seg_data),
                     "--out", str(out_dir)]) == 0
        assert (out_dir / "metrics.txt").exists()
        assert (out_dir / "effective-config.json").exists()

    def test_finetune_lexicon_mismatch_exits_1(self, tmp_path, corpus, config_file,
                                               task_file, seg_data, capsys):
        ckpt_dir = tmp_path / "pre"
        main(["pretrain", "--corpus", str(corpus), "--lexicon", "none",
              "--out", str(ckpt_dir), "--seed", "7", "--config", str(config_file)])
        lex_path = tmp_path / "lex.tsv"
        main(["build-lexicon", "--corpus", str(corpus), "--out", str(lex_path),
              "--threshold", "2"])
        code = main(["finetune", "--task", str(task_file), "--train", str(seg_data),
                     "--checkpoint", str(ckpt_dir / "checkpoint-final.bin"),
                     "--lexicon", str(lex_path), "--out", str(tmp_path / "ft2"),
                     "--seed", "7", "--config", str(config_file)])
        assert code == 1


class TestExportHeatmap:
    def pretrain_with_lexicon(self, tmp_path, corpus, config_file):
        lex_path = tmp_path / "lex.tsv"
        assert main(["build-lexicon", "--corpus", str(corpus), "--out", str(lex_path),
                     "--threshold", "2", "--n-max", "4"]) == 0
        out = tmp_path / "pre"
        assert main(["pretrain", "--corpus", str(corpus), "--lexicon", str(lex_path),
                     "--out", str(out), "--seed", "5", "--config", str(config_file)]) == 0
        return out / "checkpoint-final.bin", lex_path

    def test_zero_hits_empty_table_with_warning(self, tmp_path, corpus, config_file,
                                                capsys):
        ckpt, lex_path = self.pretrain_with_lexicon(tmp_path, corpus, config_file)
        out = tmp_path / "heat.tsv"
        assert main(["export-heatmap", "--checkpoint", str(ckpt), "--text", "zzzz",
                     "--lexicon", str(lex_path), "--out", str(out)]) == 0
        assert "no lexicon n-grams matched" in capsys.readouterr().err
        data_lines = [l for l in out.read_text().splitlines()
                      if l and not l.startswith("#") and not l.startswith("layer")]
        assert data_lines == []

    def test_single_hit_weight_one_per_layer(self, tmp_path, corpus, config_file):
        ckpt, lex_path = self.pretrain_with_lexicon(tmp_path, corpus, config_file)
        lexicon = load_lexicon(lex_path)
        # pick a lexicon bigram and isolate one occurrence between unmatched chars
        bigram = next(g for g, _ in lexicon.entries if len(g) == 2)
        text = f"z{bigram}z"
        assert all(f"z{c}" not in lexicon and f"{c}z" not in lexicon for c in bigram)
        out = tmp_path / "heat.tsv"
        assert main(["export-heatmap", "--checkpoint", str(ckpt), "--text", text,
                     "--lexicon", str(lex_path), "--out", str(out)]) == 0
        rows = [l.split("\t") for l in out.read_text().splitlines()
                if l and not l.startswith("#") and not l.startswith("layer")]
        assert rows and all(r[2] == bigram and float(r[3]) == 1.0 for r in rows)

    def test_rerun_identical_output(self, tmp_path, corpus, config_file):
        ckpt, lex_path = self.pretrain_with_lexicon(tmp_path, corpus, config_file)
        outputs = []
        for tag in ("a", "b"):
            out = tmp_path / f"heat-{tag}.tsv"
            assert main(["export-heatmap", "--checkpoint", str(ckpt),
                         "--text", "abcdeab", "--lexicon", str(lex_path),
                         "--out", str(out)]) == 0
            outputs.append(out.read_bytes())
        assert outputs[0] == outputs[1]

    def test_mismatched_lexicon_refused(self, tmp_path, corpus, config_file):
        ckpt, _ = self.pretrain_with_lexicon(tmp_path, corpus, config_file)
        assert main(["export-heatmap", "--checkpoint", str(ckpt), "--text", "ab",
                     "--lexicon", "none", "--out", str(tmp_path / "h.tsv")]) == 1


class TestSweep:
    def test_duplicate_values_rejected_before_running(self, tmp_path, corpus,
                                                      config_file, task_file, seg_data):
        out = tmp_path / "sweep"
        code = main(["sweep", "--param", "threshold", "--values", "2,5,2",
                     "--corpus", str(corpus), "--task", str(task_file),
                     "--train", str(seg_data), "--dev", str(seg_data),
                     "--out", str(out), "--seed", "1", "--config", str(config_file)])
        assert code == 1
        assert not out.exists()

    def test_three_values_three_rows(self, tmp_path, corpus, config_file,
                                     task_file, seg_data):
        out = tmp_path / "sweep"
        assert main(["sweep", "--param", "threshold", "--values", "2,5,40",
                     "--corpus", str(corpus), "--task", str(task_file),
                     "--train", str(seg_data), "--dev", str(seg_data),
                     "--out", str(out), "--seed", "1", "--config", str(config_file),
                     "--steps", "4", "--batch-size", "2"]) == 0
        lines = (out / "sweep.csv").read_text().splitlines()
        assert lines[0] == "threshold,dev_metric,test_metric"
        assert len(lines) == 4

    def test_max_ngrams_zero_equals_baseline(self, tmp_path, corpus, config_file,
                                             task_file, seg_data):
        out = tmp_path / "sweep"
        assert main(["sweep", "--param", "max-ngrams", "--values", "0,8",
                     "--corpus", str(corpus), "--task", str(task_file),
                     "--train", str(seg_data), "--dev", str(seg_data),
                     "--out", str(out), "--seed", "2", "--config", str(config_file),
                     "--steps", "4", "--batch-size", "2", "--threshold", "2"]) == 0
        rows = dict((int(l.split(",")[0]), l.split(",")[1:])
                    for l in (out / "sweep.csv").read_text().splitlines()[1:])

        # manually run the character-only baseline with the same seed and config
        base_model = run_small_pipeline_baseline(tmp_path, corpus, config_file,
                                                 task_file, seg_data)
        assert rows[0] == base_model

    def test_help_lists_flags(self, capsys):
        assert main(["sweep", "--help"]) == 0
        out = capsys.readouterr().out
        for flag in ("--param", "--values", "--seed", "--out"):
            assert flag in out


def run_small_pipeline_baseline(tmp_path, corpus, config_file, task_file, seg_data):
    from zen import finetune as ftm
    from zen.corpus import build_vocab, normalize, read_corpus
    from zen.model import ModelConfig, ZenModel
    from zen.pretrain import TrainConfig, train

    docs = [[normalize(l) for l in doc] for doc in read_corpus(corpus)]
    lines = [l for doc in docs for l in doc]
    vocab = build_vocab(lines)
    cfg = json.loads(config_file.read_text())
    model = ZenModel(ModelConfig(vocab_size=len(vocab), lexicon_size=0,
                                 **cfg["model"]), seed=2)
    tkw = dict(cfg["train"])
    tkw.update(steps=4, batch_size=2, seed=2, max_ngrams=0)
    train(docs, vocab, None, model, TrainConfig(**tkw), tmp_path / "baseline")
    spec = ftm.TaskSpec("seg", "tagging", ("B", "M", "E", "S"), "BMES")
    data = ftm.read_tagging_tsv(seg_data)
    task_model, _ = ftm.finetune(spec, data, data,
                                 tmp_path / "baseline" / "checkpoint-final.bin",
                                 None, TrainConfig(**tkw))
    metric = ftm.evaluate(task_model, data)["f1"]
    return [repr(metric), repr(metric)]


class TestEntryPoints:
    def test_module_invocation(self):
        proc = subprocess.run([sys.executable, "-m", "zen", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        for command in ("build-lexicon", "pretrain", "finetune", "eval",
                        "sweep", "export-heatmap"):
            assert command in proc.stdout

    def test_unknown_command_exits_1(self):
        assert main(["frobnicate"]) == 1
