import filecmp
import os

import pytest

from groundedqa import cli


def _run(*argv):
    return cli.main(list(argv))


class TestParsing:
    def test_no_args_is_usage_error(self, capsys):
        assert _run() == 1
        assert "usage error" in capsys.readouterr().err

    def test_unknown_command(self):
        assert _run("frobnicate") == 1

    def test_flag_overrides_config_file(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("lr = 0.5\nepochs = 7\n")
        cfg = cli.parse_config(["train", "--config", str(cfg_file),
                                "--lr", "0.25"])
        assert cfg.lr == 0.25  # flag wins
        assert cfg.epochs == 7  # file fills the rest

    def test_config_file_unknown_key(self, tmp_path):
        cfg_file = tmp_path / "run.cfg"
        cfg_file.write_text("warp_factor=9\n")
        with pytest.raises(cli.UsageError, match="warp_factor"):
            cli.parse_config(["train", "--config", str(cfg_file)])

    def test_conflicting_widths_rejected(self, capsys):
        # hidden explicit, d_a from the micro preset (8): mismatch
        assert _run("gradcheck", "--hidden", "16") == 2
        assert "conflicting widths" in capsys.readouterr().err

    def test_both_widths_explicit_allowed(self):
        cfg = cli.parse_config(["gradcheck", "--hidden", "16",
                                "--d-a", "4"])
        assert cfg.hidden == 16 and cfg.d_a == 4

    def test_single_width_matching_preset_allowed(self):
        cfg = cli.parse_config(["gradcheck", "--hidden", "8"])
        assert cfg.hidden == 8 and cfg.d_a == 8


def _tree_files(root):
    out = {}
    for dirpath, _, names in os.walk(root):
        for name in names:
            path = os.path.join(dirpath, name)
            out[os.path.relpath(path, root)] = path
    return out


class TestSynth:
    def test_deterministic_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert _run("synth", "--n-telling", "3", "--n-pointing", "2",
                        "--seed", "11", "--out", str(out)) == 0
        fa, fb = _tree_files(a), _tree_files(b)
        assert set(fa) == set(fb)
        for rel in fa:
            # run.log is timestamped; the echo includes the --out path
            if rel in ("run.log", "config.echo.txt"):
                continue
            assert filecmp.cmp(fa[rel], fb[rel], shallow=False), rel

    def test_seed_changes_output(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        _run("synth", "--n-telling", "2", "--n-pointing", "0",
             "--seed", "1", "--out", str(a))
        _run("synth", "--n-telling", "2", "--n-pointing", "0",
             "--seed", "2", "--out", str(b))
        pack = next(r for r in _tree_files(a) if r.endswith(".fpk"))
        assert not filecmp.cmp(_tree_files(a)[pack], _tree_files(b)[pack],
                               shallow=False)


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    """synth -> split once for the pipeline tests."""
    root = tmp_path_factory.mktemp("cliworld")
    data = root / "data"
    assert _run("synth", "--n-telling", "6", "--n-pointing", "6",
                "--seed", "3", "--out", str(data)) == 0
    splits = root / "splits"
    assert _run("split", "--corpus", str(data / "corpus.json"),
                "--splits-seed", "9", "--out", str(splits)) == 0
    return {"root": root, "corpus": str(data / "corpus.json"),
            "features": str(data / "packs"),
            "splits": str(splits / "splits.tsv")}


class TestPipeline:
    def test_split_echo_and_sizes(self, world):
        with open(world["splits"]) as f:
            lines = f.read().splitlines()
        echo = [l for l in lines if l.startswith("#")]
        rows = [l.split("\t") for l in lines if not l.startswith("#")]
        assert any("splits_seed=9" in l for l in echo)
        assert len(rows) == 12
        from collections import Counter
        by = Counter(split for _, split in rows)
        assert by == {"train": 6, "val": 2, "test": 4}

    def test_train_eval_roundtrip(self, world):
        run = world["root"] / "run"
        assert _run("train", "--corpus", world["corpus"],
                    "--features", world["features"],
                    "--splits", world["splits"],
                    "--epochs", "2", "--batch", "4", "--seed", "0",
                    "--out", str(run)) == 0
        assert (run / "model.ckpt").exists()
        assert (run / "vocab.txt").exists()
        curve = [l for l in (run / "loss_curve.txt").read_text().splitlines()
                 if not l.startswith("#")]
        assert len(curve) == 2

        rep = world["root"] / "rep"
        assert _run("eval", "--corpus", world["corpus"],
                    "--features", world["features"],
                    "--splits", world["splits"],
                    "--checkpoint", str(run / "model.ckpt"),
                    "--out", str(rep)) == 0
        text = (rep / "report.txt").read_text()
        assert "overall\t" in text and "category\tcount\taccuracy" in text

    def test_eval_gold_stub_perfect(self, world):
        rep = world["root"] / "gold"
        assert _run("eval", "--corpus", world["corpus"],
                    "--features", world["features"],
                    "--gold-stub", "--out", str(rep)) == 0
        overall = [l for l in (rep / "report.txt").read_text().splitlines()
                   if l.startswith("overall\t")]
        assert overall[0].split("\t") == ["overall", "12", "1.0000"]

    def test_stats(self, world):
        out = world["root"] / "stats"
        assert _run("stats", "--corpus", world["corpus"],
                    "--out", str(out)) == 0
        text = (out / "stats.txt").read_text()
        assert "n_telling\t6" in text and "n_pointing\t6" in text
        assert "avg_q_len\t" in text

    def test_heatmap_writes_pgms(self, world):
        run = world["root"] / "run"
        out = world["root"] / "hm"
        assert _run("heatmap", "--corpus", world["corpus"],
                    "--features", world["features"],
                    "--checkpoint", str(run / "model.ckpt"),
                    "--task", "pointing", "--out", str(out)) == 0
        pgms = [n for n in os.listdir(out) if n.endswith(".pgm")]
        assert len(pgms) == 6
        with open(out / pgms[0], "rb") as f:
            assert f.read(2) == b"P5"

    def test_missing_corpus_path(self, world, capsys):
        assert _run("stats", "--corpus", "/nonexistent/c.json",
                    "--out", str(world["root"] / "x")) == 1

    def test_corrupt_corpus_is_validation_error(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert _run("stats", "--corpus", str(bad),
                    "--out", str(tmp_path / "o")) == 2

    def test_config_echo_written(self, world):
        echo = (world["root"] / "run" / "config.echo.txt").read_text()
        assert "command=train" in echo
        assert "epochs=2" in echo


class TestGradcheck:
    def test_passes_on_small_model(self, tmp_path, capsys):
        assert _run("gradcheck", "--seed", "2",
                    "--out", str(tmp_path / "gc")) == 0
        assert "overall max relative error" in capsys.readouterr().out
        text = (tmp_path / "gc" / "gradcheck.txt").read_text()
        assert "max_rel_error" in text
