import itertools

import pytest

from tijepa.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, dispatch
from tijepa.dataprep import LABELS
from tijepa.trainer import TiJepaConfig


def tiny_config_text():
    cfg = TiJepaConfig(image_size=16, patch_size=8, embed_dim=16, text_embed_dim=16,
                       encoder_depth=1, encoder_heads=2, max_text_len=16,
                       fusion_layers=1, fusion_heads=2, fusion_hidden=16,
                       predictor_depth=1, predictor_heads=2, predictor_width=16,
                       num_targets=2, tgt_scale_lo=0.15, tgt_scale_hi=0.3,
                       batch_size=4, total_steps=2, log_interval=1,
                       checkpoint_interval=10)
    return cfg.to_text()


@pytest.fixture
def synth_dir(tmp_path):
    out = tmp_path / "data"
    assert dispatch(["synth", "--n", "12", "--seed", "0", "--out", str(out),
                     "--image-size", "16", "--labeled"]) == EXIT_OK
    return out


class TestUsageErrors:
    def test_missing_required_flag_exits_one(self, capsys):
        assert dispatch(["pretrain"]) == EXIT_USAGE
        err = capsys.readouterr().err
        assert "usage" in err.lower()

    def test_unknown_flag_exits_one(self):
        assert dispatch(["gradcheck", "--bogus"]) == EXIT_USAGE

    def test_unknown_subcommand_exits_one(self):
        assert dispatch(["fly"]) == EXIT_USAGE


class TestGradcheck:
    def test_reports_all_ops_passed(self, capsys):
        assert dispatch(["gradcheck"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "all ops passed" in out
        assert "prediction_pipeline" in out


class TestSynth:
    def test_outputs_are_bit_identical_across_runs(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert dispatch(["synth", "--n", "8", "--seed", "3", "--out", str(out),
                             "--image-size", "16"]) == EXIT_OK
        assert (a / "manifest.tsv").read_bytes() == (b / "manifest.tsv").read_bytes()
        for img in sorted((a / "images").iterdir()):
            twin = b / "images" / img.name
            assert img.read_bytes() == twin.read_bytes()


class TestPreprocessMvsa:
    def test_truth_table_fixture_stats(self, tmp_path, capsys):
        fixture = tmp_path / "ann.tsv"
        lines = [f"p{i}\t{text}\t{image}"
                 for i, (text, image) in enumerate(itertools.product(LABELS, repeat=2))]
        fixture.write_text("\n".join(lines) + "\n")
        out = tmp_path / "labels.tsv"
        assert dispatch(["preprocess-mvsa", "--annotations", str(fixture),
                         "--mode", "single", "--out", str(out), "--stats"]) == EXIT_OK
        printed = capsys.readouterr().out
        assert "kept 7 of 9" in printed
        assert "3\t1\t3\t7" in printed
        assert "discarded (cross-modal conflict): 2" in printed
        kept_lines = out.read_text().strip().splitlines()
        assert len(kept_lines) == 7
        assert kept_lines[0] == "p0\tpositive"

    def test_bad_annotation_file_exits_two(self, tmp_path):
        fixture = tmp_path / "ann.tsv"
        fixture.write_text("p0\tpositive\n")
        assert dispatch(["preprocess-mvsa", "--annotations", str(fixture),
                         "--mode", "single", "--out", str(tmp_path / "o.tsv")]) == EXIT_DATA


class TestPipeline:
    def test_pretrain_finetune_eval_and_inspect(self, tmp_path, synth_dir, capsys):
        config_path = tmp_path / "run.cfg"
        config_path.write_text(tiny_config_text())
        run_dir = tmp_path / "run"
        assert dispatch(["pretrain", "--config", str(config_path),
                         "--data", str(synth_dir / "manifest.tsv"),
                         "--out", str(run_dir)]) == EXIT_OK
        ckpt = run_dir / "checkpoint_final.tijp"
        assert ckpt.exists()
        assert (run_dir / "metrics.log").exists()

        assert dispatch(["inspect", "--ckpt", str(ckpt)]) == EXIT_OK
        listing = capsys.readouterr().out
        assert "predictor.mask_token\t16" in listing
        assert "meta.step" in listing

        head_dir = tmp_path / "head"
        assert dispatch(["finetune", "--ckpt", str(ckpt),
                         "--data", str(synth_dir / "manifest.tsv"),
                         "--out", str(head_dir), "--epochs", "1"]) == EXIT_OK
        head_path = head_dir / "head.tijp"
        assert head_path.exists()

        assert dispatch(["eval", "--ckpt", str(ckpt), "--head", str(head_path),
                         "--data", str(synth_dir / "manifest.tsv"),
                         "--split", "all", "--dump"]) == EXIT_OK
        report = capsys.readouterr().out
        assert "Accuracy (%)" in report
        assert "accuracy=" in report

    def test_pretrain_identical_runs_identical_checkpoints(self, tmp_path, synth_dir):
        config_path = tmp_path / "run.cfg"
        config_path.write_text(tiny_config_text())
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            assert dispatch(["pretrain", "--config", str(config_path),
                             "--data", str(synth_dir / "manifest.tsv"),
                             "--out", str(out)]) == EXIT_OK
            outs.append((out / "checkpoint_final.tijp").read_bytes())
        assert outs[0] == outs[1]

    def test_set_overrides_config_keys(self, tmp_path, synth_dir):
        config_path = tmp_path / "run.cfg"
        config_path.write_text(tiny_config_text())
        out = tmp_path / "o"
        assert dispatch(["pretrain", "--config", str(config_path),
                         "--data", str(synth_dir / "manifest.tsv"),
                         "--out", str(out), "--set", "total_steps=1"]) == EXIT_OK
        log = (out / "metrics.log").read_text().strip().splitlines()
        assert len(log) == 1

    def test_unknown_config_key_exits_two(self, tmp_path, synth_dir):
        config_path = tmp_path / "run.cfg"
        config_path.write_text(tiny_config_text() + "warp_speed = 9\n")
        assert dispatch(["pretrain", "--config", str(config_path),
                         "--data", str(synth_dir / "manifest.tsv"),
                         "--out", str(tmp_path / "o")]) == EXIT_DATA


class TestDataErrors:
    def test_missing_manifest_exits_two(self, tmp_path):
        config_path = tmp_path / "run.cfg"
        config_path.write_text(tiny_config_text())
        assert dispatch(["pretrain", "--config", str(config_path),
                         "--data", str(tmp_path / "ghost.tsv"),
                         "--out", str(tmp_path / "o")]) == EXIT_DATA

    def test_corrupt_checkpoint_exits_two(self, tmp_path):
        bogus = tmp_path / "bogus.tijp"
        bogus.write_bytes(b"JUNKJUNKJUNKJUNKJUNKJUNK")
        assert dispatch(["inspect", "--ckpt", str(bogus)]) == EXIT_DATA
