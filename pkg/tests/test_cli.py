import numpy as np
import pytest

from vitbench import data as D
from vitbench.cli import build_parser, main


def run(argv):
    return main([str(a) for a in argv])


class TestUsage:
    def test_unknown_subcommand_exit_2(self, capsys):
        assert run(["trane"]) == 2
        assert "usage" in capsys.readouterr().err.lower()

    def test_no_args_exit_2(self):
        assert run([]) == 2

    @pytest.mark.parametrize("sub", [
        "gen-synthetic", "split", "gradcheck", "pretrain",
        "finetune", "evaluate", "compare",
    ])
    def test_help_exits_zero(self, sub, capsys):
        assert run([sub, "--help"]) == 0
        out = capsys.readouterr().out
        for flag in ("--seed", "--out", "--epochs", "--batch-size", "--lr"):
            assert flag in out

    def test_unknown_flag_exit_2(self):
        assert run(["gradcheck", "--frobnicate"]) == 2


class TestGenSynthetic:
    def test_creates_manifest(self, tmp_path, capsys):
        code = run(["gen-synthetic", "--name", "demo", "--classes", "2",
                    "--per-class", "3", "--out", tmp_path, "--seed", "4"])
        assert code == 0
        manifest = D.load_manifest(tmp_path / "demo.manifest")
        assert len(manifest) == 6

    def test_seeded_runs_byte_identical(self, tmp_path):
        for sub in ("a", "b"):
            run(["gen-synthetic", "--name", "demo", "--classes", "2",
                 "--per-class", "3", "--out", tmp_path / sub, "--seed", "9"])
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


class TestSplit:
    def test_writes_three_manifests(self, tmp_path):
        run(["gen-synthetic", "--name", "full", "--classes", "2",
             "--per-class", "20", "--out", tmp_path / "ds", "--seed", "1"])
        code = run(["split", tmp_path / "ds" / "full.manifest",
                    "--out", tmp_path / "splits", "--seed", "2"])
        assert code == 0
        tr = D.load_manifest(tmp_path / "splits" / "full-train.manifest")
        va = D.load_manifest(tmp_path / "splits" / "full-val.manifest")
        te = D.load_manifest(tmp_path / "splits" / "full-test.manifest")
        assert (len(tr), len(va), len(te)) == (32, 4, 4)


class TestGradcheck:
    def test_vit_reports_below_threshold(self, capsys):
        code = run(["gradcheck", "--model", "vit", "--seed", "1",
                    "--entries-per-param", "2"])
        out = capsys.readouterr().out
        assert code == 0
        assert "max_rel_err=" in out
        assert float(out.split("max_rel_err=")[1].split()[0]) < 1e-3


class TestWorkflow:
    def test_pretrain_evaluate_finetune(self, tmp_path, capsys):
        run(["gen-synthetic", "--name", "src", "--classes", "3",
             "--per-class", "4, ".strip(", "), "--out", tmp_path / "src", "--seed", "3"])
        code = run(["pretrain", tmp_path / "src" / "src.manifest",
                    "--model", "vit", "--epochs", "1", "--batch-size", "8",
                    "--out", tmp_path / "ckpt", "--seed", "0"])
        assert code == 0
        ckpt = tmp_path / "ckpt" / "vit_src.ckpt"
        assert ckpt.exists()

        code = run(["evaluate", ckpt, tmp_path / "src" / "src.manifest"])
        assert code == 0
        assert "accuracy=" in capsys.readouterr().out

        run(["gen-synthetic", "--name", "tgt", "--classes", "2",
             "--per-class", "4", "--out", tmp_path / "tgt", "--seed", "5",
             "--angle-offset", "0.5"])
        code = run(["finetune", ckpt, tmp_path / "tgt" / "tgt.manifest",
                    "--epochs", "1", "--batch-size", "8",
                    "--out", tmp_path / "ft", "--seed", "0",
                    "--freeze-backbone"])
        assert code == 0
        assert (tmp_path / "ft" / "vit_tgt_finetuned.ckpt").exists()

    def test_evaluate_missing_checkpoint_is_runtime_error(self, tmp_path, capsys):
        (tmp_path / "bad.ckpt").write_bytes(b"NOPE")
        run(["gen-synthetic", "--name", "d", "--classes", "2", "--per-class", "2",
             "--out", tmp_path / "d", "--seed", "1"])
        code = run(["evaluate", tmp_path / "bad.ckpt",
                    tmp_path / "d" / "d.manifest"])
        assert code == 1
        assert "error:" in capsys.readouterr().err


class TestConfigFile:
    def test_file_values_fill_unpassed_flags(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("[train]\nepochs = 3\nbatch-size = 8\n")
        parser = build_parser()
        args = parser.parse_args(["pretrain", "x.manifest", "--config", str(cfg),
                                  "--batch-size", "16"])
        from vitbench.cli import _apply_config_file
        _apply_config_file(args, ["--config", str(cfg), "--batch-size=16"])
        assert args.epochs == 3        # from file
        assert args.batch_size == 16   # flag wins
