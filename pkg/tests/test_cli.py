import json
import subprocess
import sys

import pytest

from lamae.cli import effective_config_text, load_settings, main, parse_config
from lamae.dataio import read_labels_csv, read_record
from lamae.model import ModelConfig
from lamae.train import ConfigError, TrainConfig, load_checkpoint

SMALL = ["--set", "d_model=16", "--set", "n_heads_enc=2", "--set", "n_layers_enc=1", "--set", "d_decoder=8",
         "--set", "n_heads_dec=2", "--set", "n_layers_dec=1", "--set", "n_heads_la=2", "--set", "n_layers_la=1",
         "--set", "mlp_ratio=2", "--set", "batch_size=16"]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


class TestParseConfig:
    def test_no_file_and_empty_file(self, tmp_path):
        (tmp_path / "c.txt").write_text("# nothing here\n\n")
        assert parse_config() == (ModelConfig(), TrainConfig())
        assert parse_config(tmp_path / "c.txt") == (ModelConfig(), TrainConfig())

    def test_ratio_bound(self, tmp_path):
        (tmp_path / "c.txt").write_text("alpha_e = 1.5\n")
        with pytest.raises(ConfigError, match="alpha_e"):
            parse_config(tmp_path / "c.txt")

    def test_override_precedence(self, tmp_path):
        (tmp_path / "c.txt").write_text("lr = 1e-3  # peak rate\n")
        _, train = parse_config(tmp_path / "c.txt", ["lr=1e-4"])
        assert train.learning_rate == 1e-4

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="colour"):
            parse_config(None, ["colour=blue"])

    def test_type_error(self):
        with pytest.raises(ConfigError, match="epochs"):
            parse_config(None, ["epochs=many"])

    def test_malformed_line(self, tmp_path):
        (tmp_path / "c.txt").write_text("epochs 3\n")
        with pytest.raises(ConfigError, match=":1:"):
            parse_config(tmp_path / "c.txt")

    def test_typed_values(self):
        s = load_settings(None, ["betas=0.8,0.9", "finetune_with_masking=true", "grad_clip=1.5",
                                 "lead_names=I,II", "n_leads=2", "train_sizes=10,20"])
        assert s.train.betas == (0.8, 0.9) and s.train.grad_clip == 1.5
        assert s.model.lead_names == ("I", "II") and s.train.model == s.model
        assert s.eval.finetune_with_masking is True and s.eval.train_sizes == (10, 20)

    def test_effective_config_round_trips(self, tmp_path):
        s = load_settings(None, ["epochs=7", "alpha_la=0.5", "sweep_seeds=1,2"])
        (tmp_path / "eff.txt").write_text(effective_config_text(s))
        assert load_settings(tmp_path / "eff.txt") == s


class TestMain:
    def test_synth(self, capsys, tmp_path):
        code, out, _ = run(capsys, "synth", "--n", "100", "--out", str(tmp_path / "d"))
        assert code == 0
        files = sorted((tmp_path / "d").glob("*.lecg"))
        assert len(files) == 100
        ids, y, names = read_labels_csv(tmp_path / "d" / "labels.csv")
        assert len(ids) == 100 and y.shape == (100, 3) and len(names) == 3
        assert read_record(files[0]).samples.shape == (12, 1000)
        summary = json.loads(out)
        assert summary["subcommand"] == "synth" and summary["seed"] == 0
        assert {"wall_time_s", "metrics"} <= set(summary)
        assert (tmp_path / "d" / "effective_config.txt").exists()

    def test_eval_icd(self, capsys):
        code, out, _ = run(capsys, "eval-icd", "--expand", "I071")
        assert code == 0 and json.loads(out) == ["I00-I99", "I05-I09", "I07", "I071"]

    def test_eval_icd_normalize_and_list(self, capsys):
        code, out, _ = run(capsys, "eval-icd", "--normalize", "i48.0")
        assert code == 0 and json.loads(out) == {"code": "I480", "level": "subcategory"}
        code, out, _ = run(capsys, "eval-icd", "--list-categories")
        assert code == 0 and "I21" in json.loads(out)

    def test_eval_icd_out_of_chapter(self, capsys):
        code, _, err = run(capsys, "eval-icd", "--expand", "A00")
        assert code == 4 and err

    def test_unknown_flag(self, capsys):
        code, _, err = run(capsys, "synth", "--n", "3", "--out", "x", "--frobnicate")
        assert code == 2 and "usage" in err

    def test_unknown_subcommand(self, capsys):
        assert run(capsys, "train-everything")[0] == 2

    def test_config_error(self, capsys, tmp_path):
        (tmp_path / "c.txt").write_text("alpha_e = 1.5\n")
        code, _, err = run(capsys, "pretrain", "--config", str(tmp_path / "c.txt"), "--out", str(tmp_path / "o"))
        assert code == 3 and "alpha_e" in err

    def test_missing_checkpoint_is_runtime_error(self, capsys, tmp_path):
        code, _, _ = run(capsys, "probe", "--checkpoint", str(tmp_path / "none.lmae"), "--data", "synth:n=10",
                         "--out", str(tmp_path / "o"))
        assert code == 4

    def test_pipeline(self, capsys, tmp_path):
        data = tmp_path / "data"
        assert run(capsys, "synth", "--n", "60", "--seed", "3", "--out", str(data))[0] == 0
        pre = tmp_path / "pre"
        code, out, _ = run(capsys, "pretrain", "--data", str(data), "--out", str(pre), "--set", "epochs=2",
                           "--stop-after-epoch", "1", *SMALL)
        assert code == 0 and json.loads(out)["metrics"]["epochs"] == 1
        code, out, _ = run(capsys, "pretrain", "--data", str(data), "--out", str(pre / "resumed"),
                           "--resume", str(pre / "checkpoint.lmae"), "--set", "epochs=2", *SMALL)
        assert code == 0 and load_checkpoint(pre / "resumed" / "checkpoint.lmae").epoch == 2
        ckpt = str(pre / "resumed" / "checkpoint.lmae")

        code, out, _ = run(capsys, "probe", "--checkpoint", ckpt, "--data", str(data), "--out", str(tmp_path / "p"),
                           *SMALL)
        assert code == 0
        metrics = json.loads(out)["metrics"]
        assert metrics["mode"] == "linear_probe" and metrics["model"] == "lamae"

        code, out, _ = run(capsys, "finetune", "--data", str(data), "--out", str(tmp_path / "f"),
                           "--set", "finetune_epochs=1", *SMALL)
        assert code == 0 and json.loads(out)["metrics"]["model"] == "scratch"

        code, out, _ = run(capsys, "sweep", "--checkpoint", f"lamae={ckpt}", "--data", str(data),
                           "--out", str(tmp_path / "s"), "--set", "train_sizes=10,30", "--set", "sweep_seeds=0,1",
                           *SMALL)
        assert code == 0
        assert set(json.loads(out)["metrics"]) == {"lamae/linear_probe/10", "lamae/linear_probe/30"}
        assert (tmp_path / "s" / "sweep.csv").exists()

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "lamae", "eval-icd", "--expand", "I48"],
                              capture_output=True, text=True, check=False)
        assert proc.returncode == 0
        assert json.loads(proc.stdout) == ["I00-I99", "I30-I52", "I48"]
