import os

import numpy as np
import pytest

from ifwm.cli import main, write_pgm
from ifwm.config import TrainConfig, load_config, parse_config_text
from ifwm.errors import ConfigError
from ifwm.train import eval_threads


class TestConfigParsing:
    def test_types_and_comments(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text(
            "# training run\n"
            "lr = 0.02\n"
            "epochs = 7        # short\n"
            "branch_widths = 8,16,24,32\n"
            "augment = false\n"
            "fusion = sf\n")
        cfg = load_config(str(p))
        assert cfg.lr == 0.02
        assert cfg.epochs == 7
        assert cfg.branch_widths == (8, 16, 24, 32)
        assert cfg.augment is False
        assert cfg.fusion == "sf"

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="warmup"):
            parse_config_text("warmup = 5\n")

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            parse_config_text("epochs = soon\n")

    def test_missing_equals(self):
        with pytest.raises(ConfigError):
            parse_config_text("epochs 5\n")

    def test_bool_spellings(self):
        assert parse_config_text("augment = YES\n")["augment"] is True
        assert parse_config_text("augment = 0\n")["augment"] is False

    def test_overrides_beat_file(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("seed = 3\nfusion = sf\n")
        cfg = load_config(str(p), seed=9, fusion="ifwm")
        assert cfg.seed == 9 and cfg.fusion == "ifwm"

    def test_none_override_ignored(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("seed = 3\n")
        assert load_config(str(p), seed=None).seed == 3


class TestConfigValidation:
    def test_tile_divisibility(self):
        with pytest.raises(ConfigError):
            TrainConfig(tile=48).validate()

    def test_lr_positive(self):
        with pytest.raises(ConfigError):
            TrainConfig(lr=0.0).validate()

    def test_decay_range(self):
        with pytest.raises(ConfigError):
            TrainConfig(lr_decay=0.0).validate()
        TrainConfig(lr_decay=1.0).validate()

    def test_momentum_range(self):
        with pytest.raises(ConfigError):
            TrainConfig(momentum=1.0).validate()

    def test_variant_checked(self):
        with pytest.raises(ConfigError):
            TrainConfig(fusion="warp").validate()

    def test_network_spec_mirror(self):
        cfg = TrainConfig(branch_widths=(4, 6, 8, 10), fusion="rifw", seed=5)
        spec = cfg.network_spec()
        assert spec.branch_widths == (4, 6, 8, 10)
        assert spec.fusion == "rifw" and spec.seed == 5


class TestEvalThreads:
    def test_default(self, monkeypatch):
        monkeypatch.delenv("IFWM_THREADS", raising=False)
        assert eval_threads() == 1

    def test_env_value(self, monkeypatch):
        monkeypatch.setenv("IFWM_THREADS", "4")
        assert eval_threads() == 4

    def test_bad_values(self, monkeypatch):
        monkeypatch.setenv("IFWM_THREADS", "many")
        with pytest.raises(ConfigError):
            eval_threads()
        monkeypatch.setenv("IFWM_THREADS", "0")
        with pytest.raises(ConfigError):
            eval_threads()


class TestCli:
    def _write_cfg(self, tmp_path, manifest, **extra):
        lines = [f"data_manifest = {manifest}",
                 "stem_channels = 4",
                 "branch_widths = 4,6,8,10",
                 "blocks_per_stage = 1",
                 "num_stages = 1",
                 "epochs = 2",
                 "lr_decay = 0.97"]
        lines += [f"{k} = {v}" for k, v in extra.items()]
        p = tmp_path / "run.cfg"
        p.write_text("\n".join(lines) + "\n")
        return str(p)

    def test_gen_data(self, tmp_path):
        out = tmp_path / "data"
        rc = main(["gen-data", "--out", str(out), "--scenes", "2", "--seed", "1"])
        assert rc == 0
        assert (out / "manifest.tsv").exists()

    def test_train_eval_cycle(self, tmp_path, micro_manifest):
        cfg = self._write_cfg(tmp_path, micro_manifest)
        run = tmp_path / "run"
        assert main(["train", "--config", cfg, "--out", str(run),
                     "--deterministic"]) == 0
        assert (run / "train_log.csv").exists()
        assert (run / "final.ckpt").exists()
        evald = tmp_path / "eval"
        assert main(["eval", "--config", cfg, "--out", str(evald),
                     "--checkpoint", str(run / "final.ckpt")]) == 0
        scores = (evald / "scores.csv").read_text().splitlines()
        assert scores[0] == "class,precision,recall,f1,iou"

    def test_eval_oracle_is_perfect(self, tmp_path, micro_manifest):
        cfg = self._write_cfg(tmp_path, micro_manifest)
        out = tmp_path / "oracle"
        assert main(["eval", "--config", cfg, "--out", str(out), "--oracle"]) == 0
        lines = (out / "scores.csv").read_text().splitlines()
        pa_row = [ln for ln in lines if ln.startswith("PA,")][0]
        assert float(pa_row.split(",")[1]) == 1.0

    def test_eval_dump_pgm(self, tmp_path, micro_manifest):
        cfg = self._write_cfg(tmp_path, micro_manifest)
        out = tmp_path / "ev"
        dump = tmp_path / "pred"
        assert main(["eval", "--config", cfg, "--out", str(out), "--oracle",
                     "--dump", str(dump)]) == 0
        files = sorted(os.listdir(dump))
        assert files and files[0].endswith(".pgm")
        head = open(dump / files[0], "rb").read(2)
        assert head == b"P5"

    def test_variant_override(self, tmp_path, micro_manifest):
        cfg = self._write_cfg(tmp_path, micro_manifest, fusion="baseline")
        run = tmp_path / "var"
        assert main(["train", "--config", cfg, "--out", str(run),
                     "--variant", "sf"]) == 0

    def test_ablate_micro(self, tmp_path, micro_manifest):
        cfg = self._write_cfg(tmp_path, micro_manifest, epochs=1)
        out = tmp_path / "abl"
        assert main(["ablate", "--config", cfg, "--out", str(out),
                     "--methods", "baseline,ifwm", "--seeds", "0"]) == 0
        table = (out / "ablation.csv").read_text().splitlines()
        assert table[0] == "method,calc_process,kernel,mF1,PA,mIoU"
        assert len(table) == 3
        assert (out / "ablation_per_seed.csv").exists()

    def test_ablate_unknown_method(self, tmp_path, micro_manifest):
        cfg = self._write_cfg(tmp_path, micro_manifest)
        assert main(["ablate", "--config", cfg, "--out", str(tmp_path / "x"),
                     "--methods", "sf,magic", "--seeds", "0"]) == 2

    def test_gradcheck_subset(self, capsys):
        assert main(["gradcheck", "--seeds", "2", "--ops", "relu,add"]) == 0
        out = capsys.readouterr().out
        assert "relu" in out and "add" in out and "ok" in out

    def test_gradcheck_unknown_op(self):
        assert main(["gradcheck", "--seeds", "1", "--ops", "softmax"]) == 2

    def test_bad_config_path(self, tmp_path):
        rc = main(["train", "--config", str(tmp_path / "absent.cfg"),
                   "--out", str(tmp_path / "o")])
        assert rc == 2

    def test_deterministic_pins_threads(self, tmp_path, micro_manifest, monkeypatch):
        monkeypatch.setenv("IFWM_THREADS", "8")
        cfg = self._write_cfg(tmp_path, micro_manifest, epochs=1)
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "det"),
                     "--deterministic"]) == 0
        assert os.environ["IFWM_THREADS"] == "1"


class TestPgm:
    def test_header_and_scale(self, tmp_path):
        p = tmp_path / "x.pgm"
        write_pgm(str(p), np.array([[0, 3], [1, 2]]), 4)
        data = p.read_bytes()
        assert data.startswith(b"P5\n2 2\n255\n")
        assert data[-4:] == bytes([0, 255, 85, 170])
