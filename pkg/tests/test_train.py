import numpy as np
import pytest

from ifwm.backbone import build_network
from ifwm.checkpoint import load_state
from ifwm.data import SceneSample
from ifwm.errors import DataError, DivergedError, GeometryError
from ifwm.metrics import ConfusionMatrix
from ifwm.train import (
    LOG_HEADER,
    evaluate,
    load_dataset,
    predict_raster,
    run_ablation,
    split_dataset,
    train,
)


class TestSplit:
    def test_tail_held_out(self):
        samples = list(range(10))
        tr, val = split_dataset(samples, 0.2)
        assert tr == list(range(8)) and val == [8, 9]

    def test_zero_fraction(self):
        tr, val = split_dataset(list(range(5)), 0.0)
        assert len(tr) == 5 and val == []

    def test_at_least_one_val(self):
        tr, val = split_dataset(list(range(3)), 0.1)
        assert len(val) == 1


class TestTrainLoop:
    def test_log_format_and_lr_schedule(self, tmp_path, micro_cfg):
        cfg = micro_cfg(epochs=3, lr=0.01, lr_decay=0.9)
        res = train(cfg, str(tmp_path / "run"))
        assert res.log_rows[0] == LOG_HEADER
        lrs = [float(r.split(",")[1]) for r in res.log_rows[1:]]
        assert lrs == [0.01, 0.01 * 0.9, 0.01 * 0.9 ** 2]
        epochs = [r.split(",")[0] for r in res.log_rows[1:]]
        assert epochs == ["0", "1", "2"]

    def test_repeat_run_is_bit_identical(self, tmp_path, micro_cfg):
        cfg = micro_cfg(epochs=2)
        a = train(cfg, str(tmp_path / "a"))
        b = train(cfg, str(tmp_path / "b"))
        assert open(a.log_path, "rb").read() == open(b.log_path, "rb").read()
        assert open(a.final_path, "rb").read() == open(b.final_path, "rb").read()

    def test_seed_changes_trajectory(self, tmp_path, micro_cfg):
        a = train(micro_cfg(epochs=1, seed=0), str(tmp_path / "a"))
        b = train(micro_cfg(epochs=1, seed=1), str(tmp_path / "b"))
        assert a.log_rows[1] != b.log_rows[1]

    def test_checkpoints_written(self, tmp_path, micro_cfg):
        res = train(micro_cfg(epochs=2), str(tmp_path / "run"))
        best = load_state(res.best_path)
        final = load_state(res.final_path)
        assert set(best) == set(final)
        net = build_network(micro_cfg().network_spec())
        assert set(best) == set(net.registry)

    def test_divergence_detected(self, tmp_path, micro_cfg):
        cfg = micro_cfg(lr=1e4, epochs=5, momentum=0.0, fusion="baseline")
        with np.errstate(all="ignore"), pytest.raises(DivergedError):
            train(cfg, str(tmp_path / "run"))

    def test_early_stop_on_targets(self, tmp_path, micro_cfg):
        # thresholds at 0 metrics are met after the first epoch
        cfg = micro_cfg(epochs=50, target_pa=1e-9, target_miou=1e-9)
        res = train(cfg, str(tmp_path / "run"))
        assert res.epochs_run == 1

    def test_wrong_tile_extents_rejected(self, tmp_path, micro_cfg):
        bad = [SceneSample(np.zeros((3, 32, 32)), np.zeros((32, 32), np.uint8))
               for _ in range(4)]
        with pytest.raises(GeometryError):
            train(micro_cfg(), str(tmp_path / "run"), samples=bad)

    def test_augment_changes_training(self, tmp_path, micro_cfg):
        a = train(micro_cfg(epochs=1, augment=True), str(tmp_path / "a"))
        b = train(micro_cfg(epochs=1, augment=False), str(tmp_path / "b"))
        assert a.log_rows[1] != b.log_rows[1]


class TestEvaluate:
    def test_oracle_mode_perfect(self, micro_manifest, micro_cfg):
        samples = load_dataset(micro_manifest)[:4]
        net = build_network(micro_cfg().network_spec())
        cm = evaluate(net, samples, 4, 64, oracle=True)
        s = cm.summary()
        assert s.pixel_accuracy == 1.0 and s.miou == 1.0 and s.mf1 == 1.0

    def test_sharded_matches_serial(self, micro_manifest, micro_cfg):
        samples = load_dataset(micro_manifest)[:6]
        net = build_network(micro_cfg().network_spec())
        serial = evaluate(net, samples, 4, 64, threads=1)
        sharded = evaluate(net, samples, 4, 64, threads=4)
        assert np.array_equal(serial.counts, sharded.counts)

    def test_predict_raster_windows_whole_image(self, micro_cfg):
        net = build_network(micro_cfg().network_spec())
        rng = np.random.default_rng(0)
        image = rng.standard_normal((3, 160, 160))
        pred = predict_raster(net, image, 64)
        assert pred.shape == (160, 160)
        assert set(np.unique(pred)).issubset(set(range(4)))

    def test_predict_raster_small_image_rejected(self, micro_cfg):
        net = build_network(micro_cfg().network_spec())
        with pytest.raises(GeometryError):
            predict_raster(net, np.zeros((3, 32, 32)), 64)

    def test_empty_manifest_rejected(self, tmp_path):
        p = tmp_path / "empty.tsv"
        p.write_text("")
        with pytest.raises(DataError):
            load_dataset(str(p))


class TestAblation:
    def test_tables_written(self, tmp_path, micro_cfg):
        cfg = micro_cfg(epochs=1)
        out = tmp_path / "abl"
        res = run_ablation(cfg, ["baseline", "sf", "ifwm"], [0, 1], str(out))
        assert set(res) == {"baseline", "sf", "ifwm"}
        table = (out / "ablation.csv").read_text().splitlines()
        assert table[0] == "method,calc_process,kernel,mF1,PA,mIoU"
        rows = {ln.split(",")[0]: ln.split(",") for ln in table[1:]}
        assert rows["baseline"][1:3] == ["-", "-"]
        assert rows["sf"][1:3] == ["concat+conv", "3x3"]
        assert rows["ifwm"][1:3] == ["conv+add", "1x1+kxk"]
        per_seed = (out / "ablation_per_seed.csv").read_text().splitlines()
        assert per_seed[0] == "method,seed,mF1,PA,mIoU"
        assert len(per_seed) == 1 + 3 * 2

    def test_mean_matches_cells(self, tmp_path, micro_cfg):
        cfg = micro_cfg(epochs=1)
        out = tmp_path / "abl"
        res = run_ablation(cfg, ["ifwm"], [0, 1], str(out))
        mean_from_cells = sum(c.miou for c in res["ifwm"]) / 2
        row = (out / "ablation.csv").read_text().splitlines()[1].split(",")
        assert abs(float(row[5]) - mean_from_cells) < 1e-15
