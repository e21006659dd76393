import csv
import json
import shutil

import numpy as np
import pytest

from deepseg.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_WARNING, RUN_CONFIG_SCHEMA, main, parse_run_config, ConfigError
from deepseg.data_io import binarize_labels, load_slice, read_manifest, save_slice
from deepseg.metrics import dice, evaluate_case
from deepseg.nn import ModelConfig, assemble_model, count_layers, count_parameters

SMALL = {
    "model": {"depth": 2, "base_filters": 4, "input_shape": [1, 32, 32]},
    "train": {"epochs": 1, "batch_size": 4, "learning_rate": 0.001, "seed": 3},
    "data": {"phantom": {"extent": 32, "cases": 4, "slices_per_case": 2, "seed": 1}},
    "output_dir": "out",
}


def write_config(tmp_path, cfg=None, **updates):
    cfg = json.loads(json.dumps(cfg or SMALL))
    cfg.update(updates)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return path


def run(path, *cmd):
    return main([cmd[0], "--config", str(path), *cmd[1:]])


class TestConfig:
    def test_unknown_key_suggests_fix(self, tmp_path, capsys):
        path = write_config(tmp_path, train={"epoch": 2})
        assert run(path, "train") == EXIT_CONFIG
        err = capsys.readouterr().err
        assert "unknown key 'epoch'" in err and "did you mean 'epochs'" in err
        assert not (tmp_path / "out").exists()

    def test_invariant_violation_has_field(self, tmp_path, capsys):
        path = write_config(tmp_path, train={"learning_rate": -1.0})
        assert run(path, "train") == EXIT_CONFIG
        assert "train" in capsys.readouterr().err and not (tmp_path / "out").exists()

    def test_wrong_type(self, tmp_path, capsys):
        path = write_config(tmp_path, model={"depth": "four"})
        assert run(path, "synth") == EXIT_CONFIG
        assert "model/depth" in capsys.readouterr().err

    def test_loss_class_count_checked(self):
        with pytest.raises(ConfigError):
            parse_run_config({**SMALL, "loss": {"class_weights": [1, 1, 1]}})

    def test_data_needs_exactly_one_source(self):
        with pytest.raises(ConfigError):
            parse_run_config({**SMALL, "data": {}})

    def test_overrides(self, tmp_path):
        cfg = parse_run_config(SMALL, tmp_path, {"fold": 1, "seed": 99, "out": tmp_path / "elsewhere"})
        assert (cfg.fold, cfg.train.seed, cfg.output_dir) == (1, 99, tmp_path / "elsewhere")

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["train", "--config", str(tmp_path / "nope.json")]) == EXIT_IO
        assert "nope.json" in capsys.readouterr().err

    def test_missing_manifest_names_path(self, tmp_path, capsys):
        path = write_config(tmp_path, data={"manifest": "data/absent.json"})
        assert run(path, "train") == EXIT_IO
        assert "absent.json" in capsys.readouterr().err

    def test_schema_is_strict_everywhere(self):
        def walk(s):
            if s.get("type") == "object":
                assert s["additionalProperties"] is False
                for v in s["properties"].values():
                    walk(v)

        walk(RUN_CONFIG_SCHEMA)

    def test_print_schema(self, capsys):
        assert main(["--print-schema"]) == EXIT_OK
        assert json.loads(capsys.readouterr().out)["additionalProperties"] is False


class TestSynthAndPreview:
    def test_synth_deterministic(self, tmp_path):
        a = write_config(tmp_path)
        assert run(a, "synth") == EXIT_OK
        first = (tmp_path / "out/data/manifest.json").read_bytes()
        assert run(a, "synth", "--out", str(tmp_path / "again")) == EXIT_OK
        assert (tmp_path / "again/data/manifest.json").read_bytes() == first

    def test_preview_disabled_is_identity(self, tmp_path):
        path = write_config(tmp_path, augment={"enabled": False}, preview={"count": 3})
        assert run(path, "augment-preview") == EXIT_OK
        befores = sorted((tmp_path / "out/preview").glob("*_before_*.dseg"))
        assert len(befores) == 6
        for b in befores:
            assert b.read_bytes() == b.with_name(b.name.replace("before", "after")).read_bytes()

    def test_preview_elastic_keeps_binary_mask(self, tmp_path):
        aug = {"flip_h_prob": 0, "flip_v_prob": 0, "affine_prob": 0, "elastic_prob": 1.0,
               "elastic": {"alpha": 720, "sigma": 24}}
        path = write_config(tmp_path, augment=aug, preview={"count": 4})
        assert run(path, "augment-preview") == EXIT_OK
        for f in (tmp_path / "out/preview").glob("*_after_mask.dseg"):
            assert set(np.unique(load_slice(f))) <= {0, 1}


class TestTrainPredictEvaluate:
    def test_pipeline(self, tmp_path):
        path = write_config(tmp_path)
        assert run(path, "train") == EXIT_OK
        out = tmp_path / "out"
        rows = list(csv.reader(open(out / "history.csv")))
        assert rows[0] == ["epoch", "train_loss", "val_dsc", "seconds"] and len(rows) == 2
        assert (out / "model.dsegmdl").read_bytes()[:8] == b"DSEGMDL1"

        assert run(path, "predict") == EXIT_OK
        preds = sorted((out / "predictions").rglob("*.dseg"))
        assert len(preds) == 8
        first = [p.read_bytes() for p in preds]
        for p in preds:
            assert set(np.unique(load_slice(p))) <= {0, 1}
        assert run(path, "predict") == EXIT_OK
        assert [p.read_bytes() for p in preds] == first

        assert run(path, "evaluate") == EXIT_OK
        report = list(csv.reader(open(out / "metrics.csv")))
        assert report[0] == ["case_id", "dsc", "sensitivity", "specificity", "hd"]
        assert report[-1][0] == "MEAN" and len(report) == 10
        # CSV values agree with direct metric calls
        manifest = read_manifest(out / "data/manifest.json")
        key = report[1][0]
        direct = evaluate_case(key, load_slice(out / "predictions" / f"{key}.dseg"),
                               binarize_labels(load_slice(manifest.root / f"{key}.dseg")))
        assert float(report[1][1]) == direct.dsc
        assert (report[1][4] == "NA") == (direct.hd is None)

    def test_train_deterministic(self, tmp_path):
        path = write_config(tmp_path)
        assert run(path, "train", "--out", str(tmp_path / "a")) == EXIT_OK
        assert run(path, "train", "--out", str(tmp_path / "b")) == EXIT_OK

        def body(p):
            return [r[:3] for r in csv.reader(open(p))]

        assert body(tmp_path / "a/history.csv") == body(tmp_path / "b/history.csv")
        assert (tmp_path / "a/model.dsegmdl").read_bytes() == (tmp_path / "b/model.dsegmdl").read_bytes()

    def test_checkpoint_shape_mismatch(self, tmp_path, capsys):
        path = write_config(tmp_path)
        assert run(path, "train") == EXIT_OK
        other = write_config(tmp_path, model={"depth": 2, "base_filters": 4, "input_shape": [1, 48, 48]})
        assert run(other, "predict") == EXIT_CONFIG
        assert "checkpoint" in capsys.readouterr().err

    def _truth_dir(self, tmp_path):
        path = write_config(tmp_path)
        assert run(path, "synth") == EXIT_OK
        manifest = read_manifest(tmp_path / "out/data/manifest.json")
        truth = tmp_path / "truth"
        for c in manifest.cases:
            for rel in c.masks:
                (truth / rel).parent.mkdir(parents=True, exist_ok=True)
                save_slice(truth / rel, binarize_labels(load_slice(manifest.root / rel)))
        return truth

    def test_perfect_prediction(self, tmp_path):
        truth = self._truth_dir(tmp_path)
        path = write_config(tmp_path, evaluate={"predictions": "truth", "truth": "truth"})
        assert run(path, "evaluate") == EXIT_OK
        mean = list(csv.reader(open(tmp_path / "out/metrics.csv")))[-1]
        assert [float(v) for v in mean[1:]] == [1.0, 1.0, 1.0, 0.0]

    def test_corrupt_and_unmatched_cases(self, tmp_path):
        truth = self._truth_dir(tmp_path)
        preds = tmp_path / "preds"
        shutil.copytree(truth, preds)
        files = sorted(preds.rglob("*.dseg"))
        files[0].write_bytes(b"garbage")
        files[1].unlink()
        path = write_config(tmp_path, evaluate={"predictions": "preds", "truth": "truth"})
        assert run(path, "evaluate") == EXIT_WARNING
        rows = list(csv.reader(open(tmp_path / "out/metrics.csv")))
        na_rows = [r[0] for r in rows if r[1] == "NA"]
        assert len(na_rows) == 2 and len(rows) == 1 + 8 + 1


def test_benchmark_rows(tmp_path):
    cfg = write_config(tmp_path, model={}, benchmark={"families": ["unet_plain", "mobilenet"], "extent": 32,
                                                       "slices": 2, "predictions": 1, "warmup": False},
                       train={"batch_size": 2})
    assert run(cfg, "benchmark") == EXIT_OK
    text = (tmp_path / "out/benchmark.csv").read_text()
    assert text.startswith("# deepseg") and "cpus:" in text
    rows = list(csv.DictReader(line for line in text.splitlines() if not line.startswith("#")))
    assert [r["family"] for r in rows] == ["unet_plain", "mobilenet"]
    for r in rows:
        model = assemble_model(ModelConfig(encoder_family=r["family"]))
        assert int(r["params"]) == count_parameters(model)
        assert int(r["layers"]) == count_layers(model)
        assert float(r["train_epoch_seconds"]) >= 0 and float(r["predict_seconds"]) >= 0
        assert r["status"] == "ok"
    assert abs(int(rows[0]["params"]) - 7_760_642) <= 0.01 * 7_760_642
