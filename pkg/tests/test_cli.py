"""Config parsing, single runs, grids and the command-line interface."""

import json

import numpy as np
import pytest

from echobench import cli
from echobench import runner as R
from echobench.data import read_records
from echobench.evaluation import read_csv_columns
from echobench.models import ConfigError

TINY_DATA = {"n": 20, "frames": 8, "height": 16, "width": 16, "seed": 2}


def run_cfg(**kw):
    cfg = {"family": "I3D_MINI", "width_multiplier": 0.125, "max_epochs": 2, "patience": None, "batch_size": 4,
           "data": dict(TINY_DATA)}
    cfg.update(kw)
    return cfg


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    art = R.run_experiment(run_cfg(), out)
    return out, art


class TestParsing:
    def test_family_defaults(self):
        exp = R.parse_run_config({"family": "I3D_MINI"}).experiment
        assert (exp.initial_lr, exp.patience, exp.dropout_rate) == (1e-3, 20, 0.5)
        exp = R.parse_run_config({"family": "TWO_STREAM"}).experiment
        assert (exp.batch_size, exp.initial_lr, exp.dropout_rate) == (16, 5e-4, 0.05)

    def test_overrides_and_data_extents(self):
        cfg = R.parse_run_config(run_cfg(initial_lr=0.01))
        assert cfg.experiment.initial_lr == 0.01
        assert (cfg.model.frames, cfg.model.height) == (8, 16)
        assert cfg.data.n == 20

    @pytest.mark.parametrize("raw,key", [
        ({"family": "I3D_MINI", "momentmu": 0.9}, "momentmu"),
        ({"norm_kind": "batch"}, "family"),
        ({"family": "I3D_MINI", "batch_size": True}, "batch_size"),
        ({"family": "I3D_MINI", "data": {"frames": 0}}, "data"),
        ({"family": "I3D_MINI", "data": {"colour": 1}}, "data.colour"),
        ({"family": "NOPE"}, "family"),
    ])
    def test_invalid_configs_name_the_key(self, raw, key):
        with pytest.raises(ConfigError, match=key):
            R.parse_run_config(raw)

    def test_missing_and_malformed_files(self, tmp_path):
        with pytest.raises(ConfigError):
            R.load_config_json(tmp_path / "absent.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigError):
            R.load_config_json(bad)

    def test_config_dispatch(self):
        assert isinstance(R.parse_config({"family": "I3D_MINI"}), R.RunConfig)
        assert isinstance(R.parse_config({"grid": {"families": ["I3D_MINI"]}}), R.GridSpec)

    @pytest.mark.parametrize("raw", [{"grid": {"families": ["X"]}}, {"grid": {}}, {"grid": {"colours": [1]}},
                                     {"grid": {"families": ["I3D_MINI"]}, "overrides": {"lr": 1}},
                                     {"grid": {"families": ["I3D_MINI"]}, "extra": 1}])
    def test_invalid_grid(self, raw):
        with pytest.raises(ConfigError):
            R.parse_grid_config(raw)

    def test_snapshot_round_trip(self):
        cfg = R.parse_run_config(run_cfg(seed=5))
        assert R.parse_run_config(json.loads(json.dumps(cfg.to_dict()))) == cfg


class TestRunExperiment:
    def test_artifacts(self, trained_run):
        out, art = trained_run
        for name in R.RUN_ARTIFACTS:
            assert (out / name).exists(), name
        assert (out / "model" / "model.json").exists() and (out / "model" / "model.bin").exists()
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["status"] == art.status == "completed"
        assert set(metrics["metrics"]) == {"train", "val", "test"}
        assert metrics["epochs_run"] == 2

    def test_rerun_is_bit_identical(self, trained_run, tmp_path):
        out, _ = trained_run
        R.run_experiment(out / "config.json", tmp_path)
        for name in ("metrics.json", "history.csv", "pred_vs_truth.csv", "model/model.bin"):
            assert (out / name).read_bytes() == (tmp_path / name).read_bytes(), name

    def test_evaluate_matches_stored_metrics(self, trained_run):
        out, _ = trained_run
        stored = json.loads((out / "metrics.json").read_text())["metrics"]
        fresh = R.evaluate_run(out)
        for split in ("train", "val", "test"):
            assert fresh[split]["rmse"] == pytest.approx(stored[split]["rmse"], rel=1e-12)

    def test_emit_plots_idempotent(self, trained_run):
        out, _ = trained_run
        before = (out / "pred_vs_truth.csv").read_bytes()
        files = R.emit_plot_data(out)
        assert (out / "pred_vs_truth.csv").read_bytes() == before
        curve = read_csv_columns(files["learning_curve"])
        assert len(curve["epoch"]) == 2 and "val_rmse" in curve
        ba = read_csv_columns(files["bland_altman"])
        assert set(ba) == {"mean", "diff"}
        assert len(ba["diff"]) == len(read_csv_columns(out / "pred_vs_truth.csv")["pred"])

    def test_emit_plots_missing_files(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            R.emit_plot_data(tmp_path)

    def test_tiny_learning_rate_is_collapsed(self, tmp_path):
        art = R.run_experiment(run_cfg(initial_lr=1e-12), tmp_path)
        assert art.performance == "collapsed"

    def test_batch_is_clamped(self, tmp_path):
        R.run_experiment(run_cfg(batch_size=64, max_epochs=1), tmp_path)
        assert json.loads((tmp_path / "config.json").read_text())["batch_size"] == 14

    def test_records_input(self, tmp_path):
        rec = tmp_path / "clips.rec"
        assert cli.main(["generate-data", "--config", str(self._write(tmp_path, {"data": TINY_DATA})),
                         "--out", str(rec)]) == 0
        art = R.run_experiment(run_cfg(data={**TINY_DATA, "records": str(rec)}), tmp_path / "run")
        assert art.status == "completed"

    @staticmethod
    def _write(tmp_path, obj, name="cfg.json"):
        path = tmp_path / name
        path.write_text(json.dumps(obj))
        return path


class TestGrid:
    def test_labels(self):
        assert R.row_label("batch", "1x1x1") == "BatchNorm"
        assert R.row_label("layer", "3x3x3") == "3x3x3 Conv2 + LayerNorm"
        assert R.column_label("CNN_RNN_SCRATCH", "LSTM", "A", 2, 1) == "CNN_RNN_SCRATCH:LSTM"
        assert R.column_label("I3D_FULL", "GRU", "B", 1, 3) == "I3D_FULL:B"

    def test_inapplicable_cells(self):
        grid = R.parse_grid_config({"grid": {"families": ["TWO_STREAM", "CNN_RNN_SCRATCH", "I3D_MINI"]}})
        cells = {(row, col): cfg for row, col, cfg in R.grid_cells(grid)}
        assert len(cells) == 12
        for fam in ("TWO_STREAM", "CNN_RNN_SCRATCH"):
            assert cells["3x3x3 Conv2 + BatchNorm", fam] is None
            assert cells["BatchNorm", fam] is not None
        assert cells["3x3x3 Conv2 + LayerNorm", "I3D_MINI"] is not None

    def test_run_grid_summary(self, tmp_path):
        grid = {"grid": {"families": ["I3D_MINI", "TWO_STREAM"], "conv2_kernels": ["1x1x1", "3x3x3"]},
                "width_multiplier": 0.125, "overrides": {"max_epochs": 1, "patience": None, "batch_size": 4},
                "data": TINY_DATA}
        summary = R.run_grid(grid, tmp_path)
        cols, table = R.read_summary(summary)
        assert cols == ["I3D_MINI", "TWO_STREAM"]
        assert list(table) == ["BatchNorm", "LayerNorm", "3x3x3 Conv2 + BatchNorm", "3x3x3 Conv2 + LayerNorm"]
        assert table["3x3x3 Conv2 + BatchNorm"]["TWO_STREAM"] == "-"
        assert R.rmse_or_none(table["BatchNorm"]["I3D_MINI"]) is not None
        details = json.loads((tmp_path / "summary.json").read_text())
        assert sum(d["status"] == "completed" for d in details) == 6
        assert len(list((tmp_path / "runs").iterdir())) == 6


class TestCommandLine:
    def test_train_evaluate_emit(self, tmp_path, capsys):
        cfg = TestRunExperiment._write(tmp_path, run_cfg(max_epochs=1))
        assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "run"), "--seed", "3"]) == 0
        result = json.loads(capsys.readouterr().out)
        assert result["status"] == "completed"
        assert json.loads((tmp_path / "run" / "config.json").read_text())["seed"] == 3
        assert cli.main(["evaluate", "--out", str(tmp_path / "run")]) == 0
        assert set(json.loads(capsys.readouterr().out)) == {"train", "val", "test"}
        assert cli.main(["emit-plots", "--out", str(tmp_path / "run")]) == 0

    def test_generate_data(self, tmp_path, capsys):
        cfg = TestRunExperiment._write(tmp_path, {"n": 4, "frames": 3, "height": 8, "width": 8})
        assert cli.main(["generate-data", "--config", str(cfg), "--out", str(tmp_path / "c.rec"), "--seed", "9"]) == 0
        assert json.loads(capsys.readouterr().out)["clips"] == 4
        assert read_records(tmp_path / "c.rec")[0].shape == (3, 8, 8, 1)

    def test_usage_errors_exit_2(self, capsys):
        assert cli.main([]) == 2
        assert cli.main(["train"]) == 2
        assert cli.main(["fly"]) == 2
        err = capsys.readouterr().err.strip().splitlines()[-1]
        assert json.loads(err)["type"] == "UsageError"

    def test_bad_config_exits_1_with_json(self, tmp_path, capsys):
        cfg = TestRunExperiment._write(tmp_path, {"family": "I3D_MINI", "momentmu": 1})
        assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 1
        err = json.loads(capsys.readouterr().err)
        assert err["type"] == "ConfigError" and "momentmu" in err["error"]

    def test_missing_run_dir_exits_1(self, tmp_path):
        assert cli.main(["emit-plots", "--out", str(tmp_path / "nothing")]) == 1

    def test_grid_width_override(self, tmp_path, capsys):
        grid = {"grid": {"families": ["I3D_MINI"], "norm_kinds": ["batch"], "conv2_kernels": ["1x1x1"]},
                "overrides": {"max_epochs": 1, "patience": None, "batch_size": 4}, "data": TINY_DATA}
        cfg = TestRunExperiment._write(tmp_path, grid)
        assert cli.main(["grid", "--config", str(cfg), "--out", str(tmp_path / "g"),
                         "--width-multiplier", "0.125"]) == 0
        snap = json.loads((tmp_path / "g" / "grid.json").read_text())
        assert snap["width_multiplier"] == 0.125
        cell = next((tmp_path / "g" / "runs").iterdir())
        assert json.loads((cell / "config.json").read_text())["width_multiplier"] == 0.125
        assert np.isfinite(json.loads((cell / "metrics.json").read_text())["metrics"]["test"]["rmse"])


class TestClipNormSwitch:
    @pytest.mark.parametrize("value,expected", [(True, 1.0), (False, None), (0.5, 0.5), (None, None)])
    def test_values(self, value, expected):
        assert R.parse_run_config({"family": "I3D_MINI", "clip_norm": value}).experiment.clip_norm == expected
