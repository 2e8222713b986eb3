import json
import logging
import os

import numpy as np
import pandas as pd
import pytest

from taxocodec.aggregation import load_aggregate
from taxocodec.cli import COMMANDS, main
from taxocodec.codec import Bitstream
from taxocodec.experiments import predict_bitstream

TINY = """
tasks = scene, shading
train_count = 16
val_count = 8
test_count = 8
pretrain_steps = 0
qualification_ratio = scene:100, shading:100
latent_channels = 4
hidden_channels = 8
hyper_dim = 4
tau = 3
n_priors = 4
codebook_size = 4
common_channels = 4
steps = 2
batch_size = 2
val_items = 4
eval_items = 3
seeds = 0
lambda_grid = 0.5,2
unseen_steps = 2
"""


@pytest.fixture
def workspace(tmp_path, tiny_bench):
    bench_dir = tmp_path / "bench"
    tiny_bench.save(str(bench_dir))
    config = tmp_path / "tiny.cfg"
    config.write_text(TINY + f"bench_dir = {bench_dir}\nout_dir = {tmp_path / 'runs'}\n")
    return tmp_path, str(config)


def _error_line(capsys) -> str:
    return capsys.readouterr().err.strip().splitlines()[-1]


class TestErrors:

    def test_missing_model(self, workspace, capsys):
        root, config = workspace
        code = main(["decode", "--config", config, "--model", str(root / "none.joblib"),
                     "--bitstream", str(root / "x.txc")])
        assert code == 2
        assert _error_line(capsys).startswith("error code=MODEL_NOT_FOUND detail=")

    def test_missing_config(self, tmp_path, capsys):
        assert main(["gen", "--config", str(tmp_path / "none.cfg")]) == 2
        assert "code=DATA_NOT_FOUND" in _error_line(capsys)

    def test_unknown_task(self, workspace, capsys):
        _, config = workspace
        assert main(["train", "--config", config, "--tasks", "scene,depth"]) == 2
        assert "code=CONFIG_INVALID" in _error_line(capsys)

    def test_corrupt_bitstream(self, workspace, capsys, tiny_bench):
        root, config = workspace
        out = str(root / "runs")
        assert main(["train", "--config", config, "--freeze", "--out", out]) == 0
        bad = root / "bad.txc"
        bad.write_bytes(b"TXC1" + b"\x00" * 10)
        code = main(["decode", "--config", config, "--model", os.path.join(out, "model.joblib"),
                     "--bitstream", str(bad)])
        assert code == 2
        assert "code=DECODE_FAILED" in _error_line(capsys)

    def test_unexpected_failure_is_one_line(self, workspace, capsys, caplog, monkeypatch):
        _, config = workspace

        def broken(cfg, args):
            raise RuntimeError('disk on "fire"\nsecond line')

        monkeypatch.setitem(COMMANDS, "gen", broken)
        caplog.set_level(logging.DEBUG, logger="taxocodec")
        assert main(["gen", "--config", config]) == 1
        err = capsys.readouterr().err.strip().splitlines()
        assert err == ["error code=INTERNAL detail=\"disk on 'fire' second line\""]
        assert not [r for r in caplog.records if r.levelno >= logging.ERROR]
        assert any(r.exc_info for r in caplog.records if r.levelno == logging.DEBUG)


class TestBenchCommands:

    def test_gen_then_pretrain(self, tmp_path, capsys):
        bench_dir = tmp_path / "bench"
        config = tmp_path / "tiny.cfg"
        config.write_text(TINY + f"bench_dir = {bench_dir}\n")
        assert main(["gen", "--config", str(config)]) == 0
        for split in ("train", "val", "test"):
            assert (bench_dir / f"{split}.bin").exists()
            assert (bench_dir / f"{split}.json").exists()
        assert main(["pretrain", "--config", str(config)]) == 0
        assert (bench_dir / "tasknets.joblib").exists()
        assert "Qualified shading" in capsys.readouterr().out


class TestCodecCommands:

    def test_train_encode_decode(self, workspace, tiny_bench):
        root, config = workspace
        out = str(root / "runs")
        assert main(["train", "--config", config, "--freeze", "--lambda", "2", "--out", out]) == 0
        model_path = os.path.join(out, "model.joblib")
        with open(os.path.join(out, "train_history.json")) as f:
            history = json.load(f)
        assert history["provenance"]["tool_version"]

        txc = os.path.join(out, "test_1.txc")
        assert main(["encode", "--config", config, "--model", model_path, "--index", "1", "--out", out]) == 0
        with open(txc + ".json") as f:
            sidecar = json.load(f)
        assert sidecar["tasks"] == ["scene", "shading"]
        assert sidecar["total_bits"] == 8 * os.path.getsize(txc)

        assert main(["decode", "--config", config, "--model", model_path, "--bitstream", txc,
                     "--out", out]) == 0
        with open(txc + ".predictions.json") as f:
            decoded = json.load(f)["predictions"]
        with open(txc, "rb") as f:
            bs = Bitstream.from_bytes(f.read())
        expected = predict_bitstream(load_aggregate(model_path), tiny_bench.nets, bs)
        assert decoded["scene"] == int(expected["scene"])
        np.testing.assert_allclose(np.array(decoded["shading"]), expected["shading"], rtol=1e-6)

    def test_encode_index_out_of_range(self, workspace, capsys):
        root, config = workspace
        out = str(root / "runs")
        assert main(["train", "--config", config, "--out", out]) == 0
        code = main(["encode", "--config", config, "--model", os.path.join(out, "model.joblib"),
                     "--index", "99"])
        assert code == 2
        assert "code=CONFIG_INVALID" in _error_line(capsys)


class TestExperimentCommands:

    def test_plateau(self, workspace, capsys):
        root, config = workspace
        curve = root / "rd_curve.csv"
        pd.DataFrame({"lambda_set": ["shading=0.5", "shading=2"], "seed": [0, 0], "bpp": [0.05, 0.2],
                      "shading.l1": [0.5, 0.1]}).to_csv(curve, index=False)
        control = root / "control.json"
        control.write_text(json.dumps({"provenance": {"seed": 0}, "lambdas": {"shading": 1.0}, "bpp": 1.0,
                                       "metrics": {"shading.l1": 0.1, "scene.accuracy": 0.9}}))
        out = str(root / "runs")
        assert main(["plateau", "--config", config, "--curve", str(curve), "--control", str(control),
                     "--out", out]) == 0
        table = pd.read_csv(os.path.join(out, "plateau.csv"))
        rows = {r.task: r for r in table.itertuples()}
        assert rows["shading"].plateau_bpp == pytest.approx(0.2)
        assert not rows["scene"].feasible
        assert "Plateau scene: infeasible" in capsys.readouterr().out

    def test_plateau_needs_files(self, workspace, capsys):
        _, config = workspace
        assert main(["plateau", "--config", config]) == 2
        assert "code=DATA_NOT_FOUND" in _error_line(capsys)

    @pytest.mark.slow
    def test_eval_rd_with_control(self, workspace):
        root, config = workspace
        out = str(root / "runs")
        assert main(["eval-rd", "--config", config, "--tasks", "shading", "--control", "--out", out]) == 0
        curve = pd.read_csv(os.path.join(out, "rd_curve.csv"))
        assert len(curve) == 2
        assert "shading.l1" in curve.columns
        with open(os.path.join(out, "control.json")) as f:
            assert "shading.l1" in json.load(f)["metrics"]

    @pytest.mark.slow
    def test_aggregate_at_the_plateau(self, workspace, capsys):
        root, config = workspace
        with open(config, "a") as f:
            f.write("plateau_eps = 1e6\n")
        out = str(root / "runs")
        assert main(["aggregate", "--config", config, "--group", "scene,shading", "--out", out]) == 0
        table = pd.read_csv(os.path.join(out, "aggregation.csv"))
        assert bool(table.loc[0, "feasible"])
        assert "grouped:scene+shading" in table.columns
        with open(os.path.join(out, "aggregation.json")) as f:
            report = json.load(f)
        assert report["groups"] == [["scene", "shading"]]
        assert report["mean_saving"] == pytest.approx(table.loc[0, "saving"])
        assert "Mean saving of grouped over customized coding" in capsys.readouterr().out

    def test_unseen_per_group(self, workspace, capsys):
        root, config = workspace
        out = str(root / "runs")
        assert main(["unseen", "--config", config, "--group", "scene,count,segmentation", "--out", out]) == 0
        with open(os.path.join(out, "unseen_binary.json")) as f:
            report = json.load(f)
        assert report["protocol"] == "binary"
        assert [g["group"] for g in report["groups"]] == [["scene", "count", "segmentation"]]
        assert report["groups"][0]["runs"][0]["unseen_task"] == "segmentation"
        assert "binary scene+count seed 0: segmentation loss" in capsys.readouterr().out

    def test_unseen_needs_a_triple(self, workspace, capsys):
        _, config = workspace
        assert main(["unseen", "--config", config, "--group", "scene,shading"]) == 2
        assert "code=CONFIG_INVALID" in _error_line(capsys)
