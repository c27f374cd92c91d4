import csv
import json

import numpy as np
import pytest

from mtcvr import analysis as A
from mtcvr import experiments as ex
from mtcvr.cli import main
from mtcvr.data import ingest_csv, read_ground_truth
from mtcvr.errors import ConfigError

SMALL = {
    "seed": 2,
    "data": {"synthetic": {"num_records": 3000, "num_users": 80, "num_items": 50, "target_cvr": 0.08}},
    "architecture": {"embedding_dim": 4, "ctr_layers": [8], "cvr_layers": [8], "imp_layers": [8]},
    "estimator": {"kind": "multi_dr", "hyperparams": {"lam": 1.5}, "epochs": 1, "batch_size": 256},
}


@pytest.fixture
def cfg_path(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL))
    return path


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestConfig:
    def test_defaults_fill_in(self):
        cfg = ex.load_config(SMALL)
        assert cfg["repeats"] == 1 and cfg["train_fraction"] == 0.8

    def test_schema_error_lists_keys(self):
        with pytest.raises(ConfigError) as info:
            ex.load_config({"oops": 1, "estimator": {"kind": "multi_dr", "hyperparams": {"lamda": 2}}})
        msg = str(info.value)
        assert "oops" in msg and "lamda" in msg

    def test_overrides_win(self):
        assert ex.load_config(SMALL, {"seed": 9})["seed"] == 9


class TestCommands:
    def test_compare_single_row(self, tmp_path):
        table, results = ex.cmd_compare(ex.load_config(SMALL), ["multi_ipw"], repeats=1, out_dir=tmp_path)
        assert len(table) == 1
        rows = _rows(tmp_path / "compare.csv")
        assert rows[0] == ex.TABLE_HEADER and len(rows) == 2
        stds = [float(v) for h, v in zip(rows[0], rows[1]) if h.endswith("_std") and v]
        assert stds and all(s == 0.0 for s in stds)

    def test_sweep_eta_grid(self, tmp_path):
        cfg = ex.load_config(SMALL)
        rows = ex.cmd_sweep(cfg, "eta", repeats=2, out_dir=tmp_path)
        assert len(rows) == 5 * 2
        csv_rows = _rows(tmp_path / "sweep_eta.csv")
        assert csv_rows[0] == ex.RUN_HEADER and len(csv_rows) == 11
        assert [float(r[2]) for r in csv_rows[1::2]] == [0.0005, 0.001, 0.002, 0.005, 0.01]

    def test_bias_audit_matches_library(self, tmp_path):
        cfg = ex.load_config({**SMALL, "data": {"synthetic": {"num_records": 10, "num_users": 4,
                                                              "num_items": 4, "target_ctr": 0.3,
                                                              "target_cvr": 0.3}}})
        ds, gt = ex.load_data(cfg)
        assert len(ds) == 10
        out = ex.cmd_train(cfg, tmp_path / "t")
        net = out["result"].net
        reports = ex.cmd_bias_audit(cfg, ds, gt, checkpoint=str(out["checkpoint"]), out_dir=tmp_path)
        inst = A.frozen_from_net(net, ds, gt)
        direct = [A.bias_report(name, inst, **ex.audit_hyperparams(cfg).get(name, {}))
                  for name in A.ESTIMATORS]
        assert [r.to_dict() for r in reports] == [r.to_dict() for r in direct]
        saved = json.loads((tmp_path / "bias_audit.json").read_text())
        assert saved == [r.to_dict() for r in direct]

    def test_train_then_evaluate(self, tmp_path):
        cfg = ex.load_config(SMALL)
        paths = ex.cmd_generate(cfg, tmp_path / "g")
        out = ex.cmd_train(cfg, tmp_path / "t")
        rep = ex.cmd_evaluate(out["checkpoint"], paths["dataset"], paths["ground_truth"], tmp_path / "e")
        assert json.loads((tmp_path / "e" / "metrics.json").read_text()) == rep.to_dict()
        assert _rows(out["trace"])[0] == ["epoch", "loss_total", "loss_ctr", "loss_cvr", "loss_imp"]
        no_truth = ex.cmd_evaluate(out["checkpoint"], paths["dataset"])
        assert no_truth.cvr_auc_do is None and no_truth.ctcvr_auc == rep.ctcvr_auc

    def test_generate_round_trip(self, tmp_path):
        cfg = ex.load_config(SMALL)
        paths = ex.cmd_generate(cfg, tmp_path)
        ds, gt = ex.load_data(cfg)
        assert ingest_csv(paths["dataset"], ds.vocab_sizes).equals(ds)
        assert read_ground_truth(paths["ground_truth"]).equals(gt)

    def test_parallel_matches_serial(self, tmp_path):
        cfg = ex.load_config({**SMALL, "repeats": 2})
        ex.cmd_compare(cfg, ["multi_ipw", "esmm"], out_dir=tmp_path / "a")
        ex.cmd_compare({**cfg, "workers": 2}, ["multi_ipw", "esmm"], out_dir=tmp_path / "b")
        for name in ("runs.csv", "compare.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestMain:
    def test_exit_codes(self, tmp_path, cfg_path, capsys):
        assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "t")]) == 0
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"estimator": {"kind": "unknown"}}))
        assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2
        record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert record["exit_code"] == 2 and record["error"] == "ConfigError"

    def test_divergence_exit_code(self, tmp_path, cfg_path, monkeypatch, capsys):
        from mtcvr import estimators as E
        real = E.loss_multi_dr
        monkeypatch.setattr(E, "loss_multi_dr", lambda *a, **k: E.LossTerms(real(*a, **k).total * np.nan))
        assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path)]) == 3
        assert json.loads(capsys.readouterr().err.strip())["error"] == "DivergenceError"

    def test_undefined_metric_exit_code(self, tmp_path, cfg_path, capsys):
        assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "t")]) == 0
        one = tmp_path / "one.csv"
        one.write_text("group_key,click,conversion,user_feats,item_feats,comb_feats\n1,0,0,0,0,0\n")
        code = main(["evaluate", "--checkpoint", str(tmp_path / "t" / "checkpoint.bin"),
                     "--dataset", str(one), "--out", str(tmp_path)])
        assert code == 4

    def test_compare_flags(self, tmp_path, cfg_path):
        code = main(["compare", "--config", str(cfg_path), "--out", str(tmp_path), "--repeats", "2",
                     "--estimator", "esmm,multi_ipw", "--seed", "5"])
        assert code == 0
        rows = _rows(tmp_path / "runs.csv")
        assert [r[0] for r in rows[1:]] == ["esmm", "esmm", "multi_ipw", "multi_ipw"]
        assert [r[3] for r in rows[1:]] == ["5", "6", "5", "6"]

    def test_sweep_grid_flag(self, tmp_path, cfg_path):
        code = main(["sweep", "--config", str(cfg_path), "--out", str(tmp_path), "--param", "k",
                     "--grid", "1,3"])
        assert code == 0 and len(_rows(tmp_path / "sweep_k.csv")) == 3
