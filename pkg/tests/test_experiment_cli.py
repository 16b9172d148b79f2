import json
import math

import numpy as np
import pytest

from gamlm import pfsa
from gamlm.armodel import ArModel
from gamlm.cli import main
from gamlm.experiment import (
    ExperimentConfig, LONG_HEADER, expand_grid, gen_data, plot_sweep, read_long_csv, run_experiment,
    stage_seed, sweep, write_long_csv,
)

TINY_AR = {"hidden_dim": 8, "embed_dim": 4, "max_epochs": 3, "patience": 2}


def tiny(**kw):
    base = dict(motif="1011", n=10, dsize=200, ds_size=500, test_size=200, ar=TINY_AR,
                training1={"max_epochs": 5})
    base.update(kw)
    return ExperimentConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(process="other")
    with pytest.raises(ValueError):
        ExperimentConfig(ft="101")
    with pytest.raises(ValueError):
        ExperimentConfig(motif="1" * 31)
    with pytest.raises(ValueError):
        ExperimentConfig(treg="mcmc")
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"dsize": 10, "colour": "red"})
    assert ExperimentConfig.from_dict(tiny().flat() | {"ar": TINY_AR, "training1": {"max_epochs": 5},
                                                       "distill": {}}) == tiny()


def test_val_size_rule():
    assert [ExperimentConfig(dsize=d).val_size for d in (500, 1000, 5000, 20000)] == [500, 500, 1250, 2000]


def test_stage_seeds_are_distinct_and_stable():
    seeds = {stage_seed(0, s) for s in ("data/D", "data/V", "data/T", "train_ar", "train_pi")}
    assert len(seeds) == 5
    assert stage_seed(3, "train_ar") == stage_seed(3, "train_ar") != stage_seed(4, "train_ar")


@pytest.mark.parametrize("process,h", [("pure", 0.449), ("mixture", 0.482)])
def test_gen_data_entropy_and_files(tmp_path, process, h):
    cfg = ExperimentConfig(process=process, dsize=1000, test_size=100)
    data = gen_data(cfg, tmp_path)
    assert abs(data.entropy_per_char - h) < 0.001
    assert (len(data.D), len(data.V), len(data.T)) == (1000, 500, 100)
    assert pfsa.read_dataset(tmp_path / "D.txt") == data.D
    truth = json.loads((tmp_path / "truth.json").read_text())
    assert truth["entropy_per_char"] == pytest.approx(data.entropy_per_char)
    n_components = 1 if process == "pure" else 2
    assert sorted(p.name for p in tmp_path.glob("process_*.fsa")) == [f"process_{i}.fsa" for i in range(n_components)]
    back = pfsa.Pfsa.from_text((tmp_path / "process_0.fsa").read_text())
    assert pfsa.string_prob(back, data.D[0]) > 0
    assert gen_data(cfg).D == data.D


def test_run_reproducible(tmp_path):
    a = run_experiment(tiny(), tmp_path / "a")
    b = run_experiment(tiny(), tmp_path / "b")
    assert a.status == "ok"
    assert (tmp_path / "a" / "report.csv").read_bytes() == (tmp_path / "b" / "report.csv").read_bytes()
    for name in ("D.txt", "r.npz", "gam.json", "training1_log.csv", "pi.npz", "distilled_train.txt", "run.json"):
        assert (tmp_path / "a" / name).exists(), name
    # metric sanity: a model cannot beat the true entropy beyond sampling noise
    assert a.ce_r >= a.h_true - 0.01 and a.ce_pi >= a.h_true - 0.01
    assert len(a.lam) == 5 and 0 <= a.mf_pi <= 1 and 0 < a.acceptance_rate <= 1
    run = json.loads((tmp_path / "a" / "run.json").read_text())
    assert set(run["timings"]) >= {"gen_data", "train_ar", "train_gam", "distill"}


def test_run_cache_shares_r():
    cache = {}
    a = run_experiment(tiny(), cache=cache)
    b = run_experiment(tiny(treg="snis"), cache=cache)
    assert a.ce_r == b.ce_r
    assert sum(k[0] == "r" for k in cache) == 1


def test_run_failure_is_recorded(tmp_path):
    # a draw cap of one proposal sample makes rejection sampling give up
    rep = run_experiment(tiny(training1={"draw_cap": 1}), tmp_path)
    assert rep.status == "failed:train_gam"
    assert not math.isnan(rep.ce_r) and math.isnan(rep.ce_pi)
    assert "failed:train_gam" in (tmp_path / "report.csv").read_text()


def test_empty_feature_set_keeps_proposal():
    rep = run_experiment(tiny(ft="0000000"))
    assert rep.status == "ok" and rep.lam == [] and rep.acceptance_rate == 1.0
    assert abs(rep.ce_pi / rep.ce_r - 1) < 0.1


def test_cyclic_run():
    rep = run_experiment(tiny(mode="cyclic"))
    assert rep.status == "ok"
    assert len(rep.extra["acceptance_rates"]) == 1


def test_expand_grid():
    cfgs = expand_grid({"motif": "1011", "n": 10}, {"dsize": [100, 200], "treg": ["rs", "snis"]})
    assert [(c.dsize, c.treg) for c in cfgs] == [(100, "rs"), (100, "snis"), (200, "rs"), (200, "snis")]
    assert len(expand_grid({}, {})) == 1


def test_empty_sweep_writes_headers(tmp_path):
    assert sweep([], tmp_path, plot=True) == []
    assert (tmp_path / "sweep.csv").read_text() == ",".join(LONG_HEADER) + "\n"
    assert (tmp_path / "rs_vs_snis.csv").read_text().startswith("process,dsize,ft")


def test_sweep_tables_and_plots(tmp_path):
    reports = sweep(expand_grid(tiny().flat() | {"ar": TINY_AR, "training1": {"max_epochs": 5}, "distill": {}},
                                {"treg": ["rs", "snis"]}), tmp_path)
    assert [r.status for r in reports] == ["ok", "ok"]
    rows = read_long_csv(tmp_path / "sweep.csv")
    assert {r["treg"] for r in rows} == {"rs", "snis"}
    ratios = (tmp_path / "rs_vs_snis.csv").read_text().splitlines()
    assert len(ratios) == 2
    assert (tmp_path / "ce_pure_1001111_rs_two_stage.svg").exists()


def test_plots_from_csv_only(tmp_path):
    rows = [{"run_id": i, "motif": "1011", "n": 10, "process": "pure", "dsize": d, "ft": "1001111",
             "treg": "rs", "mode": "two_stage", "seed": 0, "metric": m, "value": v}
            for i, d in enumerate((500, 1000)) for m, v in (("ce_r", 0.5), ("ce_pi", 0.47), ("mf_pi", 0.9))]
    write_long_csv(tmp_path / "s.csv", rows)
    paths = plot_sweep(tmp_path / "s.csv", tmp_path)
    assert [p.name for p in paths] == ["ce_pure_1001111_rs_two_stage.svg"]
    first = paths[0].read_bytes()
    plot_sweep(tmp_path / "s.csv", tmp_path)
    assert paths[0].read_bytes() == first


def cli_flags():
    return ["--motif", "1011", "--n", "10", "--dsize", "200", "--test-size", "200", "--ds-size", "500"]


def test_cli_pipeline(tmp_path, capsys):
    d = tmp_path / "data"
    assert main(["gen-data", *cli_flags(), "--out", str(d)]) == 0
    assert json.loads(capsys.readouterr().out)["D"] == 200
    ar = ["--hidden-dim", "8", "--max-epochs", "2", "--patience", "2"]
    assert main(["train-ar", "--train", str(d / "D.txt"), "--val", str(d / "V.txt"),
                 "--out", str(tmp_path / "r.npz"), *ar]) == 0
    capsys.readouterr()
    t1 = tmp_path / "t1.json"
    t1.write_text(json.dumps({"max_epochs": 3}))
    assert main(["train-gam", "--r", str(tmp_path / "r.npz"), "--train", str(d / "D.txt"),
                 "--val", str(d / "V.txt"), "--motif", "1011", "--t1-config", str(t1),
                 "--log", str(tmp_path / "log.csv"), "--out", str(tmp_path / "gam.json")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert list(out["lambda"]) == ["m", "d0", "d1", "d2", "d3"]
    assert (tmp_path / "log.csv").read_text().startswith("epoch")
    assert main(["distill", "--gam", str(tmp_path / "gam.json"), "--ds-size", "300",
                 "--out", str(tmp_path / "pi"), *ar]) == 0
    capsys.readouterr()
    assert len(pfsa.read_dataset(tmp_path / "pi" / "distilled_train.txt")) == 270
    assert main(["eval", "--model", str(tmp_path / "pi" / "pi.npz"), "--test", str(d / "T.txt"),
                 "--motif", "1011", "--samples", "100"]) == 0
    ev = json.loads(capsys.readouterr().out)
    assert ev["cross_entropy"] > 0 and 0 <= ev["motif_frequency"] <= 1
    assert ArModel.load(tmp_path / "pi" / "pi.npz").n == 10


def test_cli_errors(tmp_path, capsys):
    assert main(["eval", "--model", str(tmp_path / "missing.npz"), "--test", "x"]) == 2
    assert main(["gen-data", "--process", "pure", "--ft", "11", "--out", str(tmp_path)]) == 2
    gam = tmp_path / "none.json"
    assert main(["distill", "--gam", str(gam), "--out", str(tmp_path)]) == 2
    assert "error:" in capsys.readouterr().err


def test_cli_run_and_sweep(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"ar": TINY_AR, "training1": {"max_epochs": 3}}))
    assert main(["run", "--config", str(cfg), *cli_flags(), "--out", str(tmp_path / "run")]) == 0
    assert json.loads(capsys.readouterr().out)["status"] == "ok"
    grid = tmp_path / "grid.json"
    base = {"motif": "1011", "n": 10, "dsize": 200, "test_size": 200, "ds_size": 300,
            "ar": TINY_AR, "training1": {"max_epochs": 3}}
    grid.write_text(json.dumps({"base": base, "grid": {"mode": ["two_stage", "cyclic"]}}))
    assert main(["sweep", "--config", str(grid), "--out", str(tmp_path / "sw"), "--no-plot"]) == 0
    assert json.loads(capsys.readouterr().out) == {"runs": 2, "failed": []}
    assert len((tmp_path / "sw" / "two_stage_vs_cyclic.csv").read_text().splitlines()) == 2
    assert not list((tmp_path / "sw").glob("*.svg"))
