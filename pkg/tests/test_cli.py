import json
import subprocess
import sys

import numpy as np
import pytest

from mobility_msm import blip, cli, counterfactual, data, msm, sensitivity, weights
from mobility_msm.simulate import BlipSpec, simulate_blip


@pytest.fixture
def states_csv(tmp_path):
    series = [simulate_blip(BlipSpec(seed=i, L1=4.0 + i), region=f"S{i}") for i in range(3)]
    p = tmp_path / "states.csv"
    data.write_csv(p, series)
    return p


def run(tmp_path, *args):
    out = tmp_path / "out"
    code = cli.main([*args, "--output-dir", str(out), "--jobs", "2"])
    return code, out


def test_fit_outputs_match_library(tmp_path, states_csv):
    code, out = run(tmp_path, "fit", "--input", str(states_csv), "--k", "auto", "--delta", "4")
    assert code == 0
    lib = tmp_path / "lib"
    lib.mkdir()
    for s in data.load_csv(states_csv):
        k = blip.select_k(s, cli.K_MAX, 4)
        f = msm.fit(s, weights.estimate_weights(s), k=k, delta=4)
        f.write_json(lib / "f.json")
        assert (out / f"{s.region_id}_fit.json").read_bytes() == (lib / "f.json").read_bytes()
        assert (out / f"{s.region_id}_weights.csv").exists()


def test_counterfactual_byte_equal_to_library(tmp_path, states_csv):
    code, out = run(tmp_path, "counterfactual", "--input", str(states_csv), "--scenario", "vigilant")
    assert code == 0
    (s,) = data.load_csv(states_csv)[:1]
    f = msm.fit(s, weights.estimate_weights(s), k=1)
    curve = counterfactual.counterfactual_curve(f, counterfactual.make_intervention(s, "vigilant"), observed=s.deaths)
    curve.write_csv(tmp_path / "lib.csv")
    assert (out / "S0_cf_vigilant.csv").read_bytes() == (tmp_path / "lib.csv").read_bytes()
    assert not (out / "S0_cf_early1.csv").exists()
    ex = json.loads((out / "S0_excess_vigilant.json").read_text())
    assert set(ex) == {"total", "total_lo", "total_hi", "relative", "relative_lo", "relative_hi"}


def test_sensitivity_and_population(tmp_path, states_csv):
    pop = tmp_path / "pop.csv"
    pop.write_text("region,population\nS0,1000000\nS1,200\nS2,5e6\n")
    code, out = run(tmp_path, "sensitivity", "--input", str(states_csv), "--gamma", "2", "--population", str(pop))
    assert code == 0
    rows = (out / "sensitivity.csv").read_text().splitlines()
    assert len(rows) == 4
    assert float(rows[1].split(",")[1]) == pytest.approx(np.log(1e6))
    s = data.load_csv(states_csv)[0]
    f = msm.fit(s, weights.estimate_weights(s))
    lo, hi = sensitivity.gamma_bounds(s, f.weights_used, gamma=2.0)
    assert float(rows[1].split(",")[4]) == pytest.approx(min(lo, f.beta), abs=1e-12)


def test_deconvolve_blip_markov_pooled(tmp_path, states_csv):
    for cmd in (["deconvolve", "--lambda", "0.1", "1"], ["blip", "--k", "2"], ["markov-check"], ["pooled"]):
        code, out = run(tmp_path, cmd[0], "--input", str(states_csv), *cmd[1:])
        assert code == 0, cmd
    assert (out / "S1_deconv_lambda0.1.csv").exists() and (out / "S1_deconv_lambda1_fit.json").exists()
    assert json.loads((out / "S2_blip.json").read_text())["k"] == 2
    assert len((out / "markov.csv").read_text().splitlines()) == 1 + 3 * 12
    pooled = json.loads((out / "pooled.json").read_text())
    expected = blip.fit_pooled(data.load_csv(states_csv), k=1)
    assert pooled["beta"] == expected.beta


def test_region_filter(tmp_path, states_csv):
    code, out = run(tmp_path, "fit", "--input", str(states_csv), "--region", "S1")
    assert code == 0
    assert sorted(p.name for p in out.glob("*_fit.json")) == ["S1_fit.json"]
    code, _ = run(tmp_path, "fit", "--input", str(states_csv), "--region", "ZZ")
    assert code == 3


def test_simulate_and_coverage(tmp_path):
    spec = tmp_path / "blip.json"
    spec.write_text(json.dumps({"model": "blip", "beta": -5.0}))
    code, out = run(tmp_path, "simulate", "--spec", str(spec), "--reps", "3", "--seed", "7")
    assert code == 0
    sims = data.load_csv(out / "simulated.csv")
    assert [s.region_id for s in sims] == ["sim001", "sim002", "sim003"]
    direct = simulate_blip(BlipSpec(beta=-5.0, seed=8))
    np.testing.assert_array_equal(sims[1].deaths, direct.deaths)
    code, out = run(tmp_path, "simulate", "--spec", str(spec), "--reps", "20", "--check", "coverage")
    assert code == 0
    rep = json.loads((out / "coverage.json").read_text())
    assert rep["n_reps"] + rep["n_failed"] == 20


def test_reruns_are_bit_identical(tmp_path, states_csv):
    outs = []
    for i in range(2):
        o = tmp_path / f"o{i}"
        assert cli.main(["sensitivity", "--input", str(states_csv), "--output-dir", str(o), "--seed", "3"]) == 0
        assert cli.main(["deconvolve", "--input", str(states_csv), "--output-dir", str(o)]) == 0
        outs.append({p.name: p.read_bytes() for p in o.iterdir()})
    assert outs[0] == outs[1]


@pytest.mark.parametrize("args", [
    ["fit"],
    ["fit", "--input", "x.csv", "--level", "1.5"],
    ["sensitivity", "--input", "x.csv", "--gamma", "0.5"],
    ["deconvolve", "--input", "x.csv", "--lambda", "-1"],
    ["markov-check", "--input", "x.csv", "--k", "auto"],
    ["fit", "--input", "x.csv", "--k", "two"],
    ["frobnicate"],
])
def test_config_errors_exit_2(tmp_path, args):
    with pytest.raises(SystemExit) as info:
        cli.main([*args, "--output-dir", str(tmp_path)])
    assert info.value.code == 2


def test_data_errors_exit_3(tmp_path):
    assert cli.main(["fit", "--input", str(tmp_path / "missing.csv"), "--output-dir", str(tmp_path)]) == 3
    bad = tmp_path / "bad.csv"
    bad.write_text("region,week,deaths\nA,1,2\n")
    assert cli.main(["fit", "--input", str(bad), "--output-dir", str(tmp_path)]) == 3


def test_numeric_failure_exits_4(tmp_path):
    spec = tmp_path / "w.json"
    spec.write_text(json.dumps({"model": "working", "T": 300, "c": 5.0}))
    assert cli.main(["simulate", "--spec", str(spec), "--output-dir", str(tmp_path)]) == 4


def test_region_failure_reported_in_status_table(tmp_path, capsys):
    # one region with constant mobility cannot be weighted: a numerical failure
    good = simulate_blip(BlipSpec(seed=1), region="OK")
    flat = data.RegionSeries.from_raw("FLAT", np.arange(1, 21), np.full(20, 0.3))
    p = tmp_path / "mix.csv"
    data.write_csv(p, [good, flat])
    code, out = run(tmp_path, "fit", "--input", str(p))
    assert code == 4
    err = capsys.readouterr().err
    assert "FLAT" in err and "RankError" in err
    assert (out / "OK_fit.json").exists()


def test_module_entry_point(tmp_path, states_csv):
    r = subprocess.run([sys.executable, "-m", "mobility_msm", "blip", "--input", str(states_csv),
                        "--output-dir", str(tmp_path)], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert "status" in r.stderr
