import csv
import sys

import numpy as np
import pytest

from mlmc_diffusion import cli


def write(tmp_path, body, name="run.ini"):
    p = tmp_path / name
    p.write_text("[run]\n" + body)
    return p


def read_csv(path):
    lines = path.read_text().splitlines()
    return lines[0], list(csv.DictReader(lines[1:]))


BASE = {"benchmark": "gauss-4d", "T0": "4", "L_max": "6", "n_screen": "300", "n0": "50"}


def body(**over):
    return "".join(f"{k} = {v}\n" for k, v in {**BASE, **over}.items())


def test_bad_configs_exit_1(tmp_path, capsys):
    cases = ["benchmark = gauss-4d\nbogus = 1\n",
             "benchmark = gauss-4d\neps = 0.01, 0.03\n",
             "benchmark = gauss-4d\neps = -1\n",
             "benchmark = nowhere\n",
             "benchmark = gauss-4d\nmethod = rk4\n",
             "benchmark = gauss-4d\nl0 = 9\nL_max = 4\n",
             "benchmark = gauss-4d\ndeterministic = maybe\n",
             "benchmark = gauss-4d\nscore = external\n",
             "eps = 0.1\n"]
    for k, body in enumerate(cases):
        assert cli.main(["run", "--config", str(write(tmp_path, body, f"c{k}.ini"))]) == cli.EXIT_CONFIG, body
    assert cli.main(["run", "--config", str(tmp_path / "missing.ini")]) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_missing_section(tmp_path):
    p = tmp_path / "x.ini"
    p.write_text("[other]\na = 1\n")
    with pytest.raises(cli.ConfigError, match=r"\[run\]"):
        cli.load_config(p)


def test_rates_outputs_and_worker_invariance(tmp_path, capsys):
    cfg = write(tmp_path, body(l0=1))
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["rates", "--config", str(cfg), "--out", str(a), "--workers", "1"]) == 0
    assert cli.main(["rates", "--config", str(cfg), "--out", str(b), "--workers", "2"]) == 0
    for name in ("giles_variance.csv", "giles_mean.csv", "rates.csv", "allocation.csv", "giles.svg"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    header, rows = read_csv(a / "giles_variance.csv")
    assert header.startswith("# config_sha256=") and header.endswith("seed=0")
    assert [int(r["level"]) for r in rows] == [1, 2, 3, 4, 5, 6]
    _, rates = read_csv(a / "rates.csv")
    assert float(rates[0]["beta"]) > 0
    v = [float(r["V_diff"]) for r in rows[1:]]
    assert all(x > y for x, y in zip(v, v[1:]))
    assert (a / "giles.svg").read_text().startswith("<svg")
    assert "alpha=" in capsys.readouterr().out


def test_rates_degenerate_exit_2(tmp_path):
    cfg = write(tmp_path, "benchmark = gauss-4d\nT0 = 4\nl0 = 3\nL_max = 3\nn_screen = 20\n")
    assert cli.main(["rates", "--config", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_DEGENERATE
    assert (tmp_path / "o" / "giles_variance.csv").exists()


def test_run_outputs(tmp_path):
    cfg = write(tmp_path, body(L_max=10, eps="1.0, 0.1, 0.05, 0.03"))
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    header, rows = read_csv(tmp_path / "o" / "result.csv")
    assert len(rows) == 4
    assert rows[0]["L_final"] == "2" and rows[0]["N_3"] == ""
    for r in rows:
        assert r["converged"] == "1"
        ns = [int(r[f"N_{l}"]) for l in range(int(r["L_final"]) + 1)]
        assert ns == sorted(ns, reverse=True)
    assert float(rows[-1]["realised_error"]) < 3 * 0.03
    for k in range(4):
        assert (tmp_path / "o" / f"telemetry_{k}.csv").read_text().startswith(header)


def test_run_nonconvergence_exit_3(tmp_path, capsys):
    cfg = write(tmp_path, "benchmark = gauss-4d\nT0 = 1\nL_max = 3\nn0 = 20\neps = 0.001\n")
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_NONCONVERGED
    _, rows = read_csv(tmp_path / "o" / "result.csv")
    assert rows[0]["converged"] == "0"
    assert "did not converge" in capsys.readouterr().err


def test_seed_override_and_reproducibility(tmp_path):
    cfg = write(tmp_path, body(eps=0.1, L_max=8))
    outs = []
    for k, seed in enumerate(["3", "3", "4"]):
        o = tmp_path / f"o{k}"
        assert cli.main(["run", "--config", str(cfg), "--out", str(o), "--seed", seed]) == 0
        outs.append((o / "result.csv").read_bytes())
    assert outs[0] == outs[1] and outs[0] != outs[2]
    assert b"seed=3" in outs[0]


def test_digest_ignores_run_location(tmp_path):
    a = cli.load_config(write(tmp_path, body(workers=4, out="x"), "a.ini"), seed=1)
    b = cli.load_config(write(tmp_path, body() + "# comment\n", "b.ini"), seed=2)
    c = cli.load_config(write(tmp_path, body(n_screen=301), "c.ini"))
    assert a.digest == b.digest and a.digest != c.digest


def test_output_directory_precedence(tmp_path, monkeypatch):
    cfg = write(tmp_path, body(out="from-config"))
    monkeypatch.delenv(cli.OUT_ENV, raising=False)
    assert str(cli.load_config(cfg).out) == "from-config"
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert cli.load_config(cfg).out == tmp_path / "env"
    assert cli.load_config(cfg, out=str(tmp_path / "flag")).out == tmp_path / "flag"


def test_defaults_follow_benchmark(tmp_path):
    g = cli.load_config(write(tmp_path, "benchmark = gauss-4d\n", "g.ini"))
    m = cli.load_config(write(tmp_path, "benchmark = mix-2c-4d\n", "m.ini"))
    assert (g.T0, m.T0, g.M, g.L_max, g.n0, g.repeats) == (32, 8, 2, 12, 100, 20)
    assert g.eps == (0.01,) and g.debias == "divide"


def test_inline_problem(tmp_path):
    p = tmp_path / "inline.ini"
    p.write_text("""[run]
benchmark = inline
T0 = 8
L_max = 5
eps = 0.05
n0 = 50

[problem]
prior_mean = 0
prior_var = 1
A = 1
sigma = 1
y = 2
schedule = logit-linear
gamma_T = 1e-6
gamma_1 = 0.9997
truth = 1.5
""")
    assert cli.main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == 0
    _, rows = read_csv(tmp_path / "o" / "result.csv")
    assert abs(float(rows[0]["estimate_0"]) - 1.5) < 0.15


def test_compare_rows_and_single_repeat_warning(tmp_path):
    cfg = cli.load_config(write(tmp_path, body(eps=0.1, repeats=1, L_max=8)), out=str(tmp_path / "o"))
    with pytest.warns(UserWarning, match="noisy"):
        rows = cli.compare(cfg)
    assert rows[0].repeats == 1 and np.isnan(rows[0].mse_mlmc_se)
    cfg.repeats = 3
    assert cli.cmd_compare(cfg, cfg.make_sampler()) == 0
    _, rows = read_csv(tmp_path / "o" / "compare.csv")
    assert rows[0]["repeats"] == "3" and float(rows[0]["efficiency_ratio"]) > 0
    _, rows = read_csv(tmp_path / "o" / "mse_vs_cost.csv")
    assert [r["method"] for r in rows] == ["mlmc", "mc"]


def test_external_score_run(tmp_path):
    cmd = f"{sys.executable} -m mlmc_diffusion.score_server --benchmark gauss-4d --T0 4 --L 8"
    cfg = write(tmp_path, body(L_max=8, eps=0.2, score="external", score_command=cmd))
    ref = write(tmp_path, body(L_max=8, eps=0.2), "ref.ini")
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "ext")]) == 0
    assert cli.main(["run", "--config", str(ref), "--out", str(tmp_path / "ana")]) == 0
    _, a = read_csv(tmp_path / "ext" / "result.csv")
    _, b = read_csv(tmp_path / "ana" / "result.csv")
    assert a == b


def test_module_entry_point(tmp_path):
    import subprocess
    cfg = write(tmp_path, "benchmark = gauss-4d\nbad = 1\n")
    r = subprocess.run([sys.executable, "-m", "mlmc_diffusion", "run", "--config", str(cfg)],
                       capture_output=True, text=True)
    assert r.returncode == 1 and "unknown [run] keys" in r.stderr
