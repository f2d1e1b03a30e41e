import json
import math

import numpy as np
import pytest
from scipy import integrate

from fga._validation import ConfigError
from fga.cli import main
from fga.config import config_keys, load_config, parse_config
from fga.experiments import (
    angular_factor,
    counterexample_norm,
    fit_slope,
    run_convergence,
    run_counterexample,
)
from fga.systems import Acoustic2D

FAST_CONVERGENCE = """
experiment = convergence
eps = 1/16, 1/32, 1/64
T = 0.25
dt = 0.05
box = 4
points_per_wavelength = 32
"""


# -- slope fitting ------------------------------------------------------------------


def test_fit_slope_exact_power_law():
    eps = np.array([1e-1, 1e-2, 1e-3])
    slope, icpt = fit_slope(eps, 3.0 * eps**1.5)
    assert slope == pytest.approx(1.5) and icpt == pytest.approx(math.log(3.0))


def test_fit_slope_is_scale_invariant():
    rng = np.random.default_rng(0)
    eps = np.array([1 / 64, 1 / 128, 1 / 256, 1 / 512])
    vals = eps * np.exp(0.1 * rng.standard_normal(4))
    assert fit_slope(eps, vals)[0] == pytest.approx(fit_slope(eps, 17.0 * vals)[0], abs=1e-12)


@pytest.mark.parametrize("eps, vals", [([0.1], [1.0]), ([0.1, 0.01], [1.0, 0.1]), ([0.1, 0.01, 0.001], [1.0, 0.0, 0.1])])
def test_fit_slope_rejects_bad_input(eps, vals):
    with pytest.raises(ConfigError):
        fit_slope(eps, vals)


def test_single_eps_convergence_is_a_fit_error():
    cfg = parse_config("experiment = convergence\neps = 1/16\nT = 0.25\ndt = 0.05\nbox = 4\npoints_per_wavelength = 32")
    with pytest.raises(ConfigError):
        run_convergence(cfg)


# -- counterexample -------------------------------------------------------------------


def test_angular_factor_from_eigenvectors():
    # angular mean of |L_+^T e_1|^2 |R_+|^2 = p1^2/(2|p|^2) over the circle
    assert angular_factor(Acoustic2D(), Acoustic2D.PLUS) == pytest.approx(np.pi / 2, rel=1e-12)


def test_counterexample_norm_against_direct_quadrature():
    # independent 2-D quadrature of |sigma/2|^2 |F u0|^2 p1^2/(2|p|^2) over the momentum plane
    eps, t = 0.05, 1.0
    s = eps * (1 + eps)

    def integrand(r, th):
        sigma2 = abs(4 - 2j * t / r)
        return 0.25 * sigma2 * np.exp(-r * r / s) / (np.pi * s) * 0.5 * np.cos(th) ** 2 * r * np.pi

    # the q-integral of the FBI density contributes pi(1+eps)/(pi(1+eps)) = 1 after normalization
    direct, _ = integrate.dblquad(integrand, 0, 2 * np.pi, 0, 20 * np.sqrt(s))
    val = counterexample_norm(eps, t, np.pi / 2)
    assert val**2 == pytest.approx(direct, rel=1e-8)


def test_counterexample_at_start_matches_closed_form():
    # t = 0: |sigma| = 2, norm^2 = (pi/2)/(eps(1+eps)) int_0^inf r exp(-r^2/(eps(1+eps))) dr = pi/4
    for eps in (1e-2, 1e-4):
        assert counterexample_norm(eps, 0.0, np.pi / 2) == pytest.approx(np.sqrt(np.pi) / 2, rel=1e-10)


def test_counterexample_study():
    res = run_counterexample(load_config("configs/counterexample.conf"))
    assert res.passed and -0.35 <= res.slope <= -0.15
    assert res.notes["u0_norm"] == pytest.approx(np.sqrt(np.pi))
    vals = [r["value"] for r in res.rows]
    assert vals[0] < vals[1] < vals[2]


# -- config parsing -------------------------------------------------------------------------


def test_parse_config_values():
    cfg = parse_config("experiment = convergence  # study\neps = 1/64, 1/128, 1/256\nK = 2\ntiming = yes\n")
    assert cfg.eps == (1 / 64, 1 / 128, 1 / 256) and cfg.K == 2 and cfg.timing
    assert cfg.system == "twobranch1d"
    ce = parse_config("experiment = counterexample")
    assert ce.system == "acoustic2d" and ce.eps == (1e-2, 1e-3, 1e-4)


@pytest.mark.parametrize(
    "text",
    [
        "experiment = convergence\nepsilon = 0.1",
        "experiment = convergence\neps = 1/128, 1/64, 1/256",
        "experiment = convergence\nK = 3",
        "experiment = convergence\ndelta = -1",
        "experiment = convergence\neps = 1/64\neps = 1/32",
        "experiment = convergence\neps 1/64",
        "experiment = sweep",
        "eps = 1/64",
        "experiment = convergence\ntiming = maybe",
    ],
)
def test_parse_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_config_reference_lists_every_key():
    doc = open("docs/config.md").read()
    for key in config_keys():
        assert f"`{key}`" in doc


# -- command line ---------------------------------------------------------------------------


def test_cli_empty_config_is_usage_error(tmp_path, capsys):
    path = tmp_path / "empty.conf"
    path.write_text("# nothing\n\n")
    assert main(["roundtrip", "--config", str(path), "--out", str(tmp_path)]) == 2
    assert "usage" in capsys.readouterr().err


def test_cli_missing_config_is_usage_error(tmp_path):
    assert main(["roundtrip", "--config", str(tmp_path / "absent.conf")]) == 2


def test_cli_unknown_subcommand():
    with pytest.raises(SystemExit) as exc:
        main(["plot", "--config", "x"])
    assert exc.value.code == 2


def test_cli_experiment_mismatch(tmp_path):
    path = tmp_path / "c.conf"
    path.write_text("experiment = counterexample\n")
    assert main(["roundtrip", "--config", str(path), "--out", str(tmp_path)]) == 2


def test_cli_counterexample_outputs(tmp_path):
    assert main(["counterexample", "--config", "configs/counterexample.conf", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "results.csv").read_text().splitlines()
    assert lines[0] == "eps,value,runtime_s,packets"
    assert len(lines) == 4
    summary = json.loads((tmp_path / "summary.jsonl").read_text())
    assert summary["passed"] and summary["experiment"] == "counterexample"


def test_cli_coarse_grid_fails(tmp_path):
    assert main(["roundtrip", "--config", "configs/roundtrip_coarse.conf", "--out", str(tmp_path)]) == 1
    text = (tmp_path / "results.csv").read_text()
    assert "ResolutionError" in text


def test_cli_roundtrip_passes(tmp_path):
    cfg = tmp_path / "rt.conf"
    cfg.write_text("experiment = roundtrip\neps = 1/32, 1/64, 1/128\n")
    assert main(["roundtrip", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "results.csv").read_text().splitlines()[1:]
    assert len(rows) == 6 and all(",True," in r for r in rows)


def test_cli_variable_speed_convergence_is_config_error(tmp_path):
    cfg = tmp_path / "c.conf"
    cfg.write_text(FAST_CONVERGENCE + "amplitude = 0.3\n")
    assert main(["convergence", "--config", str(cfg), "--out", str(tmp_path)]) == 1


def test_cli_convergence_is_deterministic(tmp_path):
    cfg = tmp_path / "c.conf"
    cfg.write_text(FAST_CONVERGENCE)
    outs = []
    for run in ("a", "b"):
        main(["convergence", "--config", str(cfg), "--out", str(tmp_path / run)])
        outs.append(((tmp_path / run / "results.csv").read_bytes(), (tmp_path / run / "summary.jsonl").read_bytes()))
    assert outs[0] == outs[1]
    header, *rows = outs[0][0].decode().splitlines()
    assert header == "eps,value,runtime_s,packets" and len(rows) == 3
    assert all(r.split(",")[2] == "0.0" for r in rows)


def test_cli_thread_cap(tmp_path, monkeypatch):
    monkeypatch.setenv("FGA_THREADS", "1")
    assert main(["counterexample", "--config", "configs/counterexample.conf", "--out", str(tmp_path)]) == 0
