import pytest

from chmhd import config as C

MINIMAL = """
[domain]
nx = 8
ny = 8

[experiment]
kind = "converge"
"""

LORENTZ = """
[domain]
y1 = 1.5
nx = 64
ny = 96

[params]
lam = 5.0
sigma1 = 1000.0
sigma2 = 1000.0
mu = 0.001

[experiment]
kind = "bubble"
"""


def test_minimal_converge_config():
    cfg = C.parse_config(MINIMAL)
    assert cfg.kind == "converge"
    assert cfg.experiment["levels"] == [8, 16, 32]
    assert cfg.experiment["t_final"] == 0.1
    assert cfg.experiment["density"] == "both"
    assert cfg.solver["newton_tol"] == 1e-10 and cfg.solver["newton_max"] == 20
    assert cfg.output["table_csv"] == "convergence.csv"
    doc = cfg.to_dict()
    assert set(doc) == set(C.SCHEMA)
    assert all(set(doc[s]) == set(C.SCHEMA[s]) for s in doc)


def test_lorentz_bubble_config():
    cfg = C.parse_config(LORENTZ)
    P = cfg.params
    assert (P.lam, P.sigma1, P.sigma2, P.mu) == (5.0, 1000.0, 1000.0, 0.001)
    assert (P.rho1, P.rho2, P.m1, P.epsilon) == (9.0, 1.0, 1e-4, 0.01)
    assert P.gravity == (0.0, -10.0)
    assert cfg.rect.y1 == 1.5 and cfg.dt == 0.001 and cfg.t_end == 1.0


def test_spinodal_defaults():
    cfg = C.build({"experiment": {"kind": "spinodal"}})
    assert (cfg.params.gamma, cfg.params.epsilon) == (0.01, 0.01)
    assert cfg.params.rho2 / cfg.params.rho1 == pytest.approx(1e-3)
    assert cfg.experiment["snapshot_times"] == [0.0001, 0.05, 0.2, 1.0]


@pytest.mark.parametrize("text,match", [
    ("[params]\nepsilon = -0.01\n[experiment]\nkind = 'converge'", "epsilon"),
    ("[experiment]\nkind = 'converge'\nbogus = 1", "unknown key experiment.bogus"),
    ("[nowhere]\nx = 1\n[experiment]\nkind = 'converge'", r"unknown section \[nowhere\]"),
    ("[domain]\nnx = 'eight'\n[experiment]\nkind = 'converge'", "domain.nx: expected int"),
    ("[domain]\nnx = 8", "missing required key experiment.kind"),
    ("[experiment]\nkind = 'tornado'", "unknown kind"),
    ("[time]\ndt = 0\n[experiment]\nkind = 'converge'", "time.dt must be positive"),
    ("[solver]\nextrapolate = 1\n[experiment]\nkind = 'bubble'", "solver.extrapolate: expected bool"),
    ("[solver]\nnewton_max = true\n[experiment]\nkind = 'bubble'", "solver.newton_max: expected int"),
    ("[params]\ngravity = [0, 1, 2]\n[experiment]\nkind = 'bubble'", "params.gravity"),
    ("[experiment]\nkind = 'converge'\nlevels = [8, 0]", "experiment.levels"),
    ("[experiment]\nkind = 'custom'\ninitial = 'blob'", "experiment.initial"),
    ("[experiment]\nkind = 'converge'\ndensity = 'heavy'", "experiment.density"),
    ("[experiment\nkind = 'converge'", "TOML syntax error"),
])
def test_rejections_name_the_key(text, match):
    with pytest.raises(C.ConfigError, match=match):
        C.parse_config(text)


def test_integer_accepted_for_float():
    cfg = C.parse_config("[time]\ndt = 1\n[experiment]\nkind = 'spinodal'")
    assert cfg.dt == 1.0 and isinstance(cfg.dt, float)


def test_overrides():
    cfg = C.parse_config(MINIMAL, ["params.rho2=0.001", "experiment.levels=[4, 8]",
                                   "output.directory=results/run1", "solver.extrapolate=true"])
    assert cfg.params.rho2 == 0.001
    assert cfg.experiment["levels"] == [4, 8]
    assert cfg.output["directory"] == "results/run1"
    assert cfg.solver["extrapolate"] is True
    for bad in ("params.rho2", "rho2=1", "params.nothing=1"):
        with pytest.raises(C.ConfigError):
            C.parse_config(MINIMAL, [bad])


def test_load_config_missing_file(tmp_path):
    with pytest.raises(C.ConfigError, match="cannot read config"):
        C.load_config(tmp_path / "absent.toml")
    p = tmp_path / "c.toml"
    p.write_text(MINIMAL)
    assert C.load_config(p).kind == "converge"
