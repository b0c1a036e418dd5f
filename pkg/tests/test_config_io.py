import json
import os

import numpy as np
import pytest

from srecmfg import ArtifactError, ConfigError, RefusalError, base_scenario_config, solve_fixed_point
from srecmfg.config import builtin_config_path, config_digest, dump_config, load_config, parse_config
from srecmfg.io import (
    emit_failure,
    emit_solution,
    load_solution,
    read_csv,
    solution_files,
    update_manifest,
    verify_manifest,
    write_atomic,
)

from conftest import PENALTY_FREE_CFG

MINIMAL = """
[compliance]
T = 1
P = 1
R = 1
[class.1]
pi = 0.4
h = 0.2
sigma = 0.1
zeta = 1.75
gamma = 1.25
nu0 = 0.6
m0 = 0.1
[class.2]
pi = 0.6
h = 0.5
sigma = 0.15
zeta = 1.25
gamma = 1.75
nu0 = 0.2
m0 = 0.1
"""


# configuration files

def test_base_file_loads(base_config):
    cfg = base_config
    assert [c.pi for c in cfg.classes] == [0.25, 0.75]
    assert [c.gamma for c in cfg.classes] == [1.25, 1.75]
    assert [c.zeta for c in cfg.classes] == [1.75, 1.25]
    assert cfg.compliance.T == 1.0 and cfg.compliance.P == 1.0
    assert cfg.compliance.R == (1.0, 1.0) and cfg.compliance.delta == 0.05
    assert cfg.scheme.dt == 1 / 52
    assert cfg.run.seed == 1 and cfg.run.n_agents == 2000


def test_builtin_copy_matches_shipped_file(base_config):
    assert config_digest(load_config(builtin_config_path())) == config_digest(base_config)


def test_file_config_equals_programmatic_config(base_config):
    assert base_config.classes == base_scenario_config().classes
    assert base_config.compliance == base_scenario_config().compliance


def test_population_fractions_must_sum_to_one():
    text = MINIMAL.replace("pi = 0.4", "pi = 0.5")
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    msg = "\n".join(info.value.problems)
    assert "class.1" in msg and "class.2" in msg
    assert "normalised" in msg and "sum to 1" in msg


def test_step_must_divide_horizon():
    with pytest.raises(ConfigError) as info:
        parse_config(MINIMAL + "[scheme]\ndt = 0.3\n")
    assert any("dt" in p for p in info.value.problems)


@pytest.mark.parametrize(
    "extra",
    ["[scheme]\nomgea = 0.5\n", "[run]\nseeds = 3\n", "[extras]\na = 1\n"],
)
def test_unknown_keys_rejected(extra):
    with pytest.raises(ConfigError) as info:
        parse_config(MINIMAL + extra)
    assert any("unknown" in p for p in info.value.problems)


def test_every_problem_reported_at_once():
    text = MINIMAL.replace("sigma = 0.1", "sigma = -0.1").replace("gamma = 1.75", "gamma = 0")
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert len(info.value.problems) >= 2


def test_empty_scheme_section_records_defaults():
    cfg = parse_config(MINIMAL + "[scheme]\n")
    assert cfg.scheme.epsilon == 1e-4 and cfg.scheme.omega == 0.5 and cfg.scheme.quad_nodes == 41
    for key in ("scheme.epsilon", "scheme.omega", "scheme.quad_nodes", "scheme.dt"):
        assert key in cfg.defaults_applied


def test_scalar_R_applies_to_every_class():
    assert parse_config(MINIMAL).compliance.R == (1.0, 1.0)


def test_dump_round_trip(base_config):
    again = parse_config(dump_config(base_config))
    assert again.classes == base_config.classes
    assert again.compliance == base_config.compliance
    assert again.scheme == base_config.scheme
    assert dump_config(again) == dump_config(base_config)


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


# artifacts

def test_price_file(base_solution_dir):
    head, rows = read_csv(os.path.join(base_solution_dir, "price.csv"))
    assert len(rows) == 53
    t = np.array([float(r[0]) for r in rows])
    s = np.array([float(r[1]) for r in rows])
    np.testing.assert_allclose(t, np.arange(53) / 52, atol=1e-15)
    assert s.min() >= 0.36 and s.max() <= 0.42


def test_load_solution_round_trips_exactly(base_solution, base_solution_dir):
    sol = load_solution(base_solution_dir)
    np.testing.assert_array_equal(sol.price, base_solution.price)
    np.testing.assert_array_equal(sol.surface.y, base_solution.surface.y)
    np.testing.assert_array_equal(sol.flow.mean, base_solution.flow.mean)
    np.testing.assert_array_equal(sol.flow.var, base_solution.flow.var)
    np.testing.assert_array_equal(sol.g, base_solution.g)


def test_re_emission_byte_identical(base_solution, tmp_path):
    a = emit_solution(base_solution, tmp_path / "a")
    b = emit_solution(base_solution, tmp_path / "b")
    assert a == b
    for name in a:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_penalty_free_price_column_is_zero(tmp_path):
    sol = solve_fixed_point(load_config(PENALTY_FREE_CFG))
    emit_solution(sol, tmp_path)
    _, rows = read_csv(tmp_path / "price.csv")
    assert all(float(r[1]) == 0.0 for r in rows)


def test_manifest_detects_corruption(base_solution, base_config, tmp_path):
    sums = emit_solution(base_solution, tmp_path)
    update_manifest(tmp_path, base_config, "solve", sums, 1.0)
    assert verify_manifest(tmp_path) == []
    path = tmp_path / "surface.csv"
    data = bytearray(path.read_bytes())
    data[len(data) // 2] ^= 0x01
    path.write_bytes(bytes(data))
    assert verify_manifest(tmp_path) == ["surface.csv"]
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["timings"]["solve"] == 1.0 and "surface.csv" in man["files"]


def test_atomic_write_to_unwritable_directory(tmp_path):
    ro = tmp_path / "ro"
    ro.mkdir()
    os.chmod(ro, 0o500)
    try:
        if os.access(ro, os.W_OK):
            pytest.skip("running with privileges that ignore directory permissions")
        with pytest.raises(ArtifactError):
            write_atomic(ro, {"a.csv": "x\n", "b.csv": "y\n"})
        assert os.listdir(ro) == []
    finally:
        os.chmod(ro, 0o700)


def test_failed_write_leaves_no_partial_files(tmp_path, monkeypatch):
    import tempfile

    real = tempfile.mkstemp
    calls = []

    def flaky(*a, **kw):
        calls.append(1)
        if len(calls) == 2:
            raise PermissionError(13, "Permission denied")
        return real(*a, **kw)

    monkeypatch.setattr(tempfile, "mkstemp", flaky)
    with pytest.raises(ArtifactError):
        write_atomic(tmp_path, {"a.csv": "x\n", "b.csv": "y\n"})
    assert os.listdir(tmp_path) == []


def test_atomic_write_blocked_by_file(tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("not a directory")
    with pytest.raises(ArtifactError):
        write_atomic(blocker / "out", {"a.csv": "x\n"})


def test_unconverged_directory_is_refused(base_config, tmp_path):
    emit_failure(base_config, [0.3, 0.31, 0.32], tmp_path, "no fixed point", 0.25)
    diag = json.loads((tmp_path / "diagnostics.json").read_text())
    assert diag["converged"] is False
    with pytest.raises(RefusalError) as info:
        load_solution(tmp_path)
    assert "diagnostics.json" in str(info.value)


def test_solution_files_are_complete(base_solution):
    files = solution_files(base_solution)
    assert {"price.csv", "surface.csv", "flow.csv", "config.cfg", "diagnostics.json"} <= set(files)
    assert "z.csv" in solution_files(base_solution, with_z=True)
