import json
import math

import numpy as np
import pytest

import invarnet


def test_verify_passes():
    checks = invarnet.verify(seed=0, instances=3, worlds=3)
    assert checks
    assert all(c["passed"] for c in checks), checks


def test_win_win_oracle():
    r = invarnet.oracle_search(informative=True, codes=2, gamma=1.0, seed=3)
    assert r["tables"] == 256
    assert r["H_y_given_h"] <= 1e-12
    assert r["J"] == pytest.approx(-r["H_s"], abs=1e-12)


def test_synthetic_arrays():
    x, s, y = invarnet.synthetic(n=100, d=4, seed=1)
    assert isinstance(x, np.ndarray) and x.shape == (100, 4)
    assert len(s) == len(y) == 100
    x2, _, _ = invarnet.synthetic(n=100, d=4, seed=1)
    assert np.array_equal(x, x2)


def test_run_synthetic_is_deterministic():
    a = invarnet.run_synthetic(n=400, d=5, epochs=2, seed=9)
    b = invarnet.run_synthetic(n=400, d=5, epochs=2, seed=9)
    assert a == b
    assert 0.0 <= a["probe_acc_s"] <= 1.0
    assert math.isfinite(a["objective"])


def test_biased_category_instance():
    pred, y, s = [], [], []
    for yy, ss, count, correct in [(0, 0, 90, 90), (0, 1, 10, 6), (1, 0, 20, 10), (1, 1, 80, 80)]:
        for i in range(count):
            y.append(yy)
            s.append(ss)
            pred.append(yy if i < correct else 1 - yy)
    assert invarnet.biased_category_accuracy(pred, y, s, 2, 2) == 0.55


def test_errors_map_to_python():
    with pytest.raises(invarnet.ConfigError):
        invarnet.oracle_search(scenario="confounded", dependence=2.0)
    with pytest.raises(invarnet.GuardError):
        invarnet.oracle_search(nx=12, codes=4)


def test_cli_entry(tmp_path):
    code, out, _ = invarnet.cli(["oracle", "--codes", "2", "--seed", "1", "--out", str(tmp_path)])
    assert code == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert "J" in summary
    code, _, _ = invarnet.cli(["train"])
    assert code == 2
