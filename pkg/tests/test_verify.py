"""Randomized equivalence sweep plumbing."""

import numpy as np

from templateconv.verify import check_one, draw_config, equivalence_sweep


def test_draw_config_stays_in_advertised_ranges():
    rng = np.random.default_rng(0)
    for _ in range(100):
        cfg = draw_config(rng)
        assert cfg["k"] in (1, 3, 5)
        assert cfg["groups"] in (1, 2, 4)
        assert cfg["stride"] in (1, 2)
        assert cfg["padding"] in (0, 1, 2)
        assert cfg["c_in"] % cfg["groups"] == 0
        assert cfg["c_in"] // cfg["groups"] <= 32
        assert 1 <= cfg["n_out"] <= 64
        assert 1 <= cfg["m"] <= cfg["n_out"]
        assert cfg["side"] >= max(1, cfg["k"] - 2 * cfg["padding"])


def test_check_one_is_deterministic():
    a = check_one(7)
    b = check_one(7)
    assert a.deviation == b.deviation
    assert a.config == b.config


def test_small_sweep_passes():
    ok, results = equivalence_sweep(n_configs=10, seed=3)
    assert ok
    assert len(results) == 10
    assert max(r.deviation for r in results) <= 1e-9


def test_injected_fault_is_detected():
    ok, results = equivalence_sweep(n_configs=3, seed=0, inject_fault=True)
    assert not ok
    assert results[0].deviation > 1e-9
