import math

import numpy as np
import pytest

from gelboot import rng as rngmod
from gelboot.dgp import DgpSpec, _chi2_1, _std_normal, innovations, moment_ratios, pseudo_true, simulate, truncated
from gelboot.errors import InputError
from gelboot.models import PanelMomentModel, evaluate


def test_c1_innovation_variance():
    nu = innovations("C1", (100_000, 1), rngmod.stream(1))
    assert abs(nu.var() - 1.0) < 0.02
    assert abs(nu.mean()) < 0.02


def test_m1_truncation_bounds():
    rng = rngmod.stream(2)
    eta = truncated(_std_normal, -4.0, 4.0, 50_000, rng)
    base = truncated(_chi2_1, 0.0, 16.0, 50_000, rng)
    assert eta.min() >= -4 and eta.max() <= 4
    assert base.min() >= 0 and base.max() <= 16
    nu = innovations("M1", (2000, 50), rng)
    assert nu.min() >= -1 / math.sqrt(2) and nu.max() <= 15 / math.sqrt(2)
    nu2 = innovations("M2", (2000, 50), rng)
    assert nu2.min() >= -math.sqrt(math.e) and nu2.max() <= math.exp(3.5)


@pytest.mark.parametrize("name", ["C1", "C2", "M1", "M2"])
def test_simulate_deterministic(name):
    spec = DgpSpec(name, 4, 300)
    a = simulate(spec, rngmod.stream(5, 1))
    b = simulate(spec, rngmod.stream(5, 1))
    c = simulate(spec, rngmod.stream(5, 2))
    assert a.observations.tobytes() == b.observations.tobytes()
    assert a.observations.tobytes() != c.observations.tobytes()
    assert a.columns == ("y_1", "y_2", "y_3", "y_4")
    assert np.all(np.isfinite(a.observations))


def test_spec_validation():
    assert DgpSpec("C-1", 4, 10).name == "C1"
    with pytest.raises(InputError):
        DgpSpec("X9", 4, 10)
    with pytest.raises(InputError):
        DgpSpec("C1", 4, 10, rho0=1.0)
    with pytest.raises(InputError):
        DgpSpec("M1", 4, 10, rho1=0.9, rho2=0.2)
    with pytest.raises(InputError):
        DgpSpec("C1", 2, 10)


def test_anchor_closed_forms():
    spec = DgpSpec("M1", 4, 10)
    assert spec.rho_a == pytest.approx(0.4, abs=1e-15)
    assert spec.rho_b == pytest.approx(1.1, abs=1e-15)


def test_correct_specification_moments_centered():
    data = simulate(DgpSpec("C1", 4, 100_000), rngmod.stream(8, 0))
    g = evaluate(PanelMomentModel(4), data, np.array([0.4])).g
    z = g.mean(axis=0) / (g.std(axis=0) / math.sqrt(data.n))
    assert np.all(np.abs(z) < 3)


def test_misspecified_ratios_split_between_anchors():
    spec = DgpSpec("M1", 4, 200_000)
    ratios = moment_ratios(simulate(spec, rngmod.stream(9, 0)), 4)
    # four moments identify rho_a, the remaining one something near rho_b
    near_a = [r for r in ratios if abs(r - spec.rho_a) < 0.06]
    assert len(near_a) == 4
    assert ratios[2] > 0.8


def test_no_second_lag_recovers_first_lag():
    spec = DgpSpec("M1", 4, 30_000, rho2=0.0, seed=17)
    res = pseudo_true(spec, kinds=("EL", "GMM"))
    for v in res.values.values():
        assert abs(v - 0.6) < 0.02
    assert res.rho_a == res.rho_b == pytest.approx(0.6)


def test_pseudo_true_cache(tmp_path):
    spec = DgpSpec("M1", 4, 10, seed=23)
    a = pseudo_true(spec, kinds="GMM", n=3000, cache_dir=tmp_path)
    files = list(tmp_path.glob("*.json"))
    assert len(files) == 1
    from gelboot import dgp

    dgp._CACHE.clear()
    b = pseudo_true(spec, kinds="GMM", n=3000, cache_dir=tmp_path)
    assert a.value == b.value
    assert a.to_dict()["n_used"] == 3000
