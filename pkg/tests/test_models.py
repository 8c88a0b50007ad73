import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gelboot.errors import DomainError, InputError
from gelboot.models import (
    Dataset,
    FunctionMomentModel,
    LinearIVModel,
    MatchingMomentModel,
    PanelMomentModel,
    evaluate,
    finite_diff_check,
    load_csv,
    model_from_descriptor,
    write_csv,
)

from conftest import QuadraticModel, exp_regression_data, iv_data


def test_panel_t4_has_five_moments():
    assert PanelMomentModel(4).dims.l_g == 5


@pytest.mark.parametrize("T", range(3, 11))
def test_panel_moment_count_formula(T):
    m = PanelMomentModel(T)
    assert m.dims.l_g == (T + 1) * (T - 2) // 2 == PanelMomentModel.moment_count(T)
    assert len(m.dif_index) == (T - 1) * (T - 2) // 2
    assert m.sys_index == list(range(3, T + 1))


def test_panel_moment_ordering_t4():
    m = PanelMomentModel(4)
    assert m.dif_index == [(3, 2), (4, 2), (4, 3)]
    assert m.sys_index == [3, 4]


def test_panel_moments_by_hand():
    y = np.array([[1.0, 2.0, 4.0, 7.0]])
    data = Dataset(y)
    rho = 0.3
    g = evaluate(PanelMomentModel(4), data, [rho]).g[0]
    dy = np.diff(y[0])  # dy2, dy3, dy4
    expected = [
        y[0, 0] * (dy[1] - rho * dy[0]),  # t=3, s=2: y1
        y[0, 1] * (dy[2] - rho * dy[1]),  # t=4, s=2: y2
        y[0, 0] * (dy[2] - rho * dy[1]),  # t=4, s=3: y1
        dy[0] * (y[0, 2] - rho * y[0, 1]),  # SYS t=3
        dy[1] * (y[0, 3] - rho * y[0, 2]),  # SYS t=4
    ]
    np.testing.assert_allclose(g, expected, rtol=0, atol=1e-14)


def test_panel_zero_row_gives_zero_moments():
    g = evaluate(PanelMomentModel(4), Dataset(np.zeros((1, 4))), [0.7]).g
    assert np.array_equal(g, np.zeros((1, 5)))


def test_linear_models_have_zero_second_derivative(rng):
    model, data = iv_data(rng)
    ev = evaluate(model, data, [0.1, 0.2], order=2)
    assert ev.G2.shape == (data.n, model.dims.l_g, 2, 2)
    assert not np.any(ev.G2)
    ev = evaluate(PanelMomentModel(5), Dataset(rng.normal(size=(20, 5))), [0.4], order=2)
    assert not np.any(ev.G2)


def test_order_controls_returned_arrays(c1_panel, panel_model):
    assert evaluate(panel_model, c1_panel, [0.4]).G is None
    ev1 = evaluate(panel_model, c1_panel, [0.4], order=1)
    assert ev1.G is not None and ev1.G2 is None
    assert evaluate(panel_model, c1_panel, [0.4], order=2).G2 is not None


def test_g2_flat_layout_is_moment_a_b_row_major(rng):
    model = QuadraticModel(2, 3)
    data = exp_regression_data(rng, 5, 2, 3)
    ev = evaluate(model, data, [0.1, -0.2], order=2)
    flat = ev.G2_flat
    assert flat.shape == (5, 3 * 2 * 2)
    for j in range(3):
        for a in range(2):
            for b in range(2):
                assert flat[2, j * 4 + a * 2 + b] == ev.G2[2, j, a, b]
    assert np.array_equal(ev.G_flat[1].reshape(3, 2), ev.G[1])


def test_finite_diff_panel(rng, c1_panel, panel_model):
    for _ in range(10):
        assert finite_diff_check(panel_model, c1_panel, rng.uniform(-1, 1, 1), 1e-6) < 1e-5


def test_finite_diff_linear_exact(rng):
    model, data = iv_data(rng)
    assert finite_diff_check(model, data, rng.normal(size=2), 1e-6) < 1e-10


def test_finite_diff_matching(rng):
    X = rng.normal(size=(100, 3))
    model = MatchingMomentModel(0, [-1, 1, 2], [(1, 1), (0, 2)], [1.0, 0.1])
    assert model.dims.l_g == 3 + 2
    for _ in range(10):
        assert finite_diff_check(model, Dataset(X), rng.normal(size=3), 1e-6) < 1e-5


def test_finite_diff_nonlinear(rng):
    model = QuadraticModel(2, 4)
    data = exp_regression_data(rng, 60, 2, 4)
    for _ in range(10):
        assert finite_diff_check(model, data, rng.normal(scale=0.5, size=2), 1e-6) < 1e-5


def test_fd_lifting_matches_analytic_hessian(rng):
    base = QuadraticModel(2, 3)
    lifted = FunctionMomentModel(2, 3, base._g, base._G)
    assert lifted.order == 1 and lifted.fd_hessian
    data = exp_regression_data(rng, 30, 2, 3)
    th = np.array([0.3, -0.1])
    a = evaluate(base, data, th, order=2).G2
    b = evaluate(lifted, data, th, order=2).G2
    np.testing.assert_allclose(b, a, rtol=1e-6, atol=1e-8)


def test_order_above_support_rejected(rng):
    m = FunctionMomentModel(1, 1, lambda X, t: X[:, :1] * t, lambda X, t: X[:, :1, None])
    m.fd_hessian = False
    with pytest.raises(InputError):
        evaluate(m, Dataset(rng.normal(size=(4, 1))), [1.0], order=2)


def test_nonfinite_evaluation_reports_row():
    m = FunctionMomentModel(1, 1, lambda X, t: np.log(X[:, :1]) * t, lambda X, t: np.log(X[:, :1])[:, :, None])
    data = Dataset(np.array([[1.0], [2.0], [-1.0], [3.0]]))
    with np.errstate(invalid="ignore"), pytest.raises(DomainError) as info:
        evaluate(m, data, [1.0])
    assert info.value.row == 2


def test_dataset_rejects_nonfinite():
    with pytest.raises(InputError):
        Dataset(np.array([[1.0], [np.nan]]))


def test_dataset_is_read_only():
    d = Dataset(np.ones((3, 2)))
    with pytest.raises(ValueError):
        d.observations[0, 0] = 5.0


def test_model_dims_invariant():
    with pytest.raises(InputError):
        LinearIVModel(0, [1, 2], [3])


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2**31), st.floats(min_value=-2, max_value=2))
def test_evaluate_is_deterministic(seed, rho):
    X = np.random.default_rng(seed).normal(size=(15, 4))
    a = evaluate(PanelMomentModel(4), Dataset(X), [rho], order=2)
    b = evaluate(PanelMomentModel(4), Dataset(X.copy()), [rho], order=2)
    assert a.g.tobytes() == b.g.tobytes() and a.G.tobytes() == b.G.tobytes()


def test_csv_round_trip_and_descriptor(tmp_path, c1_panel):
    p = tmp_path / "panel.csv"
    write_csv(c1_panel, p, with_id=True)
    back = load_csv(p)
    assert back.columns[0] == "id"
    np.testing.assert_array_equal(back.observations[:, 1:], c1_panel.observations)
    desc = tmp_path / "model.json"
    desc.write_text(json.dumps({"model": "panel", "T": 4}))
    m = model_from_descriptor(desc, back)
    np.testing.assert_array_equal(
        evaluate(m, back, [0.4]).g, evaluate(PanelMomentModel(4), c1_panel, [0.4]).g
    )


def test_descriptor_linear_iv_and_matching():
    X = np.column_stack([np.arange(6.0), np.arange(6.0) ** 0.5, np.ones(6)])
    d = Dataset(X, ("y", "x", "w"))
    iv = model_from_descriptor({"model": "linear_iv", "y": "y", "x": ["const", "x"], "z": ["const", "x", "w"]}, d)
    assert iv.dims.l_theta == 2 and iv.dims.l_g == 3
    mm = model_from_descriptor({"model": "matching", "y": "y", "x": ["const", "x"], "moments": [["x", "x"]], "targets": [2.5]}, d)
    assert mm.dims.l_g == 3


@pytest.mark.parametrize("desc", [{"model": "nope"}, {"model": "panel"}])
def test_bad_descriptor(desc, c1_panel):
    with pytest.raises(InputError):
        model_from_descriptor(desc, c1_panel)


def test_load_csv_errors(tmp_path):
    with pytest.raises(InputError):
        load_csv(tmp_path / "missing.csv")
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,x\n")
    with pytest.raises(InputError):
        load_csv(bad)
