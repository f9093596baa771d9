from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mqs_hmm.errors import MaterialError
from mqs_hmm.materials import (
    MU0,
    NU0,
    ExpLaw,
    ExpLawParams,
    JAState,
    JilesAthertonLaw,
    JilesAthertonParams,
    LinearLaw,
    MaterialField,
    anhysteretic,
    exp_law_h,
    exp_law_tangent,
    ja_update,
)
from mqs_hmm.mesh import AIR, INSULATION, grain

flux = st.floats(-2.0, 2.0, allow_nan=False)


def test_exp_law_closed_form():
    p = ExpLawParams()
    b = np.array([[0.3, -0.4]])
    expected = (388.0 + 0.3774 * np.exp(2.97 * 0.25)) * b
    np.testing.assert_allclose(exp_law_h(b, p), expected, rtol=1e-15)


@given(flux, flux)
@settings(max_examples=50, deadline=None)
def test_exp_law_tangent_matches_finite_difference(bx, by):
    p = ExpLawParams()
    b = np.array([[bx, by]])
    eps = 1e-6
    fd = np.empty((2, 2))
    for j in range(2):
        d = np.zeros((1, 2))
        d[0, j] = eps
        fd[:, j] = (exp_law_h(b + d, p) - exp_law_h(b - d, p))[0] / (2 * eps)
    t = exp_law_tangent(b, p)[0]
    # central-difference round-off is about eps * |h| / eps_fd, relative to the largest entry
    np.testing.assert_allclose(t, fd, rtol=1e-7, atol=1e-9 * np.abs(fd).max() + 1e-6)
    np.testing.assert_allclose(t, t.T, rtol=1e-14, atol=1e-14 * np.abs(t).max())
    assert np.all(np.linalg.eigvalsh(t) > 0)


def test_exp_law_overflow_is_reported():
    with pytest.raises(MaterialError):
        exp_law_h(np.array([[20.0, 0.0]]), ExpLawParams())


def test_invalid_parameters():
    with pytest.raises(ValueError):
        ExpLawParams(alpha=-1.0)
    with pytest.raises(ValueError):
        JilesAthertonParams(c=1.5)


def test_anhysteretic_is_odd_and_bounded():
    p = JilesAthertonParams()
    he = np.array([[500.0, -200.0], [-500.0, 200.0], [1e9, 0.0]])
    m, _ = anhysteretic(he, p)
    np.testing.assert_allclose(m[0], -m[1], rtol=1e-14)
    assert np.linalg.norm(m[2]) <= p.Ms * (1 + 1e-12)


def _cycle(p, amplitude, n_per, periods):
    st_ = JAState.virgin(1)
    hs, bs = [], []
    for k in range(1, n_per * periods + 1):
        b = np.array([[amplitude * np.sin(2 * np.pi * k / n_per), 0.0]])
        h, _, st_ = ja_update(b, st_, p)
        hs.append(h[0, 0])
        bs.append(b[0, 0])
    return np.array(hs), np.array(bs)


def test_ja_saturation():
    p = JilesAthertonParams()
    st_ = JAState.virgin(1)
    for b in np.linspace(0, 10, 101)[1:]:
        _, _, st_ = ja_update(np.array([[b, 0.0]]), st_, p)
    assert st_.M[0, 0] / p.Ms == pytest.approx(1.0, abs=1e-3)


def test_ja_tangent_matches_finite_difference():
    p = JilesAthertonParams()
    st_ = JAState.virgin(1)
    for k in range(1, 150):
        b = np.array([[0.6 * np.sin(2 * np.pi * k / 100), 0.2 * np.cos(2 * np.pi * k / 100)]])
        _, _, st_ = ja_update(b, st_, p)
    b0 = np.array([[0.6 * np.sin(3 * np.pi), 0.2 * np.cos(3 * np.pi)]]) + np.array([[0.05, 0.0]])
    _, t0, _ = ja_update(b0, st_, p)
    eps = 1e-7
    fd = np.empty((2, 2))
    for j in range(2):
        d = np.zeros((1, 2))
        d[0, j] = eps
        fd[:, j] = (ja_update(b0 + d, st_, p)[0] - ja_update(b0 - d, st_, p)[0])[0] / (2 * eps)
    np.testing.assert_allclose(t0[0], fd, rtol=1e-5, atol=1e-6 * np.abs(fd).max())


def test_ja_trial_state_is_not_committed():
    p = JilesAthertonParams()
    st_ = JAState.virgin(1)
    before = st_.copy()
    ja_update(np.array([[0.8, 0.1]]), st_, p)
    np.testing.assert_array_equal(st_.M, before.M)
    np.testing.assert_array_equal(st_.he, before.he)


def test_ja_zero_flux_stays_zero():
    h, _, st_ = ja_update(np.zeros((3, 2)), JAState.virgin(3), JilesAthertonParams())
    np.testing.assert_array_equal(h, 0.0)
    np.testing.assert_array_equal(st_.M, 0.0)


def test_ja_b_h_consistency():
    p = JilesAthertonParams()
    b = np.array([[0.9, -0.3], [-0.2, 0.1]])
    h, _, st_ = ja_update(b, JAState.virgin(2), p)
    np.testing.assert_allclose(MU0 * (h + st_.M), b, atol=1e-12)


def test_linear_law_and_material_field():
    region = np.array([AIR, grain(0), INSULATION, grain(3)])
    field = MaterialField(region, LinearLaw(100.0), 5e6, {INSULATION: LinearLaw(NU0 / 2)})
    b = np.arange(8.0).reshape(4, 2)
    h, t, trial = field.evaluate(b, field.initial_state())
    assert trial is None
    np.testing.assert_allclose(h[0], NU0 * b[0])
    np.testing.assert_allclose(h[1], 100.0 * b[1])
    np.testing.assert_allclose(h[2], NU0 / 2 * b[2])
    np.testing.assert_allclose(t[3], 100.0 * np.eye(2))
    np.testing.assert_array_equal(field.sigma, [0.0, 5e6, 0.0, 5e6])


def test_material_field_rejects_stateful_region_law():
    with pytest.raises(MaterialError):
        MaterialField(np.array([AIR]), ExpLaw(), 5e6, {AIR: JilesAthertonLaw()})


def test_material_field_ja_state_per_grain_triangle():
    region = np.array([AIR, grain(0), grain(0)])
    field = MaterialField(region, JilesAthertonLaw(), 5e6)
    st_ = field.initial_state()
    assert st_.M.shape == (2, 2)
    _, _, trial = field.evaluate(np.array([[1.0, 0.0], [0.5, 0.0], [-0.5, 0.0]]), st_)
    assert trial.M[0, 0] == pytest.approx(-trial.M[1, 0], rel=1e-12)
