from __future__ import annotations

import numpy as np
import pytest

from mqs_hmm.errors import MqsError
from mqs_hmm.materials import ExpLaw, JilesAthertonLaw, LinearLaw
from mqs_hmm.problem import SolverOptions, SourceWaveform, TimeGrid
from mqs_hmm.reference import ReferenceModel, probe_field, run_reference, run_reference_static

GRID = TimeGrid(0.0, 3 / 2000, 3)


def _model(meshes, law=None, js0=35e7, dynamic=True, **opts):
    return ReferenceModel(meshes[2], law or ExpLaw(), SourceWaveform(js0, 50.0),
                          options=SolverOptions(**opts), dynamic=dynamic)


def test_grain_currents_vanish(small_meshes):
    res = run_reference(_model(small_meshes), GRID)
    assert res.extra["n_grains"] == 4
    assert res.extra["max_relative_net_current"] < 1e-8
    assert np.all(res.losses[1:] > 0)


def test_without_grain_constants_losses_are_larger(small_meshes):
    with_c = run_reference(_model(small_meshes), GRID)
    free = run_reference(_model(small_meshes, grain_constants=False), GRID)
    # without the constraint each grain carries a net current driven by -d_t a
    assert free.losses[-1] > with_c.losses[-1]


def test_zero_source(small_meshes):
    res = run_reference(_model(small_meshes, js0=0.0), GRID)
    assert np.all(res.losses == 0.0)
    assert all(np.all(b == 0.0) for b in res.b)


def test_sign_flip_flips_fields(small_meshes):
    pos = run_reference(_model(small_meshes, LinearLaw(400.0)), GRID)
    neg = run_reference(_model(small_meshes, LinearLaw(400.0), js0=-35e7), GRID)
    for bp, bn in zip(pos.b, neg.b):
        np.testing.assert_allclose(bn, -bp, rtol=1e-9, atol=1e-15)
    np.testing.assert_allclose(neg.losses, pos.losses, rtol=1e-9)


def test_ja_reference_runs(small_meshes):
    res = run_reference(_model(small_meshes, JilesAthertonLaw(), js0=35e8), GRID)
    assert np.all(np.isfinite(res.losses))
    assert res.losses[-1] > 0


def test_static_reference_and_probe(small_meshes):
    model = _model(small_meshes, LinearLaw(400.0), dynamic=False)
    res = run_reference_static(model, 1.0)
    assert len(res.b) == 1
    series = probe_field(res, (50e-6, 50e-6))
    assert series.shape == (1,) and series[0] > 0
    with pytest.raises(MqsError):
        run_reference(model, GRID)
    with pytest.raises(MqsError):
        run_reference_static(_model(small_meshes), 1.0)


def test_skin_depth_check(small_meshes):
    model = _model(small_meshes)
    assert model.skin_depth_check(1.0)
    assert not model.skin_depth_check(1e9)
