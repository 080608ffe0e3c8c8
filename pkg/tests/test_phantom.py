import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from cgoeit.errors import ConfigError
from cgoeit.grid import GridSpec
from cgoeit.phantom import (Inclusion, Phantom, RadialLayers, eval_phantom, homogeneous_phantom,
                            make_phantom, radial_profile)


def test_t1_parameters():
    p = make_phantom("T1")
    assert p.background == 1.0
    (ball,) = p.inclusions
    assert ball.is_ball and ball.semi_axes[0] == 0.5 and ball.value == 2.0
    assert ball.center == (0.0, 0.0, 0.0)


def test_t2a_admittivities():
    p = make_phantom("T2A")
    assert p.background == 0.8 + 0.3j
    vals = {i.name: i.value for i in p.inclusions}
    assert vals["heart"] == 2 + 0.6j
    assert vals["lung 1"] == vals["lung 2"] == 0.5 + 0.2j
    assert not p.is_real


def test_t2b_is_real_version():
    p = make_phantom("T2B")
    assert p.is_real and p.background == 1.0
    # lung 1 is the larger resistive target
    lungs = [i for i in p.inclusions if i.name.startswith("lung")]
    assert lungs[0].volume > lungs[1].volume


def test_t3_parameters():
    p = make_phantom("T3")
    cond, res = p.inclusions
    assert cond.value == 1.5 and cond.semi_axes[0] == 0.3 and cond.center[1:] == (0, 0)
    assert res.value == 0.1 and res.semi_axes[0] == 0.2 and res.center[0] == 0 and res.center[2] == 0


def test_unknown_name():
    with pytest.raises(ConfigError):
        make_phantom("T9")


def test_point_values():
    assert make_phantom("T1").evaluate(np.zeros((1, 3)))[0] == 2.0
    # outside both T3 inclusions
    assert make_phantom("T3").evaluate(np.array([[0.0, 0.9, 0.0]]))[0] == 1.0
    for name in ("T1", "T2A", "T3"):
        p = make_phantom(name)
        assert p.evaluate(np.array([[0.0, 0.0, 1.2]]))[0] == p.background


def test_boundary_tie_break():
    # a point exactly on the T1 interface takes the inclusion value
    assert make_phantom("T1").evaluate(np.array([[0.5, 0.0, 0.0]]))[0] == 2.0


def test_eval_phantom_grid():
    vol = eval_phantom(make_phantom("T3"), 33)
    assert vol.values.shape == (33, 33, 33)
    assert np.all(vol.values[~vol.mask] == 1.0)
    assert np.array_equal(vol.mask, np.linalg.norm(vol.spec.points(), axis=-1) <= 1.0)
    assert np.array_equal(vol.values, eval_phantom(make_phantom("T3"), 33).values)


def test_radial_profile():
    lay = radial_profile(make_phantom("T1"))
    assert lay.radii == (0.5, 1.0) and lay.values == (2.0, 1.0)
    assert radial_profile(homogeneous_phantom(3.0)).N == 1
    with pytest.raises(ConfigError):
        radial_profile(make_phantom("T2B"))


def test_invalid_inputs():
    with pytest.raises(ConfigError):
        Phantom(1.0, (Inclusion.ball((0.8, 0, 0), 0.3, 2.0),))
    with pytest.raises(ConfigError):
        Phantom(-1.0)
    with pytest.raises(ConfigError):
        RadialLayers((0.5, 0.4), (1.0, 1.0))


def test_scene_roundtrip(tmp_path):
    p = make_phantom("T2A")
    p.save(tmp_path / "scene.json")
    q = Phantom.load(tmp_path / "scene.json")
    assert q == p


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_t1_rotation_invariance(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (200, 3))
    r = np.linalg.norm(x, axis=1)
    x = x[np.abs(r - 0.5) > 1e-6]
    R = Rotation.random(random_state=seed).as_matrix()
    p = make_phantom("T1")
    assert np.array_equal(p.evaluate(x), p.evaluate(x @ R.T))


@settings(max_examples=6, deadline=None)
@given(st.permutations([0, 1, 2]))
def test_axis_relabeling_commutes(perm):
    # a ball on the diagonal is symmetric under any relabeling of the axes
    p = Phantom(1.0, (Inclusion.ball((0.2, 0.2, 0.2), 0.3, 2.0),))
    vol = eval_phantom(p, GridSpec(17))
    permuted = np.transpose(vol.values, perm)
    assert np.array_equal(permuted, vol.values)
