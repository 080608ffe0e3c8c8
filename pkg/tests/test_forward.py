import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cgoeit.dnmap import build_dn_map
from cgoeit.errors import ConfigError
from cgoeit.forward import (CurrentPatternSet, VoltageMatrix, add_noise, dn_eigenvalues,
                            dn_eigenvalues_ode, gaussian_streams, ground, load_voltages,
                            pairwise_patterns, save_voltages, synth_voltages, synth_voltages_general,
                            synth_voltages_radial, transfer_matrix_radial)
from cgoeit.geometry import place_electrodes
from cgoeit.phantom import Inclusion, Phantom, RadialLayers, homogeneous_phantom, make_phantom


def _quiet(fn, *a, **k):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return fn(*a, **k)


# -- patterns -------------------------------------------------------------


def test_patterns_small():
    pat = pairwise_patterns(4)
    assert pat.C.shape == (4, 3)
    assert np.array_equal(pat.C[:, 0], np.array([1, -1, 0, 0]) * 1e-3)
    assert pat.tag == "skip-0"


def test_patterns_l32():
    pat = pairwise_patterns(32)
    assert pat.K == 31
    assert np.all(np.abs(pat.C.sum(axis=0)) == 0)
    assert np.linalg.matrix_rank(pat.C) == 31


def test_patterns_gcd_degeneracy():
    with pytest.warns(RuntimeWarning, match="only 3"):
        pat = pairwise_patterns(6, skip=2)
    assert pat.K == 3


def test_pattern_validation():
    with pytest.raises(ConfigError):
        pairwise_patterns(1)
    with pytest.raises(ConfigError):
        CurrentPatternSet(np.array([[1.0], [0.5]]))
    with pytest.raises(ConfigError):
        CurrentPatternSet(np.array([[1.0, 2.0], [-1.0, -2.0]]))


# -- DN eigenvalues -------------------------------------------------------


def test_homogeneous_eigenvalues_exact():
    lam = dn_eigenvalues(RadialLayers.homogeneous(), 40)
    assert np.array_equal(lam, np.arange(41.0))
    assert np.allclose(dn_eigenvalues(RadialLayers.homogeneous(3.0, 2.0), 5), 3.0 * np.arange(6) / 2.0)


def test_t1_first_eigenvalue(t1_layers):
    # value from the shooting oracle, frozen
    assert dn_eigenvalues(t1_layers, 1)[1] == pytest.approx(34 / 31, rel=1e-12)
    assert dn_eigenvalues_ode(t1_layers, [1])[0] == pytest.approx(34 / 31, rel=1e-8)


def test_large_l_stays_finite(t1_layers):
    lam = dn_eigenvalues(t1_layers, 20000)
    assert np.all(np.isfinite(lam))
    # deep modes only see the outer shell
    assert lam[-1] / 20000 == pytest.approx(1.0, rel=1e-3)


layer_values = st.tuples(st.floats(0.1, 10.0), st.floats(-5.0, 5.0))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0.05, 0.95), min_size=2, max_size=2, unique=True),
       st.lists(layer_values, min_size=3, max_size=3), st.booleans())
def test_eigenvalues_match_ode(radii, vals, cplx):
    r = sorted(radii)
    if r[1] - r[0] < 0.02:
        r[1] = r[0] + 0.02
    values = [complex(a, b if cplx else 0.0) for a, b in vals]
    layers = RadialLayers((r[0], r[1], 1.0), tuple(values))
    lam = dn_eigenvalues(layers, 10)
    ref = dn_eigenvalues_ode(layers, range(11))
    assert lam[0] == 0
    assert np.all(np.abs(lam[1:] - ref[1:]) <= 1e-3 * np.abs(ref[1:]))


# -- radial synthesis -----------------------------------------------------


@pytest.fixture(scope="module")
def setup16():
    lay = place_electrodes(16)
    return lay, pairwise_patterns(16)


def test_passivity_and_grounding(setup16):
    lay, pat = setup16
    V = _quiet(synth_voltages_radial, RadialLayers.homogeneous(), lay, pat).V
    assert np.allclose(V.sum(axis=0), 0, atol=1e-15)
    assert np.all(np.einsum("lk,lk->k", V, pat.C) > 0)


def test_scaling(setup16):
    lay, pat = setup16
    V1 = _quiet(synth_voltages_radial, RadialLayers.homogeneous(), lay, pat).V
    V3 = _quiet(synth_voltages_radial, RadialLayers.homogeneous(3.0), lay, pat).V
    assert np.allclose(V3, V1 / 3, rtol=1e-12, atol=0)


def test_linearity_in_patterns(setup16, rng, t1_layers):
    lay, pat = setup16
    M = rng.standard_normal((pat.K, pat.K))
    mixed = CurrentPatternSet(pat.C @ M)
    V = _quiet(synth_voltages_radial, t1_layers, lay, pat).V
    Vm = _quiet(synth_voltages_radial, t1_layers, lay, mixed).V
    assert np.allclose(Vm, V @ M, atol=1e-12 * np.abs(V).max())


def test_monotone_in_inclusion_conductivity(setup16):
    lay, pat = setup16
    powers = []
    for s in (1.0, 1.5, 2.0, 4.0):
        V = _quiet(synth_voltages_radial, RadialLayers((0.5, 1.0), (s, 1.0)), lay, pat).V
        powers.append(np.einsum("lk,lk->k", V, pat.C))
    assert np.all(np.diff(np.array(powers), axis=0) < 0)


def test_t1_signal_sign(setup16, t1_layers):
    lay, pat = setup16
    V1 = _quiet(synth_voltages_radial, RadialLayers.homogeneous(), lay, pat).V
    VT = _quiet(synth_voltages_radial, t1_layers, lay, pat).V
    d = V1 - VT
    assert np.abs(d).max() > 1e-3 * np.abs(V1).max()
    # a conductive inclusion lowers the voltage across each driven pair
    drive = np.einsum("lk,lk->k", d, pat.C)
    assert np.all(drive > 0)


def test_transfer_matrix_symmetric(t1_layers):
    Z = _quiet(transfer_matrix_radial, t1_layers, place_electrodes(32))
    assert np.allclose(Z, Z.T, rtol=0, atol=1e-14 * np.abs(Z).max())


def test_bandlimit_warning():
    with pytest.warns(RuntimeWarning, match="bandlimit"):
        transfer_matrix_radial(RadialLayers.homogeneous(), place_electrodes(8), lmax=20)


# -- general phantoms -----------------------------------------------------


def test_general_homogeneous_matches_radial(setup16):
    lay, pat = setup16
    Vg = _quiet(synth_voltages_general, homogeneous_phantom(), lay, pat, 32).V
    Vr = _quiet(synth_voltages_radial, RadialLayers.homogeneous(), lay, pat).V
    assert np.abs(Vg - Vr).max() < 0.02 * np.abs(Vr).max()


@pytest.mark.slow
def test_general_t1_matches_radial(t1_layers):
    lay, pat = place_electrodes(32), pairwise_patterns(32)
    Vg = _quiet(synth_voltages_general, make_phantom("T1"), lay, pat, 64).V
    Vr = _quiet(synth_voltages_radial, t1_layers, lay, pat).V
    Vh = _quiet(synth_voltages_radial, RadialLayers.homogeneous(), lay, pat).V
    assert np.abs(Vg - Vr).max() < 0.02 * np.abs(Vr).max()
    # the inclusion signal itself
    assert np.abs((Vg - Vh) - (Vr - Vh)).max() < 0.02 * np.abs(Vr - Vh).max()


def test_general_scaling_and_reciprocity(setup16):
    lay, pat = setup16
    p = make_phantom("T2B")
    V = _quiet(synth_voltages_general, p, lay, pat, 24)
    V2 = _quiet(synth_voltages_general, p.scaled(2.0), lay, pat, 24)
    assert np.allclose(V2.V, V.V / 2, rtol=0, atol=1e-7 * np.abs(V.V).max())
    m = build_dn_map(pat.C, V.V, lay)
    R = m.R
    assert np.abs(R - R.conj().T).max() < 1e-8 * np.abs(R).max()


def test_dispatch(setup16):
    lay, pat = setup16
    V = _quiet(synth_voltages, make_phantom("T1"), lay, pat)
    assert "method" not in V.meta or V.meta["method"] != "fd-perturbation"
    p = Phantom(1.0, (Inclusion.ball((0.3, 0, 0), 0.2, 2.0),))
    assert _quiet(synth_voltages, p, lay, pat, 16).meta["method"] == "fd-perturbation"


def test_radius_mismatch(setup16):
    lay, pat = setup16
    with pytest.raises(ConfigError):
        synth_voltages_radial(RadialLayers.homogeneous(radius=2.0), lay, pat)


# -- noise and files ------------------------------------------------------


def test_noise_identity_and_determinism(t1_data32):
    V = t1_data32.V
    assert np.array_equal(add_noise(V, 0.0, 1).V, V.V)
    a, b = add_noise(V, 0.01, 7), add_noise(V, 0.01, 7)
    assert np.array_equal(a.V, b.V)
    assert not np.array_equal(a.V, add_noise(V, 0.01, 8).V)
    with pytest.raises(ConfigError):
        add_noise(V, -0.1)


def test_reference_never_noised(t1_data32):
    ref = t1_data32.U.with_values(t1_data32.U.V, reference=True)
    assert np.array_equal(add_noise(ref, 0.05, 3).V, ref.V)


def test_noise_level(t1_data128):
    V = t1_data128.V
    noisy = add_noise(V, 0.01, 11)
    rel = (noisy.V - V.V) / np.mean(np.abs(V.V), axis=0)
    assert 0.008 <= rel.std() <= 0.012


def test_noise_streams_independent_of_pattern_count():
    a = gaussian_streams(5, 10, 33)
    b = gaussian_streams(5, 4, 33)
    assert np.array_equal(a[:, :4], b)


def test_complex_noise():
    V = VoltageMatrix(np.ones((8, 7)) * (1 + 1j))
    n = add_noise(V, 0.1, 0)
    assert np.iscomplexobj(n.V) and np.all(n.V.imag != 1)


@pytest.mark.parametrize("cplx", [False, True])
def test_voltage_file_roundtrip(tmp_path, rng, cplx):
    data = rng.standard_normal((5, 4)) + (1j * rng.standard_normal((5, 4)) if cplx else 0)
    V = VoltageMatrix(ground(data), {"protocol": "skip-0", "amplitude": 1e-3, "eta": 0.0,
                                     "seed": 3, "layout_hash": "abc"})
    save_voltages(V, tmp_path / "v.txt")
    W = load_voltages(tmp_path / "v.txt")
    assert np.array_equal(W.V, V.V)
    assert W.meta["seed"] == 3 and W.meta["protocol"] == "skip-0"


def test_voltage_file_column_check(tmp_path):
    save_voltages(VoltageMatrix(np.zeros((3, 2))), tmp_path / "v.txt")
    text = (tmp_path / "v.txt").read_text().replace("K: 2", "K: 3")
    (tmp_path / "v.txt").write_text(text)
    with pytest.raises(ConfigError):
        load_voltages(tmp_path / "v.txt")
