import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import fftconvolve
from skimage.metrics import structural_similarity

from cgoeit.errors import ConfigError
from cgoeit.grid import GridSpec, VolumeGrid
from cgoeit.metrics import (MetricsReport, Target, dynamic_range, evaluate, localization_error,
                            match_targets, mse, msssim3, segment, ssim_components, rvr)
from cgoeit.phantom import Inclusion, Phantom, eval_phantom, make_phantom


def _vol(values):
    values = np.asarray(values)
    return VolumeGrid(GridSpec(values.shape[0]), values)


@pytest.fixture(scope="module")
def t3_128():
    return eval_phantom(make_phantom("T3"), 128)


# -- dynamic range and MSE ------------------------------------------------


def test_dynamic_range_examples(rng):
    t = eval_phantom(make_phantom("T1"), 17)
    assert dynamic_range(t, t) == pytest.approx(100.0)
    assert dynamic_range(VolumeGrid.constant(t.spec, 1.3), t) == 0.0
    mean = t.values[t.mask].mean()
    assert dynamic_range(t.with_values(mean + 2 * (t.values - mean)), t) == pytest.approx(200.0)
    with pytest.raises(ConfigError):
        dynamic_range(t, VolumeGrid.constant(t.spec, 1.0))
    with pytest.raises(ConfigError):
        dynamic_range(t, eval_phantom(make_phantom("T1"), 9))


def test_mse_examples(rng):
    a = rng.standard_normal((9, 9, 9)) + 1j * rng.standard_normal((9, 9, 9))
    assert mse(a, a) == (0.0, 0.0)
    assert mse(a + 1, a) == pytest.approx((1.0, 0.0))
    b = rng.standard_normal((9, 9, 9)) + 1j * rng.standard_normal((9, 9, 9))
    re, im = mse(a, b)
    assert abs(re - np.mean((a.real - b.real) ** 2)) < 1e-14
    assert abs(im - np.mean((a.imag - b.imag) ** 2)) < 1e-14
    with pytest.raises(ConfigError):
        mse(a, b[:-1])


def test_mse_fill():
    spec = GridSpec(9)
    r = VolumeGrid.constant(spec, 2.0)
    t = VolumeGrid.constant(spec, 1.0)
    # outside nodes take the fills, inside nodes keep their values
    m = spec.mask()
    assert mse(r, t, recon_fill=1.0, truth_fill=1.0)[0] == pytest.approx(m.mean())


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.permutations([0, 1, 2]))
def test_dr_mse_axis_permutation(seed, perm):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 11, 11, 11))
    A, B = _vol(a), _vol(b)
    Ap, Bp = _vol(np.transpose(a, perm)), _vol(np.transpose(b, perm))
    assert dynamic_range(A, B) == pytest.approx(dynamic_range(Ap, Bp), rel=1e-12)
    assert mse(A, B)[0] == pytest.approx(mse(Ap, Bp)[0], rel=1e-12)


# -- SSIM -----------------------------------------------------------------


def test_ssim_matches_skimage(rng):
    x = rng.random((24, 24, 24))
    y = x + 0.3 * rng.random((24, 24, 24))
    lum, cs = ssim_components(x, y, 1.0, mode="reflect")
    ours = np.mean((lum * cs)[5:-5, 5:-5, 5:-5])
    ref = structural_similarity(x, y, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False)
    assert ours == pytest.approx(ref, abs=1e-10)


def _reference_msssim(x, y, data_range):
    # explicit 11^3 kernel, edge padding, same exponent weights
    g = np.exp(-np.arange(-5, 6) ** 2 / (2 * 1.5**2))
    k = g[:, None, None] * g[None, :, None] * g[None, None, :]
    k /= k.sum()

    def blur(v):
        return fftconvolve(np.pad(v, 5, mode="edge"), k, mode="valid")

    w = np.array([0.0448, 0.2856, 0.3001])
    w /= w.sum()
    C1, C2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    out = 1.0
    for s in range(3):
        ux, uy = blur(x), blur(y)
        vx, vy, vxy = blur(x * x) - ux**2, blur(y * y) - uy**2, blur(x * y) - ux * uy
        cs = (2 * vxy + C2) / (vx + vy + C2)
        lum = (2 * ux * uy + C1) / (ux**2 + uy**2 + C1)
        term = np.mean(cs * lum) if s == 2 else np.mean(cs)
        out *= max(term, 0.0) ** w[s]
        x = x.reshape(x.shape[0] // 2, 2, x.shape[1] // 2, 2, x.shape[2] // 2, 2).mean(axis=(1, 3, 5))
        y = y.reshape(y.shape[0] // 2, 2, y.shape[1] // 2, 2, y.shape[2] // 2, 2).mean(axis=(1, 3, 5))
    return out


def test_msssim_anticorrelated_binary():
    x = np.linalg.norm(GridSpec(32).points(), axis=-1) < 0.5
    t = x.astype(float)
    val = msssim3(1 - t, t)
    assert val < 0.5
    assert val == pytest.approx(_reference_msssim(1 - t, t, 1.0), abs=1e-8)


def test_msssim_matches_reference(rng):
    x = rng.random((32, 32, 32))
    y = 0.7 * x + 0.3 * rng.random((32, 32, 32))
    # the default range is the larger spread of the two volumes
    assert msssim3(x, y) == pytest.approx(_reference_msssim(x, y, max(np.ptp(x), np.ptp(y))), abs=1e-8)
    assert msssim3(x, y, data_range=1.0) == pytest.approx(_reference_msssim(x, y, 1.0), abs=1e-8)


def test_msssim_bias_sweep():
    t = (np.linalg.norm(GridSpec(32).points(), axis=-1) < 0.5).astype(float) + 1.0
    vals = [msssim3(t + b, t, data_range=1.0) for b in (0.0, 0.05, 0.1, 0.2, 0.4)]
    assert vals[0] == 1.0 and np.all(np.diff(vals) < 0)


def test_msssim_errors():
    with pytest.raises(ConfigError):
        msssim3(np.zeros((15, 15, 15)), np.ones((15, 15, 15)))
    with pytest.raises(ConfigError):
        msssim3(np.zeros((16, 16, 16)), np.zeros((16, 16, 17)))
    bad = np.zeros((16, 16, 16))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ConfigError):
        msssim3(bad, bad)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-1e3, 1e3), st.floats(1e-6, 1e3))
def test_msssim_identity(seed, shift, scale):
    v = shift + scale * np.random.default_rng(seed).standard_normal((16, 16, 16))
    assert msssim3(v, v.copy()) == 1.0
    w = v + scale * 0.1 * np.random.default_rng(seed + 1).standard_normal(v.shape)
    assert 0.0 <= msssim3(v, w) <= 1.0


# -- segmentation ---------------------------------------------------------


def test_self_segmentation_t1():
    t = eval_phantom(make_phantom("T1"), 33)
    seg = segment(t, 1.0)
    (c,) = seg.of_kind("conductive")
    assert not seg.of_kind("resistive")
    assert np.linalg.norm(c.centroid) < t.spec.h
    assert localization_error(c, c) == 0 and rvr(c, c) == 1


def test_uniform_has_no_targets():
    seg = segment(VolumeGrid.constant(GridSpec(17), 1.0), 1.0)
    assert seg.empty


def test_t3_volumes(t3_128):
    seg = segment(t3_128, 1.0)
    (c,), (r,) = seg.of_kind("conductive"), seg.of_kind("resistive")
    assert c.volume == pytest.approx(4 / 3 * np.pi * 0.3**3, rel=0.05)
    assert r.volume == pytest.approx(4 / 3 * np.pi * 0.2**3, rel=0.05)
    assert not np.any(seg.conductive & seg.resistive)


def test_shift_le():
    spec = GridSpec(21)     # h = 0.1
    a = eval_phantom(Phantom(1.0, (Inclusion.ball((0, 0, 0), 0.25, 2.0),)), spec)
    b = eval_phantom(Phantom(1.0, (Inclusion.ball((0.3, 0, 0), 0.25, 2.0),)), spec)
    (ta,), (tb,) = segment(a, 1.0).targets, segment(b, 1.0).targets
    assert localization_error(tb, ta) == pytest.approx(0.3, abs=1e-12)
    assert rvr(tb, ta) == 1.0


def test_rvr_half():
    t = Target("conductive", np.zeros(3), 100, 0.1, 1)
    r = Target("conductive", np.zeros(3), 50, 0.05, 1)
    assert rvr(r, t) == 0.5
    with pytest.raises(ConfigError):
        rvr(r, Target("conductive", np.zeros(3), 0, 0.0, 1))


@settings(max_examples=20, deadline=None)
@given(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5))
def test_le_shift_roundtrip(s, u):
    c = np.array([0.1, -0.2, 0.3])
    t = Target("conductive", c, 10, 1.0, 1)
    moved = Target("conductive", c + [s, u, 0.0], 10, 1.0, 1)
    back = Target("conductive", moved.centroid - [s, u, 0.0], 10, 1.0, 1)
    assert localization_error(back, t) < 1e-15


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_segment_scale_equivariant(seed, c):
    rng = np.random.default_rng(seed)
    spec = GridSpec(13)
    d = rng.standard_normal((13,) * 3)
    a = segment(VolumeGrid(spec, 1.0 + d), 1.0)
    b = segment(VolumeGrid(spec, 1.0 + c * d), 1.0)
    assert np.array_equal(a.conductive, b.conductive) and np.array_equal(a.resistive, b.resistive)


def test_small_components_dropped():
    spec = GridSpec(33)
    p = Phantom(1.0, (Inclusion.ball((-0.4, 0, 0), 0.35, 2.0), Inclusion.ball((0.6, 0, 0), 0.1, 2.0)))
    seg = segment(eval_phantom(p, spec), 1.0)
    assert len(seg.of_kind("conductive")) == 1
    assert len(segment(eval_phantom(p, spec), 1.0, min_fraction=0.0).of_kind("conductive")) == 2


def test_threshold_validation():
    with pytest.raises(ConfigError):
        segment(VolumeGrid.constant(GridSpec(9), 1.0), 1.0, thresholds=(0.0, 0.5))


def test_matching_largest_first():
    t2 = eval_phantom(make_phantom("T2B"), 65)
    seg = segment(t2, 1.0)
    res = seg.of_kind("resistive")
    assert len(res) == 2 and res[0].voxels > res[1].voxels
    pairs = match_targets(seg, seg)
    assert all(r is t for t, r in pairs)


# -- report ---------------------------------------------------------------


def test_evaluate_identity(t3_128):
    rep = evaluate(t3_128, t3_128, 1.0, 1.0, provenance={"method": "truth"})
    assert rep.DR["real"] == pytest.approx(100.0) and rep.DR["imag"] is None
    assert rep.MSE == (0.0, 0.0) and rep.MSSSIM == (1.0, None)
    assert [t.LE for t in rep.targets] == [0.0, 0.0] and [t.RVR for t in rep.targets] == [1.0, 1.0]
    line = rep.to_text()
    assert "method=truth" in line and "connectivity=26" in line and "\n" not in line


def test_evaluate_uniform_recon():
    t = eval_phantom(make_phantom("T3"), 33)
    rep = evaluate(VolumeGrid.constant(t.spec, 1.0), t, 1.0, 1.0)
    assert rep.DR["real"] == 0.0
    assert all(x.LE is None and x.RVR is None for x in rep.targets)
    assert rep.to_text().count("N/A") >= 4


def test_report_invariants():
    with pytest.raises(ConfigError):
        MetricsReport({"real": -1.0}, (0.0, 0.0), (1.0, None), [])
    with pytest.raises(ConfigError):
        MetricsReport({"real": 1.0}, (0.0, 0.0), (1.2, None), [])
