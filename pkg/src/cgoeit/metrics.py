"""Image-quality metrics for reconstructions on the ball.

Dynamic range and segmentation use the nodes inside the ball; MSE and
MS-SSIM use the whole cube after filling the outside with a background value
(``gamma_best`` for reconstructions, the true background for the truth).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .grid import VolumeGrid

CONNECTIVITY = 26
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001)
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5          # radius 5, an 11-point window
SSIM_K = (0.01, 0.03)
MIN_COARSE = 4


def _part(v, part: str) -> np.ndarray:
    v = np.asarray(v)
    if part == "real":
        return np.real(v).astype(float)
    if part == "imag":
        return np.imag(v).astype(float)
    raise ConfigError(f"unknown part {part!r}")


def _same_grid(a: VolumeGrid, b: VolumeGrid):
    if a.values.shape != b.values.shape:
        raise ConfigError(f"volume shapes differ: {a.values.shape} vs {b.values.shape}")


def dynamic_range(recon: VolumeGrid, truth: VolumeGrid, part: str = "real") -> float:
    """Ratio of max-min spreads inside the ball, in percent.

    Raises
    ------
    ConfigError
        If the truth is constant on the ball (the ratio is undefined).
    """
    _same_grid(recon, truth)
    m = truth.mask
    r = _part(recon.values, part)[m]
    t = _part(truth.values, part)[m]
    den = t.max() - t.min()
    if den <= 0:
        raise ConfigError("dynamic range is undefined for a constant truth")
    return float(100.0 * (r.max() - r.min()) / den)


def mse(recon, truth, recon_fill=None, truth_fill=None) -> tuple:
    """Mean squared error of real and imaginary parts over the full cube.

    Accepts arrays or :class:`VolumeGrid`; for grids the nodes outside the ball
    are replaced by the fill values when given.
    """
    r = recon.filled(recon_fill) if isinstance(recon, VolumeGrid) and recon_fill is not None else \
        getattr(recon, "values", recon)
    t = truth.filled(truth_fill) if isinstance(truth, VolumeGrid) and truth_fill is not None else \
        getattr(truth, "values", truth)
    r, t = np.asarray(r), np.asarray(t)
    if r.shape != t.shape:
        raise ConfigError(f"volume shapes differ: {r.shape} vs {t.shape}")
    d = r - t
    return float(np.mean(np.real(d) ** 2)), float(np.mean(np.imag(d) ** 2))


# -- MS-SSIM --------------------------------------------------------------


def _blur(x, mode):
    return ndimage.gaussian_filter(x, SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode=mode)


def ssim_components(x: np.ndarray, y: np.ndarray, data_range: float, mode: str = "nearest"):
    """Luminance and contrast-structure maps with a Gaussian window.

    Population (not sample) covariances. ``mode`` is the boundary extension of
    the filter (``"nearest"`` replicates edge voxels).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    C1 = (SSIM_K[0] * data_range) ** 2
    C2 = (SSIM_K[1] * data_range) ** 2
    ux, uy = _blur(x, mode), _blur(y, mode)
    vx = _blur(x * x, mode) - ux * ux
    vy = _blur(y * y, mode) - uy * uy
    vxy = _blur(x * y, mode) - ux * uy
    lum = (2 * ux * uy + C1) / (ux * ux + uy * uy + C1)
    cs = (2 * vxy + C2) / (vx + vy + C2)
    return lum, cs


def ssim(x, y, data_range: float, mode: str = "nearest") -> float:
    lum, cs = ssim_components(x, y, data_range, mode)
    return float(np.mean(lum * cs))


def _downsample(x: np.ndarray) -> np.ndarray:
    """2x2x2 block average (a trailing odd slice is dropped)."""
    n = [s - s % 2 for s in x.shape]
    x = x[: n[0], : n[1], : n[2]]
    return x.reshape(n[0] // 2, 2, n[1] // 2, 2, n[2] // 2, 2).mean(axis=(1, 3, 5))


def msssim3(x, y, data_range: float | None = None, scales: int = 3,
            weights=MSSSIM_WEIGHTS, mode: str = "nearest") -> float:
    """Multi-scale SSIM of two real volumes.

    Contrast-structure terms of the first ``scales - 1`` levels and the full
    SSIM of the coarsest level are combined with renormalized exponents.
    Terms are clipped to ``[0, 1]``, so the result lies in ``[0, 1]``.
    ``data_range`` defaults to the larger spread of the two volumes (1 when
    both are constant).
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 3:
        raise ConfigError("msssim3 expects two volumes of equal shape")
    if min(x.shape) < MIN_COARSE * 2 ** (scales - 1):
        raise ConfigError(f"volume {x.shape} is too small for {scales} scales")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ConfigError("msssim3 needs finite volumes")
    if np.array_equal(x, y):
        return 1.0
    w = np.asarray(weights[:scales], dtype=float)
    w = w / w.sum()
    if data_range is None:
        data_range = max(np.ptp(x), np.ptp(y)) or 1.0
    out = 1.0
    for s in range(scales):
        lum, cs = ssim_components(x, y, data_range, mode)
        term = np.mean(lum * cs) if s == scales - 1 else np.mean(cs)
        out *= float(np.clip(term, 0.0, 1.0)) ** w[s]
        if s < scales - 1:
            x, y = _downsample(x), _downsample(y)
    return float(out)


# -- segmentation ---------------------------------------------------------


@dataclass
class Target:
    """One connected component."""

    kind: str                 # "conductive" or "resistive"
    centroid: np.ndarray
    voxels: int
    volume: float
    label: int


@dataclass
class SegmentedTargets:
    """Thresholded conductive/resistive masks and their components."""

    conductive: np.ndarray
    resistive: np.ndarray
    targets: list
    thresholds: tuple
    background: float
    connectivity: int = CONNECTIVITY

    def of_kind(self, kind: str) -> list:
        return [t for t in self.targets if t.kind == kind]

    @property
    def empty(self) -> bool:
        return not self.targets


def _components(mask: np.ndarray, kind: str, points: np.ndarray, h: float, min_fraction: float):
    lab, n = ndimage.label(mask, structure=np.ones((3, 3, 3), dtype=bool))
    if n == 0:
        return np.zeros_like(mask), []
    counts = np.bincount(lab.ravel())[1:]
    keep = np.flatnonzero(counts >= min_fraction * counts.max()) + 1
    out_mask = np.isin(lab, keep)
    found = []
    for k in keep:
        sel = lab == k
        found.append(Target(kind, points[sel].mean(axis=0), int(counts[k - 1]),
                            float(counts[k - 1] * h**3), int(k)))
    found.sort(key=lambda t: -t.voxels)
    return out_mask, found


def segment(vol: VolumeGrid, background: float, thresholds=(0.5, 0.5),
            min_fraction: float = 0.1, atol: float = 1e-12) -> SegmentedTargets:
    """Threshold segmentation of the real part inside the ball.

    Conductive: ``d > thr_c max d``; resistive: ``d < thr_r min d`` with
    ``d = Re(vol) - background``. Components (26-connectivity) smaller than
    ``min_fraction`` of the largest of their class are dropped. A class with
    no voxel deviating from the background by more than ``atol`` is empty.
    """
    tc, tr = thresholds
    if not (0 < tc < 1 and 0 < tr < 1):
        raise ConfigError("segmentation thresholds must lie in (0, 1)")
    d = np.real(vol.values) - float(np.real(background))
    d = np.where(vol.mask, d, 0.0)
    scale = atol * max(1.0, abs(float(np.real(background))))
    dmax, dmin = d.max(), d.min()
    cmask = (d > tc * dmax) & vol.mask if dmax > scale else np.zeros(d.shape, bool)
    rmask = (d < tr * dmin) & vol.mask if dmin < -scale else np.zeros(d.shape, bool)
    pts = vol.spec.points()
    cmask, ct = _components(cmask, "conductive", pts, vol.spec.h, min_fraction)
    rmask, rt = _components(rmask, "resistive", pts, vol.spec.h, min_fraction)
    return SegmentedTargets(cmask, rmask, ct + rt, (tc, tr), float(np.real(background)))


def localization_error(a: Target, b: Target) -> float:
    """Distance between centroids."""
    return float(np.linalg.norm(np.asarray(a.centroid) - np.asarray(b.centroid)))


def rvr(recon: Target, truth: Target) -> float:
    """Reconstructed over true target volume (voxel counts)."""
    if truth.voxels == 0:
        raise ConfigError("true target has no voxels")
    return recon.voxels / truth.voxels


def match_targets(seg: SegmentedTargets, truth: SegmentedTargets) -> list:
    """Greedy nearest-centroid pairing within each class.

    Returns ``(truth_target, recon_target or None)`` for every true target,
    in the truth ordering (largest first within a class).
    """
    pairs = []
    for kind in ("conductive", "resistive"):
        tt, rr = truth.of_kind(kind), seg.of_kind(kind)
        cand = sorted(((localization_error(t, r), i, j) for i, t in enumerate(tt) for j, r in enumerate(rr)))
        used_t, used_r, match = set(), set(), {}
        for _, i, j in cand:
            if i in used_t or j in used_r:
                continue
            used_t.add(i)
            used_r.add(j)
            match[i] = rr[j]
        pairs.extend((t, match.get(i)) for i, t in enumerate(tt))
    return pairs


# -- report ---------------------------------------------------------------


@dataclass
class TargetMetrics:
    name: str
    kind: str
    LE: float | None
    RVR: float | None


@dataclass
class MetricsReport:
    """Whole-image metrics plus per-target LE/RVR (``None`` when not available)."""

    DR: dict
    MSE: tuple
    MSSSIM: tuple
    targets: list
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.DR.items():
            if v is not None and v < 0:
                raise ConfigError(f"negative dynamic range for {k}")
        if any(v is not None and not 0 <= v <= 1 for v in self.MSSSIM):
            raise ConfigError("MS-SSIM outside [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["MSE"] = list(self.MSE)
        d["MSSSIM"] = list(self.MSSSIM)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), default=str, sort_keys=True)

    def to_text(self) -> str:
        """One line: provenance, DR, MSE, MS-SSIM and the per-target columns."""
        f = lambda v, fmt: "N/A" if v is None else format(v, fmt)  # noqa: E731
        prov = " ".join(f"{k}={v}" for k, v in sorted(self.provenance.items()))
        dr = " ".join(f"DR_{k}=" + ("N/A" if v is None else f"{v:.2f}%") for k, v in self.DR.items())
        tg = " ".join(f"[{t.name}: LE={f(t.LE, '.4f')} RVR={f(t.RVR, '.3f')}]" for t in self.targets)
        return (f"{prov} {dr} MSE=({self.MSE[0]:.4e},{self.MSE[1]:.4e}) "
                f"MSSSIM=({f(self.MSSSIM[0], '.4f')},{f(self.MSSSIM[1], '.4f')}) {tg}").strip()


def _target_names(truth_seg: SegmentedTargets, names=None):
    out = []
    for kind, base in (("conductive", "conductor"), ("resistive", "resistor")):
        tt = truth_seg.of_kind(kind)
        given = (names or {}).get(kind, [])
        for i, _ in enumerate(tt):
            out.append(given[i] if i < len(given) else f"{base} {i + 1}")
    return out


def evaluate(recon: VolumeGrid, truth: VolumeGrid, gamma_best, gamma_b, thresholds=(0.5, 0.5),
             names=None, provenance=None) -> MetricsReport:
    """All metrics of a reconstruction against the truth on the same grid.

    ``names`` optionally maps ``"conductive"``/``"resistive"`` to target names
    in truth order (largest first).
    """
    _same_grid(recon, truth)
    gb, gt = complex(gamma_best), complex(gamma_b)
    DR = {"real": dynamic_range(recon, truth, "real")}
    t_im = truth.values.imag[truth.mask]
    DR["imag"] = dynamic_range(recon, truth, "imag") if np.ptp(t_im) > 0 else None
    rf, tf = recon.filled(gb), truth.filled(gt)
    err = mse(rf, tf)
    ms_re = msssim3(rf.real, tf.real)
    ms_im = msssim3(rf.imag, tf.imag) if np.ptp(tf.imag) > 0 else None
    seg_t = segment(truth, gt.real, thresholds)
    seg_r = segment(recon, gb.real, thresholds)
    tnames = _target_names(seg_t, names)
    targets = []
    for name, (t, r) in zip(tnames, match_targets(seg_r, seg_t)):
        targets.append(TargetMetrics(name, t.kind, None if r is None else localization_error(r, t),
                                     None if r is None else rvr(r, t)))
    prov = dict(provenance or {})
    prov.setdefault("connectivity", CONNECTIVITY)
    return MetricsReport(DR, err, (ms_re, ms_im), targets, prov)
