"""Test admittivities T1, T2-A, T2-B, T3 and their evaluation on grids."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .grid import GridSpec, VolumeGrid


@dataclass(frozen=True)
class RadialLayers:
    """Piecewise-constant radial admittivity.

    ``radii`` are the outer radii r_1 < ... < r_N (r_0 = 0 implied, r_N is
    the domain radius); ``values[j]`` holds on [r_{j-1}, r_j].
    """

    radii: tuple
    values: tuple

    def __post_init__(self):
        r = np.asarray(self.radii, dtype=float)
        v = np.asarray(self.values, dtype=complex)
        if r.ndim != 1 or r.size == 0 or r.size != v.size:
            raise ConfigError("radii and values must be non-empty and of equal length")
        if r[0] <= 0 or np.any(np.diff(r) <= 0):
            raise ConfigError("layer radii must be positive and strictly increasing")
        if np.any(v.real <= 0):
            raise ConfigError("layer conductivities must have positive real part")
        object.__setattr__(self, "radii", tuple(float(x) for x in r))
        object.__setattr__(self, "values", tuple(complex(x) for x in v))

    @classmethod
    def homogeneous(cls, value=1.0, radius=1.0) -> "RadialLayers":
        return cls((radius,), (value,))

    @property
    def N(self) -> int:
        return len(self.radii)

    @property
    def radius(self) -> float:
        return self.radii[-1]

    @property
    def is_real(self) -> bool:
        return all(v.imag == 0 for v in self.values)

    def scaled(self, c) -> "RadialLayers":
        return RadialLayers(self.radii, tuple(c * v for v in self.values))

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        idx = np.searchsorted(np.asarray(self.radii), r, side="left")
        vals = np.asarray(self.values + (self.values[-1],))
        return vals[np.minimum(idx, self.N)]


@dataclass(frozen=True)
class Inclusion:
    """Axis-aligned ellipsoid (a ball when all semi-axes agree)."""

    center: tuple
    semi_axes: tuple
    value: complex
    name: str = ""

    @classmethod
    def ball(cls, center, radius, value, name=""):
        return cls(tuple(map(float, center)), (float(radius),) * 3, complex(value), name)

    @classmethod
    def ellipsoid(cls, center, semi_axes, value, name=""):
        return cls(tuple(map(float, center)), tuple(map(float, semi_axes)), complex(value), name)

    @property
    def is_ball(self) -> bool:
        return len(set(self.semi_axes)) == 1

    @property
    def volume(self) -> float:
        return 4.0 / 3.0 * np.pi * float(np.prod(self.semi_axes))

    def contains(self, x: np.ndarray) -> np.ndarray:
        d = (np.asarray(x, dtype=float) - np.asarray(self.center)) / np.asarray(self.semi_axes)
        return np.sum(d * d, axis=-1) <= 1.0

    def max_radius(self) -> float:
        """Largest |x| over the ellipsoid surface (dense sampling)."""
        t = np.linspace(0, np.pi, 181)
        p = np.linspace(0, 2 * np.pi, 361)
        T, P = np.meshgrid(t, p, indexing="ij")
        u = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], axis=-1)
        pts = np.asarray(self.center) + u * np.asarray(self.semi_axes)
        return float(np.linalg.norm(pts, axis=-1).max())


@dataclass(frozen=True)
class Phantom:
    """Background admittivity plus inclusions, on the ball of ``radius``.

    Later inclusions overwrite earlier ones where they overlap; a point on an
    inclusion boundary takes the inclusion value.
    """

    background: complex
    inclusions: tuple = ()
    radius: float = 1.0
    name: str = "custom"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "background", complex(self.background))
        object.__setattr__(self, "inclusions", tuple(self.inclusions))
        vals = [self.background] + [inc.value for inc in self.inclusions]
        if min(v.real for v in vals) <= 0:
            raise ConfigError("admittivity must have a positive real part everywhere")
        for inc in self.inclusions:
            if inc.max_radius() > self.radius * (1 + 1e-9):
                raise ConfigError(f"inclusion {inc.name or inc.center} leaves the domain")

    @property
    def is_real(self) -> bool:
        return self.background.imag == 0 and all(i.value.imag == 0 for i in self.inclusions)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Admittivity at points ``x`` (shape ``(..., 3)``)."""
        x = np.asarray(x, dtype=float)
        out = np.full(x.shape[:-1], self.background, dtype=complex)
        inside = np.sum(x * x, axis=-1) <= self.radius**2 * (1 + 1e-12)
        for inc in self.inclusions:
            out[inc.contains(x) & inside] = inc.value
        return out

    def perturbation_support_radius(self) -> float:
        return max((inc.max_radius() for inc in self.inclusions), default=0.0)

    def scaled(self, c) -> "Phantom":
        incs = tuple(Inclusion(i.center, i.semi_axes, c * i.value, i.name) for i in self.inclusions)
        return Phantom(c * self.background, incs, self.radius, f"{self.name}*{c}")

    # -- scene files -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "radius": self.radius,
            "background": _cplx_out(self.background),
            "inclusions": [
                {"name": i.name, "center": list(i.center), "semi_axes": list(i.semi_axes),
                 "value": _cplx_out(i.value)}
                for i in self.inclusions
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Phantom":
        incs = []
        for item in d.get("inclusions", []):
            if "semi_axes" in item:
                axes = item["semi_axes"]
            elif "radius" in item:
                axes = [item["radius"]] * 3
            else:
                raise ConfigError("inclusion needs 'radius' or 'semi_axes'")
            incs.append(Inclusion.ellipsoid(item["center"], axes, _cplx_in(item["value"]),
                                            item.get("name", "")))
        return cls(_cplx_in(d["background"]), tuple(incs), float(d.get("radius", 1.0)),
                   d.get("name", "custom"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "Phantom":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _cplx_in(v) -> complex:
    if isinstance(v, (list, tuple)):
        return complex(v[0], v[1])
    if isinstance(v, dict):
        return complex(v.get("re", 0.0), v.get("im", 0.0))
    if isinstance(v, str):
        return complex(v.replace(" ", "").replace("i", "j"))
    return complex(v)


def _cplx_out(v: complex):
    return [v.real, v.imag]


# T2 organ geometry (not published): heart ball, two mirrored lung ellipsoids.
HEART = dict(center=(0.3, 0.0, 0.1), radius=0.25)
LUNG1 = dict(center=(-0.35, 0.45, 0.0), semi_axes=(0.25, 0.35, 0.5))
LUNG2 = dict(center=(-0.35, -0.45, 0.0), semi_axes=(0.20, 0.30, 0.45))

PHANTOM_NAMES = ("T1", "T2A", "T2B", "T3")


def make_phantom(name: str, radius: float = 1.0) -> Phantom:
    """One of the built-in targets T1, T2A, T2B, T3 (case-insensitive)."""
    key = name.upper().replace("-", "").replace("_", "")
    if key == "T1":
        incs = (Inclusion.ball((0, 0, 0), 0.5, 2.0, "ball"),)
        bg = 1.0
    elif key in ("T2A", "T2B"):
        heart, lung = (2 + 0.6j, 0.5 + 0.2j) if key == "T2A" else (2.0, 0.5)
        bg = 0.8 + 0.3j if key == "T2A" else 1.0
        incs = (
            Inclusion.ball(HEART["center"], HEART["radius"], heart, "heart"),
            Inclusion.ellipsoid(LUNG1["center"], LUNG1["semi_axes"], lung, "lung 1"),
            Inclusion.ellipsoid(LUNG2["center"], LUNG2["semi_axes"], lung, "lung 2"),
        )
    elif key == "T3":
        incs = (
            Inclusion.ball((0.5, 0, 0), 0.3, 1.5, "conductor"),
            Inclusion.ball((0, 0.5, 0), 0.2, 0.1, "resistor"),
        )
        bg = 1.0
    elif key in ("HOMOGENEOUS", "H"):
        incs, bg = (), 1.0
    else:
        raise ConfigError(f"unknown phantom {name!r}; expected one of {PHANTOM_NAMES}")
    if radius != 1.0:
        incs = tuple(Inclusion(tuple(radius * c for c in i.center),
                               tuple(radius * s for s in i.semi_axes), i.value, i.name)
                     for i in incs)
    return Phantom(bg, incs, radius, key)


def homogeneous_phantom(value=1.0, radius=1.0) -> Phantom:
    return Phantom(value, (), radius, "homogeneous")


def eval_phantom(p: Phantom, grid) -> VolumeGrid:
    """Sample ``p`` on a grid (``GridSpec`` or node count per axis)."""
    spec = grid if isinstance(grid, GridSpec) else GridSpec(int(grid), p.radius, p.radius)
    vals = p.evaluate(spec.points())
    return VolumeGrid(spec, vals, meta={"phantom": p.name})


def radial_profile(p: Phantom) -> RadialLayers:
    """Exact layer representation of a radially symmetric phantom.

    Raises
    ------
    ConfigError
        If some inclusion is not a ball centred at the origin.
    """
    for inc in p.inclusions:
        if not inc.is_ball or np.any(np.abs(inc.center) > 0):
            raise ConfigError(f"phantom {p.name} is not radially symmetric")
    breaks = sorted({inc.semi_axes[0] for inc in p.inclusions if inc.semi_axes[0] < p.radius}
                    | {p.radius})
    lo = [0.0] + breaks[:-1]
    mids = [(a + b) / 2 for a, b in zip(lo, breaks)]
    vals = [p.evaluate(np.array([[r, 0.0, 0.0]]))[0] for r in mids]
    radii, values = [], []
    for r, v in zip(breaks, vals):
        if values and v == values[-1]:
            radii[-1] = r
        else:
            radii.append(r)
            values.append(v)
    return RadialLayers(tuple(radii), tuple(values))
