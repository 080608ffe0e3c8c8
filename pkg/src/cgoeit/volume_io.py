"""Volume files and center-plane slice images.

A volume file is a text header (``key: value`` lines ending with ``# data``)
followed by little-endian float64 samples in C order: the real field, then
the imaginary field.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .grid import GridSpec, VolumeGrid

HEADER = "# cgoeit volume v1"
PLANES = {"x1x2": 2, "x1x3": 1, "x2x3": 0}


def _atomic_bytes(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_volume(vol: VolumeGrid, path, config_hash: str = "", meta=None) -> None:
    path = Path(path)
    m = {**vol.meta, **(meta or {})}
    head = [HEADER, f"n: {vol.spec.n}", f"extent: {float(vol.spec.extent)!r}", f"radius: {float(vol.spec.radius)!r}",
            "fields: real imag", "dtype: <f8", f"config_hash: {config_hash}",
            f"meta: {json.dumps(m, default=str, sort_keys=True)}", "# data"]
    v = np.asarray(vol.values, dtype=complex)
    body = np.ascontiguousarray(v.real).astype("<f8").tobytes() + np.ascontiguousarray(v.imag).astype("<f8").tobytes()
    _atomic_bytes(path, ("\n".join(head) + "\n").encode() + body)


def read_volume(path) -> VolumeGrid:
    raw = Path(path).read_bytes()
    marker = b"# data\n"
    k = raw.find(marker)
    if not raw.startswith(HEADER.encode()) or k < 0:
        raise ConfigError(f"{path}: not a volume file")
    info = {}
    for line in raw[:k].decode().splitlines()[1:]:
        key, _, val = line.partition(":")
        info[key.strip()] = val.strip()
    n = int(info["n"])
    body = np.frombuffer(raw[k + len(marker):], dtype="<f8")
    if body.size != 2 * n**3:
        raise ConfigError(f"{path}: expected {2 * n**3} samples, found {body.size}")
    vals = body[: n**3].reshape(n, n, n) + 1j * body[n**3:].reshape(n, n, n)
    meta = json.loads(info.get("meta", "{}") or "{}")
    meta["config_hash"] = info.get("config_hash", "")
    return VolumeGrid(GridSpec(n, float(info["extent"]), float(info["radius"])), vals, meta=meta)


def center_slice(vol: VolumeGrid, plane: str) -> np.ndarray:
    if plane not in PLANES:
        raise ConfigError(f"unknown plane {plane!r}")
    c = vol.spec.n // 2
    return np.take(vol.values, c, axis=PLANES[plane])


def write_slices(vol: VolumeGrid, directory, stem: str, center, config_hash: str = "") -> list:
    """Three center-plane PNGs per field with symmetric limits about ``center``.

    Each image has a JSON sidecar with the plane, field, limits and config hash.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    c = complex(center)
    fields = [("real", c.real)]
    inside = vol.values[vol.mask]
    if np.abs(inside.imag).max() > 1e-6 * np.abs(inside).max() or c.imag != 0:
        fields.append(("imag", c.imag))
    written = []
    for name, mid in fields:
        part = np.real(vol.values) if name == "real" else np.imag(vol.values)
        dev = float(np.abs(part[vol.mask] - mid).max()) or 1e-12
        lim = (mid - dev, mid + dev)
        for plane in PLANES:
            img = np.real(center_slice(vol.with_values(part), plane))
            img = np.where(np.take(vol.mask, vol.spec.n // 2, axis=PLANES[plane]), img, np.nan)
            png = d / f"{stem}_{name}_{plane}.png"
            tmp = png.with_name(png.name + ".tmp.png")
            fig, ax = plt.subplots(figsize=(3.2, 3.2), dpi=100)
            im = ax.imshow(img.T, origin="lower", cmap="viridis", vmin=lim[0], vmax=lim[1],
                           extent=[-vol.spec.extent, vol.spec.extent] * 2)
            fig.colorbar(im, ax=ax, fraction=0.046)
            ax.set_title(f"{name} {plane}")
            fig.savefig(tmp, format="png")
            plt.close(fig)
            os.replace(tmp, png)
            side = {"plane": plane, "field": name, "limits": list(lim), "center": mid,
                    "config_hash": config_hash, "colormap": "viridis"}
            _atomic_bytes(png.with_suffix(".json"), json.dumps(side, indent=1).encode())
            written.append(png)
    return written
