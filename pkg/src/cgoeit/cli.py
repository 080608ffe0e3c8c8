"""Command line: synthesize data, reconstruct, score, and run sweeps.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O
error. ``CGOEIT_WORKERS`` sets the worker count for sweeps and forward
solves.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import calderon, dbar, forward, metrics
from .dnmap import dn_pair
from .errors import ConfigError, NumericalError, SolverError
from .geometry import place_electrodes
from .grid import GridSpec
from .phantom import Phantom, eval_phantom, homogeneous_phantom, make_phantom
from .volume_io import read_volume, write_slices, write_volume

log = logging.getLogger("cgoeit")

EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 2, 3, 4
METHODS = ("dbar", "calderon", "texp-calderon")


@dataclass
class ExperimentConfig:
    """Everything needed to go from a phantom to a scored reconstruction."""

    phantom: object = "T1"
    L: int = 32
    skip: int = 0
    amplitude: float = forward.DEFAULT_AMPLITUDE
    r_elec: float = 0.05
    eta: float = 0.0
    seed: int = 0
    synth_grid: int = 64
    method: str = "dbar"
    T_xi: float = 7.0
    n_xi: int = dbar.DEFAULT_NXI
    kappa_mult: float = 1.0
    T_z: float = 1.3
    t: float = 0.1
    n_theta: int = calderon.DEFAULT_NTHETA
    z_nodes: list | None = None
    weight: str = "uniform"
    solver_n: int = 64
    out_n: int = 128
    self_term: bool = True
    conjugate: bool = True
    auto_trunc: bool = False
    auto_trunc_k: float = 10.0
    thresholds: tuple = (0.5, 0.5)
    output: str = "out"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if self.L < 3:
            raise ConfigError("need at least 3 electrodes")
        if self.eta < 0:
            raise ConfigError("eta must be non-negative")
        for name in ("T_xi", "T_z"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.t < 0:
            raise ConfigError("t must be non-negative")
        if self.n_xi < 3 or self.n_xi % 2 == 0:
            raise ConfigError("n_xi must be odd and >= 3")
        if self.kappa_mult < 1:
            raise ConfigError("kappa_mult must be >= 1")
        if self.z_nodes is not None and (len(self.z_nodes) != 3 or any(n < 3 or n % 2 == 0 for n in self.z_nodes)):
            raise ConfigError("z_nodes needs three odd counts >= 3")
        if not all(0 < x < 1 for x in self.thresholds):
            raise ConfigError("thresholds must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["thresholds"] = list(self.thresholds)
        return d

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output")
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]

    def load_phantom(self) -> Phantom:
        p = self.phantom
        if isinstance(p, dict):
            return Phantom.from_dict(p)
        if isinstance(p, str) and p.lower().endswith(".json"):
            return Phantom.load(p)
        return make_phantom(str(p))


def load_config(path=None, overrides=None) -> ExperimentConfig:
    d = {}
    if path:
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    d.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ExperimentConfig.from_dict(d)


# -- truncation heuristic -------------------------------------------------


def auto_truncation(radii: np.ndarray, values: np.ndarray, k: float = 10.0) -> float:
    """Largest radius before the data "blows up".

    Samples are grouped into shells one sample spacing wide (the smallest
    nonzero radius). Scanning outwards, a shell is accepted while its maximum
    of ``|values|`` stays below ``k`` times the median of the accepted shell
    maxima; the result is the outer radius of the last accepted shell.
    """
    radii = np.asarray(radii, dtype=float).ravel()
    vals = np.abs(np.asarray(values)).ravel()
    keep = radii > 0
    if not keep.any():
        raise ConfigError("no nonzero radii to truncate")
    radii, vals = radii[keep], vals[keep]
    width = radii.min()
    shell = np.ceil(radii / width - 1e-9).astype(int)
    maxima, T = [], width
    for s in np.unique(shell):
        cur = float(vals[shell == s].max())
        if maxima and cur > k * float(np.median(maxima)):
            break
        maxima.append(cur)
        T = float(radii[shell == s].max())
    return T


# -- stages ---------------------------------------------------------------


def _outdir(cfg: ExperimentConfig) -> Path:
    d = Path(cfg.output)
    d.mkdir(parents=True, exist_ok=True)
    return d


def synthesize(cfg: ExperimentConfig):
    """Measured (optionally noisy) voltages and the unit homogeneous reference."""
    p = cfg.load_phantom()
    layout = place_electrodes(cfg.L, p.radius, cfg.r_elec)
    pat = forward.pairwise_patterns(cfg.L, cfg.skip, cfg.amplitude)
    V = forward.synth_voltages(p, layout, pat, cfg.synth_grid)
    U = forward.synth_voltages(homogeneous_phantom(1.0, p.radius), layout, pat, cfg.synth_grid)
    V = forward.add_noise(V, cfg.eta, cfg.seed) if cfg.eta > 0 else V
    h = cfg.hash()
    V = V.with_values(V.V, eta=cfg.eta, seed=cfg.seed, config_hash=h)
    U = U.with_values(U.V, reference=True, config_hash=h)
    return p, layout, pat, V, U


def cmd_synth(cfg: ExperimentConfig):
    _, _, _, V, U = synthesize(cfg)
    d = _outdir(cfg)
    forward.save_voltages(V, d / "voltages.txt")
    forward.save_voltages(U, d / "reference.txt")
    log.info("synth: wrote %s and %s (%dx%d, seed %d)", d / "voltages.txt", d / "reference.txt",
             V.L, V.K, cfg.seed)
    return d / "voltages.txt", d / "reference.txt"


def reconstruct(cfg: ExperimentConfig, V, U, layout, pat):
    """Run the configured method; returns ``(volume, info)``."""
    mg, m1 = dn_pair(pat, V, U, layout, self_term=cfg.self_term, conjugate=cfg.conjugate)
    info = {"gamma_best": str(mg.gamma_best), "method": cfg.method}
    if cfg.method in ("dbar", "texp-calderon"):
        T = cfg.T_xi
        if cfg.auto_trunc:
            probe = dbar.texp_volume(mg, m1, layout, 2.5 * T, 2 * cfg.n_xi + 1, cfg.kappa_mult)
            T = auto_truncation(probe.norms(), probe.values, cfg.auto_trunc_k)
            info["T_xi_auto"] = T
        vol, _ = dbar.dbar_pipeline(mg, m1, layout, T, cfg.n_xi, cfg.kappa_mult, cfg.solver_n,
                                    cfg.out_n, method=cfg.method)
        info["T_xi"] = T
    else:
        Tz = cfg.T_z
        nodes = tuple(cfg.z_nodes) if cfg.z_nodes else None
        if cfg.auto_trunc:
            zg = calderon.SphericalZGrid.build(2.5 * Tz, (31, 5, 5))
            fh = calderon.fhat_electrode(mg, m1, layout, zg, cfg.n_theta, cfg.weight)
            Tz = auto_truncation(np.linalg.norm(zg.points(), axis=-1), fh.values, cfg.auto_trunc_k)
            info["T_z_auto"] = Tz
        vol, _ = calderon.calderon_pipeline(mg, m1, layout, Tz, cfg.t, nodes, cfg.n_theta,
                                            cfg.solver_n, cfg.out_n, cfg.weight)
        info["T_z"] = Tz
    if not np.all(np.isfinite(vol.values)):
        raise NumericalError(f"{cfg.method} produced non-finite values")
    if not (np.iscomplexobj(V.V) or np.iscomplexobj(U.V)):
        # real data: the imaginary part is a discretization artefact
        info["imag_max_dropped"] = float(np.abs(vol.values.imag).max())
        vol = vol.with_values(vol.values.real.astype(complex))
    vol.meta.update(info)
    return vol, info


def _load_pair(cfg, voltages, reference):
    for f in (voltages, reference):
        if not Path(f).exists():
            raise FileNotFoundError(f"missing voltage file {f}")
    V = forward.load_voltages(voltages)
    U = forward.load_voltages(reference)
    if V.V.shape != U.V.shape:
        raise ConfigError("measured and reference voltages differ in shape")
    if V.L != cfg.L:
        raise ConfigError(f"voltage file has L={V.L}, config says L={cfg.L}")
    p = cfg.load_phantom()
    layout = place_electrodes(cfg.L, p.radius, cfg.r_elec)
    lh = V.meta.get("layout_hash")
    if lh and lh != layout.layout_hash():
        raise ConfigError("voltage file was produced on a different electrode layout")
    pat = forward.pairwise_patterns(cfg.L, cfg.skip, cfg.amplitude)
    if pat.K != V.K:
        raise ConfigError(f"voltage file has {V.K} patterns, protocol gives {pat.K}")
    return V, U, layout, pat


def cmd_recon(cfg: ExperimentConfig, voltages=None, reference=None):
    d = _outdir(cfg)
    V, U, layout, pat = _load_pair(cfg, voltages or d / "voltages.txt", reference or d / "reference.txt")
    vol, info = reconstruct(cfg, V, U, layout, pat)
    h = cfg.hash()
    path = d / f"recon_{cfg.method}.vol"
    write_volume(vol, path, h, {"config": cfg.to_dict()})
    write_slices(vol, d / "slices", f"recon_{cfg.method}", complex(info["gamma_best"]), h)
    log.info("recon: %s gamma_best=%s -> %s", cfg.method, info["gamma_best"], path)
    return path


def score(cfg: ExperimentConfig, vol, provenance=None) -> metrics.MetricsReport:
    p = cfg.load_phantom()
    truth = eval_phantom(p, GridSpec(vol.spec.n, vol.spec.extent, vol.spec.radius))
    gb = vol.meta.get("gamma_best", 1.0)
    gb = complex(gb) if isinstance(gb, str) else (complex(*gb) if isinstance(gb, list) else complex(gb))
    names = {"conductive": [], "resistive": []}
    for inc in sorted(p.inclusions, key=lambda i: -i.volume):
        kind = "conductive" if inc.value.real > p.background.real else "resistive"
        names[kind].append(inc.name)
    prov = {"method": vol.meta.get("method"), "phantom": p.name, "L": cfg.L, "eta": cfg.eta,
            "config_hash": cfg.hash(), **(provenance or {})}
    return metrics.evaluate(vol, truth, gb, p.background, cfg.thresholds, names, prov)


def cmd_metrics(cfg: ExperimentConfig, volume=None):
    d = _outdir(cfg)
    path = Path(volume or d / f"recon_{cfg.method}.vol")
    if not path.exists():
        raise FileNotFoundError(f"missing volume file {path}")
    rep = score(cfg, read_volume(path))
    out = d / f"metrics_{cfg.method}.json"
    tmp = out.with_name(out.name + ".tmp")
    tmp.write_text(rep.to_json() + "\n")
    os.replace(tmp, out)
    print(rep.to_text())
    return out


# -- sweeps ---------------------------------------------------------------


def expand_matrix(matrix: dict) -> list:
    """Cells of a sweep: ``base`` config, ``methods`` and either ``cells``
    (override dicts) or ``sweep`` ``{key: [values]}`` with optional
    ``per_value`` ``{key: [values]}`` aligned to the sweep."""
    base = dict(matrix.get("base", {}))
    methods = matrix.get("methods", [base.get("method", "dbar")])
    cells = list(matrix.get("cells", []))
    if "sweep" in matrix:
        (key, values), = matrix["sweep"].items()
        per = matrix.get("per_value", {})
        for i, v in enumerate(values):
            c = {key: v}
            for k2, vs in per.items():
                if len(vs) != len(values):
                    raise ConfigError(f"per_value {k2!r} does not match the sweep length")
                c[k2] = vs[i]
            cells.append(c)
    if not cells:
        cells = [{}]
    out = []
    for c in cells:
        for m in methods:
            d = {**base, **c, "method": m}
            out.append(d)
    return out


def run_cell(d: dict, outroot: Path, cache: dict) -> dict:
    row = {"method": d.get("method"), **{k: d[k] for k in ("L", "eta") if k in d}}
    try:
        cfg = ExperimentConfig.from_dict({**d, "output": str(outroot / f"cell_{_short_hash(d)}")})
        key = (json.dumps(cfg.phantom, sort_keys=True, default=str), cfg.L, cfg.skip, cfg.amplitude,
               cfg.r_elec, cfg.eta, cfg.seed, cfg.synth_grid)
        if key not in cache:
            cache[key] = synthesize(cfg)
        _, layout, pat, V, U = cache[key]
        vol, info = reconstruct(cfg, V, U, layout, pat)
        d_out = _outdir(cfg)
        write_volume(vol, d_out / f"recon_{cfg.method}.vol", cfg.hash(), {"config": cfg.to_dict()})
        rep = score(cfg, vol, {k: v for k, v in info.items() if k.startswith("T_")})
        row.update(status="ok", report=rep.to_dict(), text=rep.to_text())
    except Exception as exc:  # noqa: BLE001  per-cell failures are recorded
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        log.debug(traceback.format_exc())
    return row


def _short_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:10]


def cmd_pipeline(matrix: dict, output: str = "out") -> Path:
    cells = expand_matrix(matrix)
    outroot = Path(matrix.get("output", output))
    outroot.mkdir(parents=True, exist_ok=True)
    # cells sharing a data configuration run in one group and reuse the synthesis
    rows = [None] * len(cells)
    groups: dict = {}
    for i, c in enumerate(cells):
        groups.setdefault(json.dumps({k: v for k, v in c.items() if k not in ("method",)}, sort_keys=True,
                                     default=str), []).append(i)
    workers = forward._workers()

    def run_group(idx):
        local: dict = {}
        return [(i, run_cell(cells[i], outroot, local)) for i in idx]

    with ThreadPoolExecutor(max_workers=workers) as ex:
        for res in ex.map(run_group, groups.values()):
            for i, r in res:
                rows[i] = r
    table = format_table(rows)
    out = outroot / "table.txt"
    tmp = out.with_name(out.name + ".tmp")
    tmp.write_text(table + "\n")
    os.replace(tmp, out)
    js = outroot / "table.json"
    tmp = js.with_name(js.name + ".tmp")
    tmp.write_text(json.dumps(rows, indent=1, default=str, sort_keys=True) + "\n")
    os.replace(tmp, js)
    print(table)
    return out


def format_table(rows: list) -> str:
    lines = []
    for r in rows:
        if r["status"] == "ok":
            lines.append(r["text"])
        else:
            lines.append(f"method={r['method']} L={r.get('L', '')} eta={r.get('eta', '')} FAILED {r['error']}")
    return "\n".join(lines)


# -- entry point ------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cgoeit", description="3D CGO-based EIT reconstruction.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON experiment configuration")
        p.add_argument("--phantom")
        p.add_argument("--L", type=int)
        p.add_argument("--skip", type=int)
        p.add_argument("--eta", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--method", choices=METHODS)
        p.add_argument("--T-xi", dest="T_xi", type=float)
        p.add_argument("--n-xi", dest="n_xi", type=int)
        p.add_argument("--T-z", dest="T_z", type=float)
        p.add_argument("--t", type=float)
        p.add_argument("--solver-n", dest="solver_n", type=int)
        p.add_argument("--out-n", dest="out_n", type=int)
        p.add_argument("--output", "-o")
        p.add_argument("--auto-trunc", dest="auto_trunc", action="store_true", default=None)
        p.add_argument("--no-self-term", dest="self_term", action="store_false", default=None)

    common(sub.add_parser("synth", help="synthesize voltages and the homogeneous reference"))
    p = sub.add_parser("recon", help="reconstruct from voltage files")
    common(p)
    p.add_argument("--voltages")
    p.add_argument("--reference")
    p = sub.add_parser("metrics", help="score a reconstructed volume")
    common(p)
    p.add_argument("--volume")
    p = sub.add_parser("pipeline", help="run a sweep matrix")
    p.add_argument("matrix", help="JSON sweep matrix")
    p.add_argument("--output", "-o", default="out")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "pipeline":
            matrix = json.loads(Path(args.matrix).read_text())
            cmd_pipeline(matrix, args.output)
            return 0
        skip = {"config", "command", "verbose", "voltages", "reference", "volume"}
        overrides = {k: v for k, v in vars(args).items() if k not in skip}
        cfg = load_config(args.config, overrides)
        if args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "recon":
            cmd_recon(cfg, args.voltages, args.reference)
        else:
            cmd_metrics(cfg, args.volume)
        return 0
    except (ConfigError, json.JSONDecodeError, TypeError) as exc:
        log.error("config: %s", exc)
        return EXIT_CONFIG
    except (NumericalError, SolverError, ArithmeticError, np.linalg.LinAlgError) as exc:
        log.error("numerical: %s", exc)
        return EXIT_NUMERICAL
    except OSError as exc:
        log.error("io: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
