"""Complex geometrical optics reconstructions for 3D electrical impedance tomography.

Forward data come from a gap electrode model on the ball (analytic for
radially layered admittivities, finite differences otherwise). Two direct
reconstruction methods are provided: the Born-approximated D-bar method
(``t^exp``) and Calderón's linearized method, plus the image metrics used to
score them.
"""

from .calderon import calderon_pipeline, fhat_analytic, fhat_electrode
from .dbar import dbar_pipeline, texp_analytic, texp_volume
from .dnmap import DiscreteDNMap, build_dn_map, dn_pair, gamma_best, scale_dn
from .errors import CGOError, ConfigError, GeometryError, NumericalError, SolverError
from .forward import (add_noise, dn_eigenvalues, pairwise_patterns, synth_voltages,
                      synth_voltages_general, synth_voltages_radial)
from .geometry import ElectrodeLayout, place_electrodes
from .grid import GridSpec, VolumeGrid
from .metrics import MetricsReport, evaluate, msssim3, segment
from .phantom import Inclusion, Phantom, RadialLayers, eval_phantom, make_phantom, radial_profile

__version__ = "0.1.0"

__all__ = [
    "CGOError", "ConfigError", "DiscreteDNMap", "ElectrodeLayout", "GeometryError", "GridSpec",
    "Inclusion", "MetricsReport", "NumericalError", "Phantom", "RadialLayers", "SolverError",
    "VolumeGrid", "add_noise", "build_dn_map", "calderon_pipeline", "dbar_pipeline", "dn_eigenvalues",
    "dn_pair", "eval_phantom", "evaluate", "fhat_analytic", "fhat_electrode", "gamma_best",
    "make_phantom", "msssim3", "pairwise_patterns", "place_electrodes", "radial_profile", "scale_dn",
    "segment", "synth_voltages", "synth_voltages_general", "synth_voltages_radial", "texp_analytic",
    "texp_volume",
]
