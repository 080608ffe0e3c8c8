import warnings

import numpy as np
import pytest

from cgoeit.dnmap import dn_pair
from cgoeit.forward import pairwise_patterns, synth_voltages_radial
from cgoeit.geometry import place_electrodes
from cgoeit.phantom import RadialLayers, make_phantom, radial_profile


@pytest.fixture(scope="session")
def t1_layers():
    return radial_profile(make_phantom("T1"))


class RadialData:
    """Gap-model data of a radial phantom and its unit homogeneous reference."""

    def __init__(self, layers, L):
        self.layers = layers
        self.layout = place_electrodes(L)
        self.patterns = pairwise_patterns(L)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            self.U = synth_voltages_radial(RadialLayers.homogeneous(), self.layout, self.patterns)
            self.V = synth_voltages_radial(layers, self.layout, self.patterns)

    def maps(self, self_term=True):
        return dn_pair(self.patterns, self.V, self.U, self.layout, self_term=self_term)


@pytest.fixture(scope="session")
def t1_data32(t1_layers):
    return RadialData(t1_layers, 32)


@pytest.fixture(scope="session")
def t1_data128(t1_layers):
    return RadialData(t1_layers, 128)


@pytest.fixture(scope="session")
def const2_data32():
    return RadialData(RadialLayers.homogeneous(2.0), 32)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
