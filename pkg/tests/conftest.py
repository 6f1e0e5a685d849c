import numpy as np
import pytest

from pcstudio import AdaptorConfig, LatentAdaptor, make_toy_bundle
from pcstudio.latent import DirectionCatalog, EditDirection, WPlusLatent
from pcstudio.training import superclass_token

TOY_ADAPTOR_CFG = AdaptorConfig(
    wplus_shape=(3, 8), token_dim=16, pe_bands=3, attn_heads=2, max_timestep=10
)


def dyadic(rng: np.random.Generator, shape, scale=1.0, grid=64):
    """Random values snapped to multiples of 1/grid so float sums stay exact."""
    return np.round(rng.standard_normal(shape) * scale * grid) / grid


@pytest.fixture(scope="session")
def bundle():
    return make_toy_bundle(0)


@pytest.fixture(scope="session")
def adaptor(bundle):
    return LatentAdaptor(TOY_ADAPTOR_CFG, seed=1, v_cls=superclass_token(bundle))


@pytest.fixture()
def rng():
    return np.random.default_rng(7)


@pytest.fixture()
def toy_w(rng):
    return WPlusLatent(dyadic(rng, (3, 8)), source_tag="encoded")


@pytest.fixture()
def toy_catalog(rng):
    cat = DirectionCatalog()
    for name in ("smile", "age", "beard"):
        cat.add(EditDirection(name=name, delta=dyadic(rng, (3, 8), scale=0.5), provenance="external"))
    return cat


@pytest.fixture()
def toy_image(rng):
    return rng.standard_normal((8, 8, 3)) * 0.5
