import numpy as np
import pytest

from slowfast import fields as fl
from slowfast import levelsets as lv
from slowfast import experiments as ex


@pytest.fixture(scope="session")
def sym_ctx():
    """Symmetric canonical sphere system with graph/saddle/coeffs, shared."""
    return ex.get_context(beta=0.0, noise_scale=1.0)


@pytest.fixture(scope="session")
def asym_ctx():
    """Asymmetric (beta=0.1) context, shared."""
    return ex.get_context(beta=0.1, noise_scale=1.0)


@pytest.fixture(scope="session")
def sym_sys(sym_ctx):
    return sym_ctx.sys


@pytest.fixture(scope="session")
def sym_graph(sym_ctx):
    return sym_ctx.graph


@pytest.fixture(scope="session")
def torus_ctx():
    """Canonical torus system plus its rate graph, shared."""
    from slowfast import torus as tor
    tsys = tor.canonical_torus_system()
    rates = tor.torus_rates(tsys)
    return tsys, rates


def surface_points(sys, n, seed=0, spread=1.5):
    rng = np.random.default_rng(seed)
    return fl.surface_cloud(sys, n, rng, spread=spread)
