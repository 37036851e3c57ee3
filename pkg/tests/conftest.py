import numpy as np
import pytest

from nlmc_poro.assembly import assemble_system, roller_constraints
from nlmc_poro.coefficients import MaterialParams
from nlmc_poro.geometry import build_coarse_grid, build_fine_mesh, embed_fractures
from nlmc_poro.harness import generate_fractures
from nlmc_poro.nlmc import NLMCBuilder

ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


class Small:
    """A 24x24 fine / 4x4 coarse instance with a handful of fractures."""

    def __init__(self, n_fractures=6, nx=24, N=4, seed=3, mp=None):
        self.mesh = build_fine_mesh(nx, nx)
        self.polylines = generate_fractures(seed, n_fractures, (0.1, 0.3))
        self.fr = embed_fractures(self.mesh, self.polylines)
        self.cg = build_coarse_grid(self.mesh, self.fr, N, N)
        self.mp = mp or MaterialParams()
        self.system = assemble_system(self.mesh, self.fr, self.cg, self.mp)
        dofs, _ = roller_constraints(self.mesh)
        self.builder = NLMCBuilder(self.mesh, self.fr, self.cg, self.system.operator, dofs)


@pytest.fixture(scope="session")
def small():
    return Small()


@pytest.fixture(scope="session")
def small_unfractured():
    return Small(n_fractures=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
