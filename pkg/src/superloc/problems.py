"""Coefficients and source terms of the benchmark experiments."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fem
from .mesh import FineMesh

COEFFICIENT_KINDS = ("constant", "random_checkerboard", "channeled")
SOURCE_KINDS = ("constant_one", "f1", "custom_polynomial")

# (x1 position, x2 start, x2 end) of the four vertical channels. The first and
# third run through the whole domain. In the "grounded" layout the other two
# touch one side and stop before the opposite one; in the "floating" layout
# they stop before both sides. A floating channel of huge conductivity is an
# equipotential at an unknown level, which Dirichlet patch problems cannot
# represent; see the README for the effect on the localization errors.
CHANNEL_LAYOUTS = {
    "grounded": ((0.2, 0.0, 1.0), (0.4, 0.0, 0.85), (0.6, 0.0, 1.0), (0.8, 0.1, 1.0)),
    "floating": ((0.2, 0.0, 1.0), (0.4, 0.1, 0.85), (0.6, 0.0, 1.0), (0.8, 0.1, 0.85)),
}


def default_channels(eps_cells: int, layout: str = "grounded") -> list:
    """Channel rectangles [x1lo, x1hi, x2lo, x2hi], one eps-cell wide."""
    if layout not in CHANNEL_LAYOUTS:
        raise ValueError(f"unknown channel layout {layout!r}")
    out = []
    for x, lo, hi in CHANNEL_LAYOUTS[layout]:
        k = int(np.floor(x * eps_cells))
        out.append([k / eps_cells, (k + 1) / eps_cells, lo, hi])
    return out


@dataclass
class CoefficientSpec:
    kind: str = "random_checkerboard"
    eps_cells: int = 32  # elements per axis of the piecewise-constant eps-mesh
    lo: float = 1.0
    hi: float = 100.0
    value: float = 1.0  # for kind == "constant"
    seed: int = 0
    kappa: float = 1e4  # channel conductivity
    channels: list = None  # rectangles; None means default_channels(eps_cells, layout)
    layout: str = "grounded"

    def __post_init__(self):
        if self.kind not in COEFFICIENT_KINDS:
            raise ValueError(f"unknown coefficient kind {self.kind!r}")
        if self.kind == "constant" and self.value <= 0:
            raise ValueError("constant coefficient must be positive")
        if self.kind != "constant" and not 0 < self.lo <= self.hi:
            raise ValueError("coefficient range needs 0 < lo <= hi")
        if self.kind == "channeled":
            if self.layout not in CHANNEL_LAYOUTS:
                raise ValueError(f"unknown channel layout {self.layout!r}")
            if self.kappa <= 0:
                raise ValueError("kappa must be positive")
            for rect in self.channel_rects():
                x1lo, x1hi, x2lo, x2hi = rect
                if not (0 <= x1lo < x1hi <= 1 and 0 <= x2lo < x2hi <= 1):
                    raise ValueError(f"channel {rect} does not lie inside the unit square")

    def channel_rects(self) -> list:
        return default_channels(self.eps_cells, self.layout) if self.channels is None else [list(c) for c in self.channels]


def eps_values(spec: CoefficientSpec) -> np.ndarray:
    """Values on the eps-mesh, shape (eps_cells, eps_cells) indexed [i2, i1]."""
    n = spec.eps_cells
    if spec.kind == "constant":
        return np.full((n, n), float(spec.value))
    # Philox is counter-based: value k is a pure function of (seed, k)
    gen = np.random.Generator(np.random.Philox(key=spec.seed))
    vals = spec.lo + (spec.hi - spec.lo) * gen.random(n * n)
    grid = vals.reshape(n, n)
    if spec.kind == "channeled":
        centers = (np.arange(n) + 0.5) / n
        for x1lo, x1hi, x2lo, x2hi in spec.channel_rects():
            cols = (centers >= x1lo) & (centers <= x1hi)
            rows = (centers >= x2lo) & (centers <= x2hi)
            grid[np.ix_(rows, cols)] = spec.kappa
    return grid


def realize_coefficient(spec: CoefficientSpec, fine: FineMesh) -> fem.CoefficientField:
    if fine.nf % spec.eps_cells:
        raise ValueError(f"eps-mesh with {spec.eps_cells} cells does not divide the fine mesh ({fine.nf})")
    k = fine.nf // spec.eps_cells
    return fem.CoefficientField(np.kron(eps_values(spec), np.ones((k, k))).ravel())


def f1(x1, x2):
    return (x1 + np.cos(3 * np.pi * x1)) * x2**3


@dataclass
class SourceSpec:
    kind: str = "constant_one"
    # custom_polynomial: list of [i, j, c] meaning c * x1^i * x2^j
    terms: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in SOURCE_KINDS:
            raise ValueError(f"unknown source kind {self.kind!r}")
        if self.kind == "custom_polynomial":
            for t in self.terms:
                i, j, _ = t
                if i < 0 or j < 0 or i > 4 or j > 4:
                    raise ValueError("custom polynomial degree per coordinate must be in [0, 4]")

    def function(self):
        """Vectorized f(x1, x2)."""
        if self.kind == "constant_one":
            return lambda x1, x2: np.ones(np.broadcast(x1, x2).shape)
        if self.kind == "f1":
            return f1
        terms = [tuple(t) for t in self.terms]

        def poly(x1, x2):
            out = np.zeros(np.broadcast(x1, x2).shape)
            for i, j, c in terms:
                out = out + c * x1**i * x2**j
            return out

        return poly


def realize_source(spec: SourceSpec, fine: FineMesh, full: bool = False) -> np.ndarray:
    """Load FineVector (f, phi_i); exact for constant and (degree <= 4) polynomial f."""
    if spec.kind == "constant_one":
        return fem.load_constant(fine, 1.0, full=full)
    return fem.load_function(fine, spec.function(), npts=3, full=full)
