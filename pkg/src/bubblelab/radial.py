"""Radial grids, quadrature and the basic objects of the 5-d radial problem.

Everything lives on [0, R_max] with the measure r^4 dr; inner products carry
the |S^4| = 8 pi^2 / 3 surface factor so that scalar constants come out the
same as for integrals over R^5.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator

SPHERE_AREA = 8.0 * np.pi**2 / 3.0  # |S^4|, unit sphere surface in R^5


# ----------------------------------------------------------------------
# grids
# ----------------------------------------------------------------------

class GridError(ValueError):
    pass


def _radial_weights(r):
    """Weights w_i with sum(w_i g_i) ~ int g r^4 dr (composite trapezoid).

    The integrand g*r^4 is trapezoid-integrated cell by cell; the first cell
    [0, r_1] is corrected to integrate r^4 * (linear g) exactly, which is what
    keeps weights meaningful at the r=0 node where r^4 vanishes.
    """
    n = len(r)
    w = np.zeros(n)
    gr4 = r**4
    dr = np.diff(r)
    w[:-1] += 0.5 * dr * gr4[:-1]
    w[1:] += 0.5 * dr * gr4[1:]
    if r[0] == 0.0 and n > 1:
        # exact on cell 0: int_0^r1 r^4 (g0 (1-r/r1) + g1 r/r1) dr
        r1 = r[1]
        w[0] = r1**5 / 30.0
        w[1] += r1**5 / 6.0 - 0.5 * r1 * gr4[1]
    return w


@dataclass(frozen=True)
class RadialGrid:
    """Nonuniform radial mesh with quadrature weights for int g r^4 dr."""

    r: np.ndarray
    w: np.ndarray
    spacing: str  # "uniform" | "geometric" | "mapped"

    def __post_init__(self):
        if self.r[0] != 0.0:
            raise GridError("first node must be r = 0")
        if np.any(np.diff(self.r) <= 0):
            raise GridError("nodes must be strictly increasing")
        if np.any(self.w < 0):
            raise GridError("negative quadrature weight")

    @property
    def n(self):
        return len(self.r)

    @property
    def rmax(self):
        return float(self.r[-1])

    @property
    def min_dr(self):
        return float(np.min(np.diff(self.r)))

    def descriptor(self):
        return {
            "spacing": self.spacing,
            "n": int(self.n),
            "rmax": self.rmax,
            "r1": float(self.r[1]),
        }

    @staticmethod
    def uniform(n, rmax):
        r = np.linspace(0.0, rmax, n)
        return RadialGrid(r, _radial_weights(r), "uniform")

    @staticmethod
    def geometric(n, rmax, r_core=1e-6, n_core=None):
        """Log-spaced nodes on [r_core, rmax] behind a uniform patch [0, r_core].

        Suits profiles decaying like inverse powers of r and bubbles
        concentrated at scales far below rmax.  By default the patch spacing
        matches the first geometric cell, so min_dr (and any CFL limit built
        on it) is set by r_core and the per-decade density alone.
        """
        if n_core is None:
            n_core = 16
            for _ in range(4):
                ratio = (rmax / r_core) ** (1.0 / max(n - n_core - 1, 2))
                n_core = min(max(int(round(1.0 / (ratio - 1.0))), 4), n // 2)
        if n_core >= n - 2:
            raise GridError("n_core too large")
        geo = np.geomspace(r_core, rmax, n - n_core)
        uni = np.linspace(0.0, r_core, n_core + 1)[:-1]
        r = np.concatenate([uni, geo])
        return RadialGrid(r, _radial_weights(r), "geometric")

    @staticmethod
    def mapped(r):
        r = np.asarray(r, dtype=float)
        return RadialGrid(r, _radial_weights(r), "mapped")

    def refined(self, factor=2):
        """Grid with (factor-1) extra nodes per cell (halved spacing for 2)."""
        pieces = [self.r[:1]]
        for a, b in zip(self.r[:-1], self.r[1:]):
            pieces.append(np.linspace(a, b, factor + 1)[1:])
        r = np.concatenate(pieces)
        return RadialGrid(r, _radial_weights(r), self.spacing)


# ----------------------------------------------------------------------
# fields
# ----------------------------------------------------------------------

@dataclass
class RadialField:
    """Sampled radial function; even parity means v'(0) = 0."""

    grid: RadialGrid
    values: np.ndarray
    even: bool = True

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.r.shape:
            raise GridError("values do not match grid")

    def copy(self):
        return RadialField(self.grid, self.values.copy(), self.even)

    def interpolator(self):
        return PchipInterpolator(self.grid.r, self.values, extrapolate=False)

    def __call__(self, rq):
        out = self.interpolator()(rq)
        return np.where(np.isnan(out), 0.0, out)

    def deriv(self):
        """3-point first derivative on the nonuniform grid, O(h^2)."""
        r, v = self.grid.r, self.values
        d = np.empty_like(v)
        h1 = r[1:-1] - r[:-2]
        h2 = r[2:] - r[1:-1]
        d[1:-1] = (-h2 / h1 * v[:-2] + (h2 / h1 - h1 / h2) * v[1:-1]
                   + h1 / h2 * v[2:]) / (h1 + h2)
        d[0] = 0.0 if self.even else (v[1] - v[0]) / (r[1] - r[0])
        d[-1] = (v[-1] - v[-2]) / (r[-1] - r[-2])
        return RadialField(self.grid, d, even=not self.even)

    def __add__(self, other):
        _same_grid(self, other)
        return RadialField(self.grid, self.values + other.values, self.even)

    def __sub__(self, other):
        _same_grid(self, other)
        return RadialField(self.grid, self.values - other.values, self.even)

    def __mul__(self, c):
        return RadialField(self.grid, self.values * c, self.even)

    __rmul__ = __mul__


@dataclass
class StatePair:
    """(u, du/dt) pair; the unit of the energy norm."""

    position: RadialField
    velocity: RadialField

    def __post_init__(self):
        _same_grid(self.position, self.velocity)

    @property
    def grid(self):
        return self.position.grid

    def copy(self):
        return StatePair(self.position.copy(), self.velocity.copy())

    @staticmethod
    def zero(grid):
        z = np.zeros(grid.n)
        return StatePair(RadialField(grid, z.copy()), RadialField(grid, z.copy()))


def _same_grid(a, b):
    if a.grid is not b.grid and not np.array_equal(a.grid.r, b.grid.r):
        raise GridError("fields live on different grids")


# ----------------------------------------------------------------------
# inner products and norms
# ----------------------------------------------------------------------

def inner_product(v: RadialField, w: RadialField) -> float:
    """<v, w> = int_{R^5} v w dx = |S^4| int v w r^4 dr."""
    _same_grid(v, w)
    return SPHERE_AREA * float(np.sum(v.grid.w * v.values * w.values))


def quad(grid: RadialGrid, samples) -> float:
    """int samples(r) r^4 dr over the grid (no sphere factor)."""
    return float(np.sum(grid.w * samples))


def norm(x, kind="L2") -> float:
    """L2 / H1dot norm of a field, or the energy norm of a pair."""
    if isinstance(x, StatePair):
        if kind != "Energy":
            raise ValueError("pair norms: kind='Energy'")
        return float(np.sqrt(norm(x.position, "H1dot") ** 2
                             + norm(x.velocity, "L2") ** 2))
    if kind == "L2":
        return float(np.sqrt(max(inner_product(x, x), 0.0)))
    if kind == "H1dot":
        d = x.deriv()
        return float(np.sqrt(max(inner_product(d, d), 0.0)))
    raise ValueError(f"unknown norm kind {kind!r}")


# ----------------------------------------------------------------------
# ground state family (closed forms)
# ----------------------------------------------------------------------

def w_value(r):
    """W(r) = (1 + r^2/15)^(-3/2), the static bubble."""
    return (1.0 + np.asarray(r) ** 2 / 15.0) ** -1.5


def w_prime(r):
    r = np.asarray(r)
    return -(r / 5.0) * (1.0 + r**2 / 15.0) ** -2.5


def lam_w(r):
    """(3/2 + r d/dr) W; vanishes only at r = sqrt(15)."""
    r = np.asarray(r)
    return (1.5 - r**2 / 10.0) * (1.0 + r**2 / 15.0) ** -2.5


def lam_w_prime(r):
    r = np.asarray(r)
    u = 1.0 + r**2 / 15.0
    return -(r / 5.0) * u**-2.5 + (1.5 - r**2 / 10.0) * (-r / 3.0) * u**-3.5


def lam0_lam_w(r):
    """(5/2 + r d/dr) applied to Lambda W."""
    r = np.asarray(r)
    return 2.5 * lam_w(r) + r * lam_w_prime(r)


_GROUND_STATE = {
    "W": w_value,
    "Wprime": w_prime,
    "LamW": lam_w,
    "Lam0LamW": lam0_lam_w,
}


def ground_state(grid: RadialGrid, order="W") -> RadialField:
    try:
        fn = _GROUND_STATE[order]
    except KeyError:
        raise ValueError(f"unknown ground-state order {order!r}") from None
    return RadialField(grid, fn(grid.r), even=(order != "Wprime"))


# ----------------------------------------------------------------------
# nonlinearity f(u) = |u|^{4/3} u
# ----------------------------------------------------------------------

def f_nl(u):
    u = np.asarray(u)
    return np.abs(u) ** (4.0 / 3.0) * u


def f_prime(u):
    return (7.0 / 3.0) * np.abs(np.asarray(u)) ** (4.0 / 3.0)


def f_second(u):
    # continuous extension: 0 at u = 0
    u = np.asarray(u)
    return (28.0 / 9.0) * np.abs(u) ** (1.0 / 3.0) * np.sign(u)


def f_primitive(u):
    """F(u) = (3/10) |u|^{10/3}."""
    return 0.3 * np.abs(np.asarray(u)) ** (10.0 / 3.0)


def f_third(u):
    """(28/27)|u|^{-2/3}; third derivative of f away from 0."""
    return (28.0 / 27.0) * np.abs(np.asarray(u, dtype=float)) ** (-2.0 / 3.0)


def nonlinear_extraction(k, l, m):
    """f(k+l+m) - f(k) - f(m) - f'(k)(l+m), stable where |l+m| << |k|.

    k is the bubble, l the corrector profile, m the background.  In the
    bubble core the direct expression cancels |k/(l+m)| ulps (1e12 and worse
    at small scales); the Taylor branch keeps the genuine quadratic
    remainder instead.
    """
    k = np.asarray(k, dtype=float)
    sh = np.broadcast_shapes(k.shape, np.shape(l), np.shape(m))
    k = np.broadcast_to(k, sh)
    lm = np.broadcast_to(np.asarray(l, dtype=float)
                         + np.asarray(m, dtype=float), sh)
    mv = np.broadcast_to(np.asarray(m, dtype=float), sh)
    out = np.empty(sh)
    small = np.abs(lm) <= 1e-4 * np.abs(k)
    ks, ds = k[small], lm[small]
    with np.errstate(divide="ignore", invalid="ignore"):
        cubic = np.where(ds == 0.0, 0.0, f_third(ks) * ds**3 / 6.0)
    out[small] = 0.5 * f_second(ks) * ds**2 + cubic - f_nl(mv[small])
    big = ~small
    out[big] = f_nl(k[big] + lm[big]) - f_nl(k[big]) - f_nl(mv[big]) \
        - f_prime(k[big]) * lm[big]
    return out


def potential_remainder(p, q):
    """F(p+q) - F(p) - f(p) q, stable where |q| << |p| (same cancellation
    story for the potential part of the adapted energy)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    p, q = np.broadcast_arrays(p, q)
    out = np.empty(p.shape)
    small = np.abs(q) <= 1e-4 * np.abs(p)
    ps, qs = p[small], q[small]
    with np.errstate(divide="ignore", invalid="ignore"):
        quart = np.where(qs == 0.0, 0.0, f_third(ps) * qs**4 / 24.0)
    out[small] = 0.5 * f_prime(ps) * qs**2 + f_second(ps) * qs**3 / 6.0 + quart
    big = ~small
    out[big] = f_primitive(p[big] + q[big]) - f_primitive(p[big]) \
        - f_nl(p[big]) * q[big]
    return out


_NONLIN = {"F": f_primitive, "f": f_nl, "fprime": f_prime, "fsecond": f_second}


def nonlinearity(u: RadialField, order="f") -> RadialField:
    try:
        fn = _NONLIN[order]
    except KeyError:
        raise ValueError(f"unknown nonlinearity order {order!r}") from None
    return RadialField(u.grid, fn(u.values), even=u.even)


# ----------------------------------------------------------------------
# scaling, laplacian, energy
# ----------------------------------------------------------------------

def rescale(v: RadialField, lam: float, kind="pow3/2") -> RadialField:
    """v_lam (kind pow3/2) or v_underline-lam (pow5/2), resampled on v's grid.

    Monotone cubic interpolation avoids overshoot on steep rescaled bubbles;
    arguments r/lam beyond the grid read as the last sample (profiles there
    are tail values, and rescaled fields are used well inside the domain).
    """
    if lam <= 0:
        raise ValueError("lam must be positive")
    if kind == "pow3/2":
        p = 1.5
    elif kind == "pow5/2":
        p = 2.5
    else:
        raise ValueError(f"unknown rescale kind {kind!r}")
    if lam == 1.0:
        return v.copy()
    interp = PchipInterpolator(v.grid.r, v.values, extrapolate=False)
    arg = v.grid.r / lam
    out = interp(arg)
    out = np.where(np.isnan(out), v.values[-1], out)
    return RadialField(v.grid, lam**-p * out, even=v.even)


def laplacian(v: RadialField) -> RadialField:
    """Radial laplacian d_rr + (4/r) d_r; 5 v''(0) at the origin.

    3-point nonuniform stencils, O(h^2), exact on quadratic polynomials at
    interior nodes; one-sided at the outer boundary.
    """
    r, u = v.grid.r, v.values
    if len(r) < 4:
        raise GridError("grid too coarse for the laplacian")
    out = np.empty_like(u)
    h1 = r[1:-1] - r[:-2]
    h2 = r[2:] - r[1:-1]
    upp = 2.0 * (h1 * u[2:] - (h1 + h2) * u[1:-1] + h2 * u[:-2]) / (h1 * h2 * (h1 + h2))
    up = (-h2 / h1 * u[:-2] + (h2 / h1 - h1 / h2) * u[1:-1] + h1 / h2 * u[2:]) / (h1 + h2)
    out[1:-1] = upp + 4.0 * up / r[1:-1]
    if v.even:
        # regular limit: Delta v(0) = 5 v''(0), with v'(0) = 0
        out[0] = 10.0 * (u[1] - u[0]) / r[1] ** 2
    else:
        out[0] = 0.0
    out[-1] = out[-2]
    return RadialField(v.grid, out, even=v.even)


def energy(x: StatePair) -> float:
    """Conserved energy: |u1|^2/2 + |grad u0|^2/2 - F(u0), integrated."""
    pot = SPHERE_AREA * quad(x.grid, f_primitive(x.position.values))
    return 0.5 * norm(x.velocity, "L2") ** 2 + 0.5 * norm(x.position, "H1dot") ** 2 - pot
