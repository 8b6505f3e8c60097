"""Linearized operator, corrector profiles, interaction constant, eigenpair.

The linearization around the bubble is L = -Delta - f'(W).  Its radial kernel
is Lambda W; a second homogeneous solution Gamma (normalized by the modified
wronskian r^4 (LamW Gamma' - LamW' Gamma) = 1) generates the particular
solutions

    L A = kappa Lambda W + f'(W),      L B = -Lambda_0 Lambda W,

by variation of parameters.  kappa is fixed by the solvability condition and
equals 128/(105 pi).  L also has a single negative eigenvalue -e0^2 with
positive eigenfunction Y.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp
from scipy.interpolate import PchipInterpolator
from scipy.linalg import solve_banded

from .radial import (
    RadialField,
    RadialGrid,
    SPHERE_AREA,
    f_prime,
    inner_product,
    lam0_lam_w,
    lam_w,
    lam_w_prime,
    laplacian,
    quad,
    w_value,
)

KAPPA_CLOSED_FORM = 128.0 / (105.0 * np.pi)

_SERIES_SWITCH = 1e-3           # Gamma: origin series below, ODE above
_GAMMA_A4 = -217.0 / 360.0      # Frobenius coefficients of the singular branch
_GAMMA_A6 = 0.09657407407407407


class ProfileError(RuntimeError):
    pass


def reference_grid(n=131072, rmax=1e10, r_core=1e-6):
    """Default profile grid; rmax is large because <LamW, LamW> has an
    11.27/R quadrature tail that must sit below the kappa tolerance."""
    return RadialGrid.geometric(n, rmax, r_core=r_core)


# ----------------------------------------------------------------------
# test function Z and the linearized operator
# ----------------------------------------------------------------------

def z_bump_values(r, support=3.5, sharp=1.0):
    """C^infty bump exp(-sharp/(1-(r/support)^2)) inside r < support, else 0.

    Support below sqrt(15), where Lambda W > 0, so <Lambda W, Z> > 0.
    """
    r = np.asarray(r, dtype=float)
    x = r / support
    out = np.zeros_like(x)
    inside = x < 1.0
    out[inside] = np.exp(-sharp / (1.0 - x[inside] ** 2))
    return out


def test_function_Z(grid, which="default") -> RadialField:
    if which == "default":
        vals = z_bump_values(grid.r)
    elif which == "alternate":
        vals = z_bump_values(grid.r, support=3.0, sharp=2.0)
    else:
        raise ValueError(f"unknown Z variant {which!r}")
    return RadialField(grid, vals)


def f_prime_w_scaled(r, lam):
    """f'(W_lam)(r) = lam^-2 f'(W)(r/lam), evaluated in closed form."""
    return (7.0 / 3.0) / lam**2 * (1.0 + (np.asarray(r) / lam) ** 2 / 15.0) ** -2.0


def apply_L(g: RadialField, lam=1.0) -> RadialField:
    """L_lam g = -Delta g - f'(W_lam) g on g's grid."""
    if lam <= 0:
        raise ValueError("lam must be positive")
    lap = laplacian(g)
    vals = -lap.values - f_prime_w_scaled(g.grid.r, lam) * g.values
    return RadialField(g.grid, vals, even=g.even)


def compute_kappa(grid=None) -> float:
    """-<LamW, f'(W)> / <LamW, LamW> by quadrature (sphere factors cancel)."""
    if grid is None:
        grid = reference_grid()
    lw = lam_w(grid.r)
    num = quad(grid, lw * f_prime(w_value(grid.r)))
    den = quad(grid, lw * lw)
    return -num / den


# ----------------------------------------------------------------------
# second homogeneous solution Gamma
# ----------------------------------------------------------------------

def _gamma_series(r):
    """Singular branch near 0: Gamma = -(2/9)(r^-3 + 7/(6r) + a4 r + a6 r^3).

    Normalized so the modified wronskian with Lambda W equals 1.
    """
    y = r**-3 + (7.0 / 6.0) / r + _GAMMA_A4 * r + _GAMMA_A6 * r**3
    dy = -3.0 * r**-4 - (7.0 / 6.0) * r**-2 + _GAMMA_A4 + 3.0 * _GAMMA_A6 * r**2
    return -(2.0 / 9.0) * y, -(2.0 / 9.0) * dy


def gamma_arrays(grid: RadialGrid):
    """(Gamma, Gamma') on the grid nodes.

    Series on (0, 1e-3], then the homogeneous ODE -(r^4 y')' - r^4 f'(W) y = 0
    integrated outward in tau = log r for (z, w) = (r^3 y, r^4 y').  Outward
    from much smaller radii is unusable: the regular mode grows like r^3
    relative to Gamma and roundoff excites it while leaving the wronskian
    untouched.
    """
    r = grid.r
    G = np.zeros_like(r)
    dG = np.zeros_like(r)
    pos = r > 0
    lo = pos & (r <= _SERIES_SWITCH)
    G[lo], dG[lo] = _gamma_series(r[lo])
    hi = r > _SERIES_SWITCH
    if not np.any(hi):
        return G, dG
    g0, dg0 = _gamma_series(_SERIES_SWITCH)
    y0 = [_SERIES_SWITCH**3 * g0, _SERIES_SWITCH**4 * dg0]

    def rhs(tau, y):
        rr = np.exp(tau)
        return [3.0 * y[0] + y[1],
                -(rr**2) * f_prime(w_value(rr)) * y[0]]

    sol = solve_ivp(rhs, [np.log(_SERIES_SWITCH), np.log(r[-1])], y0,
                    t_eval=np.log(r[hi]), method="DOP853",
                    rtol=3e-14, atol=1e-300)
    if not sol.success:
        raise ProfileError(f"Gamma integration failed: {sol.message}")
    G[hi] = sol.y[0] / r[hi] ** 3
    dG[hi] = sol.y[1] / r[hi] ** 4
    # r = 0 node: Gamma is singular there; value unused by the quadratures
    # below (integrands carry r^4), keep a finite sentinel from the series.
    if r[0] == 0.0:
        G[0], dG[0] = G[1], dG[1]
    return G, dG


def second_solution(grid: RadialGrid) -> RadialField:
    G, _ = gamma_arrays(grid)
    return RadialField(grid, G, even=False)


def modified_wronskian(grid, G=None, dG=None):
    """r^4 (LamW Gamma' - LamW' Gamma); constant 1 wherever Gamma is resolved."""
    if G is None or dG is None:
        G, dG = gamma_arrays(grid)
    r = grid.r
    return r**4 * (lam_w(r) * dG - lam_w_prime(r) * G)


# ----------------------------------------------------------------------
# correctors A and B
# ----------------------------------------------------------------------

def _cumtrap(y, x):
    out = np.zeros_like(y)
    out[1:] = np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(x))
    return out


def corrector_rhs(kind, r):
    """Right-hand sides of the defining equations (L y = rhs)."""
    if kind == "A":
        return KAPPA_CLOSED_FORM * lam_w(r) + f_prime(w_value(r))
    if kind == "B":
        return -lam0_lam_w(r)
    raise ValueError(f"unknown corrector kind {kind!r}")


def solve_corrector(kind, grid, gamma=None, z_field=None):
    """Particular solution of L y = rhs by variation of parameters,
    normalized by adding c LamW so that <Z, y> = 0.

    Returns (y, y', y'') arrays.  y and y' come from cumulative quadrature of
    the factorized kernel; y'' from the differential equation itself, so the
    FD residual of L y - rhs stays an independent check.
    """
    r = grid.r
    if gamma is None:
        gamma = gamma_arrays(grid)
    G, dG = gamma
    lw, dlw = lam_w(r), lam_w_prime(r)
    rhs = corrector_rhs(kind, r)
    g = r**4 * rhs
    i_lam = _cumtrap(lw * g, r)
    i_gam = _cumtrap(G * g, r)
    y = lw * i_gam - G * i_lam
    dy = dlw * i_gam - dG * i_lam
    if r[0] == 0.0:
        y[0], dy[0] = 0.0, 0.0
    # normalization <Z, y> = 0
    if z_field is None:
        z_field = test_function_Z(grid)
    zy = quad(grid, z_field.values * y)
    zlw = quad(grid, z_field.values * lw)
    if abs(zlw) < 1e-300:
        raise ProfileError("degenerate Z: <Z, LamW> = 0")
    c = -zy / zlw
    y = y + c * lw
    dy = dy + c * dlw

    fpw = f_prime(w_value(r))
    ddy = np.empty_like(y)
    ddy[1:] = -4.0 * dy[1:] / r[1:] - fpw[1:] * y[1:] - rhs[1:]
    ddy[0] = -(fpw[0] * y[0] + rhs[0]) / 5.0
    return y, dy, ddy


# ----------------------------------------------------------------------
# ground eigenpair of L
# ----------------------------------------------------------------------

def _spectral_system(grid, r_spec):
    """Symmetric finite-volume discretization of L on [0, r_spec],
    Dirichlet at r_spec.  Returns (diag, offdiag, cell volumes, nodes)."""
    r = grid.r
    m = int(np.searchsorted(r, r_spec))
    if m < 16:
        raise ProfileError("spectral domain resolves too few nodes")
    rr = r[: m + 1]                      # unknowns at rr[0..m-1], rr[m] pinned
    mid = 0.5 * (rr[:-1] + rr[1:])
    p = mid**4
    h = np.diff(rr)
    edges = np.concatenate([[0.0], mid, [rr[-1]]])
    vol = (edges[1:] ** 5 - edges[:-1] ** 5) / 5.0
    n = m
    diag = np.zeros(n)
    off = np.zeros(n - 1)
    diag[0] = p[0] / h[0]
    for i in range(1, n):
        diag[i] = p[i - 1] / h[i - 1] + p[i] / h[i]
        off[i - 1] = -p[i - 1] / h[i - 1]
    v = vol[:n]
    fw = f_prime(w_value(rr[:n]))
    d = np.sqrt(v)
    t_diag = diag / v - fw
    t_off = off / (d[:-1] * d[1:])
    return t_diag, t_off, v, rr[:n]


def _rqi_ground(t_diag, t_off, nodes, tol=1e-13, max_iter=80, purify=12):
    """Ground eigenpair by shifted inverse iteration with Rayleigh updates.

    The first iterations keep the shift fixed below the spectrum bottom
    (-7/3 bounds it since 0 <= f'(W) <= 7/3), which purifies the start
    vector toward the single negative eigenvalue before the Rayleigh phase.
    """
    n = len(t_diag)
    y = np.exp(-nodes)
    y /= np.linalg.norm(y)
    sigma = -2.4
    ab = np.zeros((3, n))
    mu = None
    for it in range(max_iter):
        ab[0, 1:] = t_off
        ab[1, :] = t_diag - sigma
        ab[2, :-1] = t_off
        try:
            y_new = solve_banded((1, 1), ab, y)
        except np.linalg.LinAlgError:
            sigma *= 1.0 + 1e-8
            continue
        y_new /= np.linalg.norm(y_new)
        ty = t_diag * y_new
        ty[1:] += t_off * y_new[:-1]
        ty[:-1] += t_off * y_new[1:]
        mu_new = float(y_new @ ty)
        if mu is not None and abs(mu_new - mu) < tol * max(1.0, abs(mu_new)):
            return mu_new, y_new
        mu, y = mu_new, y_new
        if it >= purify and mu_new < 0.0:
            sigma = mu_new
    return mu, y


def ground_eigenpair(grid=None, r_spec=60.0):
    """(e0, Y): lowest eigenpair of L, eigenvalue -e0^2 < 0, Y > 0, |Y|_L2 = 1.

    Y is extended beyond the spectral window by its e^{-e0 r}/r^2 tail and
    normalized with the full-grid quadrature.
    """
    if grid is None:
        grid = reference_grid()
    t_diag, t_off, vol, nodes = _spectral_system(grid, r_spec)
    mu, yv = _rqi_ground(t_diag, t_off, nodes)
    if mu >= 0:
        raise ProfileError(f"lowest eigenvalue {mu} is nonnegative; "
                           "spectral domain too small or grid too coarse")
    e0 = float(np.sqrt(-mu))
    y = yv / np.sqrt(vol)             # back from the symmetrized variable
    if y[np.argmax(np.abs(y))] < 0:
        y = -y
    # exponential tail continuation from a fit window clear of the boundary
    r = grid.r
    vals = np.zeros(grid.n)
    n_in = len(nodes)
    r_fit_hi = 0.8 * r_spec
    i_hi = int(np.searchsorted(nodes, r_fit_hi))
    vals[:i_hi] = y[:i_hi]
    win = (nodes > 0.6 * r_spec) & (nodes <= r_fit_hi) & (y > 0)
    if np.count_nonzero(win) >= 4:
        coef = np.polyfit(nodes[win], np.log(y[win] * nodes[win] ** 2), 1)
        decay, amp = -coef[0], coef[1]
        rt = r[i_hi:]
        with np.errstate(over="ignore", under="ignore"):
            expo = amp - decay * rt - 2.0 * np.log(np.maximum(rt, 1e-300))
            tail = np.where(expo > -700.0, np.exp(np.minimum(expo, 0.0)), 0.0)
        vals[i_hi:] = tail
    yf = RadialField(grid, vals)
    nrm = np.sqrt(inner_product(yf, yf))
    yf = RadialField(grid, vals / nrm)
    return e0, yf


def eigen_residual(grid, e0, y: RadialField, r_spec=60.0):
    """|L Y + e0^2 Y|_L2 with the same discrete operator used for the solve."""
    t_diag, t_off, vol, nodes = _spectral_system(grid, r_spec)
    n = len(nodes)
    yv = y.values[:n] * np.sqrt(vol)
    ty = t_diag * yv
    ty[1:] += t_off * yv[:-1]
    ty[:-1] += t_off * yv[1:]
    res = ty + e0**2 * yv
    return float(np.sqrt(SPHERE_AREA * np.sum(res**2)))


# ----------------------------------------------------------------------
# profile functions with far-field continuation
# ----------------------------------------------------------------------

@dataclass
class ProfileFn:
    """Grid samples + two-term power-law continuation c1 r^-p + c2 r^-(p+1).

    The continuation lets the ansatz evaluate profiles at r/lambda far beyond
    the reference grid (cutoff arguments reach 2t/lambda ~ 1e18 in degenerate
    scans).
    """

    r: np.ndarray
    values: np.ndarray
    p: float
    c1: float = 0.0
    c2: float = 0.0

    def __post_init__(self):
        self._interp = PchipInterpolator(self.r, self.values, extrapolate=False)
        self._rmax = self.r[-1]

    @staticmethod
    def fit(r, values, p, lo_frac=1e-3, hi_frac=0.3):
        rmax = r[-1]
        win = (r >= lo_frac * rmax) & (r <= hi_frac * rmax)
        x = 1.0 / r[win]
        yv = values[win] * r[win] ** p
        c2, c1 = np.polyfit(x, yv, 1)
        return ProfileFn(r, values, p, float(c1), float(c2))

    def __call__(self, rq):
        scalar = np.isscalar(rq) or np.ndim(rq) == 0
        rq = np.atleast_1d(np.asarray(rq, dtype=float))
        out = self._interp(rq)
        far = rq > self._rmax
        if np.any(far):
            rf = rq[far]
            out[far] = (self.c1 + self.c2 / rf) * rf ** (-self.p)
        out = np.where(np.isnan(out), 0.0, out)
        return float(out[0]) if scalar else out


# ----------------------------------------------------------------------
# the assembled profile set
# ----------------------------------------------------------------------

PROFILE_CACHE_VERSION = 1

_FAR_P = {"A": 1, "B": 1, "dA": 2, "dB": 2, "ddA": 3, "ddB": 3,
          "LamA": 1, "LamB": 1, "dLamA": 2, "dLamB": 2,
          "Lam0A": 1, "Lam0B": 1, "Lam0LamA": 1, "Lam0LamB": 1}


@dataclass
class ProfileSet:
    """Precomputed bubble-interaction data on a reference grid."""

    grid: RadialGrid
    kappa: float
    e0: float
    fields: dict            # name -> RadialField
    fns: dict               # name -> ProfileFn (far-field capable)

    def field(self, name) -> RadialField:
        return self.fields[name]

    def fn(self, name) -> ProfileFn:
        return self.fns[name]

    def save(self, path):
        data = {
            "version": np.array(PROFILE_CACHE_VERSION),
            "kappa": np.array(self.kappa),
            "e0": np.array(self.e0),
            "grid_r": self.grid.r,
            "grid_w": self.grid.w,
            "grid_spacing": np.array(self.grid.spacing),
        }
        for name, fld in self.fields.items():
            data[f"field_{name}"] = fld.values
        for name, fn in self.fns.items():
            data[f"fn_{name}"] = np.array([fn.p, fn.c1, fn.c2])
        np.savez_compressed(path, **data)

    @staticmethod
    def load(path):
        with np.load(path, allow_pickle=False) as z:
            if int(z["version"]) != PROFILE_CACHE_VERSION:
                raise ProfileError("profile cache version mismatch")
            grid = RadialGrid(z["grid_r"], z["grid_w"], str(z["grid_spacing"]))
            fields = {}
            fns = {}
            for key in z.files:
                if key.startswith("field_"):
                    fields[key[6:]] = RadialField(grid, z[key])
            for key in z.files:
                if key.startswith("fn_"):
                    name = key[3:]
                    p, c1, c2 = z[key]
                    fns[name] = ProfileFn(grid.r, fields[name].values, p, c1, c2)
            return ProfileSet(grid, float(z["kappa"]), float(z["e0"]),
                              fields, fns)


def build_profile_set(grid=None, r_spec=60.0, z_variant="default") -> ProfileSet:
    if grid is None:
        grid = reference_grid()
    r = grid.r
    kap = compute_kappa(grid)
    zf = test_function_Z(grid, z_variant)
    gamma = gamma_arrays(grid)

    fields = {
        "W": RadialField(grid, w_value(r)),
        "LamW": RadialField(grid, lam_w(r)),
        "Lam0LamW": RadialField(grid, lam0_lam_w(r)),
        "Z": zf,
        "Gamma": RadialField(grid, gamma[0], even=False),
        "GammaPrime": RadialField(grid, gamma[1], even=False),
    }
    for kind in ("A", "B"):
        y, dy, ddy = solve_corrector(kind, grid, gamma=gamma, z_field=zf)
        lam_y = 1.5 * y + r * dy
        lam0_y = 2.5 * y + r * dy
        dlam_y = 2.5 * dy + r * ddy
        lam0_lam_y = 2.5 * lam_y + r * dlam_y
        fields[kind] = RadialField(grid, y)
        fields["d" + kind] = RadialField(grid, dy, even=False)
        fields["dd" + kind] = RadialField(grid, ddy)
        fields["Lam" + kind] = RadialField(grid, lam_y)
        fields["dLam" + kind] = RadialField(grid, dlam_y, even=False)
        fields["Lam0" + kind] = RadialField(grid, lam0_y)
        fields["Lam0Lam" + kind] = RadialField(grid, lam0_lam_y)

    e0, yf = ground_eigenpair(grid, r_spec=r_spec)
    fields["Y"] = yf

    fns = {name: ProfileFn.fit(r, fields[name].values, p)
           for name, p in _FAR_P.items()}
    # Y decays exponentially; beyond the grid it is numerically zero
    fns["Y"] = ProfileFn(r, yf.values, p=1, c1=0.0, c2=0.0)
    return ProfileSet(grid, kap, e0, fields, fns)
