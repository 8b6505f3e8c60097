"""Energy and virial functionals, Pohozaev identity, coercivity checks.

The error pair is controlled through I (the energy with its constant and
linear parts removed) corrected by a virial term J built from a convex
C^{3,1} weight a(r): quadratic inside radius R, matched to a linear-growth
tail outside.  Coercivity of the linearized quadratic form under the Y and Z
orthogonality constraints is measured as a constrained Rayleigh quotient
minimum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh, eigh_tridiagonal

from .profiles import f_prime_w_scaled, z_bump_values
from .radial import (
    RadialField,
    RadialGrid,
    SPHERE_AREA,
    StatePair,
    f_prime,
    inner_product,
    laplacian,
    norm,
    potential_remainder,
    quad,
    w_value,
)


class FunctionalError(RuntimeError):
    pass


# ----------------------------------------------------------------------
# virial weight
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class VirialWeight:
    """Piecewise weight: a = r^2/2 for r <= R, inverse-power tail beyond.

    C^{3,1} across r = R, strictly convex, with bilaplacian exactly
    -15 R / r^3 outside (and 0 inside).
    """

    R: float

    def _split(self, r):
        r = np.asarray(r, dtype=float)
        return r, r <= self.R

    @staticmethod
    def _safe(r):
        # outer-branch denominators; the value at r=0 comes from the inner
        # branch, this only keeps the unused lane finite
        return np.where(r > 0, r, 1.0)

    def a(self, r):
        r, inside = self._split(r)
        R = self.R
        out = 1.875 * R * r - 2.5 * R**2 + 1.25 * R**3 / self._safe(r) \
            - 0.125 * R**5 / self._safe(r) ** 3
        return np.where(inside, 0.5 * r**2, out)

    def a1(self, r):
        r, inside = self._split(r)
        R = self.R
        rr = self._safe(r)
        out = 1.875 * R - 1.25 * R**3 / rr**2 + 0.375 * R**5 / rr**4
        return np.where(inside, r, out)

    def a2(self, r):
        r, inside = self._split(r)
        R = self.R
        rr = self._safe(r)
        out = 2.5 * (R / rr) ** 3 - 1.5 * (R / rr) ** 5
        return np.where(inside, 1.0, out)

    def a3(self, r):
        r, inside = self._split(r)
        R = self.R
        rr = self._safe(r)
        out = -7.5 * R**3 / rr**4 + 7.5 * R**5 / rr**6
        return np.where(inside, 0.0, out)

    def lap(self, r):
        r, inside = self._split(r)
        R = self.R
        rr = self._safe(r)
        out = 7.5 * R / rr - 2.5 * R**3 / rr**3
        return np.where(inside, 5.0, out)

    def bilap(self, r):
        r, inside = self._split(r)
        rr = self._safe(r)
        return np.where(inside, 0.0, -15.0 * self.R / rr**3)


_ORDERS = {"a": "a", "a1": "a1", "a2": "a2", "a3": "a3",
           "lap": "lap", "bilap": "bilap"}


def virial_weight(r, R, order="a"):
    """Closed-form evaluation of the weight or one of its derivatives."""
    if R <= 0:
        raise ValueError("R must be positive")
    try:
        return getattr(VirialWeight(R), _ORDERS[order])(r)
    except KeyError:
        raise ValueError(f"unknown virial order {order!r}") from None


# ----------------------------------------------------------------------
# I, J, weighted gradient, Pohozaev
# ----------------------------------------------------------------------

def functional_I(eps: StatePair, phi0: RadialField) -> float:
    """Energy with the order-0 and order-1 terms in eps removed.

    The potential part uses the branch-stable remainder: phi0 reaches
    lambda^{-3/2} in the bubble core, where the naive F-difference is pure
    cancellation noise against eps-scale fields.
    """
    e0v, e1 = eps.position, eps.velocity
    kin = 0.5 * norm(e1, "L2") ** 2 + 0.5 * norm(e0v, "H1dot") ** 2
    pot = potential_remainder(phi0.values, e0v.values)
    return kin - SPHERE_AREA * quad(eps.grid, pot)


def _virial_operator(eps0: RadialField, lam, weight: VirialWeight):
    """(1/(2 lam)) (lap a)_lam eps0 + a'(r/lam) d_r eps0."""
    r = eps0.grid.r
    return (0.5 / lam) * weight.lap(r / lam) * eps0.values \
        + weight.a1(r / lam) * eps0.deriv().values


def functional_J(eps: StatePair, lam, b, R) -> float:
    """Virial correction b <eps1, (first-order operator) eps0>."""
    if lam <= 0:
        raise ValueError("lam must be positive")
    w = VirialWeight(R)
    op = _virial_operator(eps.position, lam, w)
    return b * SPHERE_AREA * quad(eps.grid, eps.velocity.values * op)


def functional_H(eps: StatePair, phi0: RadialField, lam, b, R) -> float:
    return functional_I(eps, phi0) + functional_J(eps, lam, b, R)


def weighted_grad_norm(eps0: RadialField, lam, R) -> float:
    """Squared weighted gradient: int a''(r/lam) (d_r eps0)^2 dx.

    For radial fields only the radial eigenvalue a'' of the Hessian of a
    contributes (the tangential one, a'/r, pairs with angular derivatives).
    Nonnegative by convexity; equals the plain Dirichlet integral wherever
    a'' = 1.
    """
    w = VirialWeight(R)
    d = eps0.deriv().values
    return SPHERE_AREA * quad(eps0.grid, w.a2(eps0.grid.r / lam) * d**2)


def support_radius(v: RadialField, rel=1e-13):
    amax = np.max(np.abs(v.values))
    if amax == 0.0:
        return 0.0
    idx = np.nonzero(np.abs(v.values) > rel * amax)[0]
    return float(v.grid.r[idx[-1]])


def pohozaev_check(eps0: RadialField, lam, R) -> float:
    """Relative defect of the integration-by-parts identity

      <(1/(2 lam))(lap a)_lam + (grad a)_lam . grad) e, Delta e>
          = -(1/lam) |grad_{a,lam} e|^2 + (1/(4 lam^3)) int (bilap a)_lam e^2.

    Both sides by quadrature; requires eps0 compactly supported inside the
    grid (no boundary terms).
    """
    grid = eps0.grid
    if support_radius(eps0) > 0.95 * grid.rmax:
        raise FunctionalError("support touches the outer boundary")
    w = VirialWeight(R)
    op = _virial_operator(eps0, lam, w)
    lap = laplacian(eps0).values
    lhs = SPHERE_AREA * quad(grid, op * lap)
    rhs = -weighted_grad_norm(eps0, lam, R) / lam \
        + SPHERE_AREA * quad(grid, w.bilap(grid.r / lam) * eps0.values**2) / (4.0 * lam**3)
    return abs(lhs - rhs) / max(abs(rhs), 1e-300)


# ----------------------------------------------------------------------
# coercivity of the linearized form
# ----------------------------------------------------------------------

def _fv_matrices(r):
    """Symmetric finite-volume stiffness/mass for the r^4-weighted problem
    on nodes r (Dirichlet at the last node; unknowns at r[0..n-2])."""
    mid = 0.5 * (r[:-1] + r[1:])
    p = mid**4
    h = np.diff(r)
    edges = np.concatenate([[0.0], mid, [r[-1]]])
    vol = (edges[1:] ** 5 - edges[:-1] ** 5) / 5.0
    n = len(r) - 1
    diag = np.zeros(n)
    off = -p[1:n] / h[1:n]
    diag[0] = p[0] / h[0]
    diag[1:] = p[:n - 1] / h[:n - 1] + p[1:n] / h[1:n]
    return diag, off, vol[:n], r[:n]


@dataclass
class CoercivitySpace:
    """Span of the lowest discrete Laplacian modes on [0, r_dom]."""

    nodes: np.ndarray
    vol: np.ndarray
    basis: np.ndarray        # (n_nodes, n_modes), M-orthonormal
    theta: np.ndarray        # Dirichlet energies of the basis modes
    k_diag: np.ndarray
    k_off: np.ndarray

    @staticmethod
    def build(n_nodes=1600, r_dom=60.0, n_modes=200):
        r = np.linspace(0.0, r_dom, n_nodes + 1)
        k_diag, k_off, vol, nodes = _fv_matrices(r)
        d = np.sqrt(vol)
        t_diag = k_diag / vol
        t_off = k_off / (d[:-1] * d[1:])
        theta, vecs = eigh_tridiagonal(t_diag, t_off,
                                       select="i", select_range=(0, n_modes - 1))
        basis = vecs / d[:, None]
        return CoercivitySpace(nodes, vol, basis, theta, k_diag, k_off)

    def project_quadratic(self, potential):
        """Q_ij = <phi_i, L phi_j> and G_ij = <grad phi_i, grad phi_j>."""
        g = np.diag(self.theta)
        pot = (self.basis * (potential * self.vol)[:, None]).T @ self.basis
        return g - pot, g

    def constraint_vector(self, values):
        """Coefficients of <g, values> = 0 in the modal basis."""
        return self.basis.T @ (values * self.vol)


def _nullspace(constraints):
    if not constraints:
        return None
    c = np.vstack(constraints)
    _, s, vt = np.linalg.svd(c, full_matrices=True)
    rank = int(np.sum(s > 1e-12 * s[0])) if len(s) else 0
    return vt[rank:].T


def coercivity_min(constraints="Y_and_Z", lam=1.0, space=None, y_values=None,
                   z_values=None) -> float:
    """Minimum of <g, Lg>/|grad g|^2 over the modal space with the requested
    L^2-orthogonality constraints imposed by projection."""
    if space is None:
        space = CoercivitySpace.build()
    pot = f_prime_w_scaled(space.nodes, lam)
    q, g = space.project_quadratic(pot)
    cons = []
    if constraints in ("Y", "Y_and_Z"):
        if y_values is None:
            raise FunctionalError("Y constraint requested without Y samples")
        cons.append(space.constraint_vector(y_values))
    if constraints == "Y_and_Z":
        if z_values is None:
            z_values = z_bump_values(space.nodes)
        cons.append(space.constraint_vector(z_values))
    elif constraints not in ("none", "Y", "Y_and_Z"):
        raise ValueError(f"unknown constraint set {constraints!r}")
    ns = _nullspace(cons)
    if ns is not None:
        q = ns.T @ q @ ns
        g = ns.T @ g @ ns
    vals = eigh(q, g, eigvals_only=True)
    return float(vals[0])


def psi_projection(g: RadialField, R) -> RadialField:
    """Psi_R g: (g - g(R)) inside r <= R, zero outside."""
    gr = float(g(np.asarray([R]))[0])
    vals = np.where(g.grid.r <= R, g.values - gr, 0.0)
    return RadialField(g.grid, vals, even=g.even)


def _tridiag_apply(diag, off, v):
    out = diag * v
    out[1:] += off * v[:-1]
    out[:-1] += off * v[1:]
    return out


def localized_coercivity_check(R, samples, y_field: RadialField, c=0.01,
                               space=None):
    """Samples the localized quadratic form

        T(g) = int_{r<=R} |grad g|^2 - int f'(W) g^2 + c |grad g|^2

    over fields with <g, Y> = 0 imposed by projection, and minimizes it over
    the modal space under the same constraint.  Returns a report dict; the
    eigen-direction Y itself (constraint violated) is recorded, not asserted.
    """
    if space is None:
        space = CoercivitySpace.build(r_dom=max(60.0, 2.0 * R))
    nodes, vol = space.nodes, space.vol
    n = len(nodes)
    y_on = y_field(nodes)
    y_nsq = float(np.sum(vol * y_on**2))

    # localized stiffness: keep only the flux faces with midpoint <= R
    r_grid = np.concatenate([nodes, [2 * nodes[-1] - nodes[-2]]])
    mid = 0.5 * (r_grid[:-1] + r_grid[1:])
    h = np.diff(r_grid)
    p_full = mid**4 / h
    p_loc = np.where(mid <= R, p_full, 0.0)

    def stiffness(p):
        diag = p.copy()
        diag[1:] += p[:-1]
        return diag[:n], -p[1:n]

    kf_diag, kf_off = stiffness(p_full)
    kl_diag, kl_off = stiffness(p_loc)
    pot = f_prime(w_value(nodes)) * vol

    def t_form(values):
        full = float(values @ _tridiag_apply(kf_diag, kf_off, values))
        loc = float(values @ _tridiag_apply(kl_diag, kl_off, values))
        return loc - float(np.sum(pot * values**2)) + c * full, full

    results = []
    for g in samples:
        vals = g(nodes) if callable(g) else np.asarray(g, dtype=float)
        vals = vals - y_on * float(np.sum(vol * y_on * vals)) / y_nsq
        tval, grad_sq = t_form(vals)
        results.append(tval / max(grad_sq, 1e-300))

    # constrained eigensolve of T over the modal space, <g, Y> = 0
    b = space.basis
    tk = np.column_stack([_tridiag_apply(kl_diag, kl_off, b[:, j])
                          + c * _tridiag_apply(kf_diag, kf_off, b[:, j])
                          for j in range(b.shape[1])])
    q = b.T @ tk - (b * pot[:, None]).T @ b
    g_mat = np.diag(space.theta)
    nsp = _nullspace([space.constraint_vector(y_on)])
    vals = eigh(nsp.T @ q @ nsp, nsp.T @ g_mat @ nsp, eigvals_only=True)
    t_y, grad_y = t_form(y_on / np.sqrt(y_nsq))

    return {
        "R": R,
        "c": c,
        "sample_min": float(np.min(results)) if results else None,
        "constrained_min": float(vals[0]),
        "eigendirection_value": t_y / max(grad_y, 1e-300),
        "n_samples": len(results),
    }
