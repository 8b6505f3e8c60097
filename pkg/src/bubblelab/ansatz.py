"""Blow-up profile assembly and residual verification.

The approximate solution is

    phi0 = W_lam + P0 + u*,   phi1 = -b (LamW)_uln + P1 + du*/dt,

with P0 = chi(r/t) (lam^{3/2} v* A_lam + b^2 B_lam) cut at the light cone and
P1 its formal time derivative (lambda_t -> b, b_t -> kappa v* sqrt(lambda),
cutoff not differentiated).  The equation residual psi is evaluated as the
sum of its individually-small constituents (cutoff commutator, background
mismatch, dP1/dt, nonlinear extraction remainder); assembling it naively
from Delta phi0 + f(phi0) would require ~1e-15 relative cancellations
between terms of order 1/lambda and is numerically meaningless at bubble
scales.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .modulation import ModState, RegimeMode, app_trajectory, formal_rhs
from .profiles import KAPPA_CLOSED_FORM, ProfileSet, f_prime_w_scaled
from .radial import (
    RadialField,
    RadialGrid,
    SPHERE_AREA,
    StatePair,
    f_nl,
    f_prime,
    f_second,
    lam_w,
    lam_w_prime,
    nonlinear_extraction,
    quad,
    w_value,
)


class AnsatzError(RuntimeError):
    pass


# ----------------------------------------------------------------------
# smooth cutoff
# ----------------------------------------------------------------------

def _chi_derivs(x):
    """(chi, chi', chi'') for chi(x) = s(2-x)/(s(2-x)+s(x-1)), s = exp(-1/x).

    Exactly 1 for x <= 1 and 0 for x >= 2; closed-form derivatives on the
    transition strip.
    """
    x = np.asarray(x, dtype=float)
    chi = np.where(x <= 1.0, 1.0, 0.0)
    d1 = np.zeros_like(x)
    d2 = np.zeros_like(x)
    strip = (x > 1.0) & (x < 2.0)
    if np.any(strip):
        xs = x[strip]
        a = 2.0 - xs
        b = xs - 1.0
        u = np.exp(-1.0 / a)
        v = np.exp(-1.0 / b)
        up = -u / a**2
        vp = v / b**2
        upp = u * (1.0 / a**4 - 2.0 / a**3)
        vpp = v * (1.0 / b**4 - 2.0 / b**3)
        den = u + v
        chi[strip] = u / den
        num1 = up * v - u * vp
        d1[strip] = num1 / den**2
        d2[strip] = (upp * v - u * vpp) / den**2 \
            - 2.0 * num1 * (up + vp) / den**3
    return chi, d1, d2


def cutoff_chi(r, scale=1.0, order=0):
    """chi(r/scale) and its first two r-derivatives."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    x = np.asarray(r, dtype=float) / scale
    chi, d1, d2 = _chi_derivs(x)
    if order == 0:
        return chi
    if order == 1:
        return d1 / scale
    if order == 2:
        return d2 / scale**2
    raise ValueError("order must be 0, 1 or 2")


# ----------------------------------------------------------------------
# pointwise nonlinear bounds (Monte-Carlo constants)
# ----------------------------------------------------------------------

def pointwise_inequality_check(n_samples=100000, which="three_term", seed=7):
    """Max LHS/RHS over the unit sphere for the pointwise nonlinear bounds;
    finite by homogeneity and compactness."""
    rng = np.random.default_rng(seed)
    if which == "three_term":
        x = rng.normal(size=(n_samples, 3))
        x /= np.linalg.norm(x, axis=1)[:, None]
        k, l, m = x.T
        lhs = np.abs(f_nl(k + l + m) - (f_nl(k) + f_nl(m)
                                        + f_prime(k) * l + f_prime(k) * m))
        rhs = (np.abs(f_nl(l)) + f_prime(l) * np.abs(k)
               + f_prime(m) * np.abs(k) + f_prime(m) * np.abs(l))
    elif which == "two_term":
        x = rng.normal(size=(n_samples, 2))
        x /= np.linalg.norm(x, axis=1)[:, None]
        k, l = x.T
        lhs = np.abs(f_nl(k + l) - f_nl(k) - f_prime(k) * l
                     - 0.5 * f_second(k) * l**2)
        rhs = np.abs(f_nl(l))
    else:
        raise ValueError(f"unknown inequality {which!r}")
    good = rhs > 1e-13
    return float(np.max(lhs[good] / rhs[good]))


# ----------------------------------------------------------------------
# background u*
# ----------------------------------------------------------------------

def ustar_profile(mode: RegimeMode, rho=1.0, amplitude=None, custom=None):
    """u0*(r) as a callable; the default families have u1* = 0.

    Non-degenerate: cut Gaussian bump; degenerate: the cut power p r^beta
    with p = 3q/((beta+1)(beta+3)) matched to v* = q t^beta.
    """
    if custom is not None:
        return custom
    if mode.nondeg:
        amp = mode.ustar_center if amplitude is None else amplitude
        if amp <= 0:
            raise AnsatzError("non-degenerate background requires u0*(0) > 0")
        return lambda r: amp * np.exp(-np.asarray(r, dtype=float) ** 2) \
            * cutoff_chi(r, rho)
    beta = mode.beta
    p = 3.0 * mode.q / ((beta + 1.0) * (beta + 3.0))
    return lambda r: p * np.asarray(r, dtype=float) ** beta * cutoff_chi(r, rho)


def build_ustar(mode: RegimeMode, rho, grid: RadialGrid, amplitude=None,
                custom=None) -> StatePair:
    prof = ustar_profile(mode, rho, amplitude, custom)
    return StatePair(RadialField(grid, prof(grid.r)),
                     RadialField(grid, np.zeros(grid.n)))


def vstar(t, mode: RegimeMode, ustar_evolution=None, frozen=False):
    """v*(t): q t^beta (degenerate) or u*(t,0) (non-degenerate; the frozen
    variant uses u*(0,0))."""
    if not mode.nondeg:
        return mode.q * t ** mode.beta
    if ustar_evolution is not None and not frozen:
        return float(ustar_evolution(t))
    if frozen or ustar_evolution is None:
        return mode.ustar_center


def vstar_rate(t, mode: RegimeMode, ustar_evolution_rate=None):
    """d v*/dt for the P1 assembly."""
    if not mode.nondeg:
        b = mode.beta
        return 0.0 if b == 0 else mode.q * b * t ** (b - 1.0)
    if ustar_evolution_rate is not None:
        return float(ustar_evolution_rate(t))
    return 0.0


# ----------------------------------------------------------------------
# ansatz assembly
# ----------------------------------------------------------------------

@dataclass
class AnsatzParams:
    mode: RegimeMode
    rho: float
    t: float
    lam: float
    b: float

    @property
    def scale_ratio(self):
        return self.lam / self.t

    @property
    def valid(self):
        """Profile validity guard lambda/t < 0.5 (flag, not rejection)."""
        return self.scale_ratio < 0.5


@dataclass
class AnsatzBundle:
    params: AnsatzParams
    p0: RadialField
    p1: RadialField
    phi: StatePair
    ustar_state: StatePair
    vstar: float


class Ansatz:
    """Assembles P0, P1, phi and the residual lines for one regime.

    vstar_fn / vstar_rate_fn override the formal background value (used to
    couple to an evolved background); ustar_fn(t) -> (u0 values, u1 values)
    callable on radii overrides the static default profile.
    """

    def __init__(self, profiles: ProfileSet, mode: RegimeMode, rho=1.0,
                 ustar_amplitude=None, vstar_fn=None, vstar_rate_fn=None,
                 ustar_custom=None):
        self.profiles = profiles
        self.mode = mode
        self.rho = rho
        self._u0 = ustar_profile(mode, rho, ustar_amplitude, ustar_custom)
        self._vstar = vstar_fn
        self._dvstar = vstar_rate_fn

    # -- scalars ------------------------------------------------------

    def vstar_at(self, t):
        if self._vstar is not None:
            return float(self._vstar(t))
        return vstar(t, self.mode, frozen=True)

    def vstar_rate_at(self, t):
        if self._dvstar is not None:
            return float(self._dvstar(t))
        return vstar_rate(t, self.mode)

    # -- profile combinations on radii arrays --------------------------

    def _sum_s(self, t, lam, b, rho_arg):
        """Uncut P0 combination S with S(r) = v* A(r/lam) + b^2 lam^{-3/2} B,
        returned with d/dr and the radial laplacian (all analytic)."""
        p = self.profiles
        v = self.vstar_at(t)
        cB = b**2 * lam**-1.5
        A, dA, ddA = p.fn("A"), p.fn("dA"), p.fn("ddA")
        B, dB, ddB = p.fn("B"), p.fn("dB"), p.fn("ddB")
        s = v * A(rho_arg) + cB * B(rho_arg)
        ds = (v * dA(rho_arg) + cB * dB(rho_arg)) / lam
        dds = (v * ddA(rho_arg) + cB * ddB(rho_arg)) / lam**2
        lap = np.empty_like(s)
        pos = rho_arg > 0
        lap[pos] = dds[pos] + 4.0 * ds[pos] / (lam * rho_arg[pos])
        if np.any(~pos):
            lap[~pos] = 5.0 * dds[~pos]
        return s, ds, lap

    def p0_arrays(self, t, lam, b, r):
        """(P0, P0', Delta P0) on radii r, cutoff included, no finite
        differences anywhere."""
        rho_arg = r / lam
        s, ds, lap_s = self._sum_s(t, lam, b, rho_arg)
        chi = cutoff_chi(r, t, 0)
        chi1 = cutoff_chi(r, t, 1)
        chi2 = cutoff_chi(r, t, 2)
        p0 = chi * s
        dp0 = chi1 * s + chi * ds
        lap_chi = np.empty_like(chi2)
        pos = r > 0
        lap_chi[pos] = chi2[pos] + 4.0 * chi1[pos] / r[pos]
        lap_chi[~pos] = 0.0
        lap_p0 = chi * lap_s + 2.0 * chi1 * ds + lap_chi * s
        return p0, dp0, lap_p0

    def p1_arrays(self, t, lam, b, r):
        """(P1, P1'): the formal time derivative of P0."""
        p = self.profiles
        v = self.vstar_at(t)
        dv = self.vstar_rate_at(t)
        rho_arg = r / lam
        A, dA = p.fn("A"), p.fn("dA")
        B, dB = p.fn("B"), p.fn("dB")
        LamA, dLamA = p.fn("LamA"), p.fn("dLamA")
        LamB, dLamB = p.fn("LamB"), p.fn("dLamB")
        c1 = v * b / lam
        c2 = 2.0 * KAPPA_CLOSED_FORM * v * b / lam
        c3 = b**3 * lam**-2.5
        s1 = c1 * (1.5 * A(rho_arg) - LamA(rho_arg)) + dv * A(rho_arg) \
            + c2 * B(rho_arg) - c3 * LamB(rho_arg)
        ds1 = (c1 * (1.5 * dA(rho_arg) - dLamA(rho_arg)) + dv * dA(rho_arg)
               + c2 * dB(rho_arg) - c3 * dLamB(rho_arg)) / lam
        chi = cutoff_chi(r, t, 0)
        chi1 = cutoff_chi(r, t, 1)
        return chi * s1, chi1 * s1 + chi * ds1

    def ustar_arrays(self, r):
        return self._u0(r)

    # -- spec-facing builders ------------------------------------------

    def build_p0(self, t, lam, b, grid: RadialGrid) -> RadialField:
        p0, _, _ = self.p0_arrays(t, lam, b, grid.r)
        return RadialField(grid, p0)

    def build_p1(self, t, lam, b, grid: RadialGrid) -> RadialField:
        p1, _ = self.p1_arrays(t, lam, b, grid.r)
        return RadialField(grid, p1)

    def build_phi(self, t, lam, b, grid: RadialGrid, ustar_state=None,
                  bubble_values=None) -> StatePair:
        """phi = (W_lam + P0 + u*, -b (LamW)_uln + P1 + du*/dt).

        bubble_values replaces the sampled W_lam when the caller works with
        the discrete equilibrium family (the wave experiment does).
        """
        r = grid.r
        if ustar_state is None:
            u0 = self.ustar_arrays(r)
            u1 = np.zeros_like(u0)
        else:
            u0 = ustar_state.position.values
            u1 = ustar_state.velocity.values
        w_lam = lam**-1.5 * w_value(r / lam) if bubble_values is None \
            else bubble_values
        p0, _, _ = self.p0_arrays(t, lam, b, r)
        p1, _ = self.p1_arrays(t, lam, b, r)
        phi0 = w_lam + p0 + u0
        phi1 = -b * lam**-2.5 * lam_w(r / lam) + p1 + u1
        return StatePair(RadialField(grid, phi0), RadialField(grid, phi1))

    def build_bundle(self, t, lam, b, grid: RadialGrid) -> AnsatzBundle:
        params = AnsatzParams(self.mode, self.rho, t, lam, b)
        ustar_state = StatePair(RadialField(grid, self.ustar_arrays(grid.r)),
                                RadialField(grid, np.zeros(grid.n)))
        return AnsatzBundle(params,
                            self.build_p0(t, lam, b, grid),
                            self.build_p1(t, lam, b, grid),
                            self.build_phi(t, lam, b, grid, ustar_state),
                            ustar_state, self.vstar_at(t))

    # -- residual lines -------------------------------------------------

    def scan_grid(self, t, lam, per_decade=400):
        lo = max(lam * 1e-3, 1e-300)
        hi = 4.0 * t
        n = max(int(per_decade * np.log10(hi / lo)), 512)
        return RadialGrid.geometric(n, hi, r_core=lo)

    def cutoff_commutator(self, t, lam, b, r):
        """L_lam P0 - chi-free part: -(Delta chi) S - 2 chi' S' - (1-chi) L S.

        L S is evaluated from the defining equations of A and B (closed
        forms), so every piece is individually small near the light cone;
        this is the only survivor of L_lam P0 after the bubble-term
        cancellations and evaluating it this way avoids them numerically.
        """
        rho_arg = r / lam
        s, ds, _ = self._sum_s(t, lam, b, rho_arg)
        v = self.vstar_at(t)
        cB = b**2 * lam**-1.5
        # L_lam S = lam^{-2} (v rhs_A + cB rhs_B)(r/lam), by L A = rhs_A etc.
        rhs_a = KAPPA_CLOSED_FORM * lam_w(rho_arg) + f_prime(w_value(rho_arg))
        rhs_b = -(2.5 * lam_w(rho_arg) + rho_arg * lam_w_prime(rho_arg))
        l_s = (v * rhs_a + cB * rhs_b) / lam**2
        chi = cutoff_chi(r, t, 0)
        chi1 = cutoff_chi(r, t, 1)
        chi2 = cutoff_chi(r, t, 2)
        lap_chi = np.empty_like(chi2)
        pos = r > 0
        lap_chi[pos] = chi2[pos] + 4.0 * chi1[pos] / r[pos]
        lap_chi[~pos] = 0.0
        return -(lap_chi * s) - 2.0 * chi1 * ds - (1.0 - chi) * l_s

    def residual_psi(self, t, lam=None, b=None, h_rel=1e-4, per_decade=400,
                     richardson=True):
        """Residual of the ansatz on the exact formal flow.

        psi0 = dP0/dt - P1 (the bubble terms cancel identically there), and
        psi1 = cutoff commutator + (v* - u*) f'(W_lam) + dP1/dt - extraction
        remainder; time derivatives of P0/P1 by centered differences with
        stencil h = h_rel * t, everything else closed-form.  Returns the
        diagnostic norms and the bundle of line norms.
        """
        mode = self.mode
        if lam is None or b is None:
            lam_a, b_a = app_trajectory(t, mode)
            lam = float(lam_a) if lam is None else lam
            b = float(b_a) if b is None else b
        grid = self.scan_grid(t, lam, per_decade)
        r = grid.r

        def flow(tt):
            la, bb = app_trajectory(tt, mode)
            return float(la), float(bb)

        def fd_p(tt, h):
            lp, bp = flow(tt + h)
            lm_, bm = flow(tt - h)
            p0p, dp0p, _ = self.p0_arrays(tt + h, lp, bp, r)
            p0m, dp0m, _ = self.p0_arrays(tt - h, lm_, bm, r)
            p1p, dp1p = self.p1_arrays(tt + h, lp, bp, r)
            p1m, dp1m = self.p1_arrays(tt - h, lm_, bm, r)
            inv = 0.5 / h
            return ((p0p - p0m) * inv, (dp0p - dp0m) * inv,
                    (p1p - p1m) * inv, (dp1p - dp1m) * inv)

        h = h_rel * t
        dt_p0, dt_dp0, dt_p1, dt_dp1 = fd_p(t, h)
        if richardson:
            f2 = fd_p(t, 0.5 * h)
            stencil_err = [float(np.max(np.abs(a - b_) / (np.max(np.abs(b_)) + 1e-300)))
                           for a, b_ in zip((dt_p0, dt_p1), (f2[0], f2[2]))]
            dt_p0, dt_dp0, dt_p1, dt_dp1 = f2
        else:
            stencil_err = [np.nan, np.nan]

        p1, dp1 = self.p1_arrays(t, lam, b, r)
        psi0 = dt_p0 - p1
        dpsi0 = dt_dp0 - dp1

        cut = self.cutoff_commutator(t, lam, b, r)
        u0 = self.ustar_arrays(r)
        v = self.vstar_at(t)
        fpw = f_prime_w_scaled(r, lam)
        mismatch = (v - u0) * fpw
        w_lam = lam**-1.5 * w_value(r / lam)
        p0, _, _ = self.p0_arrays(t, lam, b, r)
        extr = nonlinear_extraction(w_lam, p0, u0)
        psi1 = cut + mismatch + dt_p1 - extr

        h1 = SPHERE_AREA * quad(grid, dpsi0**2)
        norms = {
            "t": t, "lam": lam, "b": b,
            "psi0_H1dot": float(np.sqrt(h1)),
            "psi1_L2": float(np.sqrt(SPHERE_AREA * quad(grid, psi1**2))),
            "P0_H1dot": float(np.sqrt(SPHERE_AREA * quad(
                grid, self.p0_arrays(t, lam, b, r)[1] ** 2))),
            "P1_L2": float(np.sqrt(SPHERE_AREA * quad(grid, p1**2))),
            "extraction_L2": float(np.sqrt(SPHERE_AREA * quad(grid, extr**2))),
            "cutoff_L2": float(np.sqrt(SPHERE_AREA * quad(grid, cut**2))),
            "stencil_rel_err": stencil_err,
        }
        return norms

    def p1_fd_consistency(self, t, h):
        """max |(P0(t+h)-P0(t-h))/2h - P1(t)| with the cutoff frozen at t.

        Isolates the formal-derivative property of P1 from the cutoff
        motion; -> 0 as h -> 0 on the exact flow.
        """
        mode = self.mode
        lam, b = (float(x) for x in app_trajectory(t, mode))
        grid = self.scan_grid(t, lam)
        r = grid.r
        chi = cutoff_chi(r, t, 0)

        def p0_frozen(tt):
            la, bb = (float(x) for x in app_trajectory(tt, mode))
            s, _, _ = self._sum_s(tt, la, bb, r / la)
            return chi * s

        fd = (p0_frozen(t + h) - p0_frozen(t - h)) / (2.0 * h)
        p1, _ = self.p1_arrays(t, lam, b, r)
        scale = np.max(np.abs(p1)) + 1e-300
        return float(np.max(np.abs(fd - p1)) / scale)


def slope_fit(ts, values):
    """Least-squares log-log slope."""
    ts = np.asarray(ts, dtype=float)
    values = np.asarray(values, dtype=float)
    good = values > 0
    return float(np.polyfit(np.log(ts[good]), np.log(values[good]), 1)[0])


def residual_scan(ansatz: Ansatz, ts, **kwargs):
    """Residual norms over a time window plus fitted log-log slopes."""
    rows = [ansatz.residual_psi(t, **kwargs) for t in ts]
    keys = ("P0_H1dot", "P1_L2", "psi0_H1dot", "psi1_L2", "extraction_L2")
    slopes = {k: slope_fit([r["t"] for r in rows], [r[k] for r in rows])
              for k in keys}
    return rows, slopes
