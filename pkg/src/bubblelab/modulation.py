"""Finite-dimensional modulation dynamics.

The scale lambda and its velocity b obey the formal system

    lambda_t = b,     b_t = kappa v*(t) sqrt(lambda),

whose special solutions are lambda = m t^4 (non-degenerate background,
m = kappa^2 u*(0,0)^2 / 144) and lambda = t^{nu+1} (degenerate background,
v* = q t^beta).  The distance to these trajectories is measured by the
Lyapunov function l(t) built from the eigencoordinates of the linearized
flow; together with the projections alpha-/alpha+ on the stable/unstable
eigendirections of the bubble this defines the modulation cylinder in which
trapped trajectories live.  The unstable mode is eliminated by bisection
(shooting) over its initial amplitude.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .profiles import KAPPA_CLOSED_FORM


class ModulationError(RuntimeError):
    pass


class ShootingError(ModulationError):
    pass


# ----------------------------------------------------------------------
# regimes
# ----------------------------------------------------------------------

def _nu_tilde(nu):
    return -0.5 + 0.5 * math.sqrt(nu**2 + (nu + 1.0) ** 2)


@dataclass(frozen=True)
class RegimeMode:
    """Blow-up regime: non-degenerate (rate t^4) or degenerate (rate t^{1+nu}).

    Both share one parametrization: lambda_app = m t^{nu+1},
    b_app = (nu+1) m t^nu, with nu = 3 and m = kappa^2 u*(0,0)^2/144 in the
    non-degenerate case, m = 1 in the degenerate one.
    """

    kind: str               # "nondegenerate" | "degenerate"
    ustar_center: float = 0.0
    nu: float = 3.0

    @staticmethod
    def nondegenerate(ustar_center):
        if ustar_center <= 0:
            raise ValueError("non-degenerate background needs u*(0,0) > 0")
        return RegimeMode("nondegenerate", ustar_center=ustar_center, nu=3.0)

    @staticmethod
    def degenerate(nu):
        if nu <= 0:
            raise ValueError("nu must be positive")
        if nu <= 8:
            warnings.warn(
                f"nu = {nu} <= 8: the ODE layer is well defined but the PDE "
                "construction is only claimed for nu > 8", RuntimeWarning,
                stacklevel=2)
        return RegimeMode("degenerate", nu=float(nu))

    @property
    def nondeg(self):
        return self.kind == "nondegenerate"

    @property
    def gamma(self):
        return 3.5 if self.nondeg else 7.0 * self.nu / 6.0 - 7.0 / 3.0

    @property
    def nu_tilde(self):
        return _nu_tilde(self.nu)

    @property
    def beta(self):
        """Background exponent at the origin (degenerate only)."""
        return (self.nu - 3.0) / 2.0

    @property
    def q(self):
        """Coefficient of v* = q t^beta in the degenerate regime."""
        return self.nu * (1.0 + self.nu) / KAPPA_CLOSED_FORM

    @property
    def ell_scale(self):
        """m: the app trajectory is lambda = m t^{nu+1}."""
        if self.nondeg:
            return (KAPPA_CLOSED_FORM * self.ustar_center) ** 2 / 144.0
        return 1.0

    def vstar_formal(self, t):
        """Leading-order background value seen by the bubble."""
        if self.nondeg:
            return self.ustar_center * np.ones_like(np.asarray(t, dtype=float))
        return self.q * np.asarray(t, dtype=float) ** self.beta


@dataclass
class ModState:
    t: float
    lam: float
    b: float
    alpha_minus: float = 0.0
    alpha_plus: float = 0.0

    def __post_init__(self):
        if self.t <= 0 or self.lam <= 0:
            raise ModulationError("ModState requires t > 0 and lambda > 0")


# ----------------------------------------------------------------------
# formal system, app trajectory, Lyapunov distance
# ----------------------------------------------------------------------

def formal_rhs(t, lam, b, vstar):
    """(d lambda/dt, d b/dt) = (b, kappa v* sqrt(lambda))."""
    if lam < 0:
        raise ModulationError("lambda < 0 in formal_rhs")
    return b, KAPPA_CLOSED_FORM * vstar * math.sqrt(lam)


def app_trajectory(t, mode: RegimeMode):
    """Closed-form (lambda, b) solving the formal system exactly."""
    t = np.asarray(t, dtype=float)
    m = mode.ell_scale
    nu = mode.nu
    return m * t ** (nu + 1.0), (nu + 1.0) * m * t**nu


def ell_coordinates(t, lam, b, mode: RegimeMode):
    """Eigencoordinates (x1, x2) of the linearized parameter flow.

    x1 decays at rate (nu - nu~)/t, x2 at (nu + nu~ + 1)/t; both vanish on
    the app trajectory.
    """
    nu, nt, m = mode.nu, mode.nu_tilde, mode.ell_scale
    xi = lam / t ** (nu + 1.0)
    eta = b / t**nu
    x1 = eta + nt * xi - (nu + nt + 1.0) * m
    x2 = eta - (nt + 1.0) * xi - (nu - nt) * m
    return x1, x2


def lyapunov_l(t, lam, b, mode: RegimeMode):
    x1, x2 = ell_coordinates(t, lam, b, mode)
    return 0.5 * (x1**2 + x2**2)


def ell_rate(t, lam, b, mode: RegimeMode):
    """(d l/dt, eigenvalue form) for the error-free linearized vector field.

    Uses lambda_t = b and the sqrt-linearized acceleration
    b_t = (nu(nu+1)/2) m t^{nu-1} (1 + lambda/(m t^{nu+1})); with these the
    parameter flow is exactly affine and

        dl/dt = -(1/t) [ (nu - nu~) x1^2 + (nu + nu~ + 1) x2^2 ]

    holds identically, not only near the app trajectory.
    """
    nu, nt, m = mode.nu, mode.nu_tilde, mode.ell_scale
    x1, x2 = ell_coordinates(t, lam, b, mode)
    lam_t = b
    b_t = 0.5 * nu * (nu + 1.0) * m * t ** (nu - 1.0) * (1.0 + lam / (m * t ** (nu + 1.0)))
    xi_t = lam_t / t ** (nu + 1.0) - (nu + 1.0) * lam / t ** (nu + 2.0)
    eta_t = b_t / t**nu - nu * b / t ** (nu + 1.0)
    dx1 = eta_t + nt * xi_t
    dx2 = eta_t - (nt + 1.0) * xi_t
    chain = x1 * dx1 + x2 * dx2
    eigen = -((nu - nt) * x1**2 + (nu + nt + 1.0) * x2**2) / t
    return chain, eigen


# ----------------------------------------------------------------------
# modulation cylinder
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class CylinderStatus:
    inside: bool
    boundary: bool
    face: str | None      # "ell" | "alpha+" | "alpha-" (first violated face)

    def __bool__(self):
        return self.inside


def cylinder_contains(state: ModState, mode: RegimeMode,
                      rel_tol=1e-12) -> CylinderStatus:
    """Membership in the modulation cylinder
    { l(t) <= t^{gamma+1-nu},  |alpha+-| <= t^{gamma+1} }."""
    t = state.t
    ell_bound = t ** (mode.gamma + 1.0 - mode.nu)
    a_bound = t ** (mode.gamma + 1.0)
    ell = lyapunov_l(t, state.lam, state.b, mode)
    checks = [("ell", ell, ell_bound),
              ("alpha+", abs(state.alpha_plus), a_bound),
              ("alpha-", abs(state.alpha_minus), a_bound)]
    boundary = False
    for name, val, bound in checks:
        if val > bound * (1.0 + rel_tol):
            return CylinderStatus(False, False, name)
        if val >= bound * (1.0 - rel_tol):
            boundary = True
    return CylinderStatus(True, boundary, None)


def _exit_face(state: ModState, mode: RegimeMode):
    status = cylinder_contains(state, mode)
    if status.inside:
        return None
    if status.face == "alpha+":
        return "alpha+:pos" if state.alpha_plus > 0 else "alpha+:neg"
    return status.face


# ----------------------------------------------------------------------
# trajectory integration
# ----------------------------------------------------------------------

@dataclass
class ModTrajectory:
    mode: RegimeMode
    t: np.ndarray
    lam: np.ndarray
    b: np.ndarray
    alpha_minus: np.ndarray
    alpha_plus: np.ndarray
    ell: np.ndarray
    in_cylinder: np.ndarray
    exit_time: float | None = None
    exit_face: str | None = None

    @property
    def trapped(self):
        return self.exit_time is None

    def final_state(self):
        return ModState(self.t[-1], self.lam[-1], self.b[-1],
                        self.alpha_minus[-1], self.alpha_plus[-1])

    def write_csv(self, path):
        header = "t,lambda,b,alpha_minus,alpha_plus,l,in_cylinder"
        data = np.column_stack([self.t, self.lam, self.b, self.alpha_minus,
                                self.alpha_plus, self.ell,
                                self.in_cylinder.astype(float)])
        np.savetxt(path, data, delimiter=",", header=header, comments="",
                   fmt="%.17g")


def _phi_increments(ts, lam_dense, e0):
    """Simpson increments of phi = int e0/lambda dt on consecutive nodes."""
    mids = 0.5 * (ts[:-1] + ts[1:])
    f_lo = e0 / lam_dense(ts[:-1])
    f_mid = e0 / lam_dense(mids)
    f_hi = e0 / lam_dense(ts[1:])
    return np.diff(ts) / 6.0 * (f_lo + 4.0 * f_mid + f_hi)


def _forced_panel(t0, t1, phi_k, forcing, lam_dense, e0, sign):
    """Forcing contribution over one panel for alpha' = sign (e0/lam) alpha + f.

    alpha(t1) = e^{sign phi_k} alpha(t0) + J, with
      sign=+1: J = e^{phi_k} int f e^{-(phi(s)-phi(t0))} ds
      sign=-1: J =            int f e^{-(phi(t1)-phi(s))} ds
    Simpson for mild panels; one-term Laplace for stiff ones (the weight then
    concentrates within ~lam/e0 of one endpoint).
    """
    if forcing is None:
        return 0.0
    if phi_k <= 1.0:
        tm = 0.5 * (t0 + t1)
        h = t1 - t0
        phi_half = phi_k * 0.5  # adequate at this panel resolution
        if sign > 0:
            vals = (forcing(t0), forcing(tm) * math.exp(-phi_half),
                    forcing(t1) * math.exp(-phi_k))
            base = h / 6.0 * (vals[0] + 4.0 * vals[1] + vals[2])
            return math.exp(phi_k) * base
        vals = (forcing(t0) * math.exp(-phi_k),
                forcing(tm) * math.exp(-phi_half), forcing(t1))
        return h / 6.0 * (vals[0] + 4.0 * vals[1] + vals[2])
    if sign > 0:
        scale = float(lam_dense(t0)) / e0
        return math.exp(min(phi_k, 700.0)) * forcing(t0) * scale \
            * -math.expm1(-phi_k)
    scale = float(lam_dense(t1)) / e0
    return forcing(t1) * scale * -math.expm1(-phi_k)


def integrate_mod(start: ModState, t_end, mode: RegimeMode, forcing=None,
                  e0=1.0, vstar=None, n_nodes=2048, rtol=1e-11,
                  stop_on_exit=True) -> ModTrajectory:
    """Integrate (lambda, b, alpha-, alpha+) from start.t to t_end.

    (lambda, b) by adaptive Runge-Kutta; alpha+- by the exact integrating
    factor of their linear equations (the e0/lambda rate makes any explicit
    stepper useless near t -> 0).  Works in both time directions; forcing is
    supported forward in time (backward runs are pure-decay diagnostics).
    """
    if vstar is None:
        vstar = mode.vstar_formal
    forward = t_end > start.t
    if forcing is not None and not forward:
        raise ModulationError("forcing is only supported forward in time")

    def rhs(t, y):
        lam = max(y[0], 0.0)
        return [y[1], KAPPA_CLOSED_FORM * float(vstar(t)) * math.sqrt(lam)]

    sol = solve_ivp(rhs, [start.t, t_end], [start.lam, start.b],
                    method="DOP853", rtol=rtol, atol=1e-300,
                    dense_output=True)
    if not sol.success:
        raise ModulationError(
            f"parameter integration failed: {sol.message} "
            f"(stiffness scale e0/lambda ~ {e0 / start.lam:.3e} at start)")
    lam_dense = lambda tt: sol.sol(np.atleast_1d(tt))[0]

    ts = np.geomspace(start.t, t_end, n_nodes)
    ts[0], ts[-1] = start.t, t_end
    phis = _phi_increments(ts, lam_dense, e0)   # signed with the direction

    n = len(ts)
    am = np.empty(n)
    ap = np.empty(n)
    am[0], ap[0] = start.alpha_minus, start.alpha_plus
    saturated = False

    def capped_exp(x):
        return math.exp(x) if x <= 708.0 else math.inf

    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n - 1):
            phi_k = float(phis[k])
            grow_p = capped_exp(phi_k)
            grow_m = capped_exp(-phi_k)
            jp = jm = 0.0
            if forcing is not None and phi_k >= 0:
                jp = _forced_panel(ts[k], ts[k + 1], phi_k, forcing, lam_dense, e0, +1)
                jm = _forced_panel(ts[k], ts[k + 1], phi_k, forcing, lam_dense, e0, -1)
            ap[k + 1] = grow_p * ap[k] + jp if ap[k] != 0.0 or jp != 0.0 else 0.0
            am[k + 1] = grow_m * am[k] + jm if am[k] != 0.0 or jm != 0.0 else 0.0
            for arr in (ap, am):
                if not math.isfinite(arr[k + 1]):
                    saturated = True
                    ref = ap[k] if arr is ap else am[k]
                    arr[k + 1] = math.copysign(1e300, ref if ref != 0 else 1.0)

    lam_b = sol.sol(ts)
    lam_arr, b_arr = lam_b[0], lam_b[1]
    ell = np.array([lyapunov_l(ts[k], lam_arr[k], b_arr[k], mode)
                    for k in range(n)])
    inside = np.empty(n, dtype=bool)
    exit_time = exit_face = None
    for k in range(n):
        st = ModState(ts[k], max(lam_arr[k], 1e-300), b_arr[k], am[k], ap[k])
        status = cylinder_contains(st, mode)
        inside[k] = status.inside
        if not status.inside and exit_time is None:
            exit_time = ts[k]
            exit_face = _exit_face(st, mode)
            if stop_on_exit:
                ts, lam_arr, b_arr = ts[:k + 1], lam_arr[:k + 1], b_arr[:k + 1]
                am, ap, ell, inside = am[:k + 1], ap[:k + 1], ell[:k + 1], inside[:k + 1]
                break
    if saturated and exit_face is None:
        exit_time = ts[-1]
        exit_face = "alpha+:pos" if ap[-1] > 0 else "alpha+:neg"
    return ModTrajectory(mode, ts, lam_arr, b_arr, am, ap, ell, inside,
                         exit_time, exit_face)


# ----------------------------------------------------------------------
# shooting over the unstable mode
# ----------------------------------------------------------------------

@dataclass
class ShootResult:
    a_star: float
    iterations: int
    bracket: tuple
    transcript: list = field(default_factory=list)
    trajectory: ModTrajectory | None = None


def shoot_unstable(t1, t0, mode: RegimeMode, forcing=None, tol=1e-12,
                   e0=1.0, vstar=None, bracket=None, n_nodes=2048,
                   max_iter=200) -> ShootResult:
    """Bisect the initial unstable amplitude a = alpha+(T1).

    Trials are classified by the exit face of the cylinder (A+ / A-); the
    dichotomy of the trapped-trajectory argument makes the bisection well
    posed.  Returns once a trial survives to t0 or the bracket is below tol.
    """
    if not t1 < t0:
        raise ValueError("need T1 < T0")
    if bracket is None:
        half = (2.0 / 3.0) * t1 ** (mode.gamma + 1.0)
        bracket = (-half, half)
    lo, hi = bracket

    def classify(a):
        lam0, b0 = app_trajectory(t1, mode)
        st = ModState(t1, float(lam0), float(b0), 0.0, a)
        traj = integrate_mod(st, t0, mode, forcing=forcing, e0=e0,
                             vstar=vstar, n_nodes=n_nodes)
        return traj

    transcript = []
    traj_lo = classify(lo)
    traj_hi = classify(hi)
    transcript.append({"a": lo, "face": traj_lo.exit_face, "t_exit": traj_lo.exit_time})
    transcript.append({"a": hi, "face": traj_hi.exit_face, "t_exit": traj_hi.exit_time})

    def face_sign(traj):
        if traj.trapped:
            return 0
        if traj.exit_face == "alpha+:pos":
            return +1
        if traj.exit_face == "alpha+:neg":
            return -1
        return 0  # exit through ell or alpha-: treat as undetermined sign

    s_lo, s_hi = face_sign(traj_lo), face_sign(traj_hi)
    if s_lo == 0 and traj_lo.trapped:
        return ShootResult(lo, 0, (lo, hi), transcript, traj_lo)
    if s_hi == 0 and traj_hi.trapped:
        return ShootResult(hi, 0, (lo, hi), transcript, traj_hi)
    if s_lo == s_hi or s_lo == 0 or s_hi == 0:
        raise ShootingError(
            f"bracket endpoints classify identically ({traj_lo.exit_face} / "
            f"{traj_hi.exit_face}); the exit-face dichotomy is violated - "
            "likely a modelling/scale bug in the configuration")

    it = 0
    best = None
    while hi - lo > tol and it < max_iter:
        mid = 0.5 * (lo + hi)
        traj = classify(mid)
        it += 1
        transcript.append({"a": mid, "face": traj.exit_face, "t_exit": traj.exit_time})
        s = face_sign(traj)
        if traj.trapped:
            best = (mid, traj)
            break
        if s == s_lo:
            lo = mid
        elif s == s_hi:
            hi = mid
        else:
            # ell/alpha- exit inside the bracket: keep the later-exit side
            hi = mid
        best = (mid, traj)
    if best is None:
        mid = 0.5 * (lo + hi)
        best = (mid, classify(mid))
    return ShootResult(best[0], it, (lo, hi), transcript, best[1])
