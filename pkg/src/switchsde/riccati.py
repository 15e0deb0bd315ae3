"""Coupled Riccati systems for the switching linear-quadratic criterion.

The finite-horizon LQ value is x^T K(t, i) x with K solving the backward
coupled system

    -dK/dt (t,i) = C_i^T K_i C_i + A_i^T K_i + K_i A_i
                   - K_i B_i R_i^{-1} B_i^T K_i + Q_i + sum_j m_ij K_j,
    K(T, i) = P_i,

one matrix per regime, coupled through the switching rates. The optimal
feedback is u = -R^{-1} B^T K(t, i) x. Freezing a feedback F and dropping the
minimization gives the linear cost equation

    -dM/dt = (A - B F)^T M + M (A - B F) + C^T M C + Q + F^T R F + coupling,

whose solution evaluates that feedback exactly; the two trajectories agree
when F is the optimal gain.

Integration is classical fourth-order Runge-Utta on the stacked matrices,
backward from the horizon, with re-symmetrization after every step.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import BlowupError, EigError, RatesError, ShapeError
from .model import FloatArray, ModelSpec, _freeze, _shaped, ROW_SUM_TOL

BLOWUP_LIMIT = 1e12
COND_LIMIT = 1e12
EIG_FLOOR = 1e-12


def _check_sym(mats: np.ndarray, name: str) -> None:
    sym = float(np.max(np.abs(mats - np.swapaxes(mats, -1, -2))))
    if sym > 1e-10:
        raise ShapeError(f"{name} must be symmetric (defect {sym:.3e})")


def _check_psd(mats: np.ndarray, name: str) -> None:
    _check_sym(mats, name)
    eigs = np.linalg.eigvalsh(mats)
    if float(eigs.min()) < -EIG_FLOOR:
        raise EigError(f"{name} must be positive semidefinite (min eig {eigs.min():.3e})")


@dataclass(frozen=True, eq=False)
class LQSpec:
    """Switching LQ problem data with a constant generator.

    All coefficient stacks are indexed by regime: A, C, Q, P are (N, d, d),
    B is (N, d, l), R is (N, l, l). Q and P must be positive semidefinite,
    R positive definite; rates follow the usual generator rules.
    """

    dim: int
    n_regimes: int
    control_dim: int
    a: FloatArray
    b: FloatArray
    c: FloatArray
    q: FloatArray
    r: FloatArray
    p: FloatArray
    rates: FloatArray
    horizon: float

    def __post_init__(self):
        N, d, l = self.n_regimes, self.dim, self.control_dim
        for nm in ("a", "c", "q", "p"):
            object.__setattr__(self, nm, _shaped(getattr(self, nm), (N, d, d), nm.upper()))
        object.__setattr__(self, "b", _shaped(self.b, (N, d, l), "B"))
        object.__setattr__(self, "r", _shaped(self.r, (N, l, l), "R"))
        object.__setattr__(self, "rates", _shaped(self.rates, (N, N), "rates"))
        if not self.horizon > 0:
            raise ShapeError("horizon must be > 0")
        _check_psd(self.q, "Q")
        _check_sym(self.p, "P")
        # P must be positive definite; a semidefinite P (e.g. exactly zero) is
        # nudged onto the floor so closed-form P -> 0+ limits remain usable.
        p_min = float(np.min(np.linalg.eigvalsh(self.p)))
        if p_min < -1e-10:
            raise EigError(f"P must be positive definite (min eig {p_min:.3e})")
        if p_min < EIG_FLOOR:
            warnings.warn(
                f"terminal weight P has min eigenvalue {p_min:.3e}; "
                f"nudged by {EIG_FLOOR:.0e} * I to keep it positive definite",
                stacklevel=3,
            )
            nudged = self.p + EIG_FLOOR * np.eye(d)[None, :, :]
            object.__setattr__(self, "p", _freeze(nudged))
        _check_sym(self.r, "R")
        r_eigs = np.linalg.eigvalsh(self.r)
        if float(r_eigs.min()) < EIG_FLOOR:
            raise EigError(f"R must be positive definite (min eig {r_eigs.min():.3e})")
        if float(r_eigs.max() / r_eigs.min()) > COND_LIMIT:
            raise EigError("R is too ill-conditioned to invert reliably")
        offdiag = self.rates - np.diag(np.diag(self.rates))
        if np.any(offdiag < 0):
            raise RatesError("off-diagonal switching rates must be >= 0")
        if float(np.max(np.abs(self.rates.sum(axis=1)))) > ROW_SUM_TOL:
            raise RatesError("generator rows must sum to zero")

    def r_inv_bt(self) -> FloatArray:
        """Per-regime R^{-1} B^T via Cholesky, shape (N, l, d)."""
        out = np.empty((self.n_regimes, self.control_dim, self.dim))
        for i in range(self.n_regimes):
            try:
                cf = cho_factor(self.r[i])
            except np.linalg.LinAlgError as exc:
                raise EigError(f"Cholesky of R failed in regime {i + 1}: {exc}") from exc
            out[i] = cho_solve(cf, self.b[i].T)
        return out


def lq_from_model(spec: ModelSpec) -> LQSpec:
    """Extract the LQ problem from a model with lq families throughout."""
    if spec.drift.kind != "lq" or spec.diffusion.kind != "lq":
        raise ShapeError("lq extraction needs drift and diffusion of kind 'lq'")
    if spec.costs.running.kind != "lq":
        raise ShapeError("lq extraction needs a running cost of kind 'lq'")
    if spec.generator.kind != "constant":
        raise ShapeError("lq extraction needs a constant generator")
    tc = spec.costs.terminal
    N, d = spec.regimes.count, spec.dim
    if tc.kind == "quad":
        p = tc.p_mat
    elif tc.kind == "zero":
        p = np.zeros((N, d, d))
    else:
        raise ShapeError("lq extraction needs a 'quad' or 'zero' terminal cost")
    return LQSpec(
        dim=d,
        n_regimes=N,
        control_dim=spec.actions.action_dim,
        a=spec.drift.a_mat,
        b=spec.drift.b_mat,
        c=spec.diffusion.c_mat,
        q=spec.costs.running.q_mat,
        r=spec.costs.running.r_mat,
        p=p,
        rates=spec.generator.rates,
        horizon=spec.costs.horizon,
    )


@dataclass(frozen=True, eq=False)
class RiccatiTrajectory:
    """Solution K(t_k, i) on an even time grid, t ascending from 0 to T."""

    times: FloatArray  # (n_steps + 1,)
    k: FloatArray  # (n_steps + 1, N, d, d)

    def __post_init__(self):
        object.__setattr__(self, "times", _freeze(self.times))
        object.__setattr__(self, "k", _freeze(self.k))
        if self.k.ndim != 4 or self.k.shape[0] != self.times.size:
            raise ShapeError(
                f"trajectory k has shape {self.k.shape}, expected ({self.times.size}, N, d, d)"
            )

    @property
    def n_regimes(self) -> int:
        return self.k.shape[1]

    def symmetry_defect(self) -> float:
        return float(np.max(np.abs(self.k - np.swapaxes(self.k, -1, -2))))

    def k_at(self, t: float) -> FloatArray:
        """Linear interpolation in t, shape (N, d, d)."""
        times = self.times
        t = float(np.clip(t, times[0], times[-1]))
        j = int(np.searchsorted(times, t, side="right") - 1)
        j = min(max(j, 0), len(times) - 2)
        w = (t - times[j]) / (times[j + 1] - times[j])
        return (1.0 - w) * self.k[j] + w * self.k[j + 1]

    def rows(self):
        """Flat (t, regime, row, col, value) tuples, regimes 1-based."""
        n1, N, d, _ = self.k.shape
        for kk in range(n1):
            for i in range(N):
                for r in range(d):
                    for c in range(d):
                        yield (self.times[kk], i + 1, r, c, self.k[kk, i, r, c])


@dataclass(frozen=True, eq=False)
class FeedbackTrajectory:
    """Gains F(t_k, i) = R^{-1} B^T K(t_k, i); control u = -F x."""

    times: FloatArray  # (n_steps + 1,)
    gains: FloatArray  # (n_steps + 1, N, l, d)

    def __post_init__(self):
        object.__setattr__(self, "times", _freeze(self.times))
        object.__setattr__(self, "gains", _freeze(self.gains))
        if self.gains.ndim != 4 or self.gains.shape[0] != self.times.size:
            raise ShapeError(
                f"gain grid has shape {self.gains.shape}, expected ({self.times.size}, N, l, d)"
            )

    def gain_at(self, t: float) -> FloatArray:
        times = self.times
        t = float(np.clip(t, times[0], times[-1]))
        j = int(np.searchsorted(times, t, side="right") - 1)
        j = min(max(j, 0), len(times) - 2)
        w = (t - times[j]) / (times[j + 1] - times[j])
        return (1.0 - w) * self.gains[j] + w * self.gains[j + 1]


def _riccati_rhs(k: np.ndarray, lq: LQSpec, rinv_bt: np.ndarray) -> np.ndarray:
    """Right side g with dK/dt = -g(K), stacked over regimes."""
    at_k = np.einsum("nji,njk->nik", lq.a, k)
    ka = np.swapaxes(at_k, -1, -2)
    ctkc = np.einsum("nji,njk,nkl->nil", lq.c, k, lq.c)
    kb = np.einsum("nij,njl->nil", k, lq.b)
    quad = np.einsum("nil,nlj,njk->nik", kb, rinv_bt, k)
    coupling = np.einsum("ij,jkl->ikl", lq.rates, k)
    return ctkc + at_k + ka - quad + lq.q + coupling


def _integrate_backward(rhs, terminal: np.ndarray, horizon: float, n_steps: int) -> np.ndarray:
    """RK4 for dK/dt = -rhs(t, K) from t = T down to 0, nodes at k*T/n."""
    if n_steps < 1:
        raise ShapeError("n_steps must be >= 1")
    h = horizon / n_steps
    traj = np.empty((n_steps + 1, *terminal.shape))
    traj[n_steps] = terminal
    k = terminal.copy()
    for step in range(n_steps, 0, -1):
        t = step * h
        k1 = rhs(t, k)
        k2 = rhs(t - 0.5 * h, k + 0.5 * h * k1)
        k3 = rhs(t - 0.5 * h, k + 0.5 * h * k2)
        k4 = rhs(t - h, k + h * k3)
        k = k + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        k = 0.5 * (k + np.swapaxes(k, -1, -2))
        if not np.all(np.isfinite(k)) or float(np.max(np.abs(k))) > BLOWUP_LIMIT:
            raise BlowupError(f"Riccati iterate exceeded {BLOWUP_LIMIT:.0e} at t = {t - h:.6g}")
        traj[step - 1] = k
    return traj


def solve_coupled_riccati(lq: LQSpec, n_steps: int = 400) -> RiccatiTrajectory:
    """Integrate the coupled system backward from K(T) = P.

    Classical RK4 with an even grid of n_steps intervals on [0, T]; iterates
    are re-symmetrized after every step so the stored trajectory is exactly
    symmetric. Escapes to E_BLOWUP if any entry passes 1e12 and to E_EIG if
    R cannot be factored.
    """
    if n_steps < 8:
        raise ShapeError("solve_coupled_riccati needs at least 8 steps")
    rinv_bt = lq.r_inv_bt()

    def rhs(_t, k):
        return _riccati_rhs(k, lq, rinv_bt)

    traj = _integrate_backward(rhs, lq.p.copy(), lq.horizon, n_steps)
    times = np.linspace(0.0, lq.horizon, n_steps + 1)
    return RiccatiTrajectory(times=times, k=traj)


def lq_feedback(traj: RiccatiTrajectory, lq: LQSpec) -> FeedbackTrajectory:
    """Optimal gains F(t, i) = R^{-1} B^T K(t, i) on the trajectory grid."""
    rinv_bt = lq.r_inv_bt()
    gains = np.einsum("nld,tndf->tnlf", rinv_bt, traj.k)
    return FeedbackTrajectory(times=traj.times, gains=gains)


def fixed_feedback_cost(lq: LQSpec, feedback: FeedbackTrajectory, n_steps: int = 400) -> RiccatiTrajectory:
    """Cost of the linear policy u = -F(t, i) x under the LQ data.

    Solves the backward linear equation with the minimization replaced by the
    frozen gain; the result M(t, i) gives the policy cost x^T M x. Gains are
    interpolated linearly to the RK4 stage times, so passing a feedback grid
    at twice the resolution of the cost grid makes the stage lookups exact.
    """

    def rhs(t, m):
        f = feedback.gain_at(t)  # (N, l, d)
        a_cl = lq.a - np.einsum("ndl,nle->nde", lq.b, f)
        at_m = np.einsum("nji,njk->nik", a_cl, m)
        ma = np.swapaxes(at_m, -1, -2)
        ctmc = np.einsum("nji,njk,nkl->nil", lq.c, m, lq.c)
        ftrf = np.einsum("nli,nlk,nkj->nij", f, lq.r, f)
        coupling = np.einsum("ij,jkl->ikl", lq.rates, m)
        return at_m + ma + ctmc + lq.q + ftrf + coupling

    traj = _integrate_backward(rhs, lq.p.copy(), lq.horizon, n_steps)
    times = np.linspace(0.0, lq.horizon, n_steps + 1)
    return RiccatiTrajectory(times=times, k=traj)


def riccati_defect(traj: RiccatiTrajectory, lq: LQSpec) -> float:
    """Max residual of the equation under a central time difference.

    For each interior node, compares (K_{k+1} - K_{k-1}) / (2 dt) against
    -g(K_k); the result decays like dt^2 for the exact solution.
    """
    if len(traj.times) < 3:
        raise ShapeError("defect needs at least 3 time nodes")
    rinv_bt = lq.r_inv_bt()
    dt = traj.times[1] - traj.times[0]
    kdot = (traj.k[2:] - traj.k[:-2]) / (2.0 * dt)
    worst = 0.0
    for j in range(kdot.shape[0]):
        res = kdot[j] + _riccati_rhs(traj.k[j + 1], lq, rinv_bt)
        worst = max(worst, float(np.max(np.abs(res))))
    return worst


def a_priori_bound(lq: LQSpec) -> float:
    """Growth bound max_i ||K(t, i)|| <= C0 * exp(k0 T) * (T + 1).

    C0 collects the data norms max_i(||Q_i|| + ||P_i||) and k0 the linear
    growth rate max_i(2 ||A_i|| + ||C_i||^2), all in the spectral norm.
    """
    nrm = lambda m: float(np.linalg.norm(m, ord=2))
    c0 = max(nrm(lq.q[i]) + nrm(lq.p[i]) for i in range(lq.n_regimes))
    k0 = max(2.0 * nrm(lq.a[i]) + nrm(lq.c[i]) ** 2 for i in range(lq.n_regimes))
    return c0 * np.exp(k0 * lq.horizon) * (lq.horizon + 1.0)


def time_lipschitz_bound(lq: LQSpec) -> float:
    """Uniform bound on ||dK/dt|| from the a priori trajectory bound."""
    nrm = lambda m: float(np.linalg.norm(m, ord=2))
    kappa = a_priori_bound(lq)
    k0 = max(2.0 * nrm(lq.a[i]) + nrm(lq.c[i]) ** 2 for i in range(lq.n_regimes))
    b2r = max(
        nrm(lq.b[i]) ** 2 / float(np.min(np.linalg.eigvalsh(lq.r[i])))
        for i in range(lq.n_regimes)
    )
    qmax = max(nrm(lq.q[i]) for i in range(lq.n_regimes))
    m_bound = float(np.max(np.abs(lq.rates)))
    return k0 * kappa + b2r * kappa**2 + qmax + lq.n_regimes * m_bound * kappa
