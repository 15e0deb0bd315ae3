"""Finite-difference solvers for the weakly coupled HJB systems (d = 1).

Spatial discretization on a uniform node grid: central differences for the
second-order term a V'' with a = sigma^2 / 2, fully upwind first differences
for b V' (direction chosen per candidate action), so every assembled row is
an M-matrix row for every action. Ends are reflecting (zero outward
derivative, one-sided second difference) except for the exit problem, whose
boundary rows are Dirichlet.

The regime coupling sum_j m_ij V(x, j) is handled by Gauss-Seidel sweeps
over regimes with an exact tridiagonal solve per regime, inner tolerance a
tenth of the outer one. Minimization over actions is an exhaustive scan of
the ActionGrid in list order; ties keep the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import solve_banded

from .errors import ShapeError, StepError, UnboundedError
from .io import write_csv
from .model import FloatArray, ModelSpec, _freeze

DEFAULT_LADDER = (0.2, 0.1, 0.05, 0.025)
MAX_SWEEPS = 50000

GRID_HEADER = "criterion,regime,x,value,action_index"
GRID_HEADER_T = "criterion,regime,x,value,action_index,t"


@dataclass(frozen=True, eq=False)
class Grid1D:
    """Uniform 1-D node grid over a closed interval."""

    x_min: float
    x_max: float
    n_x: int

    def __post_init__(self):
        if self.n_x < 11:
            raise ShapeError("grid needs at least 11 nodes")
        if not self.x_min < self.x_max:
            raise ShapeError("grid interval must have x_min < x_max")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n_x - 1)

    @property
    def nodes(self) -> FloatArray:
        return np.linspace(self.x_min, self.x_max, self.n_x)


@dataclass(frozen=True, eq=False)
class GridSolution:
    """Values and extracted policy of one grid solve.

    For stationary criteria ``values`` is (N, n_x) and ``policy`` holds one
    action index per (regime, node). The finite-horizon solve stacks time
    levels: values (n_t + 1, N, n_x) with the terminal level last, policy
    (n_t, N, n_x) where level j acts on [t_j, t_{j+1}), and ``t_levels``
    carries the level times.
    """

    criterion: str
    grid: Grid1D
    values: FloatArray
    policy: np.ndarray
    iterations: int
    residual: float
    status: str  # 'ok' or 'maxiter'
    residual_history: tuple = ()
    alpha: float | None = None
    horizon: float | None = None
    t_levels: FloatArray | None = None

    def __post_init__(self):
        object.__setattr__(self, "values", _freeze(self.values))
        pol = np.asarray(self.policy, dtype=np.int64)
        pol.setflags(write=False)
        object.__setattr__(self, "policy", pol)

    def csv_rows(self):
        xs = self.grid.nodes
        if self.values.ndim == 2:
            for i in range(self.values.shape[0]):
                for k in range(self.values.shape[1]):
                    yield (self.criterion, i + 1, xs[k], self.values[i, k], int(self.policy[i, k]))
        else:
            # terminal level has no action; written with index -1
            n_t = self.values.shape[0] - 1
            for j in range(n_t + 1):
                for i in range(self.values.shape[1]):
                    for k in range(self.values.shape[2]):
                        a = int(self.policy[j, i, k]) if j < n_t else -1
                        yield (
                            self.criterion, i + 1, xs[k], self.values[j, i, k], a,
                            self.t_levels[j],
                        )

    def to_csv(self, path) -> None:
        header = GRID_HEADER if self.values.ndim == 2 else GRID_HEADER_T
        write_csv(path, header, self.csv_rows())


@dataclass(frozen=True, eq=False)
class ErgodicEstimate:
    """Vanishing-discount estimate of the optimal long-run average cost."""

    rho: float
    relative_values: FloatArray  # (N, n_x), zero at the reference node
    policy: np.ndarray
    ladder: tuple
    ladder_values: tuple  # alpha * V_alpha(reference) per ladder entry
    extrapolants: tuple  # successive two-point extrapolations
    reference_node: int
    grid: Grid1D


class _Tables:
    """Per-(action, regime, node) coefficient tables for one spec and grid.

    sub/sup/ldiag are the three diagonals of the drift-diffusion operator L
    (excluding regime coupling), built so that L annihilates constants; sub
    and sup are nonnegative for every action, which is the M-matrix
    property the maximum principle rests on.
    """

    def __init__(self, spec: ModelSpec, grid: Grid1D):
        if spec.dim != 1:
            raise ShapeError("grid solvers support dim 1 only")
        self.spec = spec
        self.grid = grid
        K = grid.n_x
        N = spec.regimes.count
        A = spec.actions.n_actions
        dx = grid.dx
        xs = grid.nodes[:, None]  # (K, 1)

        self.a = np.empty((N, K))
        self.b = np.empty((A, N, K))
        self.c = np.empty((A, N, K))
        self.beta = np.empty((A, N, K))
        self.rates = np.empty((A, K, N, N))
        for i in range(N):
            s_vec = np.full(K, i, dtype=np.int64)
            self.a[i] = spec.diffusion.a_batch(xs, s_vec)[:, 0, 0]
            for ai, act in enumerate(spec.actions.actions):
                u = np.tile(act, (K, 1))
                self.b[ai, i] = spec.drift.eval_batch(xs, s_vec, u)[:, 0]
                self.c[ai, i] = spec.costs.running.eval_batch(xs, s_vec, u)
                self.beta[ai, i] = spec.costs.exit_beta.eval_batch(xs, s_vec, u)
        for ai, act in enumerate(spec.actions.actions):
            u = np.tile(act, (K, 1))
            self.rates[ai] = spec.generator.rates_batch(xs, u)

        assert np.all(self.a > 0.0), "degenerate diffusion on the grid"
        b_plus = np.maximum(self.b, 0.0)
        b_minus = np.maximum(-self.b, 0.0)
        self.sub = self.a[None] / dx**2 + b_minus / dx
        self.sup = self.a[None] / dx**2 + b_plus / dx
        # reflecting ends: one-sided second difference, outward drift dropped
        self.sub[:, :, 0] = 0.0
        self.sup[:, :, 0] = self.a[None, :, 0] / dx**2 + b_plus[:, :, 0] / dx
        self.sup[:, :, -1] = 0.0
        self.sub[:, :, -1] = self.a[None, :, -1] / dx**2 + b_minus[:, :, -1] / dx
        assert np.all(self.sub >= 0.0) and np.all(self.sup >= 0.0)
        self.ldiag = -(self.sub + self.sup)

        # m_ii and off-diagonal coupling per (action, regime, node)
        idx = np.arange(N)
        self.m_diag = self.rates[:, :, idx, idx].transpose(0, 2, 1)  # (A, N, K)

    def apply_l(self, ai_tab: np.ndarray, v: FloatArray) -> FloatArray:
        """(L v)_i per node for a per-node action table ai_tab (N, K)."""
        K = self.grid.n_x
        kk = np.arange(K)
        out = np.empty_like(v)
        for i in range(v.shape[0]):
            a = ai_tab[i]
            sub = self.sub[a, i, kk]
            sup = self.sup[a, i, kk]
            diag = self.ldiag[a, i, kk]
            out[i] = diag * v[i]
            out[i, 1:] += sub[1:] * v[i, :-1]
            out[i, :-1] += sup[:-1] * v[i, 1:]
        return out

    def coupling(self, ai_tab: np.ndarray, v: FloatArray) -> FloatArray:
        """sum_j m_ij v_j per node, including the diagonal term (N, K)."""
        K = self.grid.n_x
        N = v.shape[0]
        kk = np.arange(K)
        out = np.empty_like(v)
        for i in range(N):
            rates_i = self.rates[ai_tab[i], kk, i, :]  # (K, N)
            out[i] = np.einsum("kj,jk->k", rates_i, v)
        return out

    def gather(self, table: np.ndarray, ai_tab: np.ndarray) -> FloatArray:
        """Per-node values of an (A, N, K) table under an (N, K) action table."""
        K = self.grid.n_x
        kk = np.arange(K)
        return np.stack([table[ai_tab[i], i, kk] for i in range(ai_tab.shape[0])])


def _gs_solve(
    tab: _Tables,
    ai_tab: np.ndarray,
    rhs_base: FloatArray,
    zeta: FloatArray,
    v0: FloatArray,
    inner_tol: float,
    dirichlet: FloatArray | None = None,
    max_sweeps: int = MAX_SWEEPS,
) -> tuple[FloatArray, int, bool]:
    """Solve (zeta - L - M) v = rhs_base by regime Gauss-Seidel.

    zeta is the per-(regime, node) zeroth-order coefficient (alpha, beta or
    1/dt as appropriate), applied with the diagonal generator entry folded
    in separately. ``dirichlet`` (N, 2) pins the two boundary nodes when
    given. Returns (v, sweeps, converged).
    """
    K = tab.grid.n_x
    N = rhs_base.shape[0]
    kk = np.arange(K)
    v = v0.copy()

    bands = []
    rates_off = []
    for i in range(N):
        a = ai_tab[i]
        sub = tab.sub[a, i, kk]
        sup = tab.sup[a, i, kk]
        diag = zeta[i] - tab.m_diag[a, i, kk] - tab.ldiag[a, i, kk]
        ab = np.zeros((3, K))
        ab[0, 1:] = -sup[:-1]
        ab[1] = diag
        ab[2, :-1] = -sub[1:]
        rates_i = tab.rates[a, kk, i, :].copy()  # (K, N)
        rates_i[:, i] = 0.0
        if dirichlet is not None:
            ab[1, 0] = 1.0
            ab[0, 1] = 0.0
            ab[1, -1] = 1.0
            ab[2, -2] = 0.0
            rates_i[0] = 0.0
            rates_i[-1] = 0.0
        bands.append(ab)
        rates_off.append(rates_i)

    for sweep in range(1, max_sweeps + 1):
        delta = 0.0
        for i in range(N):
            rhs = rhs_base[i] + np.einsum("kj,jk->k", rates_off[i], v)
            if dirichlet is not None:
                rhs = rhs.copy()
                rhs[0] = dirichlet[i, 0]
                rhs[-1] = dirichlet[i, 1]
            new = solve_banded((1, 1), bands[i], rhs)
            delta = max(delta, float(np.max(np.abs(new - v[i]))))
            v[i] = new
        if delta < inner_tol:
            return v, sweep, True
    return v, max_sweeps, False


def _hamiltonians(tab: _Tables, v: FloatArray, with_beta: bool) -> FloatArray:
    """Per-action pre-minimization values L_a v + M_a v + c_a (- beta_a v)."""
    A, N, K = tab.c.shape
    out = np.empty((A, N, K))
    for ai in range(A):
        ai_tab = np.full((N, K), ai, dtype=np.int64)
        out[ai] = tab.apply_l(ai_tab, v) + tab.coupling(ai_tab, v) + tab.c[ai]
        if with_beta:
            out[ai] -= tab.beta[ai] * v
    return out


def _improve(tab: _Tables, v: FloatArray, with_beta: bool) -> np.ndarray:
    """Pointwise argmin over the action list; ties keep the lowest index."""
    return np.argmin(_hamiltonians(tab, v, with_beta), axis=0).astype(np.int64)


def solve_discounted(
    spec: ModelSpec, grid: Grid1D, alpha: float | None = None, tol: float = 1e-8,
    max_iter: int = 100,
) -> GridSolution:
    """Policy iteration for min_a [L_a V + M_a V + c_a] = alpha V.

    Alternates exact policy evaluation (Gauss-Seidel over regimes with
    tridiagonal inner solves to tol/10) and exhaustive policy improvement;
    stops when the sup-norm value change drops below tol. The discrete
    maximum principle 0 <= V <= M_c/alpha is checked on the result.
    """
    alpha = spec.costs.alpha if alpha is None else float(alpha)
    if alpha <= 0:
        raise ShapeError("discount alpha must be > 0")
    m_c = spec.cost_bound()
    if not np.isfinite(m_c):
        raise UnboundedError("grid solvers need a bounded running cost")
    tab = _Tables(spec, grid)
    N, K = spec.regimes.count, grid.n_x
    zeta = np.full((N, K), alpha)

    v = np.zeros((N, K))
    policy = _improve(tab, v, with_beta=False)
    history = []
    status = "ok"
    it = 0
    for it in range(1, max_iter + 1):
        rhs = tab.gather(tab.c, policy)
        v_new, sweeps, conv = _gs_solve(tab, policy, rhs, zeta, v, tol / 10.0)
        if not conv:
            status = "maxiter"
        res = float(np.max(np.abs(np.min(_hamiltonians(tab, v_new, False), axis=0) - alpha * v_new)))
        history.append(res)
        change = float(np.max(np.abs(v_new - v)))
        v = v_new
        policy = _improve(tab, v, with_beta=False)
        if change < tol:
            break
    else:
        status = "maxiter"

    # residual should not increase across outer iterations (inner-solve noise allowed)
    slack = max(1e-12, tol)
    assert all(history[j + 1] <= history[j] + slack for j in range(len(history) - 1)), \
        "policy-iteration residual increased"
    assert np.all(v >= -1e-9) and np.all(v <= m_c / alpha + 1e-9), \
        "discounted solution violates the maximum principle bound"
    return GridSolution(
        criterion="discounted", grid=grid, values=v, policy=policy,
        iterations=it, residual=history[-1] if history else 0.0, status=status,
        residual_history=tuple(history), alpha=alpha,
    )


def evaluate_policy_value(
    spec: ModelSpec, grid: Grid1D, policy: np.ndarray, alpha: float | None = None,
    tol: float = 1e-8,
) -> GridSolution:
    """Discounted value of a fixed action table (single coupled solve)."""
    alpha = spec.costs.alpha if alpha is None else float(alpha)
    tab = _Tables(spec, grid)
    N, K = spec.regimes.count, grid.n_x
    policy = np.asarray(policy, dtype=np.int64)
    if policy.shape != (N, K):
        raise ShapeError(f"policy table has shape {policy.shape}, expected {(N, K)}")
    zeta = np.full((N, K), alpha)
    rhs = tab.gather(tab.c, policy)
    v, sweeps, conv = _gs_solve(tab, policy, rhs, zeta, np.zeros((N, K)), tol / 10.0)
    res = float(np.max(np.abs(tab.apply_l(policy, v) + tab.coupling(policy, v) + rhs - alpha * v)))
    return GridSolution(
        criterion="discounted-policy", grid=grid, values=v, policy=policy,
        iterations=sweeps, residual=res, status="ok" if conv else "maxiter",
        alpha=alpha,
    )


def solve_exit(
    spec: ModelSpec, grid: Grid1D, beta=None, exit_h=None, tol: float = 1e-8,
    max_iter: int = 100,
) -> GridSolution:
    """Policy iteration for min_a [L_a V + M_a V - beta_a V + c_a] = 0 on O.

    The grid interval is the exit domain; the two boundary rows are Dirichlet
    rows pinning V to h exactly.
    """
    if beta is not None or exit_h is not None:
        costs = spec.costs
        if beta is not None:
            costs = replace(costs, exit_beta=beta)
        if exit_h is not None:
            costs = replace(costs, exit_h=exit_h)
        spec = replace(spec, costs=costs)
    tab = _Tables(spec, grid)
    m_c = spec.cost_bound()
    if not np.isfinite(m_c):
        raise UnboundedError("grid solvers need a bounded running cost")
    N, K = spec.regimes.count, grid.n_x
    xs = grid.nodes
    h_vals = np.stack(
        [
            spec.costs.exit_h.eval_batch(
                np.array([[xs[0]], [xs[-1]]]), np.full(2, i, dtype=np.int64)
            )
            for i in range(N)
        ]
    )  # (N, 2)

    v = np.zeros((N, K))
    v[:, 0] = h_vals[:, 0]
    v[:, -1] = h_vals[:, 1]
    policy = _improve(tab, v, with_beta=True)
    history = []
    status = "ok"
    it = 0
    for it in range(1, max_iter + 1):
        rhs = tab.gather(tab.c, policy)
        zeta = tab.gather(tab.beta, policy)
        v_new, sweeps, conv = _gs_solve(
            tab, policy, rhs, zeta, v, tol / 10.0, dirichlet=h_vals
        )
        if not conv:
            status = "maxiter"
        ham = np.min(_hamiltonians(tab, v_new, True), axis=0)
        res = float(np.max(np.abs(ham[:, 1:-1])))
        history.append(res)
        change = float(np.max(np.abs(v_new - v)))
        v = v_new
        policy = _improve(tab, v, with_beta=True)
        if change < tol:
            break
    else:
        status = "maxiter"

    slack = max(1e-12, tol)
    assert all(history[j + 1] <= history[j] + slack for j in range(len(history) - 1)), \
        "policy-iteration residual increased"
    return GridSolution(
        criterion="exit", grid=grid, values=v, policy=policy,
        iterations=it, residual=history[-1] if history else 0.0, status=status,
        residual_history=tuple(history),
    )


def evaluate_policy_exit(
    spec: ModelSpec, grid: Grid1D, policy: np.ndarray, tol: float = 1e-8,
) -> GridSolution:
    """Exit cost of a fixed action table (single coupled Dirichlet solve)."""
    tab = _Tables(spec, grid)
    N, K = spec.regimes.count, grid.n_x
    policy = np.asarray(policy, dtype=np.int64)
    xs = grid.nodes
    h_vals = np.stack(
        [
            spec.costs.exit_h.eval_batch(
                np.array([[xs[0]], [xs[-1]]]), np.full(2, i, dtype=np.int64)
            )
            for i in range(N)
        ]
    )
    rhs = tab.gather(tab.c, policy)
    zeta = tab.gather(tab.beta, policy)
    v0 = np.zeros((N, K))
    v, sweeps, conv = _gs_solve(tab, policy, rhs, zeta, v0, tol / 10.0, dirichlet=h_vals)
    ham = tab.apply_l(policy, v) + tab.coupling(policy, v) + rhs - zeta * v
    res = float(np.max(np.abs(ham[:, 1:-1])))
    return GridSolution(
        criterion="exit-policy", grid=grid, values=v, policy=policy,
        iterations=sweeps, residual=res, status="ok" if conv else "maxiter",
    )


def solve_finite_horizon(
    spec: ModelSpec, grid: Grid1D, horizon: float | None = None, n_t: int | None = None,
    tol: float = 1e-8,
) -> GridSolution:
    """Backward semi-implicit scheme for the finite-horizon system.

    At each level the minimizing action is chosen explicitly from the next
    level's values, then the coupled linear system for the new level is
    solved implicitly; the terminal level equals c_T exactly. Needs the time
    step at or below 0.1 for the frozen-policy accuracy to hold.
    """
    T = spec.costs.horizon if horizon is None else float(horizon)
    if n_t is None:
        n_t = max(int(np.ceil(T / 0.05)), 10)
    dt = T / n_t
    if dt > 0.1 + 1e-12:
        raise StepError(f"finite-horizon time step {dt:.4g} exceeds 0.1; raise n_t")
    m_c = spec.cost_bound()
    if not np.isfinite(m_c):
        raise UnboundedError("grid solvers need a bounded running cost")
    tab = _Tables(spec, grid)
    N, K = spec.regimes.count, grid.n_x
    xs = grid.nodes[:, None]

    values = np.empty((n_t + 1, N, K))
    policy = np.empty((n_t, N, K), dtype=np.int64)
    for i in range(N):
        values[n_t, i] = spec.costs.terminal.eval_batch(xs, np.full(K, i, dtype=np.int64))

    zeta = np.full((N, K), 1.0 / dt)
    status = "ok"
    worst_res = 0.0
    for j in range(n_t - 1, -1, -1):
        v_next = values[j + 1]
        pol = _improve(tab, v_next, with_beta=False)
        rhs = tab.gather(tab.c, pol) + v_next / dt
        v_new, sweeps, conv = _gs_solve(tab, pol, rhs, zeta, v_next, tol / 10.0)
        if not conv:
            status = "maxiter"
        res = float(
            np.max(
                np.abs(
                    (v_next - v_new) / dt
                    + tab.apply_l(pol, v_new) + tab.coupling(pol, v_new)
                    + tab.gather(tab.c, pol)
                )
            )
        )
        worst_res = max(worst_res, res)
        values[j] = v_new
        policy[j] = pol

    return GridSolution(
        criterion="finite-horizon", grid=grid, values=values, policy=policy,
        iterations=n_t, residual=worst_res, status=status, horizon=T,
        t_levels=np.linspace(0.0, T, n_t + 1),
    )


def evaluate_policy_finite_horizon(
    spec: ModelSpec, grid: Grid1D, policy: np.ndarray, horizon: float | None = None,
    tol: float = 1e-8,
) -> GridSolution:
    """Finite-horizon cost of a fixed time-indexed action table."""
    T = spec.costs.horizon if horizon is None else float(horizon)
    policy = np.asarray(policy, dtype=np.int64)
    n_t = policy.shape[0]
    dt = T / n_t
    tab = _Tables(spec, grid)
    N, K = spec.regimes.count, grid.n_x
    xs = grid.nodes[:, None]
    values = np.empty((n_t + 1, N, K))
    for i in range(N):
        values[n_t, i] = spec.costs.terminal.eval_batch(xs, np.full(K, i, dtype=np.int64))
    zeta = np.full((N, K), 1.0 / dt)
    status = "ok"
    for j in range(n_t - 1, -1, -1):
        pol = policy[j]
        rhs = tab.gather(tab.c, pol) + values[j + 1] / dt
        v_new, _, conv = _gs_solve(tab, pol, rhs, zeta, values[j + 1], tol / 10.0)
        if not conv:
            status = "maxiter"
        values[j] = v_new
    return GridSolution(
        criterion="finite-horizon-policy", grid=grid, values=values, policy=policy,
        iterations=n_t, residual=0.0, status=status, horizon=T,
        t_levels=np.linspace(0.0, T, n_t + 1),
    )


def _reference_node(grid: Grid1D) -> int:
    return int(np.argmin(np.abs(grid.nodes)))


def estimate_ergodic(
    spec: ModelSpec, grid: Grid1D, ladder=DEFAULT_LADDER, tol: float = 1e-8,
) -> ErgodicEstimate:
    """Vanishing-discount estimate of the optimal ergodic constant.

    Solves the discounted problem for each ladder alpha and extrapolates
    alpha * V_alpha(reference node, regime 1) linearly in alpha from the two
    smallest ladder entries; the relative value is the smallest-alpha
    solution shifted to vanish at the reference node.
    """
    ladder = tuple(sorted((float(a) for a in ladder), reverse=True))
    if len(ladder) < 2:
        raise ShapeError("ergodic ladder needs at least two discount values")
    k_ref = _reference_node(grid)
    ys = []
    sol = None
    for alpha in ladder:
        sol = solve_discounted(spec, grid, alpha=alpha, tol=tol)
        ys.append(alpha * float(sol.values[0, k_ref]))
    extrapolants = tuple(
        (ladder[j + 1] * ys[j] - ladder[j] * ys[j + 1]) / (ladder[j + 1] - ladder[j])
        for j in range(len(ladder) - 1)
    )
    rho = extrapolants[-1]
    rel = sol.values - sol.values[0, k_ref]
    return ErgodicEstimate(
        rho=float(rho), relative_values=rel, policy=sol.policy, ladder=ladder,
        ladder_values=tuple(ys), extrapolants=extrapolants, reference_node=k_ref,
        grid=grid,
    )


def estimate_ergodic_policy(
    spec: ModelSpec, grid: Grid1D, policy: np.ndarray, ladder=DEFAULT_LADDER,
    tol: float = 1e-8,
) -> float:
    """Long-run average cost of a fixed action table via the same ladder."""
    ladder = tuple(sorted((float(a) for a in ladder), reverse=True))
    k_ref = _reference_node(grid)
    ys = []
    for alpha in ladder:
        sol = evaluate_policy_value(spec, grid, policy, alpha=alpha, tol=tol)
        ys.append(alpha * float(sol.values[0, k_ref]))
    return float(
        (ladder[-1] * ys[-2] - ladder[-2] * ys[-1]) / (ladder[-1] - ladder[-2])
    )
