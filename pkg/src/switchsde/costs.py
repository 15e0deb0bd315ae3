"""Monte Carlo estimators for the four cost criteria.

Every estimator shares the same contract: paths are keyed by a global path
index under one seed, per-path totals are accumulated in path order, and the
final reduction is a fixed-topology pairwise sum, so the result is bit
identical no matter how paths are batched or scheduled.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import CapFractionWarning, UnboundedError
from .io import write_csv
from .model import FloatArray, ModelSpec
from .simulate import BatchStepper, _n_steps_for, outside_interval

DEFAULT_BATCH = 16384

ESTIMATE_HEADER = "criterion,x0,i0,value,stderr,paths,bias_bound,capped_fraction"


def pairwise_sum(values: FloatArray) -> float:
    """Sum with a fixed pairwise tree (padded to a power of two).

    The reduction topology depends only on the length, never on batching or
    scheduling, which is what makes estimator outputs byte-reproducible.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        return 0.0
    n = 1
    while n < v.size:
        n *= 2
    if n != v.size:
        v = np.concatenate([v, np.zeros(n - v.size)])
    while v.size > 1:
        v = v[0::2] + v[1::2]
    return float(v[0])


def _mean_stderr(totals: FloatArray) -> tuple[float, float]:
    n = totals.size
    mean = pairwise_sum(totals) / n
    if n < 2:
        return mean, 0.0
    var = pairwise_sum((totals - mean) ** 2) / (n - 1)
    return mean, math.sqrt(max(var, 0.0) / n)


@dataclass(frozen=True)
class McEstimate:
    """Sample-mean estimate of one cost functional."""

    criterion: str
    x0: FloatArray
    i0: int
    value: float
    stderr: float
    paths: int
    truncation_bias_bound: float = 0.0
    capped_fraction: float = 0.0

    def csv_row(self):
        x0 = np.atleast_1d(self.x0)
        x0_cell = ";".join(format(v, ".17g") for v in x0) if x0.size > 1 else float(x0[0])
        return (
            self.criterion,
            x0_cell,
            self.i0,
            self.value,
            self.stderr,
            self.paths,
            self.truncation_bias_bound,
            self.capped_fraction,
        )


def write_estimates_csv(path, estimates) -> None:
    write_csv(path, ESTIMATE_HEADER, [e.csv_row() for e in estimates])


def _run_weighted(
    spec: ModelSpec,
    policy,
    x0,
    i0,
    dt: float,
    n_steps: int,
    seed: int,
    n_paths: int,
    weights: FloatArray,
    terminal=None,
    batch: int = DEFAULT_BATCH,
) -> FloatArray:
    """Per-path totals sum_k weights[k] * c(X_k, S_k, U_k) (+ terminal)."""
    totals = np.empty(n_paths)
    for start in range(0, n_paths, batch):
        m = min(batch, n_paths - start)
        eng = BatchStepper(spec, x0, i0, dt, seed, first_path_index=start, n_paths=m)
        acc = np.zeros(m)
        last_u = None
        uc = None
        for k in range(n_steps):
            u = policy.actions_at(eng.t, eng.x, eng.s)
            if u is not last_u:
                uc = spec.actions.clamp(u)
                last_u = u
            w = weights[k]
            if w != 0.0:
                acc += w * spec.costs.running.eval_batch(eng.x, eng.s, uc)
            eng.step(u)
        eng.check_finite()
        if terminal is not None:
            acc += terminal(eng.x, eng.s)
        totals[start : start + m] = acc
    return totals


def mc_finite_horizon(
    spec: ModelSpec, policy, x0, i0, T: float, dt: float, n_paths: int, seed: int,
    batch: int = DEFAULT_BATCH,
) -> McEstimate:
    """Mean of int_0^T c dt + c_T(X_T, S_T) over simulated paths."""
    n_steps = _n_steps_for(T, dt)
    weights = np.full(n_steps, dt)
    totals = _run_weighted(
        spec, policy, x0, i0, dt, n_steps, seed, n_paths, weights,
        terminal=spec.costs.terminal.eval_batch, batch=batch,
    )
    value, stderr = _mean_stderr(totals)
    return McEstimate("finite-horizon", np.atleast_1d(np.asarray(x0, float)), int(i0), value, stderr, n_paths)


def discounted_horizon(spec: ModelSpec, alpha: float, eps_tail: float) -> float:
    """Truncation horizon T_a with tail int_{T_a}^inf e^{-a t} M_c dt <= eps_tail."""
    m_c = spec.cost_bound()
    if not np.isfinite(m_c):
        raise UnboundedError("discounted MC needs a bounded running cost (M_c finite)")
    if m_c <= 0.0:
        return 0.0
    return math.log(m_c / (alpha * eps_tail)) / alpha


def mc_discounted(
    spec: ModelSpec, policy, x0, i0, alpha: float, dt: float, n_paths: int, seed: int,
    eps_tail: float = 1e-4, batch: int = DEFAULT_BATCH,
) -> McEstimate:
    """Discounted running cost, truncated where the tail is below eps_tail.

    Discounting is applied per step at the left endpoint, e^(-alpha t_k).
    The reported truncation_bias_bound is eps_tail itself.
    """
    if alpha <= 0 or eps_tail <= 0:
        raise UnboundedError("mc_discounted needs alpha > 0 and eps_tail > 0")
    t_alpha = discounted_horizon(spec, alpha, eps_tail)
    n_steps = max(int(math.ceil(t_alpha / dt - 1e-12)), 0)
    weights = dt * np.exp(-alpha * dt * np.arange(n_steps))
    totals = _run_weighted(spec, policy, x0, i0, dt, n_steps, seed, n_paths, weights, batch=batch)
    value, stderr = _mean_stderr(totals)
    return McEstimate(
        "discounted", np.atleast_1d(np.asarray(x0, float)), int(i0), value, stderr,
        n_paths, truncation_bias_bound=eps_tail,
    )


def mc_ergodic(
    spec: ModelSpec, policy, x0, i0, t_long: float, dt: float, n_paths: int, seed: int,
    burn_in: float | None = None, batch: int = DEFAULT_BATCH,
) -> McEstimate:
    """Time-averaged running cost after a burn-in window (default 20%)."""
    if burn_in is None:
        burn_in = 0.2 * t_long
    if not 0.0 <= burn_in < t_long:
        raise UnboundedError("mc_ergodic needs 0 <= burn_in < t_long")
    n_steps = _n_steps_for(t_long, dt)
    k0 = int(math.ceil(burn_in / dt - 1e-9))
    weights = np.zeros(n_steps)
    # normalize by the covered window so a constant cost is reproduced exactly
    weights[k0:] = 1.0 / (n_steps - k0)
    totals = _run_weighted(spec, policy, x0, i0, dt, n_steps, seed, n_paths, weights, batch=batch)
    value, stderr = _mean_stderr(totals)
    return McEstimate("ergodic", np.atleast_1d(np.asarray(x0, float)), int(i0), value, stderr, n_paths)


def mc_exit(
    spec: ModelSpec, policy, x0, i0, dt: float, n_paths: int, seed: int,
    t_cap: float, domain: tuple[float, float] | None = None, beta=None, exit_h=None,
    batch: int = DEFAULT_BATCH,
) -> McEstimate:
    """Discounted running cost up to the first grid exit, plus exit payoff.

    Per path: accumulate e^(-B_k) c dt with B the running integral of beta,
    and add e^(-B_tau) h at the exit node. Paths still inside the domain at
    t_cap keep their accrued running cost, get no exit payoff, and are
    counted in capped_fraction; a fraction above 1% raises the cap warning.
    """
    domain = spec.costs.exit_domain if domain is None else domain
    beta = spec.costs.exit_beta if beta is None else beta
    exit_h = spec.costs.exit_h if exit_h is None else exit_h
    n_cap = int(math.ceil(t_cap / dt - 1e-9))

    values = np.zeros(n_paths)
    capped = np.zeros(n_paths, dtype=bool)
    log_disc = np.zeros(n_paths)
    for start in range(0, n_paths, batch):
        m = min(batch, n_paths - start)
        eng = BatchStepper(spec, x0, i0, dt, seed, first_path_index=start, n_paths=m)
        for k in range(n_cap + 1):
            out_rows = outside_interval(eng.x, domain) & eng.alive
            if np.any(out_rows):
                orig = start + eng.original_index[out_rows]
                disc = np.exp(-log_disc[orig])
                values[orig] += disc * exit_h.eval_batch(eng.x[out_rows], eng.s[out_rows])
                eng.mark_dead(out_rows)
            if eng.n_alive == 0:
                break
            if k == n_cap:
                capped[start + eng.original_index[eng.alive]] = True
                break
            u = policy.actions_at(eng.t, eng.x, eng.s)
            uc = spec.actions.clamp(u)
            al = eng.alive
            orig = start + eng.original_index[al]
            c = spec.costs.running.eval_batch(eng.x[al], eng.s[al], uc[al])
            b = beta.eval_batch(eng.x[al], eng.s[al], uc[al])
            values[orig] += np.exp(-log_disc[orig]) * c * dt
            log_disc[orig] += b * dt
            eng.step(u)
        eng.check_finite()

    value, stderr = _mean_stderr(values)
    frac = float(pairwise_sum(capped.astype(np.float64)) / n_paths)
    if frac > 0.01:
        warnings.warn(
            CapFractionWarning(f"{frac:.2%} of exit paths hit the time cap t_cap = {t_cap}"),
            stacklevel=2,
        )
    return McEstimate(
        "exit", np.atleast_1d(np.asarray(x0, float)), int(i0), value, stderr,
        n_paths, capped_fraction=frac,
    )
