"""Hybrid path simulation: Euler-Maruyama plus per-step jump thinning.

The continuous state advances explicitly,

    X_{k+1} = X_k + b(X_k, S_k, U_k) dt + sigma(X_k, S_k) sqrt(dt) xi_k,

and the regime jumps at most once per step: with probability
(sum_{j != i} m_ij(X_k, U_k)) dt a jump fires and the destination is drawn
proportionally to m_ij. The step bound dt <= 1/(4 N M) keeps that
probability at or below one quarter.

Randomness is counter based: path p draws from a Philox stream keyed by
(seed, p), independent of every other path and of how paths are batched.
Each path consumes its stream in fixed blocks of CHUNK steps: first the
Gaussian increments for the block (skipped entirely when the diffusion is
identically zero, a static property of the spec), then one uniform per
step. The step uniform both triggers the jump (u < p_jump) and, rescaled
to u / dt on that event, selects the destination regime, so a path
simulated alone is bit-identical to the same path inside any batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NanError, ShapeError, StepError
from .io import g17, write_csv
from .model import ActionGrid, FloatArray, ModelSpec
from .riccati import FeedbackTrajectory

CHUNK = 1024
MAX_STEPS = 10**8


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream identity for one path.

    ``counter`` is the Philox counter offset at which the stream starts;
    fresh streams start at zero. ``generator()`` always rebuilds the
    underlying bit generator from scratch, so the same RngStream yields the
    same draw sequence every time it is handed to the simulator.
    """

    seed: int
    path_index: int
    counter: int = 0

    def generator(self) -> np.random.Generator:
        bg = np.random.Philox(key=np.array([self.seed, self.path_index], dtype=np.uint64))
        if self.counter:
            bg.advance(self.counter)
        return np.random.Generator(bg)


def make_rng_stream(seed: int, path_index: int) -> RngStream:
    return RngStream(seed=int(seed), path_index=int(path_index))


# ---------------------------------------------------------------------------
# policies


class ConstantPolicy:
    """Always the same action.

    The returned batch is a cached broadcast view, so repeated calls with an
    unchanged batch size hand back the identical object; the stepper keys
    its clamp cache on that identity.
    """

    def __init__(self, u):
        self.u = np.atleast_1d(np.asarray(u, dtype=np.float64))
        self._batch = None

    def actions_at(self, t: float, x: FloatArray, s: np.ndarray) -> FloatArray:
        if self._batch is None or self._batch.shape[0] != x.shape[0]:
            self._batch = np.broadcast_to(self.u, (x.shape[0], self.u.size))
        return self._batch


class LQFeedbackPolicy:
    """Linear feedback u = -F(t, i) x from a gain trajectory."""

    def __init__(self, feedback: FeedbackTrajectory):
        self.feedback = feedback

    def actions_at(self, t: float, x: FloatArray, s: np.ndarray) -> FloatArray:
        f = self.feedback.gain_at(t)  # (N, l, d)
        return -np.einsum("mld,md->ml", f[s], x)


class GridPolicy:
    """Stationary policy table from a grid solve, nearest-node lookup."""

    def __init__(self, x_nodes: FloatArray, table: np.ndarray, actions: ActionGrid):
        self.x_nodes = np.asarray(x_nodes, dtype=np.float64)
        self.table = np.asarray(table, dtype=np.int64)  # (N, n_x)
        self.actions = actions
        self.dx = float(self.x_nodes[1] - self.x_nodes[0])

    def _node(self, x: FloatArray) -> np.ndarray:
        idx = np.rint((x[:, 0] - self.x_nodes[0]) / self.dx).astype(np.int64)
        return np.clip(idx, 0, self.x_nodes.size - 1)

    def actions_at(self, t: float, x: FloatArray, s: np.ndarray) -> FloatArray:
        return self.actions.actions[self.table[s, self._node(x)]]


class TimeGridPolicy:
    """Time-indexed policy table (finite-horizon solves).

    The table holds one action index per (time level, regime, node); the
    action chosen at level k applies on [t_k, t_{k+1}), so lookup floors t
    to a level.
    """

    def __init__(self, t_levels: FloatArray, x_nodes: FloatArray, table: np.ndarray, actions: ActionGrid):
        self.t_levels = np.asarray(t_levels, dtype=np.float64)
        self.x_nodes = np.asarray(x_nodes, dtype=np.float64)
        self.table = np.asarray(table, dtype=np.int64)  # (n_levels, N, n_x)
        self.actions = actions
        self.dx = float(self.x_nodes[1] - self.x_nodes[0])
        self.dt = float(self.t_levels[1] - self.t_levels[0])

    def actions_at(self, t: float, x: FloatArray, s: np.ndarray) -> FloatArray:
        lev = int(np.clip(np.floor((t - self.t_levels[0]) / self.dt + 1e-9), 0, self.table.shape[0] - 1))
        idx = np.rint((x[:, 0] - self.x_nodes[0]) / self.dx).astype(np.int64)
        idx = np.clip(idx, 0, self.x_nodes.size - 1)
        return self.actions.actions[self.table[lev, s, idx]]


class CallablePolicy:
    """Wraps fn(t, x, regimes) -> actions; x is (m, d), regimes are 1-based."""

    def __init__(self, fn):
        self.fn = fn

    def actions_at(self, t: float, x: FloatArray, s: np.ndarray) -> FloatArray:
        u = np.asarray(self.fn(t, x, s + 1), dtype=np.float64)
        if u.ndim == 1:
            u = u[:, None]
        return u


# ---------------------------------------------------------------------------
# batched stepping engine


class BatchStepper:
    """Drives a batch of paths with per-path streams and chunked draws.

    Rows can be retired (mark_dead); retired rows stop updating immediately
    and are compacted away at the next chunk refill so the per-step work
    shrinks with the surviving population. ``original_index`` maps current
    rows back to path indices.

    Non-finite states are detected at chunk boundaries and on an explicit
    check_finite() call, not per step; callers that consume the final state
    should call check_finite() once after their loop.
    """

    def __init__(
        self,
        spec: ModelSpec,
        x0,
        i0,
        dt: float,
        seed: int,
        first_path_index: int = 0,
        n_paths: int = 1,
        record_jumps: bool = False,
        t0: float = 0.0,
    ):
        n_big = spec.regimes.count * spec.generator.bound
        if dt <= 0 or dt * 4.0 * n_big > 1.0 + 1e-12:
            raise StepError(
                f"dt = {dt} violates dt <= 1/(4 N M) = {1.0 / (4.0 * n_big):.6g}"
            )
        self.spec = spec
        self.dt = float(dt)
        self.t = float(t0)
        self.d = spec.dim
        self.wd = spec.diffusion.wiener_dim
        m = int(n_paths)
        x0 = np.atleast_1d(np.asarray(x0, dtype=np.float64))
        if x0.ndim == 1:
            if x0.shape != (self.d,):
                raise ShapeError(f"x0 has shape {x0.shape}, expected ({self.d},)")
            self.x = np.tile(x0, (m, 1))
        else:
            if x0.shape != (m, self.d):
                raise ShapeError(f"x0 batch has shape {x0.shape}, expected ({m}, {self.d})")
            self.x = x0.copy()
        i0 = np.broadcast_to(np.asarray(i0, dtype=np.int64), (m,)).copy()
        if np.any(i0 < 1) or np.any(i0 > spec.regimes.count):
            raise ShapeError(f"i0 outside 1..{spec.regimes.count}")
        self.s = i0 - 1
        self.alive = np.ones(m, dtype=bool)
        self.original_index = np.arange(m, dtype=np.int64)
        # one generator per path, alive for the whole run
        self._gens = [
            make_rng_stream(seed, first_path_index + p).generator() for p in range(m)
        ]
        self.clamped_steps = 0
        self.record_jumps = record_jumps
        self.jumps: list[tuple[float, int, int]] = []
        self._pos = CHUNK  # forces a refill on the first step
        self._normals = None
        self._u_step = None
        self._all_alive = True
        self._sqrt_dt = np.sqrt(self.dt)
        self._inv_dt = 1.0 / self.dt

        # static fast-path tables for the constant families
        drift = spec.drift
        self._b0 = drift.b0 if drift.kind == "constant" else None
        self._drift_zero = self._b0 is not None and not self._b0.any()
        self._zero_diffusion = spec.diffusion.is_zero
        self._scalar = self.d == 1 and self.wd == 1
        self._b0_dt = None
        if self._scalar and self._b0 is not None:
            self._b0_dt = np.ascontiguousarray(self._b0[:, 0]) * self.dt
        self._sig_sdt = None
        if self._scalar and spec.diffusion.kind == "constant":
            self._sig_sdt = np.ascontiguousarray(spec.diffusion.c0[:, 0, 0]) * self._sqrt_dt
        gen = spec.generator
        if gen.kind == "constant":
            off = gen.rates.copy()
            np.fill_diagonal(off, 0.0)
            self._p_jump_const = off.sum(axis=1) * self.dt  # (N,)
            self._cum_off = np.cumsum(off, axis=1)  # (N, N)
            self._base_off = None
        else:
            off = gen.base.copy()
            np.fill_diagonal(off, 0.0)
            self._p_jump_const = None
            self._base_out = off.sum(axis=1)
            self._base_off = off
        # clamp cache keyed on the identity of the raw action batch
        self._clamp_key = None
        self._clamp_val = None
        self._clamp_rows = None

    @property
    def n_alive(self) -> int:
        return int(self.alive.sum())

    def mark_dead(self, dead_rows: np.ndarray) -> None:
        self.alive &= ~dead_rows
        self._all_alive = False

    def check_finite(self) -> None:
        if np.isfinite(self.x).all():
            return
        bad = ~np.isfinite(self.x).all(axis=1)
        path = int(self.original_index[np.argmax(bad)])
        raise NanError(
            f"state became non-finite at or before t = {self.t:.6g} on path {path}"
        )

    def _clamped(self, u_raw: FloatArray) -> FloatArray:
        if u_raw is self._clamp_key and u_raw.shape[0] == self._clamp_val.shape[0]:
            rows = self._clamp_rows
        else:
            u = self.spec.actions.clamp(u_raw)
            rows = np.any(u != u_raw, axis=1)
            if not rows.any():
                rows = None
            self._clamp_key = u_raw
            self._clamp_val = u
            self._clamp_rows = rows
        if rows is not None:
            if self._all_alive:
                self.clamped_steps += int(np.count_nonzero(rows))
            else:
                self.clamped_steps += int(np.count_nonzero(rows & self.alive))
        return self._clamp_val

    def _refill(self) -> None:
        self.check_finite()
        if not self._all_alive:
            keep = self.alive
            self.x = self.x[keep]
            self.s = self.s[keep]
            self.original_index = self.original_index[keep]
            self._gens = [g for g, k in zip(self._gens, keep) if k]
            self.alive = np.ones(self.x.shape[0], dtype=bool)
            self._all_alive = True
        m = self.x.shape[0]
        if self._u_step is None or self._u_step.shape[0] != m:
            self._u_step = np.empty((m, CHUNK))
            if not self._zero_diffusion:
                if self._scalar:
                    self._normals = np.empty((m, CHUNK))
                else:
                    self._normals = np.empty((m, CHUNK, self.wd))
        if self._zero_diffusion:
            for p, g in enumerate(self._gens):
                g.random(out=self._u_step[p])
        else:
            for p, g in enumerate(self._gens):
                g.standard_normal(out=self._normals[p])
                g.random(out=self._u_step[p])
        self._pos = 0

    def step(self, u_raw: FloatArray) -> None:
        """Advance every living row one Euler step using the given actions."""
        if self._pos >= CHUNK:
            self._refill()
        pos = self._pos
        x, s, alive = self.x, self.s, self.alive
        all_alive = self._all_alive
        u = self._clamped(u_raw)

        # jump probabilities from the pre-step state
        u_step = self._u_step[:, pos]
        if self._p_jump_const is not None:
            p_jump = self._p_jump_const[s]
            gval = None
        else:
            gen = self.spec.generator
            gval = 1.0 + gen.gx * np.tanh(x.mean(axis=1)) + gen.gu * np.tanh(u.mean(axis=1))
            p_jump = self._base_out[s] * gval * self.dt

        # Euler increment, in place on the scalar fast path
        if self._scalar:
            inc = None
            if not self._drift_zero:
                if self._b0_dt is not None:
                    inc = self._b0_dt[s]
                else:
                    inc = self.spec.drift.eval_batch(x, s, u)[:, 0] * self.dt
            if not self._zero_diffusion:
                if self._sig_sdt is not None:
                    noise = self._sig_sdt[s] * self._normals[:, pos]
                else:
                    sig = self.spec.diffusion.eval_batch(x, s)[:, 0, 0]
                    noise = sig * self._normals[:, pos] * self._sqrt_dt
                inc = noise if inc is None else inc + noise
            if inc is not None:
                xf = x[:, 0]
                if all_alive:
                    xf += inc
                else:
                    xf[alive] += inc[alive]
        else:
            b = self.spec.drift.eval_batch(x, s, u)
            sig = self.spec.diffusion.eval_batch(x, s)
            xi = self._normals[:, pos, :]
            dx = b * self.dt + np.einsum("mdw,mw->md", sig, xi) * self._sqrt_dt
            if all_alive:
                x += dx
            else:
                x[alive] += dx[alive]

        # resolve jumps; on the event, u/dt is uniform on [0, total outflow)
        jumped = u_step < p_jump
        if not all_alive:
            jumped &= alive
        if np.count_nonzero(jumped):
            rows = np.nonzero(jumped)[0]
            sj = s[rows]
            r = u_step[rows] * self._inv_dt
            if self._base_off is None:
                cum = self._cum_off[sj]
            else:
                cum = np.cumsum(self._base_off[sj] * gval[rows, None], axis=1)
            dest = np.argmax(r[:, None] < cum, axis=1)
            if self.record_jumps:
                t_next = self.t + self.dt
                for i, row in enumerate(rows):
                    self.jumps.append((t_next, int(s[row]) + 1, int(dest[i]) + 1))
            s[rows] = dest

        self._pos = pos + 1
        self.t += self.dt


# ---------------------------------------------------------------------------
# path containers


@dataclass(frozen=True, eq=False)
class PathSample:
    """One simulated trajectory on the uniform step grid.

    ``regimes`` are 1-based labels; ``actions`` has one row per step (the
    action applied on [t_k, t_{k+1})). ``termination`` is 'horizon', 'exit'
    or 'cap'; for exits, the final node is the first grid time outside the
    domain.
    """

    times: FloatArray
    states: FloatArray
    regimes: np.ndarray
    actions: FloatArray
    jumps: tuple
    termination: str
    clamped_steps: int

    @property
    def exit_time(self) -> float | None:
        return float(self.times[-1]) if self.termination == "exit" else None

    def to_csv(self, path) -> None:
        d = self.states.shape[1]
        l = self.actions.shape[1] if self.actions.ndim == 2 else 1
        header = "t,regime," + ",".join(f"x_{j + 1}" for j in range(d)) + "," + ",".join(
            f"u_{j + 1}" for j in range(l)
        )
        comments = [
            f"#jump,{g17(t)},{i},{j}" for (t, i, j) in self.jumps
        ]
        rows = []
        n = self.actions.shape[0]
        for k in range(self.times.size):
            row = [self.times[k], int(self.regimes[k])]
            row.extend(self.states[k])
            if k < n:
                row.extend(self.actions[k])
            else:
                row.extend([None] * l)
            rows.append(row)
        write_csv(path, header, rows, comments=comments)


def _n_steps_for(T: float, dt: float) -> int:
    n = int(round(T / dt))
    if n < 0 or abs(n * dt - T) > 1e-9 * max(1.0, abs(T)):
        raise StepError(f"horizon T = {T} is not an integer multiple of dt = {dt}")
    if n > MAX_STEPS:
        raise StepError(f"T/dt = {n} exceeds the step budget {MAX_STEPS}")
    return n


def simulate_path(spec: ModelSpec, policy, x0, i0, T: float, dt: float, stream: RngStream) -> PathSample:
    """Simulate one trajectory to the horizon under the given policy."""
    n = _n_steps_for(T, dt)
    eng = BatchStepper(
        spec, x0, i0, dt, seed=stream.seed, first_path_index=stream.path_index,
        n_paths=1, record_jumps=True,
    )
    d, l = spec.dim, spec.actions.action_dim
    states = np.empty((n + 1, d))
    regimes = np.empty(n + 1, dtype=np.int64)
    actions = np.empty((n, l))
    states[0] = eng.x[0]
    regimes[0] = eng.s[0] + 1
    for k in range(n):
        u = policy.actions_at(eng.t, eng.x, eng.s)
        actions[k] = spec.actions.clamp(u)[0]
        eng.step(u)
        states[k + 1] = eng.x[0]
        regimes[k + 1] = eng.s[0] + 1
    eng.check_finite()
    return PathSample(
        times=np.arange(n + 1) * dt,
        states=states,
        regimes=regimes,
        actions=actions,
        jumps=tuple(eng.jumps),
        termination="horizon",
        clamped_steps=eng.clamped_steps,
    )


def outside_interval(x: FloatArray, domain: tuple[float, float]) -> np.ndarray:
    """Rows whose state has left the open box (lo, hi) in any coordinate."""
    lo, hi = domain
    return np.any((x <= lo) | (x >= hi), axis=1)


def simulate_exit_path(
    spec: ModelSpec, policy, x0, i0, domain: tuple[float, float], dt: float,
    t_cap: float, stream: RngStream,
) -> PathSample:
    """Simulate until the state leaves the open domain, or until t_cap.

    The exit node is the first grid time at which the state is outside the
    domain; no interpolation toward the boundary is applied. A start outside
    the domain terminates immediately with a zero-length path.
    """
    if not np.isfinite(t_cap) or t_cap <= 0:
        raise StepError("t_cap must be finite and positive")
    n_cap = _n_steps_for(t_cap, dt)
    eng = BatchStepper(
        spec, x0, i0, dt, seed=stream.seed, first_path_index=stream.path_index,
        n_paths=1, record_jumps=True,
    )
    d, l = spec.dim, spec.actions.action_dim
    states = [eng.x[0].copy()]
    regimes = [int(eng.s[0]) + 1]
    actions = []
    termination = "cap"
    for k in range(n_cap + 1):
        if outside_interval(eng.x, domain)[0]:
            termination = "exit"
            break
        if k == n_cap:
            break
        u = policy.actions_at(eng.t, eng.x, eng.s)
        actions.append(spec.actions.clamp(u)[0].copy())
        eng.step(u)
        states.append(eng.x[0].copy())
        regimes.append(int(eng.s[0]) + 1)
    eng.check_finite()
    n = len(states) - 1
    return PathSample(
        times=np.arange(n + 1) * dt,
        states=np.array(states).reshape(n + 1, d),
        regimes=np.array(regimes, dtype=np.int64),
        actions=np.array(actions, dtype=np.float64).reshape(n, l),
        jumps=tuple(eng.jumps),
        termination=termination,
        clamped_steps=eng.clamped_steps,
    )
