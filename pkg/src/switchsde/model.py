"""Hybrid model data types and structural validation.

A model couples a controlled diffusion in R^d with a finite regime chain.
Coefficients are restricted to declared parametric families so that every
experiment is a serializable document: drift and diffusion families produce
b(x, i, u) and sigma(x, i), the generator family produces the switching-rate
matrix m_ij(x, u) (nonnegative off-diagonals, zero row sums), and the cost
family produces the running cost c(x, i, u) plus terminal and exit data.

All value objects are frozen; arrays are made read-only on construction.
Batch evaluation methods take stacked inputs (one row per sample or per
simulated path) and are the single evaluation path shared by the simulator
and the grid solver.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigError, RatesError, ShapeError

FloatArray = NDArray[np.float64]

ROW_SUM_TOL = 1e-12


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def _shaped(a, shape: tuple[int, ...], name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.shape != shape:
        raise ShapeError(f"{name} has shape {arr.shape}, expected {shape}")
    return _freeze(arr)


@dataclass(frozen=True, eq=False)
class RegimeSet:
    """Finite regime labels 1..count; arrays index regimes from 0."""

    count: int

    def __post_init__(self):
        if self.count < 1:
            raise ShapeError("regime count must be >= 1")


@dataclass(frozen=True, eq=False)
class ActionGrid:
    """Ordered finite action list in R^l with a box envelope.

    The list order is part of the contract: argmin ties are broken by the
    lowest index, so reordering actions changes extracted policies. Bounds
    are the componentwise min/max envelope of the listed actions.
    """

    actions: FloatArray  # (n_actions, l)

    def __post_init__(self):
        arr = np.asarray(self.actions, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] == 0:
            raise ShapeError("actions must be a nonempty (n_actions, l) array")
        object.__setattr__(self, "actions", _freeze(arr))
        object.__setattr__(self, "lower", _freeze(arr.min(axis=0)))
        object.__setattr__(self, "upper", _freeze(arr.max(axis=0)))

    @property
    def n_actions(self) -> int:
        return self.actions.shape[0]

    @property
    def action_dim(self) -> int:
        return self.actions.shape[1]

    def clamp(self, u: np.ndarray) -> np.ndarray:
        """Componentwise projection onto the box envelope."""
        return np.clip(u, self.lower, self.upper)


# ---------------------------------------------------------------------------
# drift families


@dataclass(frozen=True, eq=False)
class DriftFamily:
    """Drift b(x, i, u) from one of the declared families.

    kind 'lq'               b = A(i) x + B(i) u
    kind 'saturated-affine' b = s * tanh(A(i) x / s) + B(i) u + b0(i)
                            (elementwise tanh; |b| globally bounded)
    kind 'constant'         b = b0(i)
    kind 'tabulated'        b = per-regime table over x nodes, linear
                            interpolation, constant extrapolation (d = 1)

    The offset slot b0 on the affine families defaults to zero and exists so
    that drift corrections proportional to a constant diffusion matrix stay
    inside the family.
    """

    kind: str
    dim: int
    n_regimes: int
    action_dim: int
    a_mat: FloatArray | None = None  # (N, d, d)
    b_mat: FloatArray | None = None  # (N, d, l)
    b0: FloatArray | None = None  # (N, d)
    saturation: float = 1.0
    x_nodes: FloatArray | None = None
    values: FloatArray | None = None  # (N, n_nodes)

    def __post_init__(self):
        N, d, l = self.n_regimes, self.dim, self.action_dim
        if self.kind in ("lq", "saturated-affine"):
            object.__setattr__(self, "a_mat", _shaped(self.a_mat, (N, d, d), "drift.a"))
            object.__setattr__(self, "b_mat", _shaped(self.b_mat, (N, d, l), "drift.b"))
            b0 = np.zeros((N, d)) if self.b0 is None else self.b0
            object.__setattr__(self, "b0", _shaped(b0, (N, d), "drift.offset"))
            if self.kind == "saturated-affine" and not self.saturation > 0:
                raise ShapeError("saturation scale must be positive")
        elif self.kind == "constant":
            object.__setattr__(self, "b0", _shaped(self.b0, (N, d), "drift.b0"))
        elif self.kind == "tabulated":
            if d != 1:
                raise ShapeError("tabulated drift supports dim 1 only")
            nodes = np.asarray(self.x_nodes, dtype=np.float64)
            if nodes.ndim != 1 or nodes.size < 2 or np.any(np.diff(nodes) <= 0):
                raise ShapeError("tabulated drift needs increasing x_nodes")
            object.__setattr__(self, "x_nodes", _freeze(nodes))
            object.__setattr__(
                self, "values", _shaped(self.values, (N, nodes.size), "drift.values")
            )
        else:
            raise ShapeError(f"unknown drift kind '{self.kind}'")

    def eval_batch(self, x: FloatArray, s: NDArray[np.int64], u: FloatArray) -> FloatArray:
        """Drift rows for stacked samples: x (m,d), s (m,), u (m,l) -> (m,d)."""
        if self.kind == "constant":
            return self.b0[s]
        if self.kind == "tabulated":
            out = np.empty((x.shape[0], 1))
            xs = x[:, 0]
            for i in range(self.n_regimes):
                mask = s == i
                if np.any(mask):
                    out[mask, 0] = np.interp(xs[mask], self.x_nodes, self.values[i])
            return out
        ax = np.einsum("mij,mj->mi", self.a_mat[s], x)
        if self.kind == "saturated-affine":
            ax = self.saturation * np.tanh(ax / self.saturation)
        bu = np.einsum("mij,mj->mi", self.b_mat[s], u)
        return ax + bu + self.b0[s]


# ---------------------------------------------------------------------------
# diffusion families


@dataclass(frozen=True, eq=False)
class DiffusionFamily:
    """Diffusion sigma(x, i) in R^{d x wiener_dim}.

    kind 'lq'        sigma = C(i) x as a single column (one Wiener driver)
    kind 'constant'  sigma = C0(i), constant in x
    kind 'tabulated' scalar sigma interpolated over x nodes (d = 1)
    """

    kind: str
    dim: int
    n_regimes: int
    c_mat: FloatArray | None = None  # (N, d, d) for lq
    c0: FloatArray | None = None  # (N, d, wiener_dim) for constant
    x_nodes: FloatArray | None = None
    values: FloatArray | None = None  # (N, n_nodes)

    def __post_init__(self):
        N, d = self.n_regimes, self.dim
        if self.kind == "lq":
            object.__setattr__(self, "c_mat", _shaped(self.c_mat, (N, d, d), "diffusion.c"))
        elif self.kind == "constant":
            arr = np.asarray(self.c0, dtype=np.float64)
            if arr.ndim != 3 or arr.shape[0] != N or arr.shape[1] != d:
                raise ShapeError(
                    f"diffusion.c0 has shape {arr.shape}, expected (N, d, wiener_dim)"
                )
            object.__setattr__(self, "c0", _freeze(arr))
        elif self.kind == "tabulated":
            if d != 1:
                raise ShapeError("tabulated diffusion supports dim 1 only")
            nodes = np.asarray(self.x_nodes, dtype=np.float64)
            if nodes.ndim != 1 or nodes.size < 2 or np.any(np.diff(nodes) <= 0):
                raise ShapeError("tabulated diffusion needs increasing x_nodes")
            object.__setattr__(self, "x_nodes", _freeze(nodes))
            object.__setattr__(
                self, "values", _shaped(self.values, (N, nodes.size), "diffusion.values")
            )
        else:
            raise ShapeError(f"unknown diffusion kind '{self.kind}'")

    @property
    def wiener_dim(self) -> int:
        if self.kind == "lq":
            return 1
        if self.kind == "constant":
            return self.c0.shape[2]
        return 1

    @property
    def is_zero(self) -> bool:
        """True when sigma vanishes identically (constant family, all zero)."""
        return self.kind == "constant" and not self.c0.any()

    def eval_batch(self, x: FloatArray, s: NDArray[np.int64]) -> FloatArray:
        """Diffusion matrices for stacked samples: -> (m, d, wiener_dim)."""
        if self.kind == "constant":
            return self.c0[s]
        if self.kind == "lq":
            col = np.einsum("mij,mj->mi", self.c_mat[s], x)
            return col[:, :, None]
        out = np.empty((x.shape[0], 1, 1))
        xs = x[:, 0]
        for i in range(self.n_regimes):
            mask = s == i
            if np.any(mask):
                out[mask, 0, 0] = np.interp(xs[mask], self.x_nodes, self.values[i])
        return out

    def a_batch(self, x: FloatArray, s: NDArray[np.int64]) -> FloatArray:
        """Squared-diffusion matrices a = sigma sigma^T / 2: -> (m, d, d)."""
        sig = self.eval_batch(x, s)
        return 0.5 * np.einsum("mik,mjk->mij", sig, sig)


# ---------------------------------------------------------------------------
# generator families


@dataclass(frozen=True, eq=False)
class GeneratorSpec:
    """Switching-rate matrix family with a declared uniform bound.

    kind 'constant'               m_ij independent of (x, u)
    kind 'state-action-dependent' off-diagonals base_ij * g(x, u) with
                                  g(x, u) = 1 + gx*tanh(mean x) + gu*tanh(mean u),
                                  |gx| + |gu| <= 1 so rates stay nonnegative;
                                  diagonals rebuilt as minus the row sum

    ``bound`` must dominate sup |m_ij| over all states and actions; it feeds
    the simulator's step-size precondition.
    """

    kind: str
    n_regimes: int
    rates: FloatArray | None = None  # (N, N), constant kind
    base: FloatArray | None = None  # (N, N) off-diagonals, dependent kind
    gx: float = 0.0
    gu: float = 0.0
    bound: float | None = None

    def __post_init__(self):
        N = self.n_regimes
        if self.kind == "constant":
            rates = _shaped(self.rates, (N, N), "generator.rates")
            off = rates - np.diag(np.diag(rates))
            if np.any(off < 0):
                raise RatesError("off-diagonal switching rates must be >= 0")
            if np.max(np.abs(rates.sum(axis=1))) > ROW_SUM_TOL:
                raise RatesError("generator rows must sum to zero")
            object.__setattr__(self, "rates", rates)
            analytic = float(np.max(np.abs(rates))) if N > 1 else 0.0
        elif self.kind == "state-action-dependent":
            base = _shaped(self.base, (N, N), "generator.base")
            if np.any(np.diag(base) != 0.0):
                raise RatesError("generator.base must have zero diagonal")
            if np.any(base < 0):
                raise RatesError("generator.base off-diagonals must be >= 0")
            if abs(self.gx) + abs(self.gu) > 1.0:
                raise RatesError("|gx| + |gu| must be <= 1 to keep rates nonnegative")
            object.__setattr__(self, "base", base)
            gmax = 1.0 + abs(self.gx) + abs(self.gu)
            analytic = float(max(np.max(base), np.max(base.sum(axis=1))) * gmax) if N > 1 else 0.0
        else:
            raise RatesError(f"unknown generator kind '{self.kind}'")
        if self.bound is None:
            object.__setattr__(self, "bound", max(analytic, 1e-12))
        elif self.bound < analytic - 1e-12:
            raise RatesError(
                f"declared bound {self.bound} is below the family supremum {analytic}"
            )

    def rates_batch(self, x: FloatArray, u: FloatArray) -> FloatArray:
        """Rate matrices for stacked samples: x (m,d), u (m,l) -> (m, N, N)."""
        m = x.shape[0]
        if self.kind == "constant":
            return np.broadcast_to(self.rates, (m, *self.rates.shape))
        g = 1.0 + self.gx * np.tanh(x.mean(axis=1)) + self.gu * np.tanh(u.mean(axis=1))
        out = self.base[None, :, :] * g[:, None, None]
        out = out - np.eye(self.n_regimes)[None] * out.sum(axis=2, keepdims=True)
        return out


# ---------------------------------------------------------------------------
# cost families


@dataclass(frozen=True, eq=False)
class RunningCost:
    """Running cost c(x, i, u) >= 0.

    kind 'constant'     c = value
    kind 'regime'       c = values[i]
    kind 'quad-clamped' c = min(weight*|x|^2, cap) + action_weight*|u|^2 + offset
    kind 'cosine'       c = amplitude * max(cos(frequency * x_1), 0)   (d = 1)
    kind 'lq'           c = x^T Q(i) x + u^T R(i) u; unbounded, accepted only
                        by the Riccati path

    ``bound(actions)`` is the least M_c valid for the family given the finite
    action set (infinity for 'lq').
    """

    kind: str
    n_regimes: int
    dim: int
    action_dim: int
    value: float = 0.0
    values: FloatArray | None = None
    weight: float = 0.0
    cap: float = 0.0
    action_weight: float = 0.0
    offset: float = 0.0
    amplitude: float = 0.0
    frequency: float = 1.0
    q_mat: FloatArray | None = None  # (N, d, d)
    r_mat: FloatArray | None = None  # (N, l, l)

    def __post_init__(self):
        N, d, l = self.n_regimes, self.dim, self.action_dim
        if self.kind == "constant":
            if self.value < 0:
                raise ShapeError("constant cost must be >= 0")
        elif self.kind == "regime":
            vals = _shaped(self.values, (N,), "costs.running.values")
            if np.any(vals < 0):
                raise ShapeError("regime costs must be >= 0")
            object.__setattr__(self, "values", vals)
        elif self.kind == "quad-clamped":
            if self.weight < 0 or self.cap <= 0 or self.action_weight < 0 or self.offset < 0:
                raise ShapeError("quad-clamped cost needs weight,action_weight,offset >= 0 and cap > 0")
        elif self.kind == "cosine":
            if d != 1:
                raise ShapeError("cosine cost supports dim 1 only")
            if self.amplitude < 0:
                raise ShapeError("cosine amplitude must be >= 0")
        elif self.kind == "lq":
            object.__setattr__(self, "q_mat", _shaped(self.q_mat, (N, d, d), "costs.running.q"))
            object.__setattr__(self, "r_mat", _shaped(self.r_mat, (N, l, l), "costs.running.r"))
        else:
            raise ShapeError(f"unknown running-cost kind '{self.kind}'")

    def bound(self, actions: ActionGrid) -> float:
        if self.kind == "constant":
            return self.value
        if self.kind == "regime":
            return float(np.max(self.values))
        if self.kind == "quad-clamped":
            umax = float(np.max(np.sum(actions.actions**2, axis=1)))
            return self.cap + self.action_weight * umax + self.offset
        if self.kind == "cosine":
            return self.amplitude
        return float("inf")

    def eval_batch(self, x: FloatArray, s: NDArray[np.int64], u: FloatArray) -> FloatArray:
        if self.kind == "constant":
            return np.full(x.shape[0], self.value)
        if self.kind == "regime":
            return self.values[s]
        if self.kind == "quad-clamped":
            xx = np.minimum(self.weight * np.sum(x**2, axis=1), self.cap)
            return xx + self.action_weight * np.sum(u**2, axis=1) + self.offset
        if self.kind == "cosine":
            return self.amplitude * np.maximum(np.cos(self.frequency * x[:, 0]), 0.0)
        xq = np.einsum("mi,mij,mj->m", x, self.q_mat[s], x)
        ur = np.einsum("mi,mij,mj->m", u, self.r_mat[s], u)
        return xq + ur


@dataclass(frozen=True, eq=False)
class TerminalCost:
    """Horizon payoff c_T(x, i): 'zero', 'constant', 'quad' (x^T P(i) x), or
    'bump' (compactly supported smooth bump of given height and width)."""

    kind: str
    n_regimes: int
    dim: int
    value: float = 0.0
    p_mat: FloatArray | None = None
    height: float = 0.0
    width: float = 1.0

    def __post_init__(self):
        if self.kind == "quad":
            object.__setattr__(
                self, "p_mat", _shaped(self.p_mat, (self.n_regimes, self.dim, self.dim), "costs.terminal.p")
            )
        elif self.kind == "bump":
            if self.width <= 0 or self.height < 0:
                raise ShapeError("bump terminal needs width > 0 and height >= 0")
        elif self.kind not in ("zero", "constant"):
            raise ShapeError(f"unknown terminal-cost kind '{self.kind}'")

    def eval_batch(self, x: FloatArray, s: NDArray[np.int64]) -> FloatArray:
        if self.kind == "zero":
            return np.zeros(x.shape[0])
        if self.kind == "constant":
            return np.full(x.shape[0], self.value)
        if self.kind == "quad":
            return np.einsum("mi,mij,mj->m", x, self.p_mat[s], x)
        r2 = np.sum(x**2, axis=1) / self.width**2
        out = np.zeros(x.shape[0])
        inside = r2 < 1.0
        out[inside] = self.height * np.exp(1.0 - 1.0 / (1.0 - r2[inside]))
        return out


@dataclass(frozen=True, eq=False)
class BoundaryCost:
    """Exit payoff h(x, i) >= 0 on the boundary: 'zero' or 'constant'."""

    kind: str
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("zero", "constant"):
            raise ShapeError(f"unknown exit payoff kind '{self.kind}'")
        if self.value < 0:
            raise ShapeError("exit payoff must be >= 0")

    def eval_batch(self, x: FloatArray, s: NDArray[np.int64]) -> FloatArray:
        if self.kind == "zero":
            return np.zeros(x.shape[0])
        return np.full(x.shape[0], self.value)


@dataclass(frozen=True, eq=False)
class ExitDiscount:
    """State discount rate beta(x, i, u) >= 0 for exit costs: 'zero' or 'constant'."""

    kind: str
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("zero", "constant"):
            raise ShapeError(f"unknown exit discount kind '{self.kind}'")
        if self.value < 0:
            raise ShapeError("exit discount must be >= 0")

    def eval_batch(self, x: FloatArray, s: NDArray[np.int64], u: FloatArray) -> FloatArray:
        if self.kind == "zero":
            return np.zeros(x.shape[0])
        return np.full(x.shape[0], self.value)


@dataclass(frozen=True, eq=False)
class CostSpec:
    """Cost data for all four criteria plus the discount, horizon and domain."""

    running: RunningCost
    alpha: float
    horizon: float
    terminal: TerminalCost
    exit_h: BoundaryCost
    exit_beta: ExitDiscount
    exit_domain: tuple[float, float]
    m_c: float | None = None  # optional declared bound; derived when None

    def __post_init__(self):
        if not self.alpha > 0:
            raise ShapeError("discount alpha must be > 0")
        if not self.horizon > 0:
            raise ShapeError("horizon must be > 0")
        lo, hi = self.exit_domain
        if not lo < hi:
            raise ShapeError("exit_domain must be an open interval (lo, hi)")
        object.__setattr__(self, "exit_domain", (float(lo), float(hi)))


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Complete hybrid model: dynamics, switching, actions and costs."""

    dim: int
    regimes: RegimeSet
    actions: ActionGrid
    drift: DriftFamily
    diffusion: DiffusionFamily
    generator: GeneratorSpec
    costs: CostSpec

    def __post_init__(self):
        d, N, l = self.dim, self.regimes.count, self.actions.action_dim
        for fam, nm in ((self.drift, "drift"), (self.diffusion, "diffusion")):
            if fam.dim != d or fam.n_regimes != N:
                raise ShapeError(f"{nm} family dims do not match the model")
        if self.drift.action_dim != l:
            raise ShapeError("drift action dim does not match the action grid")
        if self.generator.n_regimes != N:
            raise ShapeError("generator regime count does not match the model")
        rc = self.costs.running
        if rc.n_regimes != N or rc.dim != d or rc.action_dim != l:
            raise ShapeError("running cost dims do not match the model")
        declared = self.costs.m_c
        derived = rc.bound(self.actions)
        if declared is not None and declared < derived - 1e-12:
            raise ShapeError(
                f"declared cost bound {declared} is below the family supremum {derived}"
            )

    def cost_bound(self) -> float:
        """Least valid M_c for this model (declared bound wins if larger)."""
        derived = self.costs.running.bound(self.actions)
        if self.costs.m_c is not None:
            return max(self.costs.m_c, derived)
        return derived

    def to_json(self) -> str:
        return json.dumps(model_to_dict(self), sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(text: str | bytes) -> "ModelSpec":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"model document is not valid JSON: {exc}") from exc
        return model_from_dict(doc)


# ---------------------------------------------------------------------------
# serialization (strict: unknown keys are an error)


def _take(doc: dict, path: str, keys_required: Sequence[str], keys_optional: Sequence[str] = ()):
    if not isinstance(doc, dict):
        raise ConfigError("expected an object", path)
    unknown = set(doc) - set(keys_required) - set(keys_optional)
    if unknown:
        raise ConfigError(f"unknown key '{sorted(unknown)[0]}'", path)
    for k in keys_required:
        if k not in doc:
            raise ConfigError(f"missing key '{k}'", path)


def _lst(a: np.ndarray):
    return np.asarray(a, dtype=np.float64).tolist()


def model_to_dict(spec: ModelSpec) -> dict:
    dr = {"kind": spec.drift.kind}
    if spec.drift.kind in ("lq", "saturated-affine"):
        dr["a"] = _lst(spec.drift.a_mat)
        dr["b"] = _lst(spec.drift.b_mat)
        dr["offset"] = _lst(spec.drift.b0)
        if spec.drift.kind == "saturated-affine":
            dr["saturation"] = spec.drift.saturation
    elif spec.drift.kind == "constant":
        dr["b0"] = _lst(spec.drift.b0)
    else:
        dr["x_nodes"] = _lst(spec.drift.x_nodes)
        dr["values"] = _lst(spec.drift.values)

    df = {"kind": spec.diffusion.kind}
    if spec.diffusion.kind == "lq":
        df["c"] = _lst(spec.diffusion.c_mat)
    elif spec.diffusion.kind == "constant":
        df["c0"] = _lst(spec.diffusion.c0)
    else:
        df["x_nodes"] = _lst(spec.diffusion.x_nodes)
        df["values"] = _lst(spec.diffusion.values)

    if spec.generator.kind == "constant":
        gen = {"kind": "constant", "rates": _lst(spec.generator.rates), "bound": spec.generator.bound}
    else:
        gen = {
            "kind": "state-action-dependent",
            "base": _lst(spec.generator.base),
            "gx": spec.generator.gx,
            "gu": spec.generator.gu,
            "bound": spec.generator.bound,
        }

    rc = spec.costs.running
    run: dict = {"kind": rc.kind}
    if rc.kind == "constant":
        run["value"] = rc.value
    elif rc.kind == "regime":
        run["values"] = _lst(rc.values)
    elif rc.kind == "quad-clamped":
        run.update(weight=rc.weight, cap=rc.cap, action_weight=rc.action_weight, offset=rc.offset)
    elif rc.kind == "cosine":
        run.update(amplitude=rc.amplitude, frequency=rc.frequency)
    else:
        run["q"] = _lst(rc.q_mat)
        run["r"] = _lst(rc.r_mat)

    tc = spec.costs.terminal
    term: dict = {"kind": tc.kind}
    if tc.kind == "constant":
        term["value"] = tc.value
    elif tc.kind == "quad":
        term["p"] = _lst(tc.p_mat)
    elif tc.kind == "bump":
        term.update(height=tc.height, width=tc.width)

    eh: dict = {"kind": spec.costs.exit_h.kind}
    if spec.costs.exit_h.kind == "constant":
        eh["value"] = spec.costs.exit_h.value
    eb: dict = {"kind": spec.costs.exit_beta.kind}
    if spec.costs.exit_beta.kind == "constant":
        eb["value"] = spec.costs.exit_beta.value

    costs = {
        "running": run,
        "alpha": spec.costs.alpha,
        "horizon": spec.costs.horizon,
        "terminal": term,
        "exit_h": eh,
        "exit_beta": eb,
        "exit_domain": list(spec.costs.exit_domain),
    }
    if spec.costs.m_c is not None:
        costs["m_c"] = spec.costs.m_c

    return {
        "dim": spec.dim,
        "regimes": {"count": spec.regimes.count},
        "actions": _lst(spec.actions.actions),
        "drift": dr,
        "diffusion": df,
        "generator": gen,
        "costs": costs,
    }


def model_from_dict(doc: dict) -> ModelSpec:
    _take(doc, "model", ["dim", "regimes", "actions", "drift", "diffusion", "generator", "costs"])
    try:
        dim = int(doc["dim"])
        _take(doc["regimes"], "model.regimes", ["count"])
        regimes = RegimeSet(int(doc["regimes"]["count"]))
        actions = ActionGrid(np.asarray(doc["actions"], dtype=np.float64))
        N, l = regimes.count, actions.action_dim

        dr = dict(doc["drift"])
        kind = dr.get("kind")
        if kind in ("lq", "saturated-affine"):
            req = ["kind", "a", "b"]
            opt = ["offset", "saturation"] if kind == "saturated-affine" else ["offset"]
            _take(dr, "model.drift", req, opt)
            drift = DriftFamily(
                kind,
                dim,
                N,
                l,
                a_mat=np.asarray(dr["a"], dtype=np.float64),
                b_mat=np.asarray(dr["b"], dtype=np.float64),
                b0=np.asarray(dr["offset"], dtype=np.float64) if "offset" in dr else None,
                saturation=float(dr.get("saturation", 1.0)),
            )
        elif kind == "constant":
            _take(dr, "model.drift", ["kind", "b0"])
            drift = DriftFamily(kind, dim, N, l, b0=np.asarray(dr["b0"], dtype=np.float64))
        elif kind == "tabulated":
            _take(dr, "model.drift", ["kind", "x_nodes", "values"])
            drift = DriftFamily(
                kind,
                dim,
                N,
                l,
                x_nodes=np.asarray(dr["x_nodes"], dtype=np.float64),
                values=np.asarray(dr["values"], dtype=np.float64),
            )
        else:
            raise ConfigError(f"unknown coefficient family '{kind}'", "model.drift.kind")

        df = dict(doc["diffusion"])
        kind = df.get("kind")
        if kind == "lq":
            _take(df, "model.diffusion", ["kind", "c"])
            diffusion = DiffusionFamily(kind, dim, N, c_mat=np.asarray(df["c"], dtype=np.float64))
        elif kind == "constant":
            _take(df, "model.diffusion", ["kind", "c0"])
            diffusion = DiffusionFamily(kind, dim, N, c0=np.asarray(df["c0"], dtype=np.float64))
        elif kind == "tabulated":
            _take(df, "model.diffusion", ["kind", "x_nodes", "values"])
            diffusion = DiffusionFamily(
                kind,
                dim,
                N,
                x_nodes=np.asarray(df["x_nodes"], dtype=np.float64),
                values=np.asarray(df["values"], dtype=np.float64),
            )
        else:
            raise ConfigError(f"unknown coefficient family '{kind}'", "model.diffusion.kind")

        gen = dict(doc["generator"])
        kind = gen.get("kind")
        if kind == "constant":
            _take(gen, "model.generator", ["kind", "rates"], ["bound"])
            generator = GeneratorSpec(
                kind, N, rates=np.asarray(gen["rates"], dtype=np.float64),
                bound=float(gen["bound"]) if "bound" in gen else None,
            )
        elif kind == "state-action-dependent":
            _take(gen, "model.generator", ["kind", "base"], ["gx", "gu", "bound"])
            generator = GeneratorSpec(
                kind,
                N,
                base=np.asarray(gen["base"], dtype=np.float64),
                gx=float(gen.get("gx", 0.0)),
                gu=float(gen.get("gu", 0.0)),
                bound=float(gen["bound"]) if "bound" in gen else None,
            )
        else:
            raise ConfigError(f"unknown generator kind '{kind}'", "model.generator.kind")

        co = dict(doc["costs"])
        _take(
            co,
            "model.costs",
            ["running", "alpha", "horizon"],
            ["terminal", "exit_h", "exit_beta", "exit_domain", "m_c"],
        )
        run = dict(co["running"])
        kind = run.get("kind")
        if kind == "constant":
            _take(run, "model.costs.running", ["kind", "value"])
            running = RunningCost(kind, N, dim, l, value=float(run["value"]))
        elif kind == "regime":
            _take(run, "model.costs.running", ["kind", "values"])
            running = RunningCost(kind, N, dim, l, values=np.asarray(run["values"], dtype=np.float64))
        elif kind == "quad-clamped":
            _take(run, "model.costs.running", ["kind", "weight", "cap"], ["action_weight", "offset"])
            running = RunningCost(
                kind,
                N,
                dim,
                l,
                weight=float(run["weight"]),
                cap=float(run["cap"]),
                action_weight=float(run.get("action_weight", 0.0)),
                offset=float(run.get("offset", 0.0)),
            )
        elif kind == "cosine":
            _take(run, "model.costs.running", ["kind", "amplitude"], ["frequency"])
            running = RunningCost(
                kind, N, dim, l,
                amplitude=float(run["amplitude"]),
                frequency=float(run.get("frequency", 1.0)),
            )
        elif kind == "lq":
            _take(run, "model.costs.running", ["kind", "q", "r"])
            running = RunningCost(
                kind, N, dim, l,
                q_mat=np.asarray(run["q"], dtype=np.float64),
                r_mat=np.asarray(run["r"], dtype=np.float64),
            )
        else:
            raise ConfigError(f"unknown running-cost kind '{kind}'", "model.costs.running.kind")

        term = dict(co.get("terminal", {"kind": "zero"}))
        kind = term.get("kind")
        if kind in ("zero",):
            _take(term, "model.costs.terminal", ["kind"])
            terminal = TerminalCost(kind, N, dim)
        elif kind == "constant":
            _take(term, "model.costs.terminal", ["kind", "value"])
            terminal = TerminalCost(kind, N, dim, value=float(term["value"]))
        elif kind == "quad":
            _take(term, "model.costs.terminal", ["kind", "p"])
            terminal = TerminalCost(kind, N, dim, p_mat=np.asarray(term["p"], dtype=np.float64))
        elif kind == "bump":
            _take(term, "model.costs.terminal", ["kind", "height", "width"])
            terminal = TerminalCost(kind, N, dim, height=float(term["height"]), width=float(term["width"]))
        else:
            raise ConfigError(f"unknown terminal-cost kind '{kind}'", "model.costs.terminal.kind")

        eh = dict(co.get("exit_h", {"kind": "zero"}))
        _take(eh, "model.costs.exit_h", ["kind"], ["value"])
        exit_h = BoundaryCost(eh.get("kind", "zero"), value=float(eh.get("value", 0.0)))
        eb = dict(co.get("exit_beta", {"kind": "zero"}))
        _take(eb, "model.costs.exit_beta", ["kind"], ["value"])
        exit_beta = ExitDiscount(eb.get("kind", "zero"), value=float(eb.get("value", 0.0)))

        domain = co.get("exit_domain", [-1.0, 1.0])
        if not (isinstance(domain, (list, tuple)) and len(domain) == 2):
            raise ConfigError("exit_domain must be [lo, hi]", "model.costs.exit_domain")

        costs = CostSpec(
            running=running,
            alpha=float(co["alpha"]),
            horizon=float(co["horizon"]),
            terminal=terminal,
            exit_h=exit_h,
            exit_beta=exit_beta,
            exit_domain=(float(domain[0]), float(domain[1])),
            m_c=float(co["m_c"]) if "m_c" in co else None,
        )
        return ModelSpec(dim, regimes, actions, drift, diffusion, generator, costs)
    except ConfigError:
        raise
    except (ShapeError, RatesError) as exc:
        raise ConfigError(str(exc), "model") from exc
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"malformed model document: {exc}", "model") from exc


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Finding:
    """One pass/fail line of a validation report."""

    name: str
    passed: bool
    detail: str
    advisory: bool = False


@dataclass(frozen=True)
class ValidationReport:
    findings: tuple[Finding, ...]

    @property
    def passed(self) -> bool:
        return all(f.passed for f in self.findings if not f.advisory)

    def failures(self) -> list[Finding]:
        return [f for f in self.findings if not f.passed and not f.advisory]

    def __str__(self) -> str:
        lines = []
        for f in self.findings:
            tag = "PASS" if f.passed else "FAIL"
            adv = " (advisory)" if f.advisory else ""
            lines.append(f"{tag}{adv} {f.name}: {f.detail}")
        return "\n".join(lines)


def _sample_arrays(spec: ModelSpec, sample) -> tuple[FloatArray, NDArray[np.int64], FloatArray]:
    xs, ss, us = [], [], []
    for x, i, u in sample:
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        u = np.atleast_1d(np.asarray(u, dtype=np.float64))
        if x.shape != (spec.dim,):
            raise ShapeError(f"sample state has shape {x.shape}, expected ({spec.dim},)")
        if u.shape != (spec.actions.action_dim,):
            raise ShapeError(
                f"sample action has shape {u.shape}, expected ({spec.actions.action_dim},)"
            )
        if not (1 <= int(i) <= spec.regimes.count):
            raise ShapeError(f"sample regime {i} outside 1..{spec.regimes.count}")
        xs.append(x)
        ss.append(int(i) - 1)
        us.append(u)
    return np.array(xs), np.array(ss, dtype=np.int64), np.array(us)


def validate_model(spec: ModelSpec, sample) -> ValidationReport:
    """Check structural assumptions at the given (x, regime, action) points.

    Regimes in the sample are 1-based labels. The report carries one finding
    per assumption; violations are findings, not exceptions. Shape mismatches
    between sample points and the model raise E_SHAPE.
    """
    if not sample:
        raise ShapeError("validation sample must be nonempty")
    x, s, u = _sample_arrays(spec, sample)

    findings: list[Finding] = []
    rates = spec.generator.rates_batch(x, u)

    row = float(np.max(np.abs(rates.sum(axis=2))))
    findings.append(
        Finding("generator-row-sum", row <= ROW_SUM_TOL, f"max |row sum| = {row:.3e}")
    )
    off = rates.copy()
    idx = np.arange(spec.regimes.count)
    off[:, idx, idx] = 0.0
    min_off = float(off.min()) if spec.regimes.count > 1 else 0.0
    findings.append(
        Finding("generator-sign", min_off >= 0.0, f"min off-diagonal rate = {min_off:.3e}")
    )
    sup = float(np.max(np.abs(rates)))
    findings.append(
        Finding(
            "generator-bound",
            sup <= spec.generator.bound + 1e-12,
            f"sup |m_ij| = {sup:.6g} vs bound {spec.generator.bound:.6g}",
        )
    )

    c = spec.costs.running.eval_batch(x, s, u)
    mc = spec.cost_bound()
    if np.isinf(mc):
        findings.append(
            Finding(
                "cost-bound",
                bool(np.all(c >= 0)),
                "quadratic running cost is unbounded: riccati-only family, grid "
                f"solvers reject it; sampled min c = {float(c.min()):.3e}",
                advisory=True,
            )
        )
    else:
        ok = bool(np.all(c >= -1e-15) and np.all(c <= mc + 1e-12))
        findings.append(
            Finding("cost-bound", ok, f"c in [{float(c.min()):.6g}, {float(c.max()):.6g}], M_c = {mc:.6g}")
        )

    a = spec.diffusion.a_batch(x, s)
    min_eig = float(np.min(np.linalg.eigvalsh(a)))
    findings.append(
        Finding("nondegeneracy", min_eig > 0.0, f"min eigenvalue of a = {min_eig:.3e}")
    )

    # advisory finite-difference surrogate for local Lipschitz continuity
    ratio = 0.0
    m = x.shape[0]
    if m >= 2:
        b = spec.drift.eval_batch(x, s, u)
        for p in range(m - 1):
            same = (s[p + 1 :] == s[p]) & np.all(u[p + 1 :] == u[p], axis=1)
            if not np.any(same):
                continue
            dx = np.linalg.norm(x[p + 1 :][same] - x[p], axis=1)
            db = np.linalg.norm(b[p + 1 :][same] - b[p], axis=1)
            keep = dx > 1e-12
            if np.any(keep):
                ratio = max(ratio, float(np.max(db[keep] / dx[keep])))
    findings.append(
        Finding(
            "lipschitz-ratio",
            bool(np.isfinite(ratio)),
            f"max sampled |b(x)-b(y)|/|x-y| = {ratio:.6g}",
            advisory=True,
        )
    )
    return ValidationReport(tuple(findings))


def default_sample(spec: ModelSpec, x_lo: float = -2.0, x_hi: float = 2.0, n: int = 9):
    """Cartesian sample of grid states, all regimes and all actions."""
    pts = []
    for xv in np.linspace(x_lo, x_hi, n):
        x = np.full(spec.dim, xv)
        for i in range(1, spec.regimes.count + 1):
            for a in spec.actions.actions:
                pts.append((x.copy(), i, np.array(a)))
    return pts


# ---------------------------------------------------------------------------
# perturbation schedules


@dataclass(frozen=True, eq=False)
class PerturbationSchedule:
    """Directions and magnitudes for an approximating-model sequence.

    ``magnitudes`` defaults to 2^-n for n = 0..n_max. Directions are applied
    as target + delta * direction; omitted directions stay zero. ``mode``
    selects which blocks apply:

    'coefficient'  dA, dB to the drift family, dC to the diffusion family
    'rates'        dm to the generator off-diagonals (diagonal rebuilt)
    'cost'         dc to the running cost (constant shift; see apply rules)
    'noise-approx' hat_b, hat_sigma as a drift/diffusion correction pair
                   (requires constant-in-x diffusion)
    'combined'     coefficient + rates + cost
    """

    mode: str
    n_max: int
    magnitudes: FloatArray | None = None
    d_a: FloatArray | None = None
    d_b: FloatArray | None = None
    d_c: FloatArray | None = None
    d_m: FloatArray | None = None
    d_cost: float | FloatArray | None = None
    hat_b: FloatArray | None = None
    hat_sigma: FloatArray | None = None

    def __post_init__(self):
        modes = ("coefficient", "rates", "cost", "noise-approx", "combined")
        if self.mode not in modes:
            raise ConfigError(f"unknown perturbation mode '{self.mode}'", "schedule.mode")
        if self.n_max < 0:
            raise ConfigError("n_max must be >= 0", "schedule.n_max")
        if self.magnitudes is None:
            mags = 0.5 ** np.arange(self.n_max + 1, dtype=np.float64)
        else:
            mags = np.asarray(self.magnitudes, dtype=np.float64)
            if mags.shape != (self.n_max + 1,):
                raise ConfigError("magnitudes must have length n_max + 1", "schedule.magnitudes")
            inner = mags[:-1]
            if np.any(np.diff(mags) >= 0) or np.any(inner <= 0) or mags[-1] < 0:
                raise ConfigError(
                    "magnitudes must be strictly decreasing and positive (a final 0 is allowed)",
                    "schedule.magnitudes",
                )
        object.__setattr__(self, "magnitudes", _freeze(mags))


def _perturb_offdiag(rates: np.ndarray, d_m: np.ndarray, delta: float, n: int) -> np.ndarray:
    off = rates - np.diag(np.diag(rates))
    d_off = d_m - np.diag(np.diag(d_m))
    new_off = off + delta * d_off
    if np.any(new_off < 0):
        raise RatesError(f"perturbed rates negative at schedule element {n}")
    return new_off - np.diag(new_off.sum(axis=1))


def make_perturbation_sequence(true_spec: ModelSpec, sched: PerturbationSchedule) -> list[ModelSpec]:
    """Approximating models true + delta_n * direction, one per magnitude.

    A magnitude of exactly zero reproduces the true model bit for bit. Every
    element is checked against the structural generator rules; violations
    raise E_RATES before any model is returned.
    """
    N, d, l = true_spec.regimes.count, true_spec.dim, true_spec.actions.action_dim
    coeff = sched.mode in ("coefficient", "combined")
    rates_mode = sched.mode in ("rates", "combined")
    cost_mode = sched.mode in ("cost", "combined")
    noise = sched.mode == "noise-approx"

    if noise and true_spec.diffusion.kind != "constant":
        raise ConfigError(
            "noise-approx perturbations need a constant-in-state diffusion family",
            "schedule.mode",
        )
    if noise and true_spec.drift.kind not in ("constant", "saturated-affine", "lq"):
        raise ConfigError("noise-approx perturbations need an affine-family drift", "schedule.mode")

    out: list[ModelSpec] = []
    for n, delta in enumerate(np.asarray(sched.magnitudes)):
        delta = float(delta)
        if delta == 0.0:
            out.append(true_spec)
            continue

        drift = true_spec.drift
        diffusion = true_spec.diffusion
        generator = true_spec.generator
        costs = true_spec.costs

        if coeff:
            if sched.d_a is not None or sched.d_b is not None:
                if drift.kind not in ("lq", "saturated-affine"):
                    raise ConfigError(
                        f"dA/dB do not apply to drift kind '{drift.kind}'", "schedule.d_a"
                    )
                a_new = drift.a_mat + delta * _shaped(sched.d_a, (N, d, d), "schedule.d_a") \
                    if sched.d_a is not None else drift.a_mat
                b_new = drift.b_mat + delta * _shaped(sched.d_b, (N, d, l), "schedule.d_b") \
                    if sched.d_b is not None else drift.b_mat
                drift = replace(drift, a_mat=_freeze(a_new), b_mat=_freeze(b_new))
            if sched.d_c is not None:
                if diffusion.kind == "lq":
                    c_new = diffusion.c_mat + delta * _shaped(sched.d_c, (N, d, d), "schedule.d_c")
                    diffusion = replace(diffusion, c_mat=_freeze(c_new))
                elif diffusion.kind == "constant":
                    dc = _shaped(sched.d_c, diffusion.c0.shape, "schedule.d_c")
                    diffusion = replace(diffusion, c0=_freeze(diffusion.c0 + delta * dc))
                else:
                    raise ConfigError(
                        f"dC does not apply to diffusion kind '{diffusion.kind}'", "schedule.d_c"
                    )

        if rates_mode and sched.d_m is not None:
            d_m = _shaped(sched.d_m, (N, N), "schedule.d_m")
            if generator.kind == "constant":
                generator = GeneratorSpec(
                    "constant", N, rates=_perturb_offdiag(true_spec.generator.rates, d_m, delta, n)
                )
            else:
                base = _perturb_offdiag(true_spec.generator.base, d_m, delta, n)
                base = base - np.diag(np.diag(base))
                generator = GeneratorSpec(
                    "state-action-dependent",
                    N,
                    base=base,
                    gx=true_spec.generator.gx,
                    gu=true_spec.generator.gu,
                )

        if cost_mode and sched.d_cost is not None:
            rc = costs.running
            if rc.kind == "constant":
                running = replace(rc, value=rc.value + delta * float(sched.d_cost))
            elif rc.kind == "regime":
                shift = np.asarray(sched.d_cost, dtype=np.float64)
                shift = np.broadcast_to(shift, (N,))
                running = replace(rc, values=_freeze(rc.values + delta * shift))
            elif rc.kind == "quad-clamped":
                running = replace(rc, offset=rc.offset + delta * float(sched.d_cost))
            elif rc.kind == "cosine":
                running = replace(rc, amplitude=rc.amplitude + delta * float(sched.d_cost))
            else:
                raise ConfigError("cost perturbation does not apply to the lq family", "schedule.d_cost")
            costs = replace(costs, running=running)

        if noise:
            hat_b = _shaped(
                sched.hat_b if sched.hat_b is not None else np.zeros(diffusion.wiener_dim),
                (diffusion.wiener_dim,),
                "schedule.hat_b",
            )
            hat_sigma = _shaped(
                sched.hat_sigma if sched.hat_sigma is not None else np.zeros((diffusion.wiener_dim,) * 2),
                (diffusion.wiener_dim, diffusion.wiener_dim),
                "schedule.hat_sigma",
            )
            # effective drift b + sigma * (delta hat_b); effective noise sigma (I + delta hat_sigma)
            shift = np.einsum("nij,j->ni", true_spec.diffusion.c0, delta * hat_b)
            eye = np.eye(diffusion.wiener_dim)
            c0_new = np.einsum("nij,jk->nik", true_spec.diffusion.c0, eye + delta * hat_sigma)
            drift = replace(drift, b0=_freeze(drift.b0 + shift))
            diffusion = replace(diffusion, c0=_freeze(c0_new))

        out.append(
            ModelSpec(d, true_spec.regimes, true_spec.actions, drift, diffusion, generator, costs)
        )
    return out


# ---------------------------------------------------------------------------
# Lyapunov drift condition, sampled


@dataclass(frozen=True, eq=False)
class LyapunovPair:
    """Quadratic witness pair: V(x) = 1 + scale |x|^2, h(x) = kappa |x|^2.

    V is regime independent, so the generator coupling term vanishes
    identically and only the diffusion trace and drift terms contribute.
    """

    scale: float = 1.0
    kappa: float = 0.0
    c0_hat: float = 0.0

    def __post_init__(self):
        if self.scale < 0 or self.kappa < 0 or self.c0_hat < 0:
            raise ShapeError("LyapunovPair parameters must be >= 0")

    def v(self, x: FloatArray) -> FloatArray:
        return 1.0 + self.scale * np.sum(x**2, axis=1)

    def h(self, x: FloatArray) -> FloatArray:
        return self.kappa * np.sum(x**2, axis=1)


@dataclass(frozen=True)
class LyapunovReport:
    max_violation: float
    passed: bool
    worst_point: tuple


def check_lyapunov_sampled(
    spec: ModelSpec, pair: LyapunovPair, sample, tol: float = 1e-9
) -> LyapunovReport:
    """Evaluate (generator applied to V) + h - c0_hat at the sample points.

    The extended generator acting on the quadratic witness reduces to
    trace(a * 2 scale I) + b . (2 scale x); the regime coupling drops out
    because V does not depend on the regime. Pass means the sampled maximum
    is <= tol.
    """
    x, s, u = _sample_arrays(spec, sample)
    a = spec.diffusion.a_batch(x, s)
    b = spec.drift.eval_batch(x, s, u)
    trace_term = 2.0 * pair.scale * np.trace(a, axis1=1, axis2=2)
    drift_term = 2.0 * pair.scale * np.sum(b * x, axis=1)
    gen_v = trace_term + drift_term
    viol = gen_v + pair.h(x) - pair.c0_hat
    k = int(np.argmax(viol))
    worst = (x[k].copy(), int(s[k]) + 1, u[k].copy())
    vmax = float(viol[k])
    return LyapunovReport(max_violation=vmax, passed=vmax <= tol, worst_point=worst)
