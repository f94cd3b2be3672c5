"""Continuous-time market dynamics, controller, integrator and certificates.

The open-loop system is the decentralized primal-dual price-seeking scheme:
each agent follows the gradient of its utility under a local price estimate
``rho_i`` and tracks the imbalance through ``eps_i``, while the operator
adjusts the market price ``lam`` from the aggregate imbalance.  The dynamic
feedback controller adds states ``(u, pi, nu, mu)`` that steer the agents'
linear utility coefficients until the price settles at the capped
market-clearing value; ``mu`` is kept nonnegative by a conditional
projection.

The full closed-loop state is the stacked vector

    [x (N), rho (N), eps (N), lam (1), u (N), pi (N), nu (1), mu (1)]

of dimension ``5N + 3``.  All right-hand sides are pure functions; the
fixed-step integrator is the only code here that loops.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .equilibrium import solve_ce, solve_sce
from .errors import DimensionMismatch, NegativeMu, NonfiniteState
from .market import MarketInstance, conditional_projection

# Integration aborts once any state component exceeds this magnitude.
DIVERGENCE_LIMIT = 1e12


def closed_loop_dim(n: int) -> int:
    """Dimension of the stacked closed-loop state for ``n`` agents."""
    return 5 * n + 3


@dataclass(frozen=True)
class StateLayout:
    """Index map of the stacked closed-loop state vector."""

    n: int
    x: slice
    rho: slice
    eps: slice
    lam: int
    u: slice
    pi: slice
    nu: int
    mu: int

    @property
    def dim(self) -> int:
        return closed_loop_dim(self.n)


def state_layout(n: int) -> StateLayout:
    return StateLayout(
        n=n,
        x=slice(0, n),
        rho=slice(n, 2 * n),
        eps=slice(2 * n, 3 * n),
        lam=3 * n,
        u=slice(3 * n + 1, 4 * n + 1),
        pi=slice(4 * n + 1, 5 * n + 1),
        nu=5 * n + 1,
        mu=5 * n + 2,
    )


@dataclass(frozen=True, eq=False)
class ClosedLoopState:
    """Named view of one closed-loop state.

    ``mu`` must be nonnegative; the integrator maintains that invariant by
    clamping after every full step.
    """

    x: np.ndarray
    rho: np.ndarray
    eps: np.ndarray
    lam: float
    u: np.ndarray
    pi: np.ndarray
    nu: float
    mu: float

    def __post_init__(self):
        n = self.x.shape[0]
        for name in ("rho", "eps", "u", "pi"):
            arr = getattr(self, name)
            if arr.shape != (n,):
                raise DimensionMismatch(f"{name} has shape {arr.shape}, expected ({n},)")
        if self.mu < 0.0:
            raise NegativeMu(f"mu = {self.mu} must be nonnegative")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.x, self.rho, self.eps, [self.lam], self.u, self.pi, [self.nu], [self.mu]]
        )

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "ClosedLoopState":
        vec = np.asarray(vec, dtype=float)
        if vec.ndim != 1 or (vec.size - 3) % 5 != 0 or vec.size < 8:
            raise DimensionMismatch(f"state vector of length {vec.size} is not of the form 5N+3")
        lay = state_layout((vec.size - 3) // 5)
        return cls(
            x=vec[lay.x].copy(),
            rho=vec[lay.rho].copy(),
            eps=vec[lay.eps].copy(),
            lam=float(vec[lay.lam]),
            u=vec[lay.u].copy(),
            pi=vec[lay.pi].copy(),
            nu=float(vec[lay.nu]),
            mu=float(vec[lay.mu]),
        )


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Time-indexed record of a simulation.

    ``lyapunov`` holds ``0.5 * ||state - reference||**2`` and
    ``equilibrium_residuals`` the infinity-norm distance to the reference
    at each recorded step (NaN when no reference was supplied).
    """

    times: np.ndarray
    states: np.ndarray
    lyapunov: np.ndarray
    equilibrium_residuals: np.ndarray
    mu_index: int | None = None
    reference: np.ndarray | None = None

    def __post_init__(self):
        n = self.times.shape[0]
        if (
            self.states.shape[0] != n
            or self.lyapunov.shape[0] != n
            or self.equilibrium_residuals.shape[0] != n
        ):
            raise DimensionMismatch("trajectory arrays must have equal leading length")
        if n > 1 and not np.all(np.diff(self.times) > 0.0):
            raise ValueError("trajectory times must be strictly increasing")

    def __len__(self) -> int:
        return int(self.times.shape[0])

    @property
    def final_time(self) -> float:
        return float(self.times[-1])

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def mu_series(self) -> np.ndarray | None:
        if self.mu_index is None:
            return None
        return self.states[:, self.mu_index]


@dataclass(frozen=True)
class StabilityCertificate:
    """Numerical evidence for the closed loop's Lyapunov argument.

    The drift matrix's symmetric part must factor as ``-B.T @ B`` (hence be
    negative semidefinite); optionally a simulated trajectory is checked
    for monotone Lyapunov decrease up to a per-step slack.
    """

    max_eigenvalue_x_sym: float
    factorization_residual: float
    lyapunov_monotone: bool
    worst_lyapunov_increase: float


@dataclass(frozen=True)
class ConvergenceReport:
    """Summary of how a trajectory approaches a reference equilibrium."""

    converged: bool
    first_time_within_tolerance: float | None
    final_error: float
    worst_lyapunov_increase: float
    mu_negativity: float
    tolerance: float


# ---------------------------------------------------------------------------
# Right-hand sides


def _as_state(state, dim: int, what: str) -> np.ndarray:
    state = np.asarray(state, dtype=float)
    if state.shape != (dim,):
        raise DimensionMismatch(f"{what} has shape {state.shape}, expected ({dim},)")
    return state


def rhs_open_loop(market: MarketInstance, state) -> np.ndarray:
    """Drift of the uncontrolled price-seeking dynamics, state (x, rho, eps, lam)."""
    n = market.n
    state = _as_state(state, 3 * n + 1, "open-loop state")
    x, rho, eps, lam = state[:n], state[n : 2 * n], state[2 * n : 3 * n], state[3 * n]
    dx = -market.q * x - market.c0 - rho
    drho = x - market.a - eps
    deps = rho - lam
    return np.concatenate([dx, drho, deps, [eps.sum()]])


def rhs_controlled(market: MarketInstance, state, u_input) -> np.ndarray:
    """Open-loop drift with the utility adjustment ``u_input`` acting on x."""
    n = market.n
    state = _as_state(state, 3 * n + 1, "open-loop state")
    u_input = np.asarray(u_input, dtype=float)
    if u_input.shape != (n,):
        raise DimensionMismatch(f"u_input has shape {u_input.shape}, expected ({n},)")
    out = rhs_open_loop(market, state)
    out[:n] -= u_input
    return out


def rhs_controller(market: MarketInstance, state, cap: float) -> np.ndarray:
    """Drift of the controller states (u, pi, nu, mu) given the full state.

    Requires ``mu >= 0``; the projection keeps ``mu`` from drifting below
    zero once it sits on the boundary.
    """
    n = market.n
    lay = state_layout(n)
    state = _as_state(state, lay.dim, "closed-loop state")
    mu = float(state[lay.mu])
    if mu < 0.0:
        raise NegativeMu(f"mu = {mu} must be nonnegative")
    x = state[lay.x]
    u = state[lay.u]
    pi = state[lay.pi]
    nu = float(state[lay.nu])
    du = -u / market.q - market.q * pi - x - (market.c0 + cap) / market.q
    dpi = market.q * u - nu
    dnu = float(pi.sum()) + mu
    dmu = conditional_projection(-nu, mu)
    return np.concatenate([du, dpi, [dnu], [dmu]])


def rhs_closed_loop(market: MarketInstance, state, cap: float) -> np.ndarray:
    """Drift of the interconnection: market block driven by the controller's u."""
    n = market.n
    lay = state_layout(n)
    state = _as_state(state, lay.dim, "closed-loop state")
    market_block = rhs_controlled(market, state[: 3 * n + 1], state[lay.u])
    controller_block = rhs_controller(market, state, cap)
    return np.concatenate([market_block, controller_block])


def rhs_reduced(market: MarketInstance, state) -> np.ndarray:
    """Operator-knows-generation variant, state (x, lam) of dimension N+1."""
    n = market.n
    state = _as_state(state, n + 1, "reduced state")
    x, lam = state[:n], state[n]
    dx = -market.q * x - market.c0 - lam
    return np.concatenate([dx, [x.sum() - market.sum_a]])


# ---------------------------------------------------------------------------
# Affine assembly (fast path shared with the stability certificate)


def closed_loop_matrix(market: MarketInstance) -> np.ndarray:
    """Drift matrix of the closed loop on the branch where mu evolves freely."""
    n = market.n
    lay = state_layout(n)
    q = market.q
    eye = np.eye(n)
    ones = np.ones(n)
    mat = np.zeros((lay.dim, lay.dim))
    mat[lay.x, lay.x] = -np.diag(q)
    mat[lay.x, lay.rho] = -eye
    mat[lay.x, lay.u] = -eye
    mat[lay.rho, lay.x] = eye
    mat[lay.rho, lay.eps] = -eye
    mat[lay.eps, lay.rho] = eye
    mat[lay.eps, lay.lam] = -ones
    mat[lay.lam, lay.eps] = ones
    mat[lay.u, lay.x] = -eye
    mat[lay.u, lay.u] = -np.diag(1.0 / q)
    mat[lay.u, lay.pi] = -np.diag(q)
    mat[lay.pi, lay.u] = np.diag(q)
    mat[lay.pi, lay.nu] = -ones
    mat[lay.nu, lay.pi] = ones
    mat[lay.nu, lay.mu] = 1.0
    mat[lay.mu, lay.nu] = -1.0
    return mat


def closed_loop_matrices(market: MarketInstance, cap: float) -> tuple[np.ndarray, np.ndarray]:
    """Drift matrix and constant offset of the closed loop."""
    lay = state_layout(market.n)
    offset = np.zeros(lay.dim)
    offset[lay.x] = -market.c0
    offset[lay.rho] = -market.a
    offset[lay.u] = -(market.c0 + cap) / market.q
    return closed_loop_matrix(market), offset


def open_loop_matrices(market: MarketInstance) -> tuple[np.ndarray, np.ndarray]:
    """Drift matrix and constant offset of the uncontrolled dynamics."""
    n = market.n
    dim = 3 * n + 1
    eye = np.eye(n)
    mat = np.zeros((dim, dim))
    mat[:n, :n] = -np.diag(market.q)
    mat[:n, n : 2 * n] = -eye
    mat[n : 2 * n, :n] = eye
    mat[n : 2 * n, 2 * n : 3 * n] = -eye
    mat[2 * n : 3 * n, n : 2 * n] = eye
    mat[2 * n : 3 * n, 3 * n] = -np.ones(n)
    mat[3 * n, 2 * n : 3 * n] = np.ones(n)
    offset = np.zeros(dim)
    offset[:n] = -market.c0
    offset[n : 2 * n] = -market.a
    return mat, offset


def reduced_matrices(market: MarketInstance) -> tuple[np.ndarray, np.ndarray]:
    """Drift matrix and constant offset of the reduced dynamics."""
    n = market.n
    mat = np.zeros((n + 1, n + 1))
    mat[:n, :n] = -np.diag(market.q)
    mat[:n, n] = -np.ones(n)
    mat[n, :n] = np.ones(n)
    offset = np.zeros(n + 1)
    offset[:n] = -market.c0
    offset[n] = -market.sum_a
    return mat, offset


def affine_rhs(matrix: np.ndarray, offset: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    """Callable ``y -> matrix @ y + offset`` for use with :func:`integrate`."""

    def rhs(y: np.ndarray) -> np.ndarray:
        return matrix @ y + offset

    return rhs


def closed_loop_rhs(market: MarketInstance, cap: float) -> Callable[[np.ndarray], np.ndarray]:
    """Fast closed-loop drift: one matrix-vector product plus the projection.

    Identical to :func:`rhs_closed_loop` on states with ``mu >= 0`` but
    tolerant of slightly negative ``mu`` (raw Runge-Kutta stage values),
    for which the projection branch applies.
    """
    mat, offset = closed_loop_matrices(market, cap)
    lay = state_layout(market.n)
    i_nu, i_mu = lay.nu, lay.mu

    def rhs(state: np.ndarray) -> np.ndarray:
        d = mat @ state + offset
        if state[i_mu] <= 0.0:
            neg_nu = -state[i_nu]
            d[i_mu] = neg_nu if neg_nu > 0.0 else 0.0
        return d

    return rhs


# ---------------------------------------------------------------------------
# Equilibria


def open_loop_equilibrium(market: MarketInstance) -> np.ndarray:
    """Unique fixed point of the uncontrolled dynamics, stacked (x, rho, eps, lam)."""
    ce = solve_ce(market)
    return np.concatenate(
        [ce.x_bar, np.full(market.n, ce.lambda_bar), ce.x_bar - market.a, [ce.lambda_bar]]
    )


def reduced_equilibrium(market: MarketInstance) -> np.ndarray:
    """Unique fixed point of the reduced dynamics, stacked (x, lam)."""
    ce = solve_ce(market)
    return np.append(ce.x_bar, ce.lambda_bar)


def assemble_equilibrium(market: MarketInstance, cap: float) -> ClosedLoopState:
    """Unique fixed point of the closed loop, assembled in closed form.

    The market block sits at the capped equilibrium; the controller block
    is recovered from it: ``pi = (lam* - cap) / q**2`` componentwise and
    ``mu = s2 * (cap - lam*)``, which is complementary to ``nu``.
    """
    sce = solve_sce(market, cap)
    return ClosedLoopState(
        x=sce.x_star,
        rho=np.full(market.n, sce.lambda_star),
        eps=sce.x_star - market.a,
        lam=sce.lambda_star,
        u=sce.u_star,
        pi=(sce.lambda_star - cap) / market.q**2,
        nu=sce.nu_star,
        mu=market.s2 * (cap - sce.lambda_star),
    )


def closed_loop_decay_rate(market: MarketInstance, cap: float) -> float:
    """Slowest local decay rate of the closed loop near its fixed point.

    Trajectories near the equilibrium contract roughly like
    ``exp(-rate * t)``; the returned rate is the negated spectral abscissa
    of the relevant drift matrix.  When the projected state ``mu`` sits on
    its boundary at the fixed point, its row and column drop out of the
    linearization.  Useful for choosing simulation horizons and step sizes
    (explicit Euler needs ``|1 + h * eig| <= 1`` for every eigenvalue).
    """
    drift = closed_loop_matrix(market)
    fixed = assemble_equilibrium(market, cap)
    lay = state_layout(market.n)
    candidates = []
    if fixed.mu > 0.0 or fixed.nu == 0.0:
        candidates.append(drift)
    if fixed.mu == 0.0:
        keep = [i for i in range(lay.dim) if i != lay.mu]
        candidates.append(drift[np.ix_(keep, keep)])
    return min(-float(np.linalg.eigvals(m).real.max()) for m in candidates)


# ---------------------------------------------------------------------------
# Integration


def integrate(
    rhs: Callable[[np.ndarray], np.ndarray],
    y0,
    h: float,
    t_end: float,
    method: str = "euler",
    reference=None,
    mu_index: int | None = None,
    record_stride: int = 1,
    divergence_limit: float = DIVERGENCE_LIMIT,
) -> Trajectory:
    """Fixed-step march of ``dy/dt = rhs(y)`` from ``y0`` to ``t_end``.

    Args:
        rhs: drift callable on flat state vectors.
        y0: initial state; if ``mu_index`` is given, ``y0[mu_index]`` must
            be nonnegative.
        h: step size, > 0.
        t_end: horizon, >= h; the number of steps is ``round(t_end / h)``.
        method: ``"euler"`` (explicit, first order) or ``"rk4"`` (classical
            fourth order).  For rk4 the drift is evaluated at the raw stage
            states, so a projection-aware rhs sees each stage's own
            (nu, mu) values.
        reference: optional equilibrium; enables the recorded Lyapunov
            values and infinity-norm residuals.
        mu_index: index of the projected nonnegative component; after every
            full step that component is clamped to [0, inf).
        record_stride: record every k-th step (the initial and final states
            are always recorded).
        divergence_limit: abort once the state's infinity norm exceeds this
            bound or turns non-finite.

    Returns:
        The recorded :class:`Trajectory`.

    Raises:
        NonfiniteState: the state diverged; the partial trajectory recorded
            so far rides on the exception.
    """
    y = np.array(y0, dtype=float)
    if y.ndim != 1:
        raise DimensionMismatch(f"initial state must be a vector, got shape {y.shape}")
    if h <= 0.0:
        raise ValueError(f"step size must be positive, got {h}")
    if t_end < h:
        raise ValueError(f"horizon {t_end} must be at least one step {h}")
    if method not in ("euler", "rk4"):
        raise ValueError(f"unknown method {method!r}; expected 'euler' or 'rk4'")
    if record_stride < 1:
        raise ValueError(f"record_stride must be >= 1, got {record_stride}")
    ref = None
    if reference is not None:
        ref = np.asarray(reference, dtype=float)
        if ref.shape != y.shape:
            raise DimensionMismatch(
                f"reference has shape {ref.shape}, state has shape {y.shape}"
            )
    if mu_index is not None and y[mu_index] < 0.0:
        raise NegativeMu(f"initial mu = {y[mu_index]} must be nonnegative")

    n_steps = max(1, int(round(t_end / h)))
    record_ks = list(range(0, n_steps + 1, record_stride))
    if record_ks[-1] != n_steps:
        record_ks.append(n_steps)
    n_rec = len(record_ks)
    times = np.empty(n_rec)
    states = np.empty((n_rec, y.size))
    lyapunov = np.empty(n_rec)
    residuals = np.empty(n_rec)

    def snapshot(i: int, k: int) -> None:
        times[i] = k * h
        states[i] = y
        if ref is None:
            lyapunov[i] = np.nan
            residuals[i] = np.nan
        else:
            d = y - ref
            lyapunov[i] = 0.5 * float(d @ d)
            residuals[i] = float(np.abs(d).max())

    snapshot(0, 0)
    rec_i = 1
    next_rec = record_ks[rec_i]

    half = 0.5 * h
    sixth = h / 6.0
    for k in range(1, n_steps + 1):
        if method == "euler":
            y = y + h * rhs(y)
        else:
            k1 = rhs(y)
            k2 = rhs(y + half * k1)
            k3 = rhs(y + half * k2)
            k4 = rhs(y + h * k3)
            y = y + sixth * (k1 + 2.0 * (k2 + k3) + k4)
        if mu_index is not None and y[mu_index] < 0.0:
            y[mu_index] = 0.0
        if not (np.abs(y).max() <= divergence_limit):  # also catches NaN
            partial = Trajectory(
                times=times[:rec_i].copy(),
                states=states[:rec_i].copy(),
                lyapunov=lyapunov[:rec_i].copy(),
                equilibrium_residuals=residuals[:rec_i].copy(),
                mu_index=mu_index,
                reference=None if ref is None else ref.copy(),
            )
            raise NonfiniteState(
                f"state diverged at t = {k * h:.6g} "
                f"(non-finite or |state| > {divergence_limit:g})",
                trajectory=partial,
            )
        if k == next_rec:
            snapshot(rec_i, k)
            rec_i += 1
            next_rec = record_ks[rec_i] if rec_i < n_rec else -1

    return Trajectory(
        times=times,
        states=states,
        lyapunov=lyapunov,
        equilibrium_residuals=residuals,
        mu_index=mu_index,
        reference=ref,
    )


# ---------------------------------------------------------------------------
# Certificates


def lyapunov_value(state, reference) -> float:
    """Quadratic Lyapunov value ``0.5 * ||state - reference||**2``."""
    state = np.asarray(state, dtype=float)
    ref = np.asarray(reference, dtype=float)
    if state.shape != ref.shape:
        raise DimensionMismatch(
            f"state has shape {state.shape}, reference has shape {ref.shape}"
        )
    d = (state - ref).ravel()
    return 0.5 * float(d @ d)


def stability_certificate(
    market: MarketInstance,
    trajectory: Trajectory | None = None,
    increase_slack: float | None = None,
) -> StabilityCertificate:
    """Check the algebraic stability structure of the closed loop.

    The symmetric part of the drift matrix must equal ``-B.T @ B`` for
    ``B = [diag(sqrt(q)), 0, 0, 0, diag(1/sqrt(q)), 0, 0, 0]``, which
    certifies negative semidefiniteness.  If a trajectory with recorded
    Lyapunov values is supplied, its per-step increases are checked against
    ``increase_slack`` (default ``1e-8 * max(1, V[0])``).
    """
    lay = state_layout(market.n)
    drift = closed_loop_matrix(market)
    x_sym = 0.5 * (drift + drift.T)
    b_factor = np.zeros((market.n, lay.dim))
    b_factor[:, lay.x] = np.diag(np.sqrt(market.q))
    b_factor[:, lay.u] = np.diag(1.0 / np.sqrt(market.q))
    residual = float(np.abs(x_sym + b_factor.T @ b_factor).max())
    max_eig = float(np.linalg.eigvalsh(x_sym).max())

    worst = 0.0
    monotone = True
    if trajectory is not None and len(trajectory) > 1:
        values = trajectory.lyapunov
        if np.isnan(values).any():
            raise ValueError("trajectory has no recorded Lyapunov values (no reference)")
        increases = np.diff(values)
        worst = float(max(increases.max(), 0.0))
        slack = (
            increase_slack
            if increase_slack is not None
            else 1e-8 * max(1.0, float(values[0]))
        )
        monotone = bool(increases.max() <= slack)

    return StabilityCertificate(
        max_eigenvalue_x_sym=max_eig,
        factorization_residual=residual,
        lyapunov_monotone=monotone,
        worst_lyapunov_increase=worst,
    )


def convergence_report(trajectory: Trajectory, reference, tolerance: float) -> ConvergenceReport:
    """Summarize a trajectory's approach to a reference equilibrium.

    Reports the first recorded time at which the infinity-norm error drops
    to ``tolerance`` (None if never), the final error, the worst increase
    of the quadratic Lyapunov value between recorded steps, and how far
    the projected component ever dipped below zero.
    """
    if len(trajectory) == 0:
        raise ValueError("trajectory is empty")
    ref = np.asarray(reference, dtype=float)
    if trajectory.states.shape[1] != ref.size:
        raise DimensionMismatch(
            f"reference has length {ref.size}, states have length {trajectory.states.shape[1]}"
        )
    deltas = trajectory.states - ref
    errors = np.abs(deltas).max(axis=1)
    values = 0.5 * (deltas * deltas).sum(axis=1)
    within = np.nonzero(errors <= tolerance)[0]
    first = float(trajectory.times[within[0]]) if within.size else None
    worst = float(max(np.diff(values).max(), 0.0)) if len(trajectory) > 1 else 0.0
    mu_neg = 0.0
    if trajectory.mu_index is not None:
        mu_neg = max(0.0, -float(trajectory.states[:, trajectory.mu_index].min()))
    return ConvergenceReport(
        converged=bool(errors[-1] <= tolerance),
        first_time_within_tolerance=first,
        final_error=float(errors[-1]),
        worst_lyapunov_increase=worst,
        mu_negativity=mu_neg,
        tolerance=float(tolerance),
    )
