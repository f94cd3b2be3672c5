"""Scenario configuration, result serialization and workflow drivers.

Configs are strict JSON documents: unknown keys are rejected so typos fail
loudly.  All emitted JSON uses lexicographic key order and shortest
round-trip-exact float formatting, which makes outputs byte-stable and
diffable; trajectory CSVs use LF line endings and parse back to finite
floats.
"""

from __future__ import annotations

import json
import numbers
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dynamics import (
    ConvergenceReport,
    Trajectory,
    assemble_equilibrium,
    closed_loop_dim,
    closed_loop_rhs,
    convergence_report,
    integrate,
    state_layout,
)
from .equilibrium import (
    CeSolution,
    KktResidualReport,
    SceSolution,
    kkt_residual_sce,
    solve_ce,
    solve_sce,
)
from .errors import MissingField, NonfiniteState, ParseError
from .market import MarketInstance, SocialPriceCap, validate_market

_TOP_KEYS = {"agents", "lambda_max", "sim", "seed"}
_SIM_KEYS = {"h", "t_end", "method", "record_stride", "init"}
_AGENT_KEYS = {"q", "c0", "a"}
_METHODS = ("euler", "rk4")

# Default convergence tolerance reported by run_simulate summaries.
SUMMARY_TOLERANCE = 1e-3


@dataclass(frozen=True)
class SimSettings:
    """Integration settings for the closed-loop simulation."""

    h: float = 1e-3
    t_end: float = 100.0
    method: str = "euler"
    record_stride: int = 10
    init: str | np.ndarray = "zero"


@dataclass(frozen=True)
class ScenarioConfig:
    """Validated scenario: market, price cap, simulation settings, seed."""

    market: MarketInstance
    cap: SocialPriceCap
    sim: SimSettings
    seed: int = 0


@dataclass(frozen=True, eq=False)
class EquilibriumReport:
    """Solved equilibria of one scenario plus the optimality residuals."""

    ce: CeSolution
    sce: SceSolution
    residuals: KktResidualReport
    cap_active: bool


@dataclass(frozen=True)
class SweepRow:
    """One price-cap setting and the equilibrium quantities it induces.

    ``welfare_loss_nominal`` is the total nominal utility (adjustment-free
    coefficients) at the uncapped equilibrium minus the same quantity at
    the capped one; it is nonnegative and zero while the cap is inactive.
    """

    lambda_max: float
    lambda_star: float
    nu_star: float
    u_norm: float
    welfare_loss_nominal: float


# ---------------------------------------------------------------------------
# Canonical JSON


def _emit_json(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if value is None:
        return "null"
    if isinstance(value, numbers.Integral):
        return str(int(value))
    if isinstance(value, numbers.Real):
        value = float(value)
        if not np.isfinite(value):
            raise ValueError(f"cannot serialize non-finite number {value!r}")
        return repr(value)  # shortest digits that round-trip exactly
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, Mapping):
        items = ", ".join(
            f"{json.dumps(str(k))}: {_emit_json(v)}" for k, v in sorted(value.items())
        )
        return "{" + items + "}"
    if isinstance(value, (Sequence, np.ndarray)):
        return "[" + ", ".join(_emit_json(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {type(value).__name__}")


def dumps_canonical(document) -> str:
    """Serialize to JSON with sorted keys and exact float round-trips."""
    return _emit_json(document) + "\n"


# ---------------------------------------------------------------------------
# Config loading


def _require_number(doc: Mapping, key: str, where: str) -> float:
    if key not in doc:
        raise MissingField(f"{where} lacks required field {key!r}")
    value = doc[key]
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise ParseError(f"{where}.{key} must be a number, got {value!r}")
    return float(value)


def _reject_unknown(doc: Mapping, allowed: set, where: str) -> None:
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ParseError(f"{where} has unknown key {unknown[0]!r}")


def _parse_sim(doc, n: int) -> SimSettings:
    if not isinstance(doc, Mapping):
        raise ParseError(f"sim must be an object, got {type(doc).__name__}")
    _reject_unknown(doc, _SIM_KEYS, "sim")
    sim = SimSettings()
    if "h" in doc:
        sim = replace(sim, h=_require_number(doc, "h", "sim"))
    if "t_end" in doc:
        sim = replace(sim, t_end=_require_number(doc, "t_end", "sim"))
    if "method" in doc:
        method = doc["method"]
        if method not in _METHODS:
            raise ParseError(f"sim.method must be one of {_METHODS}, got {method!r}")
        sim = replace(sim, method=method)
    if "record_stride" in doc:
        stride = doc["record_stride"]
        if isinstance(stride, bool) or not isinstance(stride, numbers.Integral):
            raise ParseError(f"sim.record_stride must be an integer, got {stride!r}")
        sim = replace(sim, record_stride=int(stride))
    if "init" in doc:
        init = doc["init"]
        if init == "zero":
            sim = replace(sim, init="zero")
        elif isinstance(init, Sequence) and not isinstance(init, str):
            expected = closed_loop_dim(n)
            values = []
            for v in init:
                if isinstance(v, bool) or not isinstance(v, numbers.Real):
                    raise ParseError(f"sim.init entries must be numbers, got {v!r}")
                values.append(float(v))
            if len(values) != expected:
                raise ParseError(
                    f"sim.init must have {expected} entries (5N+3 for N={n}), got {len(values)}"
                )
            arr = np.array(values)
            if not np.isfinite(arr).all():
                raise ParseError("sim.init entries must be finite")
            sim = replace(sim, init=arr)
        else:
            raise ParseError(f'sim.init must be "zero" or a list of numbers, got {init!r}')
    if sim.h <= 0.0:
        raise ParseError(f"sim.h must be positive, got {sim.h}")
    if sim.t_end < sim.h:
        raise ParseError(f"sim.t_end = {sim.t_end} must be at least sim.h = {sim.h}")
    if sim.record_stride < 1:
        raise ParseError(f"sim.record_stride must be >= 1, got {sim.record_stride}")
    return sim


def load_config(source: str | Path) -> ScenarioConfig:
    """Parse and validate a scenario from a JSON file path or JSON text.

    A ``str`` that starts with ``{`` is treated as JSON text, anything else
    as a path.  Unknown keys anywhere in the document are rejected.

    Raises:
        ParseError: malformed JSON (with line/column), unknown key, or a
            field of the wrong type.
        MissingField: a required field is absent.
        ValidationError: the agent records fail market validation.
    """
    if isinstance(source, Path):
        text = source.read_text()
    elif isinstance(source, str) and source.lstrip().startswith("{"):
        text = source
    else:
        try:
            text = Path(source).read_text()
        except OSError as exc:
            raise ParseError(f"cannot read config file {source!r}: {exc}") from None

    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(
            f"malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from None
    if not isinstance(doc, Mapping):
        raise ParseError(f"config must be a JSON object, got {type(doc).__name__}")
    _reject_unknown(doc, _TOP_KEYS, "config")

    if "agents" not in doc:
        raise MissingField("config lacks required field 'agents'")
    agents_doc = doc["agents"]
    if not isinstance(agents_doc, Sequence) or isinstance(agents_doc, str):
        raise ParseError("config.agents must be a list of agent records")
    records = []
    for i, rec in enumerate(agents_doc):
        if not isinstance(rec, Mapping):
            raise ParseError(f"agents[{i}] must be an object, got {type(rec).__name__}")
        _reject_unknown(rec, _AGENT_KEYS, f"agents[{i}]")
        records.append(
            {key: _require_number(rec, key, f"agents[{i}]") for key in ("q", "c0", "a")}
        )
    market = validate_market(records)

    cap = SocialPriceCap(lambda_max=_require_number(doc, "lambda_max", "config"))

    sim = _parse_sim(doc.get("sim", {}), market.n)

    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, numbers.Integral):
        raise ParseError(f"seed must be an integer, got {seed!r}")

    return ScenarioConfig(market=market, cap=cap, sim=sim, seed=int(seed))


def config_to_json(config: ScenarioConfig) -> str:
    """Serialize a config back to canonical JSON (round-trips losslessly)."""
    sim = config.sim
    init = sim.init if isinstance(sim.init, str) else list(sim.init)
    doc = {
        "agents": [
            {"q": ag.q, "c0": ag.c0, "a": ag.a} for ag in config.market.agents
        ],
        "lambda_max": config.cap.lambda_max,
        "sim": {
            "h": sim.h,
            "t_end": sim.t_end,
            "method": sim.method,
            "record_stride": sim.record_stride,
            "init": init,
        },
        "seed": config.seed,
    }
    return dumps_canonical(doc)


# ---------------------------------------------------------------------------
# Workflows


def run_solve(config: ScenarioConfig) -> EquilibriumReport:
    """Solve both equilibria of the scenario and audit the capped one."""
    market = config.market
    cap = config.cap.lambda_max
    ce = solve_ce(market)
    sce = solve_sce(market, cap)
    residuals = kkt_residual_sce(market, cap, sce)
    return EquilibriumReport(ce=ce, sce=sce, residuals=residuals, cap_active=sce.nu_star > 0.0)


def report_to_json(report: EquilibriumReport) -> str:
    doc = {
        "cap_active": report.cap_active,
        "ce": {
            "lambda_bar": report.ce.lambda_bar,
            "x_bar": list(report.ce.x_bar),
        },
        "residuals": {
            "stationarity_norm": report.residuals.stationarity_norm,
            "supply_demand_gap": report.residuals.supply_demand_gap,
            "cap_violation": report.residuals.cap_violation,
            "complementarity_gap": report.residuals.complementarity_gap,
        },
        "sce": {
            "lambda_star": report.sce.lambda_star,
            "nu_star": report.sce.nu_star,
            "pi1_star": report.sce.pi1_star,
            "pi2_star": list(report.sce.pi2_star),
            "u_star": list(report.sce.u_star),
            "x_star": list(report.sce.x_star),
        },
    }
    return dumps_canonical(doc)


def trajectory_header(n: int) -> list[str]:
    """CSV column names for an ``n``-agent closed-loop trajectory."""
    cols = ["t"]
    cols += [f"x_{i}" for i in range(1, n + 1)]
    cols += [f"rho_{i}" for i in range(1, n + 1)]
    cols += [f"eps_{i}" for i in range(1, n + 1)]
    cols += ["lambda"]
    cols += [f"u_{i}" for i in range(1, n + 1)]
    cols += [f"pi_{i}" for i in range(1, n + 1)]
    cols += ["nu", "mu", "V", "eq_residual"]
    return cols


def write_trajectory_csv(trajectory: Trajectory, n: int, path: str | Path) -> None:
    """Write a closed-loop trajectory as CSV (LF endings, exact floats)."""
    lines = [",".join(trajectory_header(n))]
    for i in range(len(trajectory)):
        row = [repr(float(trajectory.times[i]))]
        row += [repr(float(v)) for v in trajectory.states[i]]
        row.append(repr(float(trajectory.lyapunov[i])))
        row.append(repr(float(trajectory.equilibrium_residuals[i])))
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n", newline="\n")


def summary_to_json(report: ConvergenceReport) -> str:
    doc = {
        "converged": report.converged,
        "first_time_within_tolerance": report.first_time_within_tolerance,
        "final_error": report.final_error,
        "worst_lyapunov_increase": report.worst_lyapunov_increase,
        "mu_negativity": report.mu_negativity,
        "tolerance": report.tolerance,
    }
    return dumps_canonical(doc)


def run_simulate(
    config: ScenarioConfig,
    csv_path: str | Path,
    summary_path: str | Path | None = None,
    tolerance: float = SUMMARY_TOLERANCE,
) -> tuple[Trajectory, ConvergenceReport]:
    """Simulate the closed loop and export trajectory CSV plus JSON summary.

    The reference equilibrium for the Lyapunov and residual columns is the
    closed-form fixed point.  If the integration diverges, the partial
    trajectory is flushed to ``csv_path`` before :class:`NonfiniteState`
    propagates.
    """
    market = config.market
    cap = config.cap.lambda_max
    sim = config.sim
    lay = state_layout(market.n)
    reference = assemble_equilibrium(market, cap).to_vector()
    y0 = np.zeros(lay.dim) if isinstance(sim.init, str) else np.asarray(sim.init, dtype=float)
    rhs = closed_loop_rhs(market, cap)
    try:
        trajectory = integrate(
            rhs,
            y0,
            sim.h,
            sim.t_end,
            method=sim.method,
            reference=reference,
            mu_index=lay.mu,
            record_stride=sim.record_stride,
        )
    except NonfiniteState as exc:
        if exc.trajectory is not None and len(exc.trajectory) > 0:
            write_trajectory_csv(exc.trajectory, market.n, csv_path)
        raise
    write_trajectory_csv(trajectory, market.n, csv_path)
    report = convergence_report(trajectory, reference, tolerance)
    if summary_path is not None:
        Path(summary_path).write_text(summary_to_json(report), newline="\n")
    return trajectory, report


def nominal_welfare(market: MarketInstance, x: np.ndarray) -> float:
    """Total utility at allocation ``x`` with adjustment-free coefficients."""
    return float((-0.5 * market.q * x**2 - market.c0 * x).sum())


def run_sweep(config: ScenarioConfig, cap_values) -> list[SweepRow]:
    """Solve the capped equilibrium across a list of price caps.

    Rows with a cap at or above the competitive price all coincide with
    the uncapped equilibrium (zero adjustment, zero welfare loss).
    """
    caps = [float(c) for c in cap_values]
    if not caps:
        raise ValueError("cap_values must be nonempty")
    market = config.market
    ce = solve_ce(market)
    welfare_ce = nominal_welfare(market, ce.x_bar)
    rows = []
    for cap in caps:
        sce = solve_sce(market, cap)
        rows.append(
            SweepRow(
                lambda_max=cap,
                lambda_star=sce.lambda_star,
                nu_star=sce.nu_star,
                u_norm=float(np.linalg.norm(sce.u_star)),
                welfare_loss_nominal=welfare_ce - nominal_welfare(market, sce.x_star),
            )
        )
    return rows


def sweep_to_csv(rows: list[SweepRow]) -> str:
    lines = ["lambda_max,lambda_star,nu_star,u_norm,welfare_loss_nominal_utilities"]
    for row in rows:
        lines.append(
            ",".join(
                repr(float(v))
                for v in (
                    row.lambda_max,
                    row.lambda_star,
                    row.nu_star,
                    row.u_norm,
                    row.welfare_loss_nominal,
                )
            )
        )
    return "\n".join(lines) + "\n"
