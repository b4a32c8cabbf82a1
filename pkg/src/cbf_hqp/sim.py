"""Fixed-step closed-loop simulation and experiment logging.

A scenario file (YAML) describes the robot, the initial configuration,
the impedance target schedule, an optional scripted end-effector wrench,
the barrier parameters, and the controller mode. `run_scenario` rolls
the closed loop forward with semi-implicit Euler at the control rate and
returns one log record per step; `write_csv` serializes the records with
9 significant digits. A controller fault (empty constraint set) stops
the rollout and keeps the partial log.

The integrator holds torque and wrench constant over each step:

    qdd = M^-1 (u + J^T F_ext - C qd - g)
    qd += dt qdd ; q += dt qd

An RK4 variant of the same vector field exists purely as a convergence
oracle for tests; nothing in the package calls it for real work.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import control
from .dynamics import RobotModel, RobotState, compute_state, load_bundled_model, load_model_file
from .tasks import CbfParams

Array = np.ndarray


class ScenarioError(ValueError):
    """Invalid scenario description; the message names the field."""


class SimulationFault(RuntimeError):
    """The state stopped being finite."""


@dataclass(frozen=True)
class WrenchSchedule:
    """Scripted external wrench at the end-effector.

    kind 'none' is identically zero; kind 'sine' puts
    amplitude * sin(2 pi frequency t) on one of the six wrench axes.
    """
    kind: str = "none"
    axis: int = 2
    amplitude: float = 0.0
    frequency: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "sine"):
            raise ScenarioError(f"wrench.kind '{self.kind}' not recognized")
        if self.kind == "sine":
            if not 0 <= self.axis <= 5:
                raise ScenarioError("wrench.axis must be in 0..5")
            if self.frequency <= 0.0:
                raise ScenarioError("wrench.frequency must be > 0")

    def at(self, t: float) -> Array | None:
        if self.kind == "none":
            return None
        w = np.zeros(6)
        w[self.axis] = self.amplitude * np.sin(2.0 * np.pi * self.frequency * t)
        return w


@dataclass(frozen=True)
class EquilibriumSchedule:
    """Impedance equilibrium pose over time.

    kind 'hold' keeps the pose of the initial configuration; kind 'step'
    adds a position offset from time `at` onward.
    """
    kind: str = "hold"
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    at: float = 0.0

    def __post_init__(self):
        if self.kind not in ("hold", "step"):
            raise ScenarioError(f"equilibrium.kind '{self.kind}' not recognized")
        if self.kind == "step" and self.at < 0.0:
            raise ScenarioError("equilibrium.at must be >= 0")

    def offset_at(self, t: float) -> Array:
        if self.kind == "step" and t >= self.at:
            return np.asarray(self.offset, dtype=float)
        return np.zeros(3)


@dataclass(frozen=True)
class Scenario:
    name: str
    model_name: str
    q0: Array
    k_trans: tuple[float, float, float]
    k_rot: tuple[float, float, float]
    cbf: CbfParams
    mode: str
    strict_families: tuple[str, ...]
    duration: float
    dt: float
    wrench: WrenchSchedule
    equilibrium: EquilibriumSchedule

    def __post_init__(self):
        if self.duration <= 0.0:
            raise ScenarioError("duration must be > 0")
        if self.dt <= 0.0:
            raise ScenarioError("dt must be > 0")
        if self.mode not in control.MODES:
            raise ScenarioError(f"mode must be one of {control.MODES}")


@dataclass
class LogRecord:
    """One control step of a rollout; field order matches the CSV."""
    t: float
    q: Array
    qd: Array
    u_nom: Array
    u_applied: Array
    K: float
    k_max_eff: float
    delta: float
    dW: Array
    alpha_dev: float
    eq_residual: float
    solve_time_us: float
    damped: bool
    statuses: tuple[str, ...]
    active_strict: tuple[str, ...]


@dataclass
class SimResult:
    scenario_name: str
    mode: str
    gamma: float
    k_max: float
    dt: float
    duration: float
    records: list[LogRecord]
    fault: bool
    fault_reason: str


def load_scenario(text: str) -> Scenario:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"scenario is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ScenarioError("scenario root must be a mapping")

    def need(key):
        if key not in raw:
            raise ScenarioError(f"scenario is missing '{key}'")
        return raw[key]

    name = str(need("name"))
    model_name = str(need("model"))
    q0 = np.asarray(need("initial_q"), dtype=float).reshape(-1)
    duration = float(need("duration"))
    dt = float(raw.get("dt", 1e-3))
    mode = str(raw.get("mode", "single_qp"))

    ctl = raw.get("controller", {})
    k_trans = tuple(float(v) for v in ctl.get("k_trans", (200.0, 200.0, 200.0)))
    k_rot = tuple(float(v) for v in ctl.get("k_rot", (50.0, 50.0, 50.0)))
    if len(k_trans) != 3 or len(k_rot) != 3:
        raise ScenarioError("controller stiffnesses must be 3-vectors")

    cbf_raw = dict(raw.get("cbf", {}))
    cbf_raw.setdefault("dt", dt)
    if "plane_normal" in cbf_raw and cbf_raw["plane_normal"] is not None:
        cbf_raw["plane_normal"] = tuple(float(v) for v in cbf_raw["plane_normal"])
    try:
        cbf = CbfParams(**cbf_raw)
    except TypeError as exc:
        raise ScenarioError(f"unknown cbf parameter: {exc}") from exc

    fams = raw.get("strict_families", ["torque", "velocity", "position"])
    strict_families = tuple(str(f) for f in fams)

    wr = raw.get("wrench", {"kind": "none"}) or {"kind": "none"}
    wrench = WrenchSchedule(**{k: (int(v) if k == "axis" else
                                   (str(v) if k == "kind" else float(v)))
                               for k, v in wr.items()})
    eqr = raw.get("equilibrium", {"kind": "hold"}) or {"kind": "hold"}
    if "offset" in eqr:
        eqr = dict(eqr)
        eqr["offset"] = tuple(float(v) for v in eqr["offset"])
    equilibrium = EquilibriumSchedule(**eqr)

    return Scenario(name=name, model_name=model_name, q0=q0, k_trans=k_trans,
                    k_rot=k_rot, cbf=cbf, mode=mode,
                    strict_families=strict_families, duration=duration,
                    dt=dt, wrench=wrench, equilibrium=equilibrium)


def load_scenario_file(path: str | Path) -> Scenario:
    return load_scenario(Path(path).read_text())


def bundled_scenario_path(name: str) -> Path:
    """Path of an experiment description shipped with the package."""
    return Path(__file__).parent / "data" / "experiments" / f"{name}.yaml"


def resolve_model(name_or_path: str) -> RobotModel:
    p = Path(name_or_path)
    if p.suffix in (".yaml", ".yml") or p.exists():
        return load_model_file(p)
    return load_bundled_model(name_or_path)


def integrate_step(model: RobotModel, state: RobotState, u_applied: Array,
                   wrench: Array | None = None, dt: float = 1e-3) -> RobotState:
    """One semi-implicit Euler step under held torque and wrench."""
    tau = np.asarray(u_applied, dtype=float)
    if wrench is not None:
        tau = tau + state.J.T @ np.asarray(wrench, dtype=float)
    qdd = state.M_inv @ (tau - state.C @ state.qd - state.g)
    qd_next = state.qd + dt * qdd
    q_next = state.q + dt * qd_next
    if not (np.all(np.isfinite(q_next)) and np.all(np.isfinite(qd_next))):
        raise SimulationFault("state became non-finite")
    return compute_state(model, q_next, qd_next)


def rk4_step(model: RobotModel, state: RobotState, u_applied: Array,
             wrench: Array | None = None, dt: float = 1e-3) -> RobotState:
    """Classical RK4 on the same held-input vector field (test oracle)."""
    u = np.asarray(u_applied, dtype=float)

    def accel(st: RobotState) -> Array:
        tau = u if wrench is None else u + st.J.T @ np.asarray(wrench, float)
        return st.M_inv @ (tau - st.C @ st.qd - st.g)

    def deriv(q, qd):
        st = compute_state(model, q, qd)
        return qd, accel(st)

    q, qd = state.q, state.qd
    k1q, k1v = deriv(q, qd)
    k2q, k2v = deriv(q + 0.5 * dt * k1q, qd + 0.5 * dt * k1v)
    k3q, k3v = deriv(q + 0.5 * dt * k2q, qd + 0.5 * dt * k2v)
    k4q, k4v = deriv(q + dt * k3q, qd + dt * k3v)
    q_next = q + dt / 6.0 * (k1q + 2 * k2q + 2 * k3q + k4q)
    qd_next = qd + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
    return compute_state(model, q_next, qd_next)


def run_scenario(scenario: Scenario, model: RobotModel | None = None,
                 mode: str | None = None, gamma: float | None = None,
                 k_max: float | None = None,
                 duration: float | None = None) -> SimResult:
    """Closed-loop rollout. Keyword overrides support parameter sweeps
    without editing scenario files."""
    if model is None:
        model = resolve_model(scenario.model_name)
    if scenario.q0.shape != (model.n_joints,):
        raise ScenarioError("initial_q length does not match the model")
    mode = mode or scenario.mode
    if mode not in control.MODES:
        raise ScenarioError(f"mode must be one of {control.MODES}")
    cbf = scenario.cbf
    if gamma is not None or k_max is not None:
        cbf = dataclasses.replace(
            cbf,
            gamma=float(gamma) if gamma is not None else cbf.gamma,
            k_max=float(k_max) if k_max is not None else cbf.k_max)
    duration = float(duration) if duration is not None else scenario.duration
    dt = scenario.dt
    n_steps = int(round(duration / dt))

    state = compute_state(model, scenario.q0, np.zeros(model.n_joints))
    base_pos = state.ee_pos.copy()
    base_quat = state.ee_quat.copy()

    impedance_cache: dict[tuple, control.ImpedanceParams] = {}

    def impedance_at(t: float) -> control.ImpedanceParams:
        off = scenario.equilibrium.offset_at(t)
        key = tuple(off)
        if key not in impedance_cache:
            impedance_cache[key] = control.ImpedanceParams(
                k_trans=scenario.k_trans, k_rot=scenario.k_rot,
                eq_position=tuple(base_pos + off), eq_quat=tuple(base_quat))
        return impedance_cache[key]

    ctrl = control.ControllerState(mode=mode, cbf=cbf,
                                   impedance=impedance_at(0.0),
                                   strict_families=scenario.strict_families)
    records: list[LogRecord] = []
    fault = False
    reason = ""
    for k in range(n_steps):
        t = k * dt
        ctrl.impedance = impedance_at(t)
        wrench = scenario.wrench.at(t)
        tau_ext = state.J.T @ wrench if wrench is not None else None
        u, info = control.step(model, state, ctrl, tau_ext)
        records.append(LogRecord(
            t=t, q=state.q.copy(), qd=state.qd.copy(), u_nom=info.u_nom,
            u_applied=info.u_applied, K=info.K, k_max_eff=info.k_max_eff,
            delta=info.delta, dW=info.dW, alpha_dev=info.alpha_dev,
            eq_residual=info.eq_residual, solve_time_us=info.solve_time_us,
            damped=info.damped, statuses=info.statuses,
            active_strict=info.active_strict))
        if info.fault:
            fault = True
            reason = info.fault_reason
            break
        try:
            state = integrate_step(model, state, u, wrench, dt)
        except SimulationFault as exc:
            fault = True
            reason = str(exc)
            break
    return SimResult(scenario_name=scenario.name, mode=mode, gamma=cbf.gamma,
                     k_max=cbf.k_max, dt=dt, duration=duration,
                     records=records, fault=fault, fault_reason=reason)


def csv_filename(result: SimResult) -> str:
    return f"{result.scenario_name}_{result.mode}_gamma{result.gamma:g}.csv"


def _columns(n: int) -> list[str]:
    cols = ["t"]
    cols += [f"q{i}" for i in range(n)]
    cols += [f"qd{i}" for i in range(n)]
    cols += [f"u_nom{i}" for i in range(n)]
    cols += [f"u{i}" for i in range(n)]
    cols += ["K", "K_max_eff", "delta"]
    cols += [f"dW{i}" for i in range(6)]
    cols += ["alpha_dev", "eq_residual", "solve_time_us", "damped",
             "statuses", "active_strict"]
    return cols


def write_csv(result: SimResult, path: str | Path) -> Path:
    """One row per record, floats at 9 significant digits, string lists
    joined with ';' so the file stays a plain single-table CSV."""
    path = Path(path)
    if not result.records:
        raise ValueError("nothing to write: result has no records")
    n = result.records[0].q.shape[0]

    def fmt(x: float) -> str:
        return f"{x:.9g}"

    lines = [",".join(_columns(n))]
    for r in result.records:
        vals = [fmt(r.t)]
        for arr in (r.q, r.qd, r.u_nom, r.u_applied):
            vals += [fmt(v) for v in arr]
        vals += [fmt(r.K), fmt(r.k_max_eff), fmt(r.delta)]
        vals += [fmt(v) for v in r.dW]
        vals += [fmt(r.alpha_dev), fmt(r.eq_residual), fmt(r.solve_time_us),
                 str(int(r.damped)), ";".join(r.statuses),
                 ";".join(r.active_strict)]
        lines.append(",".join(vals))
    path.write_text("\n".join(lines) + "\n")
    return path


def audit(result: SimResult) -> list[str]:
    """Log-level invariant violations (empty list means clean).

    Checks completeness, time monotonicity, finiteness, solver statuses,
    slack bookkeeping, and the inherited-equality residual. Deeper
    model-based identities live in the test suite.
    """
    problems = []
    if result.fault:
        problems.append(f"controller fault: {result.fault_reason}")
    elif len(result.records) != int(round(result.duration / result.dt)):
        problems.append("record count does not match duration/dt")
    prev_t = None
    for i, r in enumerate(result.records):
        if prev_t is not None and not np.isclose(r.t - prev_t, result.dt,
                                                 rtol=0, atol=1e-12):
            problems.append(f"time stride broken at record {i}")
            break
        prev_t = r.t
    for i, r in enumerate(result.records):
        numeric = np.concatenate(
            [r.q, r.qd, r.u_nom, r.u_applied, r.dW,
             [r.K, r.k_max_eff, r.delta, r.solve_time_us]])
        if not np.all(np.isfinite(numeric)):
            problems.append(f"non-finite value at record {i}")
            break
        if r.delta < 0.0:
            problems.append(f"negative slack at record {i}")
            break
        if abs(r.k_max_eff - (result.k_max + r.delta)) > 1e-12:
            problems.append(f"slack bookkeeping broken at record {i}")
            break
        if not r.statuses or (r.statuses[-1] != "fault"
                              and any(s != "optimal" for s in r.statuses)):
            problems.append(f"non-optimal level status at record {i}")
            break
        if np.isfinite(r.eq_residual) and r.eq_residual > 1e-8:
            problems.append(f"inherited equality residual {r.eq_residual:.3g} "
                            f"at record {i}")
            break
    return problems
