"""Cartesian impedance control with a torque-level safety filter.

The nominal law is u_nom = J^T (K_c e - D_c J qd) + g with a stiffness
matrix K_c over [position error; quaternion-log orientation error] and a
configuration-dependent critical damping D_c = 2 sym(sqrt(Lambda K_c)),
Lambda = (J M^-1 J^T)^-1 being the task-space inertia.

Every control step the filter assembles the hard rows (actuation box and
any enabled limit barriers), the relaxable kinetic-energy row, and the
mode's priority levels, then runs the QP cascade:

  single_qp          one level: track u_nom, energy row hard (no slack)
  hqp_performance    1: task wrench  2: energy + slack  3: nullspace
  hqp_safety         1: energy + slack  2: task wrench  3: nullspace

The dynamically consistent projector P = J^T Lambda J M^-1 splits torque
into a task part and a nullspace part N = I - P; the wrench deviation
Lambda J M^-1 (u - u_nom) and the nullspace coefficient z^T N u quantify
where the filter spent its adjustments.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .dynamics import RobotModel, RobotState
from .hqp import CascadeInfeasibleError, LevelSpec, S0EmptyError, run_cascade
from .tasks import (
    CbfParams,
    Task,
    collision_plane_rows,
    energy_cbf_row,
    position_limit_rows,
    torque_limit_rows,
    velocity_limit_rows,
)

Array = np.ndarray

MODES = ("single_qp", "hqp_performance", "hqp_safety")
STRICT_FAMILIES = ("torque", "velocity", "position", "plane")


class UnsupportedConfigurationError(RuntimeError):
    """The arm does not have the one-dimensional nullspace the
    coefficient extraction assumes."""


def _quat_mul(a: Array, b: Array) -> Array:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def _quat_conj(q: Array) -> Array:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def _quat_log_error(q_des: Array, q_cur: Array) -> Array:
    """Rotation vector (base frame) taking the current orientation to the
    desired one: log of R_des R_cur^T."""
    e = _quat_mul(q_des, _quat_conj(q_cur))
    if e[0] < 0.0:
        e = -e
    v = e[1:]
    s = float(np.linalg.norm(v))
    if s < 1e-12:
        return np.zeros(3)
    angle = 2.0 * np.arctan2(s, float(e[0]))
    return angle * v / s


def _sqrtm_spd(A: Array) -> Array:
    w, V = np.linalg.eigh(0.5 * (A + A.T))
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


@dataclass(frozen=True)
class ImpedanceParams:
    """Stiffness and equilibrium pose of the nominal Cartesian law.

    Damping is not a field: it is derived per step from the stiffness
    and the task-space inertia so the closed loop stays critically
    damped in every configuration.
    """
    k_trans: tuple[float, float, float] = (200.0, 200.0, 200.0)
    k_rot: tuple[float, float, float] = (50.0, 50.0, 50.0)
    eq_position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    eq_quat: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        if any(k <= 0.0 for k in self.k_trans) or any(k <= 0.0 for k in self.k_rot):
            raise ValueError("stiffnesses must be > 0")
        q = np.asarray(self.eq_quat, dtype=float)
        if q.shape != (4,) or abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ValueError("eq_quat must be a unit quaternion (w, x, y, z)")

    @property
    def stiffness(self) -> Array:
        return np.diag(np.concatenate([self.k_trans, self.k_rot]).astype(float))


@dataclass
class ControllerState:
    """Mutable per-simulation controller memory.

    delta_prev is the previous step's optimal energy slack (the discrete
    slack-rate term of the energy row); z_prev keeps the nullspace basis
    sign-continuous; u_prev doubles as feasibility witness, warm start,
    and the fallback torque on a fault.
    """
    mode: str
    cbf: CbfParams
    impedance: ImpedanceParams
    strict_families: tuple[str, ...] = ("torque", "velocity", "position")
    delta_prev: float = 0.0
    z_prev: Array | None = None
    u_prev: Array | None = None
    fault: bool = False
    fault_reason: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.delta_prev < 0.0:
            raise ValueError("delta_prev must be >= 0")
        for fam in self.strict_families:
            if fam not in STRICT_FAMILIES:
                raise ValueError(f"unknown strict family '{fam}'")


@dataclass
class StepInfo:
    """Everything one control step reports to the logger."""
    u_nom: Array
    u_applied: Array
    K: float
    k_max_eff: float
    delta: float
    dW: Array
    alpha_dev: float
    statuses: tuple[str, ...]
    active_strict: tuple[str, ...]
    eq_residual: float
    iterations: tuple[int, ...]
    damped: bool
    phase1_used: bool
    fault: bool
    fault_reason: str
    solve_time_us: float


def task_space_inertia(state: RobotState) -> tuple[Array, bool]:
    """Task-space inertia Lambda = (J M^-1 J^T)^-1.

    Near a kinematic singularity the inverse is damped with 1e-6 * I and
    the flag goes up so logs can mark the step.
    """
    A = state.J @ state.M_inv @ state.J.T
    A = 0.5 * (A + A.T)
    w = np.linalg.eigvalsh(A)
    damped = bool(w[0] <= 1e-6 * max(1.0, w[-1]))
    if damped:
        A = A + 1e-6 * np.eye(A.shape[0])
    return np.linalg.inv(A), damped


def projections(state: RobotState) -> tuple[Array, Array]:
    """Dynamically consistent task projector P = J^T Lambda J M^-1 and
    its complement N = I - P (torques in range(N) cause no task-space
    acceleration)."""
    lam, _ = task_space_inertia(state)
    P = state.J.T @ lam @ (state.J @ state.M_inv)
    return P, np.eye(state.n) - P


def pose_error(state: RobotState, impedance: ImpedanceParams) -> Array:
    """6-vector [position error; orientation log error], desired minus
    current, in the base frame."""
    e_pos = np.asarray(impedance.eq_position, dtype=float) - state.ee_pos
    e_rot = _quat_log_error(np.asarray(impedance.eq_quat, dtype=float),
                            state.ee_quat)
    return np.concatenate([e_pos, e_rot])


def critical_damping(lam: Array, stiffness: Array) -> Array:
    """D = 2 sym(sqrt(Lambda K_c)), the symmetrized principal square
    root, via sqrt(Lambda K) = L^1/2 sqrt(L^1/2 K L^1/2) L^-1/2."""
    w, V = np.linalg.eigh(0.5 * (lam + lam.T))
    w = np.clip(w, 1e-12, None)
    half = (V * np.sqrt(w)) @ V.T
    inv_half = (V / np.sqrt(w)) @ V.T
    X = half @ _sqrtm_spd(half @ stiffness @ half) @ inv_half
    return X + X.T


def nominal_torque(state: RobotState, impedance: ImpedanceParams,
                   lam: Array | None = None) -> Array:
    """Impedance law u_nom = J^T (K_c e - D_c J qd) + g."""
    state.check_fresh()
    if lam is None:
        lam, _ = task_space_inertia(state)
    K_c = impedance.stiffness
    D_c = critical_damping(lam, K_c)
    wrench = K_c @ pose_error(state, impedance) - D_c @ (state.J @ state.qd)
    return state.J.T @ wrench + state.g


def nullspace_basis(state: RobotState, z_prev: Array | None = None) -> Array:
    """Unit vector spanning the nullspace of J, sign-matched to z_prev.

    Raises UnsupportedConfigurationError unless that nullspace is
    exactly one-dimensional (redundant arm away from singularities).
    """
    _, s, Vt = np.linalg.svd(state.J)
    tol = max(state.J.shape) * np.finfo(float).eps * (s[0] if s.size else 1.0)
    rank = int(np.sum(s > max(tol, 1e-8 * (s[0] if s.size else 1.0))))
    if state.n - rank != 1:
        raise UnsupportedConfigurationError(
            f"nullspace dimension is {state.n - rank}, expected 1")
    z = Vt[-1]
    if z_prev is not None and float(z @ z_prev) < 0.0:
        z = -z
    return z


def nullspace_coefficient(state: RobotState, u: Array,
                          z: Array | None = None) -> float:
    """alpha = z^T N u, the torque component invisible to the task."""
    if z is None:
        z = nullspace_basis(state)
    _, N = projections(state)
    return float(z @ (N @ u))


def wrench_deviation(state: RobotState, u: Array, u_nom: Array,
                     lam: Array | None = None) -> Array:
    """Equivalent end-effector wrench of the torque adjustment:
    Lambda J M^-1 (u - u_nom); zero exactly when P (u - u_nom) = 0."""
    if lam is None:
        lam, _ = task_space_inertia(state)
    return lam @ (state.J @ (state.M_inv @ (u - u_nom)))


def build_strict_tasks(model: RobotModel, state: RobotState,
                       ctrl: ControllerState,
                       tau_ext: Array | None = None) -> list[Task]:
    """The hard rows the controller enforces at every priority level."""
    tasks = []
    for fam in ctrl.strict_families:
        if fam == "torque":
            tasks.append(torque_limit_rows(model))
        elif fam == "velocity":
            tasks.append(velocity_limit_rows(state, ctrl.cbf, model, tau_ext))
        elif fam == "position":
            tasks.append(position_limit_rows(state, ctrl.cbf, model, tau_ext))
        elif fam == "plane":
            tasks.append(collision_plane_rows(state, ctrl.cbf, model, tau_ext))
    return tasks


def _levels_for_mode(mode: str, u_nom: Array, P: Array, N: Array,
                     energy: Task) -> list[LevelSpec]:
    n = u_nom.shape[0]
    track = Task(kind="eq", A=np.eye(n), b=u_nom, label="torque_tracking")
    cartesian = Task(kind="eq", A=P, b=P @ u_nom, label="task_wrench")
    nullspace = Task(kind="eq", A=N, b=N @ u_nom, label="nullspace")
    if mode == "single_qp":
        hard_energy = Task(kind="ineq", A=energy.A, b=energy.b,
                           label=energy.label, slack=None,
                           row_labels=list(energy.row_labels))
        return [LevelSpec(equality=track, inequality=hard_energy)]
    if mode == "hqp_performance":
        return [LevelSpec(equality=cartesian),
                LevelSpec(inequality=energy),
                LevelSpec(equality=nullspace)]
    return [LevelSpec(inequality=energy),
            LevelSpec(equality=cartesian),
            LevelSpec(equality=nullspace)]


def step(model: RobotModel, state: RobotState, ctrl: ControllerState,
         tau_ext: Array | None = None) -> tuple[Array, StepInfo]:
    """Run one control period: nominal law, safety filter, bookkeeping.

    On an infeasible constraint set the controller reports a fault and
    emits the last feasible torque (the nominal one if there is none
    yet); delta_prev is left untouched in that case.
    """
    t0 = time.perf_counter()
    state.check_fresh()
    lam, damped = task_space_inertia(state)
    P = state.J.T @ lam @ (state.J @ state.M_inv)
    N = np.eye(state.n) - P
    u_nom = nominal_torque(state, ctrl.impedance, lam=lam)

    z = None
    try:
        z = nullspace_basis(state, ctrl.z_prev)
    except UnsupportedConfigurationError:
        pass

    energy = energy_cbf_row(state, ctrl.cbf, tau_ext=tau_ext,
                            delta_prev=ctrl.delta_prev)
    strict = build_strict_tasks(model, state, ctrl, tau_ext)
    levels = _levels_for_mode(ctrl.mode, u_nom, P, N, energy)

    fault = False
    reason = ""
    try:
        res = run_cascade(strict, levels, u_nom, x0=ctrl.u_prev)
        u = res.u_final
        delta = max((r.delta for r in res.records), default=0.0)
        statuses = tuple(r.status for r in res.records)
        iterations = tuple(r.iterations for r in res.records)
        active = res.active_strict_rows
        eq_residual = res.eq_residual
        phase1_used = res.phase1_used
        ctrl.delta_prev = delta
        ctrl.u_prev = u.copy()
    except (S0EmptyError, CascadeInfeasibleError) as exc:
        fault = True
        reason = str(exc)
        u = ctrl.u_prev.copy() if ctrl.u_prev is not None else u_nom.copy()
        delta = ctrl.delta_prev
        statuses = ("fault",)
        iterations = ()
        active = ()
        eq_residual = float("nan")
        phase1_used = False
        ctrl.fault = True
        ctrl.fault_reason = reason

    if z is not None:
        alpha_dev = float(z @ (N @ (u - u_nom)))
        ctrl.z_prev = z
    else:
        alpha_dev = float("nan")

    info = StepInfo(
        u_nom=u_nom, u_applied=u, K=state.K,
        k_max_eff=ctrl.cbf.k_max + delta, delta=delta,
        dW=lam @ (state.J @ (state.M_inv @ (u - u_nom))),
        alpha_dev=alpha_dev, statuses=statuses, active_strict=active,
        eq_residual=eq_residual, iterations=iterations, damped=damped,
        phase1_used=phase1_used, fault=fault, fault_reason=reason,
        solve_time_us=(time.perf_counter() - t0) * 1e6)
    return u, info
