"""Constraint rows for the torque QPs.

Every safety condition here is a control barrier function h(x) >= 0
turned into an affine inequality on the commanded torque u, of the form

    A u (+ c * delta) >= b

so the QP layers can stack rows from different sources without caring
where they came from. The slack column c is only nonzero for the
relaxable kinetic-energy row; all limit rows are hard.

Derivations, in brief:

* Kinetic energy. K = 1/2 qd^T M qd, and skew-symmetry of (Mdot - 2C)
  gives Kdot = qd^T (u + tau_ext - g) exactly, with no Coriolis term.
  The barrier is h = k_max - K + delta with a relaxation delta >= 0
  whose rate enters as a backward difference (delta - delta_prev)/dt.
  Requiring hdot + gamma h >= 0 yields

      -qd^T u + (gamma + 1/dt) delta
          >= -gamma (k_max - K) + delta_prev/dt + qd^T (tau_ext - g).

* Joint velocity, relative degree one. h = v_max_i -+ qd_i, and
  hdot = -+ qdd_i = -+ e_i^T M^{-1} (u + w) with the drift torque
  w = tau_ext - C qd - g.

* Joint position, relative degree two. h = (q_max_i - q_i) or
  (q_i - q_min_i); cascading two first-order conditions with rates
  lambda1, lambda2 gives hddot + (l1+l2) hdot + l1 l2 h >= 0.

* Plane clearance for the end effector, also relative degree two, with
  h = n^T p_ee - offset - d_min and hddot = n^T (Jdot qd + J M^{-1}(u+w)).
  Jdot qd is formed by a central difference of the Jacobian along qd.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import RobotModel, RobotState, jacobian

Array = np.ndarray


@dataclass(frozen=True)
class CbfParams:
    """Barrier gains and geometry.

    Rates are 1/s, k_max is Joules, dt is the control period the
    discrete slack derivative is formed with. The optional plane
    (unit-normal direction, scalar offset, clearance d_min) defines the
    end-effector keep-out halfspace n.p >= offset + d_min.
    """
    k_max: float = 0.5
    gamma: float = 5.0
    gamma_velocity: float = 10.0
    lambda1: float = 10.0
    lambda2: float = 10.0
    dt: float = 1e-3
    plane_normal: tuple[float, float, float] | None = None
    plane_offset: float = 0.0
    d_min: float = 0.0

    def __post_init__(self):
        for name in ("k_max", "gamma", "gamma_velocity", "lambda1",
                     "lambda2", "dt"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be > 0")
        if self.plane_normal is not None:
            n = np.asarray(self.plane_normal, dtype=float).reshape(-1)
            if n.shape[0] != 3 or np.linalg.norm(n) < 1e-12:
                raise ValueError("plane_normal must be a nonzero 3-vector")


@dataclass
class Task:
    """A block of rows for the torque QP.

    kind "eq" encodes A u = b; kind "ineq" encodes A u >= b. For
    inequality rows, slack holds the per-row coefficient of the level's
    relaxation variable (A u + slack * delta >= b); None means the rows
    are hard everywhere, including inside a prioritized level.
    """
    kind: str
    A: Array
    b: Array
    label: str
    slack: Array | None = None
    row_labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        if self.kind not in ("eq", "ineq"):
            raise ValueError("kind must be 'eq' or 'ineq'")
        if self.A.shape[0] != self.b.shape[0]:
            raise ValueError("A and b row counts disagree")
        if self.slack is not None:
            self.slack = np.asarray(self.slack, dtype=float).reshape(-1)
            if self.slack.shape[0] != self.b.shape[0]:
                raise ValueError("slack and b row counts disagree")
            if np.any(self.slack < 0.0):
                raise ValueError("slack coefficients must be >= 0")
        if not self.row_labels:
            self.row_labels = [f"{self.label}[{i}]" for i in range(self.b.shape[0])]
        elif len(self.row_labels) != self.b.shape[0]:
            raise ValueError("row_labels and b row counts disagree")

    @property
    def m(self) -> int:
        return self.b.shape[0]


def _drift_torque(state: RobotState, tau_ext: Array | None) -> Array:
    w = -state.C @ state.qd - state.g
    if tau_ext is not None:
        w = w + tau_ext
    return w


def energy_cbf_row(state: RobotState, params: CbfParams,
                   tau_ext: Array | None = None,
                   delta_prev: float = 0.0) -> Task:
    """Relaxed kinetic-energy barrier as a single row.

    The returned slack coefficient is gamma + 1/dt; passing delta = 0
    (or dropping the slack column) recovers the unrelaxed barrier.
    """
    if delta_prev < 0.0:
        raise ValueError("delta_prev must be >= 0")
    state.check_fresh()
    qd = state.qd
    te = np.zeros(state.n) if tau_ext is None else np.asarray(tau_ext, float)
    A = -qd[None, :]
    b = np.array([
        -params.gamma * (params.k_max - state.K)
        + delta_prev / params.dt
        + qd @ (te - state.g)
    ])
    c = np.array([params.gamma + 1.0 / params.dt])
    return Task(kind="ineq", A=A, b=b, label="energy", slack=c,
                row_labels=["energy"])


def torque_limit_rows(model: RobotModel) -> Task:
    """Symmetric torque box |u_i| <= tau_max_i as 2n hard rows."""
    n = model.n_joints
    A = np.vstack([np.eye(n), -np.eye(n)])
    b = np.concatenate([-model.tau_max, -model.tau_max])
    labels = [f"torque_min[{i}]" for i in range(n)] + \
             [f"torque_max[{i}]" for i in range(n)]
    return Task(kind="ineq", A=A, b=b, label="torque", row_labels=labels)


def velocity_limit_rows(state: RobotState, params: CbfParams,
                        model: RobotModel,
                        tau_ext: Array | None = None) -> Task:
    """First-order barriers on +-qd_i with rate gamma_velocity."""
    w = _drift_torque(state, tau_ext)
    Minv = state.M_inv
    a = Minv @ w
    g = params.gamma_velocity
    # upper: h = v_max - qd_i ; lower: h = qd_i + v_max
    A = np.vstack([-Minv, Minv])
    b = np.concatenate([
        a - g * (model.v_max - state.qd),
        -a - g * (state.qd + model.v_max),
    ])
    n = model.n_joints
    labels = [f"vel_max[{i}]" for i in range(n)] + \
             [f"vel_min[{i}]" for i in range(n)]
    return Task(kind="ineq", A=A, b=b, label="velocity", row_labels=labels)


def position_limit_rows(state: RobotState, params: CbfParams,
                        model: RobotModel,
                        tau_ext: Array | None = None) -> Task:
    """Second-order barriers on the joint range with rates lambda1/2."""
    w = _drift_torque(state, tau_ext)
    Minv = state.M_inv
    a = Minv @ w
    l1, l2 = params.lambda1, params.lambda2
    s, p = l1 + l2, l1 * l2
    A = np.vstack([-Minv, Minv])
    b = np.concatenate([
        a + s * state.qd - p * (model.q_max - state.q),
        -a - s * state.qd - p * (state.q - model.q_min),
    ])
    n = model.n_joints
    labels = [f"pos_max[{i}]" for i in range(n)] + \
             [f"pos_min[{i}]" for i in range(n)]
    return Task(kind="ineq", A=A, b=b, label="position", row_labels=labels)


def collision_plane_rows(state: RobotState, params: CbfParams,
                         model: RobotModel,
                         tau_ext: Array | None = None,
                         fd_step: float = 1e-6) -> Task:
    """Keep the end effector on the positive side of the configured
    plane: h = n.p_ee - offset - d_min >= 0, relative degree two.

    The Jacobian rate term is a central difference along the current
    velocity (second-order accurate; exact kinematic Hessians are not
    worth their complexity at a 1 kHz control step).
    """
    if params.plane_normal is None:
        raise ValueError("no plane configured in params")
    n_vec = np.asarray(params.plane_normal, dtype=float).reshape(3)
    n_vec = n_vec / np.linalg.norm(n_vec)

    w = _drift_torque(state, tau_ext)
    Jv = state.J[:3]
    h = float(n_vec @ state.ee_pos) - params.plane_offset - params.d_min
    hd = float(n_vec @ (Jv @ state.qd))

    Jp = jacobian(model, state.q + fd_step * state.qd)[:3]
    Jm = jacobian(model, state.q - fd_step * state.qd)[:3]
    Jdot_qd = (Jp - Jm) @ state.qd / (2.0 * fd_step)

    l1, l2 = params.lambda1, params.lambda2
    row = n_vec @ Jv @ state.M_inv
    b = (-n_vec @ Jdot_qd - (l1 + l2) * hd - l1 * l2 * h - row @ w)
    return Task(kind="ineq", A=row[None, :], b=np.array([b]),
                label="plane", row_labels=["plane"])
