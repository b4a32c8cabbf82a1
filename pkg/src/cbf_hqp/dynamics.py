"""Serial-chain rigid-body kinematics and dynamics.

Conventions
-----------
Joints are revolute and described by modified Denavit-Hartenberg rows
(Craig convention): the transform from frame i-1 to frame i is

    Rx(alpha) Tx(a) Rz(theta_offset + q_i) Tz(d)

so joint i rotates about the z axis of frame i. A fixed tool transform
maps the last joint frame to the end-effector frame.

The mass matrix is assembled from per-link center-of-mass Jacobians,

    M(q) = sum_i  m_i Jv_i^T Jv_i  +  Jw_i^T (R_i I_i R_i^T) Jw_i,

with I_i the rotational inertia about the COM in link axes. The Coriolis
matrix uses Christoffel symbols of the first kind,

    C[k, j] = 1/2 sum_i (dM[i][k, j] + dM[j][k, i] - dM[k][i, j]) qd[i],

which makes dM/dt - 2C exactly skew-symmetric provided the partials
dM[i] = dM/dq_i are exact. The partials are obtained by complex-step
differentiation of the mass-matrix assembly (the whole chain is analytic
in q), which is accurate to machine precision, unlike real finite
differences. Gravity is g(q) = -sum_i m_i Jv_i^T g_vec, the exact
gradient of the potential for the same model.

All public entry points accept plain array-likes and return float64
arrays. RobotState bundles the per-configuration quantities the
controller needs and marks its arrays read-only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

Array = np.ndarray

# Step for complex-step partials of M. There is no subtractive
# cancellation, so the step can sit far below sqrt(eps).
_CSTEP = 1e-100


class ModelError(ValueError):
    """Raised when a model description fails validation."""


class StaleStateError(RuntimeError):
    """Raised when a RobotState's cached fields disagree with q, qd."""


@dataclass
class RobotModel:
    """Parameters of a fixed-base serial chain with revolute joints."""

    name: str
    n_joints: int
    dh_a: Array
    dh_d: Array
    dh_alpha: Array
    dh_theta_offset: Array
    mass: Array
    com: Array          # (n, 3) in link frames
    inertia: Array      # (n, 3, 3) about the COM, link axes
    q_min: Array
    q_max: Array
    v_max: Array
    tau_max: Array
    gravity: Array      # (3,) world frame, m/s^2
    ee_transform: Array  # (4, 4) fixed transform from last joint frame

    def __post_init__(self):
        for name in ("dh_a", "dh_d", "dh_alpha", "dh_theta_offset", "mass",
                     "com", "inertia", "q_min", "q_max", "v_max", "tau_max",
                     "gravity", "ee_transform"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        n = self.n_joints
        # Constant factors reused on every evaluation.
        self._tril = np.tril(np.ones((n, n)))
        self._inertia_chol = np.linalg.cholesky(self.inertia)
        self._sqrt_mass = np.sqrt(self.mass)
        self._com_col = self.com[:, :, None]
        self._mg = self.mass[:, None] * self.gravity


def _field(d: dict, key: str, where: str):
    if key not in d:
        raise ModelError(f"{where}.{key} is missing")
    return d[key]


def load_model(text: str) -> RobotModel:
    """Parse a YAML model description and validate it.

    Raises ModelError naming the offending field on invalid input.
    """
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ModelError(f"model is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ModelError("model root must be a mapping")

    name = str(raw.get("name", "unnamed"))
    links = _field(raw, "links", "model")
    if not isinstance(links, list) or not links:
        raise ModelError("model.links must be a non-empty list")
    n = len(links)

    a = np.zeros(n)
    d = np.zeros(n)
    alpha = np.zeros(n)
    theta_off = np.zeros(n)
    mass = np.zeros(n)
    com = np.zeros((n, 3))
    inertia = np.zeros((n, 3, 3))
    q_min = np.zeros(n)
    q_max = np.zeros(n)
    v_max = np.zeros(n)
    tau_max = np.zeros(n)

    for i, link in enumerate(links):
        where = f"links[{i}]"
        dh = _field(link, "dh", where)
        a[i] = float(_field(dh, "a", where + ".dh"))
        d[i] = float(_field(dh, "d", where + ".dh"))
        alpha[i] = float(_field(dh, "alpha", where + ".dh"))
        theta_off[i] = float(dh.get("theta_offset", 0.0))
        mass[i] = float(_field(link, "mass", where))
        if not mass[i] > 0.0:
            raise ModelError(f"{where}.mass must be > 0")
        com[i] = np.asarray(_field(link, "com", where), dtype=float)
        I = np.asarray(_field(link, "inertia", where), dtype=float)
        if I.shape != (3, 3):
            raise ModelError(f"{where}.inertia must be a 3x3 matrix")
        if np.max(np.abs(I - I.T)) > 1e-9:
            raise ModelError(f"{where}.inertia must be symmetric")
        if np.min(np.linalg.eigvalsh(0.5 * (I + I.T))) <= 0.0:
            raise ModelError(f"{where}.inertia must be positive definite")
        inertia[i] = I
        q_min[i] = float(_field(link, "q_min", where))
        q_max[i] = float(_field(link, "q_max", where))
        if not q_min[i] < q_max[i]:
            raise ModelError(f"{where}.q_min must be < {where}.q_max")
        v_max[i] = float(_field(link, "v_max", where))
        if not v_max[i] > 0.0:
            raise ModelError(f"{where}.v_max must be > 0")
        tau_max[i] = float(_field(link, "tau_max", where))
        if not tau_max[i] > 0.0:
            raise ModelError(f"{where}.tau_max must be > 0")

    gravity = np.asarray(raw.get("gravity", [0.0, 0.0, -9.81]), dtype=float)
    if gravity.shape != (3,):
        raise ModelError("model.gravity must be a 3-vector")

    ee = np.eye(4)
    if "ee_transform" in raw:
        spec = raw["ee_transform"]
        trans = np.asarray(spec.get("translation", [0, 0, 0]), dtype=float)
        if trans.shape != (3,):
            raise ModelError("ee_transform.translation must be a 3-vector")
        ee[:3, 3] = trans
        if "rpy" in spec:
            r, p, y = (float(v) for v in spec["rpy"])
            ee[:3, :3] = _rotz(y) @ _roty(p) @ _rotx(r)

    return RobotModel(name=name, n_joints=n, dh_a=a, dh_d=d, dh_alpha=alpha,
                      dh_theta_offset=theta_off, mass=mass, com=com,
                      inertia=inertia, q_min=q_min, q_max=q_max, v_max=v_max,
                      tau_max=tau_max, gravity=gravity, ee_transform=ee)


def load_model_file(path: str | Path) -> RobotModel:
    return load_model(Path(path).read_text())


def bundled_model_path(name: str) -> Path:
    """Path of a model shipped with the package (e.g. 'panda')."""
    return Path(__file__).parent / "data" / "models" / f"{name}.yaml"


def load_bundled_model(name: str) -> RobotModel:
    path = bundled_model_path(name)
    if not path.exists():
        raise ModelError(f"no bundled model named '{name}'")
    return load_model_file(path)


def _rotx(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _roty(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rotz(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


# ---------------------------------------------------------------------------
# Batched chain evaluation. Q has shape (B, n) and may be complex; every
# derived array keeps the batch axis first so one call serves both the
# nominal configuration and its complex-step perturbations.

def _chain(model: RobotModel, Q: Array):
    B, n = Q.shape
    dtype = Q.dtype
    theta = Q + model.dh_theta_offset
    ct, st = np.cos(theta), np.sin(theta)          # (B, n)
    ca, sa = np.cos(model.dh_alpha), np.sin(model.dh_alpha)  # (n,)

    T_loc = np.zeros((B, n, 4, 4), dtype=dtype)
    T_loc[..., 0, 0] = ct
    T_loc[..., 0, 1] = -st
    T_loc[..., 0, 3] = model.dh_a
    T_loc[..., 1, 0] = st * ca
    T_loc[..., 1, 1] = ct * ca
    T_loc[..., 1, 2] = -sa
    T_loc[..., 1, 3] = -sa * model.dh_d
    T_loc[..., 2, 0] = st * sa
    T_loc[..., 2, 1] = ct * sa
    T_loc[..., 2, 2] = ca
    T_loc[..., 2, 3] = ca * model.dh_d
    T_loc[..., 3, 3] = 1.0

    T = np.empty_like(T_loc)
    T[:, 0] = T_loc[:, 0]
    for i in range(1, n):
        T[:, i] = T[:, i - 1] @ T_loc[:, i]
    return T


def _cross_rows(a: Array, b: Array) -> Array:
    """Cross product over a trailing axis of length 3, no reordering."""
    out = np.empty(np.broadcast_shapes(a.shape, b.shape), dtype=np.result_type(a, b))
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    out[..., 0] = a1 * b2 - a2 * b1
    out[..., 1] = a2 * b0 - a0 * b2
    out[..., 2] = a0 * b1 - a1 * b0
    return out


def _link_jacobians(model: RobotModel, T: Array):
    """COM Jacobians for every link, batched.

    Returns Jv, Jw with shape (B, n_links, 3, n_joints) where
    [b, l, :, j] is the column of joint j for link l.
    """
    n = model.n_joints
    z = T[..., :3, 2]          # (B, n, 3) joint axes in world
    o = T[..., :3, 3]          # (B, n, 3) joint origins
    R = T[..., :3, :3]
    p = (R @ model._com_col)[..., 0] + o    # (B, n, 3) link COMs in world
    diff = p[:, :, None, :] - o[:, None, :, :]            # (B, L, n, 3)
    cr = _cross_rows(z[:, None, :, :], diff)              # (B, L, n, 3)
    mask = model._tril[None, :, :, None]                  # joint j moves link l iff j <= l
    Jv = np.swapaxes(cr * mask, -1, -2)                   # (B, L, 3, n)
    Jw = np.swapaxes(z[:, None, :, :] * mask, -1, -2)
    return Jv, Jw


def _mass_matrix_batched(model: RobotModel, T: Array, jac=None) -> Array:
    """M(q) as a sum of two Gram products over stacked link Jacobians."""
    B = T.shape[0]
    n = model.n_joints
    Jv, Jw = jac if jac is not None else _link_jacobians(model, T)
    Gv = (model._sqrt_mass[:, None, None] * Jv).reshape(B, 3 * n, n)
    # R @ chol(I) factors the world inertia, so the angular part is a
    # Gram product too: Jw^T (R I R^T) Jw = (S^T R^T Jw)^T (S^T R^T Jw).
    RS = T[..., :3, :3] @ model._inertia_chol
    Gw = (np.swapaxes(RS, -1, -2) @ Jw).reshape(B, 3 * n, n)
    return np.swapaxes(Gv, -1, -2) @ Gv + np.swapaxes(Gw, -1, -2) @ Gw


def _gravity_from_jv(model: RobotModel, Jv_real: Array) -> Array:
    # g(q) = -sum_l m_l Jv_l^T g_vec, the exact potential gradient.
    return -np.tensordot(model._mg, Jv_real, axes=([0, 1], [0, 1]))


def _ee_terms(model: RobotModel, T: Array):
    """End-effector pose (4x4) and 6xn geometric Jacobian, batched."""
    T_ee = T[:, -1] @ model.ee_transform
    z = T[..., :3, 2]
    o = T[..., :3, 3]
    p_ee = T_ee[:, :3, 3]
    Jv = _cross_rows(z, p_ee[:, None, :] - o)   # (B, n, 3)
    J = np.concatenate([np.swapaxes(Jv, 1, 2), np.swapaxes(z, 1, 2)], axis=1)
    return T_ee, J


def _quat_from_rot(R: Array) -> Array:
    """Unit quaternion (w, x, y, z) from a rotation matrix, w >= 0."""
    t = np.trace(R)
    if t > 0.0:
        r = np.sqrt(1.0 + t)
        w = 0.5 * r
        x = 0.5 * (R[2, 1] - R[1, 2]) / r
        y = 0.5 * (R[0, 2] - R[2, 0]) / r
        z = 0.5 * (R[1, 0] - R[0, 1]) / r
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        r = np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        v = np.empty(3)
        v[i] = 0.5 * r
        v[j] = 0.5 * (R[j, i] + R[i, j]) / r
        v[k] = 0.5 * (R[k, i] + R[i, k]) / r
        w = 0.5 * (R[k, j] - R[j, k]) / r
        x, y, z = v
    q = np.array([w, x, y, z])
    if q[0] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def forward_kinematics(model: RobotModel, q) -> tuple[Array, Array]:
    """End-effector position (3,) and orientation quaternion (w, x, y, z)."""
    q = np.asarray(q, dtype=float).reshape(1, -1)
    T = _chain(model, q)
    T_ee = (T[:, -1] @ model.ee_transform)[0]
    return T_ee[:3, 3].copy(), _quat_from_rot(T_ee[:3, :3])


def jacobian(model: RobotModel, q) -> Array:
    """Geometric end-effector Jacobian, rows [v; w], shape (6, n)."""
    q = np.asarray(q, dtype=float).reshape(1, -1)
    T = _chain(model, q)
    _, J = _ee_terms(model, T)
    return J[0]


def mass_matrix(model: RobotModel, q) -> Array:
    q = np.asarray(q, dtype=float).reshape(1, -1)
    return _mass_matrix_batched(model, _chain(model, q))[0]


def gravity_torque(model: RobotModel, q) -> Array:
    q = np.asarray(q, dtype=float).reshape(1, -1)
    Jv, _ = _link_jacobians(model, _chain(model, q))
    return _gravity_from_jv(model, Jv[0])


def _mass_and_partials(model: RobotModel, q: Array):
    """M(q) and the stacked partials dM[i] = dM/dq_i via complex step."""
    n = model.n_joints
    Q = np.tile(q.astype(complex), (n + 1, 1))
    Q[1:] += 1j * _CSTEP * np.eye(n)
    Mb = _mass_matrix_batched(model, _chain(model, Q))
    return Mb[0].real, Mb[1:].imag / _CSTEP


def _coriolis_from_partials(dM: Array, qd: Array) -> Array:
    # Christoffel symbols of the first kind, contracted with qd:
    # C[k, j] = 1/2 sum_i (dM[i][k, j] + dM[j][k, i] - dM[k][i, j]) qd[i].
    t1 = np.tensordot(qd, dM, axes=(0, 0))         # Mdot
    t2 = np.tensordot(dM, qd, axes=(2, 0)).T
    t3 = np.tensordot(dM, qd, axes=(1, 0))
    return 0.5 * (t1 + t2 - t3)


def dynamics_terms(model: RobotModel, q, qd) -> tuple[Array, Array, Array]:
    """Mass matrix, Coriolis matrix, and gravity torque at (q, qd)."""
    q = np.asarray(q, dtype=float)
    qd = np.asarray(qd, dtype=float)
    M, dM = _mass_and_partials(model, q)
    C = _coriolis_from_partials(dM, qd)
    g = gravity_torque(model, q)
    return M, C, g


def kinetic_energy(model: RobotModel, q, qd) -> float:
    qd = np.asarray(qd, dtype=float)
    return float(0.5 * qd @ mass_matrix(model, q) @ qd)


@dataclass
class RobotState:
    """Configuration snapshot with the cached terms one control step needs.

    Arrays are read-only; build a new state instead of mutating one.
    """

    q: Array
    qd: Array
    M: Array
    C: Array
    g: Array
    M_inv: Array
    J: Array
    ee_pos: Array
    ee_quat: Array
    K: float

    def __post_init__(self):
        for name in ("q", "qd", "M", "C", "g", "M_inv", "J", "ee_pos",
                     "ee_quat"):
            arr = getattr(self, name)
            arr.flags.writeable = False

    @property
    def n(self) -> int:
        return self.q.shape[0]

    def check_fresh(self) -> None:
        k = 0.5 * float(self.qd @ self.M @ self.qd)
        if abs(k - self.K) > 1e-9 * max(1.0, abs(k)):
            raise StaleStateError("cached kinetic energy disagrees with q, qd")


def compute_state(model: RobotModel, q, qd) -> RobotState:
    """Evaluate kinematics and dynamics once and cache the results."""
    q = np.array(q, dtype=float)
    qd = np.array(qd, dtype=float)
    if q.shape != (model.n_joints,) or qd.shape != (model.n_joints,):
        raise ModelError("q and qd must have length n_joints")

    n = model.n_joints
    Q = np.tile(q.astype(complex), (n + 1, 1))
    Q[1:] += 1j * _CSTEP * np.eye(n)
    T = _chain(model, Q)
    jac = _link_jacobians(model, T)
    Mb = _mass_matrix_batched(model, T, jac=jac)
    M = Mb[0].real
    dM = Mb[1:].imag / _CSTEP
    C = _coriolis_from_partials(dM, qd)

    g = _gravity_from_jv(model, jac[0][0].real)
    T_ee, J = _ee_terms(model, T[:1].real)
    K = 0.5 * float(qd @ M @ qd)
    return RobotState(q=q, qd=qd, M=M, C=C, g=g, M_inv=np.linalg.inv(M),
                      J=J[0], ee_pos=T_ee[0, :3, 3].copy(),
                      ee_quat=_quat_from_rot(T_ee[0, :3, :3]), K=K)
