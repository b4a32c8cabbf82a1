"""Dense convex quadratic programming with a primal active-set method.

Problems have the form

    min  1/2 z^T H z + f^T z
    s.t. A_eq z  = b_eq
         A_in z >= b_in

with H symmetric positive semidefinite. The solver adds a small Tikhonov
term eps * ||z - anchor||^2, which makes the Hessian positive definite
and picks the minimum-distance-to-anchor point whenever the optimum is
non-unique. Identical inputs produce identical outputs; there is no
randomization anywhere in the path.

`oracle_solve` is an independent reference for small problems: it
enumerates every candidate active set, solves the corresponding
equality-constrained system, and keeps the KKT-consistent feasible
candidates. It exists for testing and is deliberately brute force.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray

FEAS_TOL = 1e-8
REG = 1e-9
MAX_ITER = 200


@dataclass
class QpProblem:
    H: Array
    f: Array
    A_eq: Array | None = None
    b_eq: Array | None = None
    A_in: Array | None = None
    b_in: Array | None = None

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.f = np.asarray(self.f, dtype=float)
        n = self.f.shape[0]
        if self.H.shape != (n, n):
            raise ValueError("H and f dimensions disagree")
        if np.max(np.abs(self.H - self.H.T), initial=0.0) > 1e-12:
            raise ValueError("H must be symmetric")
        if self.A_eq is None:
            self.A_eq = np.zeros((0, n))
            self.b_eq = np.zeros(0)
        else:
            self.A_eq = np.asarray(self.A_eq, dtype=float).reshape(-1, n)
            self.b_eq = np.asarray(self.b_eq, dtype=float).reshape(-1)
        if self.A_in is None:
            self.A_in = np.zeros((0, n))
            self.b_in = np.zeros(0)
        else:
            self.A_in = np.asarray(self.A_in, dtype=float).reshape(-1, n)
            self.b_in = np.asarray(self.b_in, dtype=float).reshape(-1)
        if self.A_eq.shape[0] != self.b_eq.shape[0]:
            raise ValueError("A_eq and b_eq row counts disagree")
        if self.A_in.shape[0] != self.b_in.shape[0]:
            raise ValueError("A_in and b_in row counts disagree")

    @property
    def n(self) -> int:
        return self.f.shape[0]

    def objective(self, z: Array) -> float:
        return float(0.5 * z @ self.H @ z + self.f @ z)

    def max_violation(self, z: Array) -> float:
        v = 0.0
        if self.A_eq.shape[0]:
            v = float(np.max(np.abs(self.A_eq @ z - self.b_eq)))
        if self.A_in.shape[0]:
            v = max(v, float(np.max(self.b_in - self.A_in @ z, initial=0.0)))
        return v


@dataclass
class QpSolution:
    z_star: Array
    status: str                 # optimal | infeasible | max_iterations
    active_set: Array           # indices of tight inequality rows
    objective_value: float
    iterations: int
    lam_eq: Array = field(default_factory=lambda: np.zeros(0))
    mu_in: Array = field(default_factory=lambda: np.zeros(0))


def _unconstrained_step(H: Array, grad: Array) -> Array:
    try:
        p = -np.linalg.solve(H, grad)
        ok = np.max(np.abs(H @ p + grad)) <= 1e-9 * (1.0 + np.max(np.abs(grad)))
    except np.linalg.LinAlgError:
        ok = False
    if not ok:
        p = -np.linalg.lstsq(H, grad, rcond=None)[0]
    return p

def _kkt_step(H: Array, grad: Array, A_act: Array, resid: Array):
    """Direction and multipliers for the working-set subproblem.

    Solves min 1/2 p^T H p + grad^T p subject to A_act p = resid, where
    resid is the current violation of the working rows (zero once the
    iterate sits exactly on them; nonzero residuals from an inexact
    start get absorbed instead of carried along).

    Uses the nullspace method rather than a monolithic KKT solve: the
    curvature here spans many orders of magnitude (regularization-only
    directions against penalty-weighted ones), and factoring the full
    KKT matrix smears that conditioning into the constraint block. With
    the split, A_act p - resid carries only the genuinely irreducible
    part of the residual, which the caller uses to detect inconsistent
    working sets. The returned multipliers satisfy
    grad + H p = A_act^T nu.
    """
    m = A_act.shape[0]
    if m == 0:
        return _unconstrained_step(H, grad), np.zeros(0)
    U, sig, Vt = np.linalg.svd(A_act)
    r = int(np.sum(sig > 1e-12 * max(1.0, sig[0] if sig.size else 0.0)))
    p0 = Vt[:r].T @ ((U[:, :r].T @ resid) / sig[:r]) if r else np.zeros(H.shape[0])
    N = Vt[r:].T
    if N.shape[1]:
        Hn = N.T @ H @ N
        gn = N.T @ (grad + H @ p0)
        try:
            y = np.linalg.solve(Hn, -gn)
            ok = np.max(np.abs(Hn @ y + gn)) <= 1e-9 * (1.0 + np.max(np.abs(gn)))
        except np.linalg.LinAlgError:
            ok = False
        if not ok:
            y = -np.linalg.lstsq(Hn, gn, rcond=None)[0]
        p = p0 + N @ y
    else:
        p = p0
    nu, *_ = np.linalg.lstsq(A_act.T, grad + H @ p, rcond=None)
    return p, nu


def _row_coefficients(A_act: Array, a_new: Array):
    """Least-squares representation of a_new over the rows of A_act.

    Returns (dependent, c) with A_act^T c ~= a_new. dependent is True
    when the fit is essentially exact, i.e. the row adds nothing to the
    span of the working set.
    """
    if A_act.shape[0] == 0:
        return False, np.zeros(0)
    c, *_ = np.linalg.lstsq(A_act.T, a_new, rcond=None)
    gap = np.max(np.abs(A_act.T @ c - a_new))
    return gap <= 1e-9 * (1.0 + np.max(np.abs(a_new))), c


def _active_set_core(H: Array, f: Array, A_eq: Array, b_eq: Array,
                     A_in: Array, b_in: Array, z0: Array, max_iter: int):
    """Primal active-set iteration from a feasible start."""
    n = z0.shape[0]
    m_e = A_eq.shape[0]
    m_i = A_in.shape[0]
    z = z0.astype(float).copy()
    work: list[int] = []
    nu = np.zeros(m_e)

    for it in range(1, max_iter + 1):
        grad = H @ z + f
        A_act = np.vstack([A_eq, A_in[work]]) if (m_e or work) else np.zeros((0, n))
        b_act = np.concatenate([b_eq, b_in[work]])
        resid = b_act - A_act @ z
        p, nu = _kkt_step(H, grad, A_act, resid)

        # Degenerate geometry: nearly concurrent rows can leave the
        # working set inconsistent, so that no step lands on all of its
        # rows at once. The KKT solve then returns its least-squares
        # compromise and the loop would idle below the face tolerance
        # forever. The step residual is only a cheap first alarm (very
        # long flat-direction steps carry roundoff of the same size),
        # so confirm with the constraint rows alone before releasing
        # the working row whose removal leaves the most consistent
        # remainder.
        if work:
            tol_gap = 1e-9 * (1.0 + np.max(np.abs(b_act)))
            if np.max(np.abs(A_act @ p - resid)) > tol_gap:
                q, *_ = np.linalg.lstsq(A_act, resid, rcond=None)
                if np.max(np.abs(A_act @ q - resid)) > tol_gap:
                    rows = np.arange(m_e + len(work))
                    best_k, best_res = 0, np.inf
                    for k in range(len(work)):
                        keep = rows != m_e + k
                        s, *_ = np.linalg.lstsq(A_act[keep], b_act[keep],
                                                rcond=None)
                        r = np.max(np.abs(A_act[keep] @ s - b_act[keep]))
                        if r < best_res - 1e-15:
                            best_res, best_k = r, k
                    work.pop(best_k)
                    continue

        # Stationary when the step is negligible or cannot improve the
        # objective beyond roundoff. The second test matters for nearly
        # flat directions, where solve noise divided by the tiny
        # regularized curvature produces small wandering steps forever.
        # Neither applies while the iterate still has to be pulled onto
        # the working-set rows (resid nonzero): that correction step may
        # move uphill and must be taken.
        on_face = (resid.size == 0 or
                   np.max(np.abs(resid)) <= 1e-11 * (1.0 + np.max(np.abs(b_act))))
        pred_dec = -(grad @ p + 0.5 * p @ H @ p)
        obj_scale = 1.0 + abs(0.5 * z @ grad + 0.5 * f @ z)
        stationary = on_face and (
            np.max(np.abs(p), initial=0.0)
            <= 1e-10 * (1.0 + np.max(np.abs(z), initial=0.0))
            or pred_dec <= 1e-17 * obj_scale
        )
        if stationary:
            mu_w = nu[m_e:]
            if mu_w.size == 0 or np.min(mu_w) >= -1e-9:
                return z, "optimal", it, work, nu
            drop = int(np.argmin(mu_w))
            work.pop(drop)
            continue

        # Longest feasible step along p; inactive rows with a^T p < 0 block.
        alpha = 1.0
        blocker = -1
        if m_i:
            free = [i for i in range(m_i) if i not in work]
            if free:
                Af = A_in[free]
                d = Af @ p
                slack = Af @ z - b_in[free]
                for idx, i in enumerate(free):
                    if d[idx] < -1e-12:
                        ratio = max(slack[idx], 0.0) / (-d[idx])
                        if ratio < alpha - 1e-14:
                            alpha = ratio
                            blocker = i
        z = z + alpha * p
        if blocker >= 0:
            # Admission rule: the extended working set has to stay
            # consistent, meaning some point satisfies all of its rows
            # with equality. Rank deficiency alone is harmless (step
            # and multipliers are least-squares based), but an
            # inconsistent stack has an empty face and would idle the
            # loop. In that case swap out a working row: among rows
            # with a positive coefficient in the dependency, the one
            # with the smallest multiplier per unit coefficient is the
            # cheapest to release.
            A_ext = np.vstack([A_act, A_in[blocker][None, :]])
            b_ext = np.concatenate([b_act, b_in[blocker:blocker + 1]])
            r_ext = b_ext - A_ext @ z
            q, *_ = np.linalg.lstsq(A_ext, r_ext, rcond=None)
            irr = np.max(np.abs(A_ext @ q - r_ext))
            if irr <= 1e-9 * (1.0 + np.max(np.abs(b_ext))):
                work.append(blocker)
            elif work:
                _, c = _row_coefficients(A_act, A_in[blocker])
                cw = c[m_e:]
                mu_w = nu[m_e:] if nu.size > m_e else np.zeros(len(work))
                cand = np.flatnonzero(cw > 1e-10 * (1.0 + np.max(np.abs(c))))
                if cand.size:
                    drop = int(cand[np.argmin(mu_w[cand] / cw[cand])])
                    work.pop(drop)
                    work.append(blocker)
                # without a positive coefficient the row is implied by
                # rows we cannot release; leave the set unchanged

    return z, "max_iterations", max_iter, work, nu


def _phase1(A_eq: Array, b_eq: Array, A_in: Array, b_in: Array, n: int):
    """Feasibility search: minimize ||s||^2 over A_in z + s >= b_in, s >= 0.

    Returns (z, feasible, iterations). z is the minimizer's z block even
    when the constraints are inconsistent, so callers can report which
    rows are violated and by how much.
    """
    if A_eq.shape[0]:
        z0, *_ = np.linalg.lstsq(A_eq, b_eq, rcond=None)
        if np.max(np.abs(A_eq @ z0 - b_eq)) > FEAS_TOL:
            return z0, False, 0
    else:
        z0 = np.zeros(n)
    m_i = A_in.shape[0]
    if m_i == 0:
        return z0, True, 0

    # No regularization here: the objective ignores z entirely, and any
    # shrinkage term on z would prop s up at its own scale, which can
    # sit above the feasibility tolerance. Flat z directions are handled
    # by the least-squares fallback inside the step computation.
    nv = n + m_i
    H = np.zeros((nv, nv))
    H[n:, n:] = np.eye(m_i)
    f = np.zeros(nv)
    A_eq1 = np.hstack([A_eq, np.zeros((A_eq.shape[0], m_i))])
    A_in1 = np.vstack([
        np.hstack([A_in, np.eye(m_i)]),
        np.hstack([np.zeros((m_i, n)), np.eye(m_i)]),
    ])
    b_in1 = np.concatenate([b_in, np.zeros(m_i)])
    s0 = np.maximum(0.0, b_in - A_in @ z0)
    start = np.concatenate([z0, s0])
    sol, _, iters, _, _ = _active_set_core(H, f, A_eq1, b_eq, A_in1, b_in1,
                                           start, MAX_ITER)
    z = sol[:n]
    feasible = np.max(b_in - A_in @ z, initial=0.0) <= FEAS_TOL
    return z, feasible, iters


def solve_qp(problem: QpProblem, anchor: Array | None = None,
             x0: Array | None = None) -> QpSolution:
    """Solve the QP. `anchor` centers the Tikhonov term; a feasible `x0`
    skips the phase-1 search."""
    n = problem.n
    H = problem.H + 2.0 * REG * np.eye(n)
    f = problem.f.copy()
    if anchor is not None:
        f -= 2.0 * REG * np.asarray(anchor, dtype=float)

    iters0 = 0
    z0 = None
    if x0 is not None:
        x0 = np.asarray(x0, dtype=float)
        if problem.max_violation(x0) <= FEAS_TOL:
            z0 = x0
    if z0 is None:
        z0, feasible, iters0 = _phase1(problem.A_eq, problem.b_eq,
                                       problem.A_in, problem.b_in, n)
        if not feasible:
            return QpSolution(z_star=z0, status="infeasible",
                              active_set=np.zeros(0, dtype=int),
                              objective_value=float("nan"),
                              iterations=iters0,
                              lam_eq=np.zeros(problem.A_eq.shape[0]),
                              mu_in=np.zeros(problem.A_in.shape[0]))

    z, status, iters, work, nu = _active_set_core(
        H, f, problem.A_eq, problem.b_eq, problem.A_in, problem.b_in,
        z0, MAX_ITER)

    m_e = problem.A_eq.shape[0]
    lam_eq = nu[:m_e] if nu.size >= m_e else np.zeros(m_e)
    mu_in = np.zeros(problem.A_in.shape[0])
    for k, i in enumerate(work):
        if m_e + k < nu.size:
            mu_in[i] = nu[m_e + k]

    tight = np.zeros(0, dtype=int)
    if problem.A_in.shape[0]:
        resid = problem.A_in @ z - problem.b_in
        tight = np.flatnonzero(np.abs(resid) <= FEAS_TOL)

    return QpSolution(z_star=z, status=status, active_set=tight,
                      objective_value=problem.objective(z),
                      iterations=iters0 + iters, lam_eq=lam_eq, mu_in=mu_in)


def oracle_solve(problem: QpProblem) -> tuple[Array | None, float]:
    """Exhaustive-enumeration reference solver for small problems.

    Tries every subset of inequality rows as the active set, keeps the
    candidates that are primal feasible with nonnegative multipliers,
    and returns the best. Returns (None, inf) when no candidate exists,
    which for a positive definite Hessian means the problem is
    infeasible.
    """
    n = problem.n
    m_i = problem.A_in.shape[0]
    if n > 8 or m_i > 12:
        raise ValueError("problem too large for the exhaustive oracle")

    H = problem.H + 2.0 * REG * np.eye(n)
    f = problem.f
    m_e = problem.A_eq.shape[0]
    best_z = None
    best_obj = float("inf")

    for r in range(m_i + 1):
        for subset in itertools.combinations(range(m_i), r):
            S = list(subset)
            A_act = np.vstack([problem.A_eq, problem.A_in[S]])
            b_act = np.concatenate([problem.b_eq, problem.b_in[S]])
            m = A_act.shape[0]
            K = np.zeros((n + m, n + m))
            K[:n, :n] = H
            K[:n, n:] = A_act.T
            K[n:, :n] = A_act
            rhs = np.concatenate([-f, b_act])
            sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
            if np.max(np.abs(K @ sol - rhs)) > 1e-7 * (1.0 + np.max(np.abs(rhs))):
                continue  # this face is empty or inconsistent
            z = sol[:n]
            # the KKT block solves H z + A^T y = -f, so y = -mu
            mu = -sol[n + m_e:]
            if m_i and np.max(problem.b_in - problem.A_in @ z, initial=0.0) > FEAS_TOL:
                continue
            if mu.size and np.min(mu) < -FEAS_TOL:
                continue
            obj = problem.objective(z)
            if obj < best_obj - 1e-12:
                best_obj = obj
                best_z = z

    return best_z, best_obj
