"""Lexicographic QP cascade over joint torques.

Priority levels are solved one at a time. Each level minimizes its own
objective subject to every constraint row accumulated so far; once it is
solved, its achieved equality values and its relaxed inequality bounds
are appended to the ledger as literal rows, so later levels can never
degrade what earlier levels attained. Stage 0 installs the rows that are
never negotiable (actuation box, barrier rows marked hard) and proves
that set nonempty before any level runs.

A level may carry one equality task, one inequality task, or both:

    min  1/2 ||A u - b||^2 + rho/2 delta^2
    s.t. ledger rows, C u + c * delta >= d, delta >= 0

with delta a single scalar shared by the level's inequality rows through
per-row coefficients c (c = 0 makes a row hard even inside a level).
After the solve, `A u = A u*` and `C u >= d - c delta*` join the ledger.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .qpcore import FEAS_TOL, QpProblem, solve_qp
from .tasks import Task

Array = np.ndarray


class S0EmptyError(RuntimeError):
    """The non-negotiable rows admit no torque at all.

    Carries (label, magnitude) pairs for every row violated at the
    least-infeasible point, worst first.
    """

    def __init__(self, violations: list[tuple[str, float]]):
        self.violations = violations
        worst = ", ".join(f"{lab} by {mag:.3g}" for lab, mag in violations)
        super().__init__(f"strict constraint set is empty; violated rows: {worst}")

    @property
    def most_violated(self) -> str:
        return self.violations[0][0]


class CascadeInfeasibleError(RuntimeError):
    """A priority level failed to solve (hard rows clashed, or the
    iteration limit was hit)."""

    def __init__(self, level: int, status: str):
        self.level = level
        self.status = status
        super().__init__(f"priority level {level} ended with status '{status}'")


@dataclass
class LevelRecord:
    """What one priority level did: its optimum, slack, objective value
    1/2 ||A u - b||^2 + rho/2 delta^2, the residual of all equality rows
    inherited from earlier levels, and which inequality rows were tight."""
    level: int
    status: str
    u: Array
    delta: float
    objective: float
    eq_residual: float
    active_rows: tuple[str, ...]
    iterations: int


@dataclass
class StageLedger:
    """Monotonically growing constraint stack shared across levels.

    Inequality rows installed at stage 0 (the first n_strict of A_in)
    are the non-negotiable ones; everything after them was frozen in by
    some solved level. Row counts never shrink.
    """
    n: int
    A_eq: Array
    b_eq: Array
    eq_labels: list[str]
    A_in: Array
    b_in: Array
    in_labels: list[str]
    n_strict: int
    witness: Array
    phase1_used: bool
    level: int = 0
    records: list[LevelRecord] = field(default_factory=list)

    def eq_violation(self, u: Array) -> float:
        if not self.A_eq.shape[0]:
            return 0.0
        return float(np.max(np.abs(self.A_eq @ u - self.b_eq)))

    def in_violation(self, u: Array) -> float:
        if not self.A_in.shape[0]:
            return 0.0
        return float(np.max(self.b_in - self.A_in @ u, initial=0.0))

    def max_violation(self, u: Array) -> float:
        return max(self.eq_violation(u), self.in_violation(u))

    def strict_tight_rows(self, u: Array, tol: float = FEAS_TOL) -> tuple[str, ...]:
        """Labels of stage-0 inequality rows active at u."""
        names = []
        for i in range(self.n_strict):
            resid = self.A_in[i] @ u - self.b_in[i]
            if abs(resid) <= tol * (1.0 + abs(self.b_in[i])):
                names.append(self.in_labels[i])
        return tuple(names)

    def snapshot(self) -> "StageLedger":
        return copy.deepcopy(self)


@dataclass(frozen=True)
class LevelSpec:
    """One priority level: an equality task, an inequality task, or both,
    plus the slack penalty weight."""
    equality: Task | None = None
    inequality: Task | None = None
    rho: float = 1e3

    def __post_init__(self):
        if self.equality is None and self.inequality is None:
            raise ValueError("a level needs at least one task")
        if self.equality is not None and self.equality.kind != "eq":
            raise ValueError("equality slot holds a task of kind 'ineq'")
        if self.inequality is not None and self.inequality.kind != "ineq":
            raise ValueError("inequality slot holds a task of kind 'eq'")
        if self.inequality is not None and self.rho <= 0.0:
            raise ValueError("rho must be > 0 when an inequality task is present")


@dataclass
class HqpResult:
    """Outcome of a full cascade run.

    feasible means u_final satisfies every row the ledger ever
    accumulated within 1e-8 and every level reported an optimum.
    """
    u_final: Array
    records: list[LevelRecord]
    feasible: bool
    eq_residual: float
    max_violation: float
    active_strict_rows: tuple[str, ...]
    phase1_used: bool


def init_stage0(strict_tasks: list[Task], witness: Array | None = None,
                n: int | None = None) -> StageLedger:
    """Install the non-negotiable rows and prove them satisfiable.

    If a witness torque is supplied and already satisfies every row, the
    feasibility QP is skipped entirely (the common case inside a control
    loop, where the previous torque is such a witness). Raises
    S0EmptyError when no torque satisfies the rows.
    """
    tasks = list(strict_tasks)
    for t in tasks:
        if t.slack is not None and np.any(t.slack > 0.0):
            raise ValueError(
                f"strict task '{t.label}' carries slack coefficients")
    if tasks:
        n = tasks[0].A.shape[1]
    elif n is None:
        raise ValueError("n is required when there are no strict tasks")

    eq = [t for t in tasks if t.kind == "eq"]
    ineq = [t for t in tasks if t.kind == "ineq"]
    A_eq = np.vstack([t.A for t in eq]) if eq else np.zeros((0, n))
    b_eq = np.concatenate([t.b for t in eq]) if eq else np.zeros(0)
    eq_labels = [lab for t in eq for lab in t.row_labels]
    A_in = np.vstack([t.A for t in ineq]) if ineq else np.zeros((0, n))
    b_in = np.concatenate([t.b for t in ineq]) if ineq else np.zeros(0)
    in_labels = [lab for t in ineq for lab in t.row_labels]
    if any(t.A.shape[1] != n for t in tasks):
        raise ValueError("strict tasks disagree on torque dimension")

    ledger = StageLedger(n=n, A_eq=A_eq, b_eq=b_eq, eq_labels=eq_labels,
                         A_in=A_in, b_in=b_in, in_labels=in_labels,
                         n_strict=A_in.shape[0],
                         witness=np.zeros(n), phase1_used=False)

    if witness is not None:
        w = np.asarray(witness, dtype=float)
        if ledger.max_violation(w) <= FEAS_TOL:
            ledger.witness = w.copy()
            return ledger

    feas = QpProblem(H=np.zeros((n, n)), f=np.zeros(n),
                     A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in)
    sol = solve_qp(feas, anchor=witness)
    if sol.status == "infeasible":
        z = sol.z_star
        viol = [(lab, abs(float(A_eq[i] @ z - b_eq[i])))
                for i, lab in enumerate(eq_labels)]
        viol += [(lab, float(b_in[i] - A_in[i] @ z))
                 for i, lab in enumerate(in_labels)]
        viol = [(lab, v) for lab, v in viol if v > FEAS_TOL]
        viol.sort(key=lambda item: -item[1])
        if not viol:
            viol = [("unknown", float("nan"))]
        raise S0EmptyError(viol)
    if sol.status != "optimal":
        raise CascadeInfeasibleError(0, sol.status)
    ledger.witness = sol.z_star
    ledger.phase1_used = True
    return ledger


def solve_level(ledger: StageLedger, equality_task: Task | None = None,
                inequality_task: Task | None = None, rho: float = 1e3,
                regularization_anchor: Array | None = None,
                x0: Array | None = None) -> tuple[Array, float, StageLedger]:
    """Solve the next priority level and freeze its outcome into the ledger.

    Returns (u_star, delta_star, ledger). The ledger is mutated in
    place: the equality task contributes rows A u = A u_star, the
    inequality task rows C u >= d - c delta_star. Raises
    CascadeInfeasibleError if the level cannot be solved, which can only
    happen through hard (c = 0) inequality rows.
    """
    if equality_task is None and inequality_task is None:
        raise ValueError("a level needs at least one task")
    if equality_task is not None and equality_task.kind != "eq":
        raise ValueError("equality_task must have kind 'eq'")
    if inequality_task is not None and inequality_task.kind != "ineq":
        raise ValueError("inequality_task must have kind 'ineq'")
    if inequality_task is not None and rho <= 0.0:
        raise ValueError("rho must be > 0 when an inequality task is present")
    n = ledger.n
    for t in (equality_task, inequality_task):
        if t is not None and t.A.shape[1] != n:
            raise ValueError(f"task '{t.label}' has wrong torque dimension")

    slack_coef = None
    if inequality_task is not None and inequality_task.slack is not None \
            and np.any(inequality_task.slack > 0.0):
        slack_coef = inequality_task.slack
    dim = n + (1 if slack_coef is not None else 0)

    H = np.zeros((dim, dim))
    f = np.zeros(dim)
    if equality_task is not None:
        A, b = equality_task.A, equality_task.b
        H[:n, :n] += A.T @ A
        f[:n] -= A.T @ b
    if slack_coef is not None:
        H[n, n] += rho
    H = 0.5 * (H + H.T)

    def pad(M):
        if dim == n:
            return M.reshape(-1, n)
        return np.hstack([M.reshape(-1, n), np.zeros((M.shape[0], 1))])

    A_eq = pad(ledger.A_eq)
    b_eq = ledger.b_eq
    in_blocks = [pad(ledger.A_in)]
    b_blocks = [ledger.b_in]
    if inequality_task is not None:
        C, d = inequality_task.A, inequality_task.b
        if slack_coef is not None:
            in_blocks.append(np.hstack([C, slack_coef[:, None]]))
        else:
            in_blocks.append(pad(C))
        b_blocks.append(d)
    if slack_coef is not None:
        e_delta = np.zeros((1, dim))
        e_delta[0, n] = 1.0
        in_blocks.append(e_delta)
        b_blocks.append(np.zeros(1))
    A_in = np.vstack(in_blocks)
    b_in = np.concatenate(b_blocks)

    anchor = np.zeros(dim)
    if regularization_anchor is not None:
        anchor[:n] = regularization_anchor

    start = None
    if x0 is not None:
        start = np.zeros(dim)
        start[:n] = x0
        if slack_coef is not None:
            need = inequality_task.b - inequality_task.A @ x0
            pos = slack_coef > 0.0
            if np.any(pos):
                start[n] = max(0.0, float(np.max(need[pos] / slack_coef[pos])))

    prob = QpProblem(H=H, f=f, A_eq=A_eq, b_eq=b_eq, A_in=A_in, b_in=b_in)
    sol = solve_qp(prob, anchor=anchor, x0=start)
    level = ledger.level + 1
    if sol.status != "optimal":
        if slack_coef is not None and inequality_task is not None \
                and np.all(slack_coef > 0.0) and sol.status == "infeasible":
            raise AssertionError(
                "slack-relaxed level reported infeasible over a feasible ledger")
        raise CascadeInfeasibleError(level, sol.status)

    u_star = sol.z_star[:n].copy()
    delta = float(sol.z_star[n]) if slack_coef is not None else 0.0

    objective = 0.0
    if equality_task is not None:
        r = equality_task.A @ u_star - equality_task.b
        objective += 0.5 * float(r @ r)
    if slack_coef is not None:
        objective += 0.5 * rho * delta * delta
    eq_residual = ledger.eq_violation(u_star)

    labels = list(ledger.in_labels)
    if inequality_task is not None:
        labels += [f"level{level}:{lab}" for lab in inequality_task.row_labels]
    if slack_coef is not None:
        labels += [f"level{level}:slack"]
    active = tuple(labels[i] for i in range(A_in.shape[0])
                   if abs(A_in[i] @ sol.z_star - b_in[i])
                   <= FEAS_TOL * (1.0 + abs(b_in[i])))

    if equality_task is not None:
        ledger.A_eq = np.vstack([ledger.A_eq, equality_task.A])
        ledger.b_eq = np.concatenate([ledger.b_eq, equality_task.A @ u_star])
        ledger.eq_labels += [f"level{level}:{lab}"
                             for lab in equality_task.row_labels]
    if inequality_task is not None:
        c = inequality_task.slack
        frozen_b = inequality_task.b - (c * delta if c is not None else 0.0)
        ledger.A_in = np.vstack([ledger.A_in, inequality_task.A])
        ledger.b_in = np.concatenate([ledger.b_in, frozen_b])
        ledger.in_labels += [f"level{level}:{lab}"
                             for lab in inequality_task.row_labels]

    ledger.level = level
    ledger.witness = u_star
    ledger.records.append(LevelRecord(
        level=level, status=sol.status, u=u_star, delta=delta,
        objective=objective, eq_residual=eq_residual, active_rows=active,
        iterations=sol.iterations))
    return u_star, delta, ledger


def run_cascade(strict_tasks: list[Task], levels: list[LevelSpec],
                u_nom: Array, x0: Array | None = None) -> HqpResult:
    """Run the full priority cascade and report the final torque.

    u_nom doubles as the regularization anchor of every level and as the
    default feasibility witness for stage 0; x0, when given (typically
    the previous control step's torque), takes over the witness role and
    warm-starts level 1.
    """
    u_nom = np.asarray(u_nom, dtype=float)
    witness = x0 if x0 is not None else u_nom
    ledger = init_stage0(strict_tasks, witness=witness, n=u_nom.shape[0])
    u = ledger.witness
    for spec in levels:
        u, _, ledger = solve_level(
            ledger, spec.equality, spec.inequality, rho=spec.rho,
            regularization_anchor=u_nom, x0=u)
    eq_residual = ledger.eq_violation(u)
    max_violation = ledger.max_violation(u)
    feasible = (max_violation <= 1e-8
                and all(r.status == "optimal" for r in ledger.records))
    return HqpResult(u_final=u, records=ledger.records, feasible=feasible,
                     eq_residual=eq_residual, max_violation=max_violation,
                     active_strict_rows=ledger.strict_tight_rows(u),
                     phase1_used=ledger.phase1_used)
