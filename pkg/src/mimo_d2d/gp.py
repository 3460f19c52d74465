"""Self-contained optimization kernel: monomial/posynomial algebra,
geometric programs in standard form, and a linear-feasibility solver.

Geometric programs are solved after the substitution x = exp(y): posynomial
constraints become log-sum-exp functions, monomial equalities become affine,
and the resulting smooth convex program is minimized with a log-barrier
interior-point method (Newton steps with backtracking line search). The
linear-feasibility path reuses the same barrier kernel on an epigraph
reformulation, so one numerical engine backs both entry points.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sparse

logger = logging.getLogger(__name__)


class GPInfeasibleError(RuntimeError):
    """Problem proven infeasible; `margin` is the minimal phase-1 slack."""

    def __init__(self, message, margin):
        super().__init__(message)
        self.margin = margin


class GPSolverError(RuntimeError):
    """Numerical failure (iteration limit or line-search stall)."""


# --- posynomial algebra -----------------------------------------------------

def _clean_exponents(exponents):
    out = {}
    for var, exp in exponents.items():
        e = float(exp)
        if not math.isfinite(e):
            raise ValueError(f"non-finite exponent for {var}")
        if e != 0.0:
            out[str(var)] = e
    return out


@dataclass(frozen=True)
class Monomial:
    """coeff * prod(var ** exponent); coeff must be positive and finite."""

    coeff: float
    exponents: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (math.isfinite(self.coeff) and self.coeff > 0.0):
            raise ValueError("monomial coefficient must be positive and finite")
        object.__setattr__(self, "exponents", _clean_exponents(self.exponents))

    def value(self, point):
        v = self.coeff
        for var, exp in self.exponents.items():
            v *= point[var] ** exp
        return v

    def __mul__(self, other):
        if isinstance(other, Monomial):
            exps = dict(self.exponents)
            for var, exp in other.exponents.items():
                exps[var] = exps.get(var, 0.0) + exp
            return Monomial(self.coeff * other.coeff, exps)
        if isinstance(other, (int, float)):
            return Monomial(self.coeff * other, self.exponents)
        if isinstance(other, Posynomial):
            return other * self
        return NotImplemented

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Monomial):
            return self * other ** -1.0
        if isinstance(other, (int, float)):
            return Monomial(self.coeff / other, self.exponents)
        return NotImplemented

    def __pow__(self, power):
        power = float(power)
        return Monomial(self.coeff ** power,
                        {v: e * power for v, e in self.exponents.items()})

    def __add__(self, other):
        return Posynomial([self]) + other

    __radd__ = __add__


def variable(name) -> Monomial:
    return Monomial(1.0, {name: 1.0})


class Posynomial:
    """Sum of monomials; closed under addition, multiplication and division
    by a monomial. Anything that would produce a negative coefficient (a
    signomial) is rejected by construction."""

    __slots__ = ("terms",)

    def __init__(self, terms):
        terms = tuple(t if isinstance(t, Monomial) else Monomial(float(t)) for t in terms)
        if not terms:
            raise ValueError("posynomial needs at least one term")
        self.terms = terms

    def value(self, point):
        return sum(t.value(point) for t in self.terms)

    def variables(self):
        out = set()
        for t in self.terms:
            out.update(t.exponents)
        return out

    def __add__(self, other):
        if isinstance(other, Posynomial):
            return Posynomial(self.terms + other.terms)
        if isinstance(other, Monomial):
            return Posynomial(self.terms + (other,))
        if isinstance(other, (int, float)):
            if other == 0:
                return self
            return Posynomial(self.terms + (Monomial(float(other)),))
        return NotImplemented

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Posynomial):
            return Posynomial([a * b for a in self.terms for b in other.terms])
        if isinstance(other, (Monomial, int, float)):
            return Posynomial([t * other for t in self.terms])
        return NotImplemented

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (Monomial, int, float)):
            return Posynomial([t / other for t in self.terms])
        return NotImplemented

    def __len__(self):
        return len(self.terms)

    def __repr__(self):
        return f"Posynomial({len(self.terms)} terms over {sorted(self.variables())})"


def as_posynomial(obj) -> Posynomial:
    if isinstance(obj, Posynomial):
        return obj
    if isinstance(obj, Monomial):
        return Posynomial([obj])
    if isinstance(obj, (int, float)):
        return Posynomial([Monomial(float(obj))])
    raise TypeError(f"cannot interpret {type(obj)} as a posynomial")


def monomial_lower_bound(f: Posynomial, x0: dict) -> Monomial:
    """Best local monomial under-approximation of posynomial f at the
    positive point x0: weights are each term's share of f(x0), giving a
    bound that touches f at x0 with matching gradient."""
    f = as_posynomial(f)
    if any(v <= 0.0 for v in x0.values()):
        raise ValueError("expansion point must be strictly positive")
    u = np.array([t.value(x0) for t in f.terms])
    total = u.sum()
    weights = u / total
    coeff = 1.0
    exps = {}
    for t, q, uj in zip(f.terms, weights, u):
        coeff *= (uj / q) ** q if q > 0 else 1.0
        for var, e in t.exponents.items():
            exps[var] = exps.get(var, 0.0) + q * e
    # the coefficient above is prod((u_j/Q_j)^{Q_j}) evaluated at x0; divide
    # out x0's contribution to keep only the true monomial coefficient
    for var, e in exps.items():
        coeff /= x0[var] ** e
    return Monomial(coeff, exps)


# --- problem containers -----------------------------------------------------

@dataclass
class GeometricProgram:
    """minimize `objective` s.t. posy_constraints <= 1, mono_constraints == 1,
    and per-variable bounds lo <= x <= hi with 0 < lo <= hi < inf.

    Every variable must have finite bounds; the compact box rules out
    unbounded programs by construction.
    """

    objective: Posynomial
    posy_constraints: list = field(default_factory=list)
    mono_constraints: list = field(default_factory=list)
    bounds: dict = field(default_factory=dict)

    def __post_init__(self):
        self.objective = as_posynomial(self.objective)
        self.posy_constraints = [as_posynomial(c) for c in self.posy_constraints]
        for g in self.mono_constraints:
            if not isinstance(g, Monomial):
                raise ValueError("monomial equality constraints must be Monomial")
        for var, (lo, hi) in self.bounds.items():
            if not (0.0 < lo <= hi < math.inf):
                raise ValueError(f"bounds for {var} must satisfy 0 < lo <= hi < inf")

    def variables(self):
        out = set(self.bounds)
        out |= self.objective.variables()
        for c in self.posy_constraints:
            out |= c.variables()
        for g in self.mono_constraints:
            out |= set(g.exponents)
        return sorted(out)

    def dump(self) -> str:
        """Plain-text standard-form listing, one monomial per line."""
        def fmt(m):
            body = " ".join(f"{v}:{e:g}" for v, e in sorted(m.exponents.items()))
            return f"{m.coeff:.12g} {body}".rstrip()

        lines = ["minimize"]
        lines += ["  " + fmt(t) for t in self.objective.terms]
        for i, c in enumerate(self.posy_constraints):
            lines.append(f"subject_to[{i}] <= 1")
            lines += ["  " + fmt(t) for t in c.terms]
        for i, g in enumerate(self.mono_constraints):
            lines.append(f"equality[{i}] == 1")
            lines.append("  " + fmt(g))
        lines.append("bounds")
        for var in self.variables():
            lo, hi = self.bounds[var]
            lines.append(f"  {var} in [{lo:.12g}, {hi:.12g}]")
        return "\n".join(lines)


@dataclass
class LinearFeasibilityProblem:
    """Rows a @ x <= c over the box 0 <= x <= upper."""

    a: np.ndarray
    c: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.a = np.atleast_2d(np.asarray(self.a, dtype=float))
        self.c = np.asarray(self.c, dtype=float).ravel()
        self.upper = np.asarray(self.upper, dtype=float).ravel()
        if self.a.shape != (self.c.size, self.upper.size):
            raise ValueError("inconsistent LP dimensions")
        if not np.all(np.isfinite(self.a)) or not np.all(np.isfinite(self.c)):
            raise ValueError("LP coefficients must be finite")
        if np.any(self.upper <= 0.0):
            raise ValueError("box upper bounds must be positive")


@dataclass
class SolverSettings:
    """tol is the duality-gap target of the barrier (the KKT residual of the
    barrier-perturbed optimality system); feas_tol the scaled feasibility
    threshold used by lp_feasible."""

    tol: float = 1e-8
    feas_tol: float = 1e-9
    newton_tol: float = 1e-11
    max_iter: int = 500
    barrier_t0: float = 1.0
    barrier_mu: float = 10.0
    backtrack: float = 0.5
    armijo: float = 0.01


@dataclass
class GPSolution:
    values: dict
    objective: float
    log_objective: float
    status: str
    newton_iterations: int
    duality_gap: float


@dataclass
class LPFeasibility:
    feasible: bool
    witness: np.ndarray
    margin: float  # minimal scaled slack; <= feas_tol means feasible


# --- stacked log-sum-exp machinery -------------------------------------------

class _Stack:
    """m smooth functions f_i(y) = logsumexp over that segment's rows of
    (E y + d). Single-row segments are exactly affine."""

    def __init__(self, rows, cols, data, offsets, seg_ptr, n_vars):
        coo = sparse.coo_matrix((data, (rows, cols)), shape=(len(offsets), n_vars))
        self.E = coo.tocsr()
        self.ET = self.E.T.tocsr()
        self.d = np.asarray(offsets, dtype=float)
        self.ptr = np.asarray(seg_ptr, dtype=int)
        self.m = len(self.ptr) - 1
        self.seg_index = np.repeat(np.arange(self.m), np.diff(self.ptr))

    def values(self, y):
        z = self.E @ y + self.d
        zmax = np.maximum.reduceat(z, self.ptr[:-1])
        w = np.exp(z - zmax[self.seg_index])
        sums = np.add.reduceat(w, self.ptr[:-1])
        return np.log(sums) + zmax, w / sums[self.seg_index]

    def gradients(self, weights):
        """Dense (m, n) matrix of segment gradients given softmax weights."""
        agg = sparse.csr_matrix(
            (weights, (self.seg_index, np.arange(weights.size))),
            shape=(self.m, weights.size))
        return np.asarray((agg @ self.E).todense())

    def weighted_hessian(self, weights, seg_scale, grads):
        """sum_i seg_scale[i] * Hess f_i as a dense matrix."""
        term_scale = weights * seg_scale[self.seg_index]
        h1 = np.asarray((self.ET @ sparse.diags(term_scale) @ self.E).todense())
        h2 = grads.T @ (seg_scale[:, None] * grads)
        return h1 - h2


def _stack_from_posynomials(posys, var_index, extra_cols=()):
    """Compile posynomials into one stack; extra_cols maps a variable name
    appended to every term (used for the phase-1 slack column)."""
    rows, cols, data, offsets, ptr = [], [], [], [], [0]
    r = 0
    for posy, extras in posys:
        for t in posy.terms:
            for var, exp in t.exponents.items():
                rows.append(r)
                cols.append(var_index[var])
                data.append(exp)
            for var, coefficient in extras:
                rows.append(r)
                cols.append(var_index[var])
                data.append(coefficient)
            offsets.append(math.log(t.coeff))
            r += 1
        ptr.append(r)
    return _Stack(rows, cols, data, offsets, ptr, len(var_index))


def _stack_from_affine(a, c, n_vars, col_offset=0, slack_col=None):
    """One affine row per segment: a @ x - c (- s)."""
    rows, cols, data, offsets, ptr = [], [], [], [], [0]
    r = 0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            if a[i, j] != 0.0:
                rows.append(r)
                cols.append(col_offset + j)
                data.append(a[i, j])
        if slack_col is not None:
            rows.append(r)
            cols.append(slack_col)
            data.append(-1.0)
        offsets.append(-c[i])
        r += 1
        ptr.append(r)
    return _Stack(rows, cols, data, offsets, ptr, n_vars)


def _merge_stacks(stacks, n_vars):
    rows, cols, data, offsets, ptr = [], [], [], [], [0]
    shift = 0
    for st in stacks:
        coo = st.E.tocoo()
        rows.extend(coo.row + shift)
        cols.extend(coo.col)
        data.extend(coo.data)
        offsets.extend(st.d)
        ptr.extend(st.ptr[1:] + shift)
        shift += st.d.size
    return _Stack(rows, cols, data, offsets, ptr, n_vars)


# --- barrier kernel ----------------------------------------------------------

class _BarrierBudget:
    def __init__(self, limit):
        self.limit = limit
        self.used = 0

    def spend(self):
        self.used += 1
        if self.used > self.limit:
            raise GPSolverError(f"iteration limit ({self.limit} Newton steps) exceeded")


def _newton_centering(obj_stack, con_stack, y, t, settings, budget,
                      a_eq=None, early_exit=None):
    """Minimize t*f0 + barrier at fixed t; returns the centered point."""
    m = con_stack.m

    def barrier_value(point):
        f, _ = con_stack.values(point)
        if np.any(f >= 0.0):
            return np.inf, f
        f0, _ = obj_stack.values(point)
        return t * f0[0] - np.log(-f).sum(), f

    phi, f_con = barrier_value(y)
    for _ in range(100):  # per-centering cap; the path tolerates inexact centers
        budget.spend()
        f0, w0 = obj_stack.values(y)
        g0 = obj_stack.gradients(w0)[0]
        h0 = obj_stack.weighted_hessian(w0, np.ones(1), g0[None, :])
        f_con, w = con_stack.values(y)
        grads = con_stack.gradients(w)
        u = 1.0 / (-f_con)
        grad = t * g0 + grads.T @ u
        hess = (t * h0
                + con_stack.weighted_hessian(w, u, grads)
                + grads.T @ ((u * u)[:, None] * grads))

        step, _ = _solve_kkt(hess, grad, a_eq)
        decrement = -grad @ step
        # the decrement certifies suboptimality ~ decrement/t on the true
        # objective, so the threshold scales with the barrier parameter
        if decrement / 2.0 <= settings.newton_tol * max(1.0, t):
            return y
        alpha = 1.0
        while True:
            cand = y + alpha * step
            phi_cand, f_cand = barrier_value(cand)
            if phi_cand <= phi - settings.armijo * alpha * decrement:
                y, phi = cand, phi_cand
                break
            alpha *= settings.backtrack
            if alpha < 1e-14:
                # flat to machine precision; accept the current center
                return y
        if early_exit is not None and early_exit(y):
            return y
    return y


def _solve_kkt(hess, grad, a_eq):
    n = hess.shape[0]
    ridge = 0.0
    base = np.trace(hess) / n if n else 1.0
    while True:
        h = hess if ridge == 0.0 else hess + ridge * np.eye(n)
        try:
            if a_eq is None:
                step = np.linalg.solve(h, -grad)
            else:
                p = a_eq.shape[0]
                kkt = np.block([[h, a_eq.T], [a_eq, np.zeros((p, p))]])
                rhs = np.concatenate([-grad, np.zeros(p)])
                step = np.linalg.solve(kkt, rhs)[:n]
            if np.all(np.isfinite(step)):
                return step, ridge
        except np.linalg.LinAlgError:
            pass
        ridge = max(base * 1e-12, ridge * 10.0) if ridge else base * 1e-12
        if ridge > base:
            raise GPSolverError("Newton system is numerically singular")


def _barrier_path(obj_stack, con_stack, y0, settings, gap_target,
                  a_eq=None, early_exit=None):
    """Follow the central path until the duality gap m/t reaches gap_target."""
    budget = _BarrierBudget(settings.max_iter)
    y = np.array(y0, dtype=float)
    f, _ = con_stack.values(y)
    if np.any(f >= 0.0):
        raise GPSolverError("barrier start point is not strictly feasible")
    if early_exit is not None and early_exit(y):
        return y, 0, np.inf
    t = settings.barrier_t0
    while True:
        y = _newton_centering(obj_stack, con_stack, y, t, settings, budget,
                              a_eq=a_eq, early_exit=early_exit)
        if early_exit is not None and early_exit(y):
            return y, budget.used, con_stack.m / t
        if con_stack.m / t <= gap_target:
            return y, budget.used, con_stack.m / t
        t *= settings.barrier_mu


# --- geometric program entry point -------------------------------------------

def _compile_gp(gp: GeometricProgram):
    variables = gp.variables()
    missing = [v for v in variables if v not in gp.bounds]
    if missing:
        raise ValueError(f"variables without bounds: {missing}")
    var_index = {v: i for i, v in enumerate(variables)}
    n = len(variables)

    lo = np.array([gp.bounds[v][0] for v in variables])
    hi = np.array([gp.bounds[v][1] for v in variables])
    y_lo, y_hi = np.log(lo), np.log(hi)

    # box rows as one-term segments: y_i - log hi <= 0 and log lo - y_i <= 0
    box_a = np.vstack([np.eye(n), -np.eye(n)])
    box_c = np.concatenate([y_hi, -y_lo])
    eq_rows = np.zeros((len(gp.mono_constraints), n))
    eq_rhs = np.zeros(len(gp.mono_constraints))
    for i, g in enumerate(gp.mono_constraints):
        for var, exp in g.exponents.items():
            eq_rows[i, var_index[var]] = exp
        eq_rhs[i] = -math.log(g.coeff)
    return variables, var_index, n, (y_lo, y_hi), (box_a, box_c), (eq_rows, eq_rhs)


def _feasible_start(gp, var_index, n, ybounds, box, eqs, settings):
    """Strictly feasible log-space point via a phase-1 epigraph solve."""
    y_lo, y_hi = ybounds
    box_a, box_c = box
    eq_rows, eq_rhs = eqs
    center = (y_lo + y_hi) / 2.0
    if eq_rows.size:
        # project the box center onto the equality manifold
        correction = np.linalg.lstsq(eq_rows, eq_rhs - eq_rows @ center, rcond=None)[0]
        center = center + correction
        if np.any(center <= y_lo) or np.any(center >= y_hi):
            raise GPSolverError("no interior starting point satisfying the "
                                "monomial equalities inside the variable box")
    if not gp.posy_constraints:
        return center, 0

    s_col = n
    posy_stack = _stack_from_posynomials(
        [(c, [("__slack__", -1.0)]) for c in gp.posy_constraints],
        {**var_index, "__slack__": s_col})
    box_stack = _stack_from_affine(box_a, box_c, n + 1)
    cons = _merge_stacks([posy_stack, box_stack], n + 1)
    obj = _stack_from_affine(np.ones((1, 1)), np.zeros(1), n + 1, col_offset=s_col)

    plain_stack = _stack_from_posynomials([(c, []) for c in gp.posy_constraints], var_index)
    f_init, _ = plain_stack.values(center)
    y0 = np.concatenate([center, [max(f_init.max(), 0.0) + 1.0]])
    eq_pad = np.hstack([eq_rows, np.zeros((eq_rows.shape[0], 1))]) if eq_rows.size else None

    def feasible_now(point):
        vals, _ = plain_stack.values(point[:n])
        return vals.max() < -1e-7

    y, used, _ = _barrier_path(obj, cons, y0, settings,
                               gap_target=min(settings.tol, 1e-9),
                               a_eq=eq_pad, early_exit=feasible_now)
    if not feasible_now(y):
        raise GPInfeasibleError("geometric program is infeasible "
                                f"(phase-1 slack minimum {y[-1]:.3e} > 0)", float(y[-1]))
    return y[:n], used


def gp_solve(gp: GeometricProgram, settings: SolverSettings = None,
             initial: dict = None) -> GPSolution:
    """Solve a geometric program to the duality-gap target in settings.tol.

    `initial` (a strictly feasible point, per variable) skips phase 1.
    Raises GPInfeasibleError with the phase-1 margin when no feasible point
    exists, GPSolverError on iteration limit.
    """
    settings = settings or SolverSettings()
    variables, var_index, n, ybounds, box, eqs = _compile_gp(gp)
    box_a, box_c = box
    eq_rows, eq_rhs = eqs

    posy_stack = _stack_from_posynomials([(c, []) for c in gp.posy_constraints], var_index) \
        if gp.posy_constraints else None
    box_stack = _stack_from_affine(box_a, box_c, n)
    cons = _merge_stacks([posy_stack, box_stack], n) if posy_stack else box_stack
    obj = _stack_from_posynomials([(gp.objective, [])], var_index)

    phase1_used = 0
    y0 = None
    if initial is not None:
        cand = np.array([math.log(initial[v]) for v in variables])
        fvals, _ = cons.values(cand)
        if np.all(fvals < -1e-12):
            y0 = cand
    if y0 is None:
        y0, phase1_used = _feasible_start(gp, var_index, n, ybounds, box, eqs, settings)

    a_eq = eq_rows if eq_rows.size else None
    if a_eq is not None:
        # keep the start exactly on the equality manifold
        y0 = y0 + np.linalg.lstsq(a_eq, eq_rhs - a_eq @ y0, rcond=None)[0]
    y, used, gap = _barrier_path(obj, cons, y0, settings, gap_target=settings.tol,
                                 a_eq=a_eq)
    log_obj, _ = obj.values(y)
    values = {v: math.exp(y[i]) for v, i in var_index.items()}
    return GPSolution(values=values,
                      objective=float(np.exp(log_obj[0])),
                      log_objective=float(log_obj[0]),
                      status="optimal",
                      newton_iterations=used + phase1_used,
                      duality_gap=float(gap))


# --- linear feasibility entry point -------------------------------------------

def lp_feasible(lp: LinearFeasibilityProblem,
                settings: SolverSettings = None) -> LPFeasibility:
    """Phase-1 check of a @ x <= c over 0 <= x <= upper: minimize the largest
    scaled violation s; feasible iff min s <= settings.feas_tol.

    Rows are normalized by their magnitude at box scale, so the verdict is
    invariant to positive row rescaling.
    """
    settings = settings or SolverSettings()
    m, n = lp.a.shape
    scale = np.maximum.reduce([np.abs(lp.a) @ lp.upper, np.abs(lp.c),
                               np.ones(m)])
    if m and scale.max() / scale.min() > 1e12:
        logger.warning("lp_feasible: row magnitudes span %.1e, expect reduced accuracy",
                       scale.max() / scale.min())
    a = lp.a / scale[:, None]
    c = lp.c / scale

    if m == 0:
        return LPFeasibility(True, lp.upper / 2.0, -1.0)

    s_col = n
    rows = _stack_from_affine(a, c, n + 1, slack_col=s_col)
    box_a = np.vstack([np.eye(n), -np.eye(n)])
    box_c = np.concatenate([lp.upper, np.zeros(n)])
    box = _stack_from_affine(box_a, box_c, n + 1)
    cons = _merge_stacks([rows, box], n + 1)
    obj = _stack_from_affine(np.ones((1, 1)), np.zeros(1), n + 1, col_offset=s_col)

    x0 = lp.upper / 2.0
    s0 = max(float((a @ x0 - c).max()), 0.0) + 1.0
    y0 = np.concatenate([x0, [s0]])

    feas_cut = -10.0 * settings.feas_tol

    def strictly_ok(point):
        return float((a @ point[:n] - c).max()) <= feas_cut

    y, _, _ = _barrier_path(obj, cons, y0, settings,
                            gap_target=min(settings.tol, 0.25 * settings.feas_tol),
                            early_exit=strictly_ok)
    witness = y[:n]
    margin = float((a @ witness - c).max())
    return LPFeasibility(margin <= settings.feas_tol, witness, margin)
