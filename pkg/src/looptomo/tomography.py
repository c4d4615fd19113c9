"""POVM reconstruction from probe/outcome data.

Solves the convex program

    minimize  ||P - F Theta||_F + epsilon * sum_(i,n) (theta[i,n] - theta[i+1,n])^2

over matrices whose rows are probability simplexes (entrywise in [0, 1],
each Fock row summing to one). The residual norm is unsquared; the
smoothing penalty is quadratic in the first differences along the Fock
axis and is always applied through its sparse second-difference operator,
never as a dense (M+1)^2 matrix.

Solver: an operator-splitting (ADMM) phase with exact subproblem solves
(banded Cholesky of the smoothing block plus a low-rank probe update)
handles any scale; on problems small enough for dense KKT systems an
active-set Newton polish, wrapped in a majorize-minimize loop for the
unsquared norm, pushes the iterate to machine-precision optimality.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cho_solve_banded, cholesky_banded

from .errors import ConfigError
from .probe_states import ProbeMatrix, poisson_row

#: Column mass of F below which a Fock index counts as unconstrained by data.
DEFAULT_SUPPORT_THRESHOLD = 1e-3

#: Residual scale below which the norm term is treated as exactly smooth.
RESIDUAL_FLOOR = 1e-12

_POLISH_MAX_ENTRIES = 2048
_ADMM_CHECK_EVERY = 20
_ADMM_ALPHA = 1.7  # over-relaxation


@dataclass(frozen=True)
class POVMSet:
    """Diagonal POVM elements theta[i, n] = p(outcome n | i photons)."""

    theta: np.ndarray
    supported: np.ndarray | None = None

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        if theta.ndim != 2:
            raise ConfigError("POVM matrix must be two-dimensional")
        if theta.min() < -1e-12 or theta.max() > 1.0 + 1e-12:
            raise ConfigError("POVM entries must lie in [0, 1]")
        dev = np.abs(theta.sum(axis=1) - 1.0).max()
        if dev > 1e-8:
            raise ConfigError(f"POVM rows must sum to 1 (worst deviation {dev:.2e})")
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)
        if self.supported is not None:
            supported = np.asarray(self.supported, dtype=bool)
            if supported.shape != (theta.shape[0],):
                raise ConfigError("support mask length must match POVM rows")
            supported.flags.writeable = False
            object.__setattr__(self, "supported", supported)

    @property
    def truncation_dim(self) -> int:
        return self.theta.shape[0] - 1

    @property
    def n_outcomes(self) -> int:
        return self.theta.shape[1]


@dataclass(frozen=True)
class SmoothingConfig:
    """Smoothing weight and solver tolerances for reconstruct()."""

    epsilon: float
    grad_tol: float = 1e-8
    solver_tol: float = 1e-7
    max_iterations: int = 20000

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")


@dataclass(frozen=True)
class ReconstructionReport:
    objective: float
    residual: float
    penalty: float
    smoothness: float
    iterations: int
    converged: bool
    grad_norm: float
    wall_time_s: float
    epsilon: float
    n_unsupported: int
    objective_trace: tuple = field(repr=False, default=())


def project_rows_to_simplex(y: np.ndarray) -> np.ndarray:
    """Euclidean projection of every row onto {x >= 0, sum x = 1}.

    Sort-based algorithm, O(N log N) per row, vectorized over rows.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    u = np.sort(y, axis=1)[:, ::-1]
    css = np.cumsum(u, axis=1) - 1.0
    ks = np.arange(1, y.shape[1] + 1)
    k = ((u - css / ks) > 0).sum(axis=1)
    tau = css[np.arange(y.shape[0]), k - 1] / k
    return np.maximum(y - tau[:, None], 0.0)


def smoothness_seminorm(theta: np.ndarray) -> float:
    """Sum of squared first differences along the Fock axis."""
    d = np.diff(theta, axis=0)
    return float((d * d).sum())


def _smoothness_grad(theta: np.ndarray) -> np.ndarray:
    g = np.zeros_like(theta)
    d = theta[:-1] - theta[1:]
    g[:-1] += d
    g[1:] -= d
    return 2.0 * g


def _objective(F, P, theta, epsilon):
    resid = float(np.linalg.norm(P - F @ theta))
    s = smoothness_seminorm(theta)
    return resid + epsilon * s, resid, s


class _ThetaSolver:
    """Exact solve of (2 eps DtD + rho I + rho F^T F) X = B.

    The smoothing-plus-identity block is tridiagonal (banded Cholesky in
    O(M)); the probe Gram term has rank at most the number of probes and
    enters through a Woodbury correction with a dense probe-sized factor.
    """

    def __init__(self, F: np.ndarray, epsilon: float, rho: float):
        m1 = F.shape[1]
        diag = np.full(m1, rho)
        if m1 == 1:
            ab = np.zeros((1, 1))
            ab[0, 0] = diag[0]
        else:
            diag[0] += 2 * epsilon
            diag[-1] += 2 * epsilon
            diag[1:-1] += 4 * epsilon
            ab = np.zeros((2, m1))
            ab[0, 1:] = -2 * epsilon
            ab[1, :] = diag
        self._cb = cholesky_banded(ab, lower=False)
        self._F = F
        k_inv_ft = cho_solve_banded((self._cb, False), F.T)
        self._wf = cho_factor(np.eye(F.shape[0]) / rho + F @ k_inv_ft)
        self._k_inv_ft = k_inv_ft

    def solve(self, b: np.ndarray) -> np.ndarray:
        y = cho_solve_banded((self._cb, False), b)
        return y - self._k_inv_ft @ cho_solve(self._wf, self._F @ y)


def _admm_phase(F, P, epsilon, cfg: SmoothingConfig, max_iter: int | None = None):
    """Splitting phase. Returns (best feasible theta, best objective,
    iterations, trace, residuals_met)."""
    if max_iter is None:
        max_iter = cfg.max_iterations
    n_probes, m1 = F.shape
    n_out = P.shape[1]
    rho = 1.0
    theta = np.full((m1, n_out), 1.0 / n_out)
    z = theta.copy()
    r_block = P - F @ theta
    u1 = np.zeros_like(P)
    u2 = np.zeros_like(theta)
    solver = _ThetaSolver(F, epsilon, rho)
    best = z.copy()
    best_obj, _, _ = _objective(F, P, best, epsilon)
    trace = [best_obj]
    norm_primal = np.sqrt(P.size + theta.size)
    norm_dual = np.sqrt(theta.size)
    met = False
    it = 0
    for it in range(1, max_iter + 1):
        b = rho * (F.T @ (P - r_block + u1)) + rho * (z - u2)
        theta = solver.solve(b)
        f_theta = F @ theta
        # over-relaxation
        f_relaxed = _ADMM_ALPHA * f_theta + (1 - _ADMM_ALPHA) * (P - r_block)
        t_relaxed = _ADMM_ALPHA * theta + (1 - _ADMM_ALPHA) * z
        v = P - f_relaxed + u1
        nv = np.linalg.norm(v)
        r_block = v * max(0.0, 1.0 - 1.0 / (rho * max(nv, 1e-300)))
        z_old = z
        z = project_rows_to_simplex(t_relaxed + u2)
        u1 += P - f_relaxed - r_block
        u2 += t_relaxed - z
        if it % _ADMM_CHECK_EVERY == 0 or it == max_iter:
            pr = np.sqrt(
                np.linalg.norm(P - f_theta - r_block) ** 2
                + np.linalg.norm(theta - z) ** 2
            )
            dr = rho * np.linalg.norm(z - z_old)
            obj, _, _ = _objective(F, P, z, epsilon)
            if obj < best_obj:
                best_obj, best = obj, z
            trace.append(best_obj)
            if max(pr / norm_primal, dr / norm_dual) < cfg.solver_tol:
                met = True
                break
            # residual balancing
            if pr > 10 * dr:
                rho *= 2.0
                u1 /= 2.0
                u2 /= 2.0
                solver = _ThetaSolver(F, epsilon, rho)
            elif dr > 10 * pr:
                rho /= 2.0
                u1 *= 2.0
                u2 *= 2.0
                solver = _ThetaSolver(F, epsilon, rho)
    return best, best_obj, it, trace, met


def _active_set_qp(Q, b_flat, x0, max_pivots, tol):
    """min 0.5 x^T kron(Q, I_N) x - b^T x, rows sum to one, x >= 0.

    Dense KKT active-set solve; x0 must be feasible. Returns (x, optimal).
    """
    m1 = Q.shape[0]
    n_out = x0.size // m1
    x = x0.ravel().copy()
    pinned = x <= 0.0
    rows = np.repeat(np.arange(m1), n_out)
    for _ in range(max_pivots):
        free = ~pinned
        fi = np.where(free)[0]
        i_idx = fi // n_out
        n_idx = fi % n_out
        h_ff = Q[np.ix_(i_idx, i_idx)] * (n_idx[:, None] == n_idx[None, :])
        a_f = np.zeros((m1, fi.size))
        a_f[i_idx, np.arange(fi.size)] = 1.0
        kkt = np.block([[h_ff, a_f.T], [a_f, np.zeros((m1, m1))]])
        rhs = np.concatenate([b_flat[fi], np.ones(m1)])
        try:
            sol = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
        lam = sol[fi.size:]
        x_eq = np.zeros_like(x)
        x_eq[fi] = sol[: fi.size]
        step = x_eq - x
        if np.abs(step).max() > 1e-14:
            with np.errstate(divide="ignore", invalid="ignore"):
                ratios = np.where(step < -1e-300, x / -step, np.inf)
            ratios[pinned] = np.inf
            blocking = float(ratios.min())
            alpha = min(1.0, blocking)
            x = np.maximum(x + alpha * step, 0.0)
            if alpha < 1.0:
                j = int(np.argmin(ratios))
                pinned[j] = True
                x[j] = 0.0
                continue
        grad = (Q @ x.reshape(m1, n_out)).ravel() - b_flat
        multipliers = np.where(pinned, grad + lam[rows], np.inf)
        j = int(np.argmin(multipliers))
        gscale = max(1.0, float(np.abs(grad).max()))
        if multipliers[j] >= -tol * gscale:
            return x.reshape(m1, n_out), True
        pinned[j] = False
    return x.reshape(m1, n_out), False


def _polish_phase(F, P, epsilon, theta, cfg: SmoothingConfig, trace):
    """Majorize-minimize outer loop with active-set inner solves.

    Each outer iteration replaces the unsquared residual norm by its
    quadratic majorizer at the current residual scale s (floored at
    RESIDUAL_FLOOR) and solves the resulting QP exactly.
    """
    m1 = F.shape[1]
    dtd = np.zeros((m1, m1))
    idx = np.arange(m1)
    dtd[idx, idx] = 2.0
    dtd[0, 0] = dtd[-1, -1] = 1.0
    if m1 > 1:
        dtd[idx[:-1], idx[:-1] + 1] = -1.0
        dtd[idx[:-1] + 1, idx[:-1]] = -1.0
    ftf = F.T @ F
    ftp = F.T @ P
    prev_obj, _, _ = _objective(F, P, theta, epsilon)
    any_solved = False
    stationary = False
    for _ in range(60):
        resid = float(np.linalg.norm(P - F @ theta))
        s = max(resid, RESIDUAL_FLOOR)
        q_mat = ftf / s + 2.0 * epsilon * dtd
        theta_new, solved = _active_set_qp(
            q_mat, (ftp / s).ravel(), theta, max_pivots=400, tol=cfg.grad_tol
        )
        obj, _, _ = _objective(F, P, theta_new, epsilon)
        improved = obj < prev_obj - 1e-15 * max(1.0, prev_obj)
        if obj <= prev_obj:
            theta = theta_new
            trace.append(obj)
            prev_obj = obj
            any_solved = any_solved or solved
        if not improved:
            # numerical floor of the majorize-minimize loop
            stationary = True
            break
    return theta, any_solved and stationary


def _as_matrix(f_or_matrix) -> np.ndarray:
    if isinstance(f_or_matrix, ProbeMatrix):
        return f_or_matrix.values
    return np.asarray(f_or_matrix, dtype=float)


def _as_outcomes(p_or_matrix) -> np.ndarray:
    values = getattr(p_or_matrix, "values", p_or_matrix)
    return np.atleast_2d(np.asarray(values, dtype=float))


def reconstruct(
    probe_matrix,
    outcomes,
    cfg: SmoothingConfig,
    support_threshold: float = DEFAULT_SUPPORT_THRESHOLD,
) -> tuple[POVMSet, ReconstructionReport]:
    """Reconstruct the POVM set from probe matrix F and outcome matrix P.

    Parameters
    ----------
    probe_matrix : ProbeMatrix or (D, M+1) array
    outcomes : OutcomeMatrix or (D, N) array
    cfg : SmoothingConfig
    support_threshold : float
        Fock columns of F with total mass below this are reported as
        unconstrained by data (the smoothing interpolates them).

    Returns
    -------
    (POVMSet, ReconstructionReport)
        The POVM carries a per-row support mask; non-convergence is
        flagged in the report, never raised.
    """
    F = _as_matrix(probe_matrix)
    P = _as_outcomes(outcomes)
    if F.ndim != 2:
        raise ConfigError("probe matrix must be two-dimensional")
    if F.shape[0] != P.shape[0]:
        raise ConfigError(
            f"probe matrix has {F.shape[0]} rows but outcome matrix {P.shape[0]}"
        )
    t_start = time.perf_counter()
    can_polish = (F.shape[1] * P.shape[1]) <= _POLISH_MAX_ENTRIES
    admm_cap = min(cfg.max_iterations, 2000) if can_polish else None
    theta, best_obj, iterations, trace, admm_met = _admm_phase(
        F, P, cfg.epsilon, cfg, max_iter=admm_cap
    )
    polished = False
    if can_polish:
        theta, polished = _polish_phase(F, P, cfg.epsilon, theta, cfg, trace)
    theta = project_rows_to_simplex(theta)
    obj, resid, smooth = _objective(F, P, theta, cfg.epsilon)

    # projected-gradient mapping of the norm-smoothed objective, reported
    # relative to the gradient magnitude so it stays meaningful when the
    # residual (and with it the smoothing scale s) collapses to zero
    s = max(resid, RESIDUAL_FLOOR)
    grad = F.T @ (F @ theta - P) / s + cfg.epsilon * _smoothness_grad(theta)
    lip = np.linalg.norm(F, 2) ** 2 / s + 8.0 * cfg.epsilon
    step = 1.0 / lip
    mapping = (
        np.linalg.norm(theta - project_rows_to_simplex(theta - step * grad)) / step
    )
    grad_norm = float(mapping / max(1.0, np.linalg.norm(grad)))

    column_mass = F.sum(axis=0)
    supported = column_mass > support_threshold
    report = ReconstructionReport(
        objective=obj,
        residual=resid,
        penalty=cfg.epsilon * smooth,
        smoothness=smooth,
        iterations=iterations,
        converged=bool(admm_met or polished),
        grad_norm=grad_norm,
        wall_time_s=time.perf_counter() - t_start,
        epsilon=cfg.epsilon,
        n_unsupported=int((~supported).sum()),
        objective_trace=tuple(trace),
    )
    return POVMSet(theta, supported), report


def dark_count_probability(povm: POVMSet) -> float:
    """Probability of any click on vacuum input: 1 - theta[0, 0]."""
    return float(1.0 - povm.theta[0, 0])


@dataclass(frozen=True)
class UncertaintyBand:
    lo: np.ndarray
    hi: np.ndarray
    n_mc: int
    amplitude_rel_err: float
    mode: str


def uncertainty_band(
    probe_matrix: ProbeMatrix,
    outcomes,
    cfg: SmoothingConfig,
    amplitude_rel_err: float = 0.05,
    n_mc: int = 16,
    seed: int = 0,
    mode: str = "envelope",
) -> UncertaintyBand:
    """Monte-Carlo band from probe amplitude calibration uncertainty.

    Each draw scales every probe amplitude by an independent (1 + delta),
    delta uniform within +-amplitude_rel_err, i.e. scales the mean photon
    number by (1 + delta)^2, rebuilds F and reconstructs. ``mode`` selects
    a min/max envelope (default) or a mean +- one-standard-deviation band.
    """
    if n_mc < 2:
        raise ConfigError(f"n_mc must be >= 2, got {n_mc}")
    if mode not in ("envelope", "std"):
        raise ConfigError(f"unknown band mode {mode!r}")
    if not isinstance(probe_matrix, ProbeMatrix):
        raise ConfigError("uncertainty_band needs a ProbeMatrix carrying probe means")
    means = probe_matrix.mean_photons
    trunc = probe_matrix.truncation_dim
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    samples = []
    for _ in range(n_mc):
        delta = rng.uniform(-amplitude_rel_err, amplitude_rel_err, size=means.size)
        scaled = means * (1.0 + delta) ** 2
        f_mc = np.vstack([poisson_row(m, trunc) for m in scaled])
        povm, _ = reconstruct(f_mc, outcomes, cfg)
        samples.append(povm.theta)
    stack = np.stack(samples)
    if mode == "envelope":
        lo, hi = stack.min(axis=0), stack.max(axis=0)
    else:
        mean, std = stack.mean(axis=0), stack.std(axis=0)
        lo, hi = mean - std, mean + std
    return UncertaintyBand(lo, hi, n_mc, amplitude_rel_err, mode)


@dataclass(frozen=True)
class SweepPoint:
    epsilon: float
    residual: float
    smoothness: float
    objective: float


@dataclass(frozen=True)
class SweepResult:
    points: tuple[SweepPoint, ...]
    corner_epsilon: float
    warnings: tuple[str, ...]


def l_curve_corner(points) -> float:
    """Epsilon at the maximum-curvature point of the log-log L-curve."""
    pts = sorted(points, key=lambda p: p.epsilon)
    if len(pts) < 3:
        return pts[0].epsilon
    x = np.log10(np.maximum([p.residual for p in pts], 1e-15))
    y = np.log10(np.maximum([p.smoothness for p in pts], 1e-30))
    best_eps = pts[1].epsilon
    best_curv = -1.0
    for k in range(1, len(pts) - 1):
        a = np.array([x[k] - x[k - 1], y[k] - y[k - 1]])
        b = np.array([x[k + 1] - x[k], y[k + 1] - y[k]])
        c = np.array([x[k + 1] - x[k - 1], y[k + 1] - y[k - 1]])
        denom = np.linalg.norm(a) * np.linalg.norm(b) * np.linalg.norm(c)
        if denom == 0:
            continue
        curv = 2.0 * abs(a[0] * b[1] - a[1] * b[0]) / denom
        if curv > best_curv:
            best_curv = curv
            best_eps = pts[k].epsilon
    return best_eps


def epsilon_sweep(
    probe_matrix,
    outcomes,
    epsilons,
    grad_tol: float = 1e-8,
    solver_tol: float = 1e-7,
    max_iterations: int = 20000,
) -> SweepResult:
    """Reconstruct at each smoothing weight; collect the L-curve.

    The residual should be nondecreasing and the smoothness seminorm
    nonincreasing in epsilon; violations (beyond solver tolerance) are
    reported as warnings, not errors.
    """
    eps_list = sorted(float(e) for e in epsilons)
    if not eps_list:
        raise ConfigError("epsilon sweep needs at least one value")
    points = []
    for eps in eps_list:
        cfg = SmoothingConfig(
            epsilon=eps,
            grad_tol=grad_tol,
            solver_tol=solver_tol,
            max_iterations=max_iterations,
        )
        _, report = reconstruct(probe_matrix, outcomes, cfg)
        points.append(
            SweepPoint(eps, report.residual, report.smoothness, report.objective)
        )
    warnings_list = []
    slack = 10 * max(grad_tol, 1e-12)
    for prev, cur in zip(points, points[1:]):
        if cur.residual < prev.residual - slack:
            warnings_list.append(
                f"residual decreased from eps={prev.epsilon:g} to {cur.epsilon:g}"
            )
        if cur.smoothness > prev.smoothness + slack:
            warnings_list.append(
                f"smoothness increased from eps={prev.epsilon:g} to {cur.epsilon:g}"
            )
    return SweepResult(tuple(points), l_curve_corner(points), tuple(warnings_list))
