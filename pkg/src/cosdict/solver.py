"""Non-negative sparse coding under the generalized KL divergence.

Two solvers share one objective::

    minimize_x  KL(y || D x)   subject to  x >= 0

``solve_weights`` is an active-set Newton method: it starts from the best
single atom, adds the most violating atom one at a time (with an exact
one-dimensional line search for its starting weight), and takes damped
Newton steps on the free weights. ``solve_oracle`` is plain projected
gradient descent with Armijo backtracking, kept deliberately simple so that
it can serve as an independent reference in tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

__all__ = [
    "SolverConfig",
    "SolveReport",
    "kl_divergence",
    "kl_gradient",
    "kl_hessian",
    "kkt_residual",
    "solve_weights",
    "solve_oracle",
]

_MAX_HALVINGS = 30
_EPS_BOUND = 1e-6
_ADD_RATIO = 1.0


@dataclass(frozen=True)
class SolverConfig:
    """Stopping rules and numerical guards for :func:`solve_weights`.

    Parameters
    ----------
    kkt_tol : float, default=1e-6
        Target for the KKT residual of the non-negativity constrained problem.
    max_iters : int, default=500
        Maximum number of outer iterations.
    y_floor : float, default=1e-12
        Lower bound applied to the model ``D @ x`` (never to ``y``) before
        taking logarithms or ratios.
    max_active : int or None, default=None
        Upper bound on the number of non-zero weights. ``None`` means no bound.
    """

    kkt_tol: float = 1e-6
    max_iters: int = 500
    y_floor: float = 1e-12
    max_active: int | None = None

    def __post_init__(self):
        if not self.kkt_tol > 0:
            raise ValueError(f"kkt_tol must be positive, got {self.kkt_tol}")
        if int(self.max_iters) < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.y_floor > 0:
            raise ValueError(f"y_floor must be positive, got {self.y_floor}")
        if self.max_active is not None and int(self.max_active) < 1:
            raise ValueError(f"max_active must be >= 1 or None, got {self.max_active}")


@dataclass
class SolveReport:
    objective: float
    iterations: int
    kkt_residual: float
    converged: bool
    # objective value after initialization and after every accepted step
    history: list = field(default_factory=list, repr=False)


def _dictionary_matrix(D):
    atoms = getattr(D, "atoms", D)
    atoms = np.asarray(atoms, dtype=np.float64)
    if atoms.ndim != 2 or atoms.shape[1] == 0:
        raise ValueError(f"dictionary must be a non-empty 2-D array, got shape {atoms.shape}")
    if np.any(atoms < 0) or not np.all(np.isfinite(atoms)):
        raise ValueError("dictionary atoms must be finite and non-negative")
    return atoms


def _check_target(y, n_bins):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1:
        raise ValueError(f"feature vector must be 1-D, got shape {y.shape}")
    if y.shape[0] != n_bins:
        raise ValueError(
            f"dimension mismatch: feature has {y.shape[0]} bins, dictionary has {n_bins}"
        )
    if np.any(y < 0) or not np.all(np.isfinite(y)):
        raise ValueError("feature vector must be finite and non-negative")
    if not np.any(y > 0):
        raise ValueError("silent frame")
    return y


def kl_divergence(y, yhat, y_floor=1e-12):
    """Generalized KL divergence ``sum(y*log(y/yhat) - y + yhat)``.

    ``yhat`` is floored at ``y_floor``; bins with ``y == 0`` contribute the
    floored ``yhat`` alone.
    """
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {yhat.shape}")
    if np.any(y < 0) or np.any(yhat < 0):
        raise ValueError("KL divergence requires non-negative inputs")
    yh = np.maximum(yhat, y_floor)
    pos = y > 0
    yp = y[pos]
    return float(np.sum(yp * np.log(yp / yh[pos]) - yp) + np.sum(yh))


def kl_gradient(x, y, D, y_floor=1e-12):
    """Gradient ``D.T @ (1 - y / yhat)`` of the objective at ``x``."""
    D = _dictionary_matrix(D)
    yh = np.maximum(D @ np.asarray(x, dtype=np.float64), y_floor)
    return D.T @ (1.0 - np.asarray(y, dtype=np.float64) / yh)


def kl_hessian(x, y, D, y_floor=1e-12):
    """Hessian ``D.T @ diag(y / yhat**2) @ D`` of the objective at ``x``."""
    D = _dictionary_matrix(D)
    yh = np.maximum(D @ np.asarray(x, dtype=np.float64), y_floor)
    w = np.asarray(y, dtype=np.float64) / yh**2
    return D.T @ (D * w[:, None])


def _kkt_from_gradient(g, x):
    free = x > 0
    r_free = np.max(np.abs(g[free]), initial=0.0)
    r_bound = np.max(np.maximum(-g[~free], 0.0), initial=0.0)
    return float(max(r_free, r_bound))


def kkt_residual(y, D, x, y_floor=1e-12):
    """KKT residual of ``x`` for the non-negative KL problem.

    The largest of ``|g_j|`` over positive weights and ``max(-g_j, 0)`` over
    zero weights. It is zero exactly at a stationary point.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise ValueError("weights must be non-negative")
    return _kkt_from_gradient(kl_gradient(x, y, D, y_floor), x)


class _Problem:
    """Objective evaluations for one (y, D) pair."""

    def __init__(self, y, D, y_floor):
        self.y = y
        self.D = D
        self.floor = y_floor
        self.pos = y > 0
        self.y_pos = y[self.pos]
        self.const = float(np.sum(self.y_pos * np.log(self.y_pos) - self.y_pos))

    def objective_from_model(self, model):
        yh = np.maximum(model, self.floor)
        return self.const - float(self.y_pos @ np.log(yh[self.pos])) + float(yh.sum())

    def change(self, model, delta):
        """Objective difference when the model moves from ``model`` by ``delta``.

        ``delta`` is computed from the weight step itself, never as a
        difference of two models, so tiny decreases stay resolvable.
        """
        a = np.maximum(model, self.floor)
        b = np.maximum(model + delta, self.floor)
        delta = np.where((model >= self.floor) & (model + delta >= self.floor), delta, b - a)
        return float(delta.sum() - self.y_pos @ np.log1p(delta[self.pos] / a[self.pos]))

    def model(self, x, idx=None):
        if idx is None:
            return self.D @ x
        return self.D[:, idx] @ x[idx]


def _best_single_atom(prob):
    D, y = prob.D, prob.y
    colsum = D.sum(axis=0)
    # optimal scale for each atom on its own: sum(y over support) / sum(atom)
    support_y = (D > 0).T.astype(np.float64) @ y
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(colsum > 0, support_y / colsum, 0.0)
    yh = np.maximum(D * w, prob.floor)
    kl = prob.const - prob.y_pos @ np.log(yh[prob.pos]) + yh.sum(axis=0)
    kl = np.where(w > 0, kl, np.inf)
    j = int(np.argmin(kl))
    # recompute with one reduction for both sums so y == d gives exactly 1
    support = D[:, j] > 0
    return j, float(y[support].sum() / D[support, j].sum())


def _coordinate_minimizer(prob, base_model, col):
    """Exact minimizer over ``w >= 0`` of the objective along one atom."""
    d = prob.D[:, col]
    support = d > 0
    d_s = d[support]
    r_s = base_model[support]
    y_s = prob.y[support]
    floor = prob.floor

    d_total = float(d_s.sum())

    def slope(w):
        return d_total - float(d_s @ (y_s / np.maximum(r_s + w * d_s, floor)))

    hi = max(float(y_s.sum() / d_s.sum()), 1e-12)
    for _ in range(200):
        if slope(hi) > 0:
            break
        hi *= 2.0
    else:
        return hi
    return optimize.brentq(slope, 0.0, hi, xtol=1e-15 * hi, rtol=4 * np.finfo(float).eps)


def _newton_direction(prob, model, idx, g_free):
    Da = prob.D[:, idx]
    yh = np.maximum(model, prob.floor)
    H = Da.T @ (Da * (prob.y / yh**2)[:, None])
    try:
        factor = linalg.cho_factor(H, lower=True, check_finite=False)
    except linalg.LinAlgError:
        jitter = 1e-10 * np.trace(H) / len(idx)
        if not jitter > 0:
            jitter = 1e-10
        factor = linalg.cho_factor(H + jitter * np.eye(len(idx)), lower=True, check_finite=False)
    return linalg.cho_solve(factor, -g_free, check_finite=False)


def solve_weights(y, D, config=None):
    """Non-negative weights minimizing ``KL(y || D @ x)``.

    Parameters
    ----------
    y : ndarray of shape (n_bins,)
        Non-negative, non-silent feature vector.
    D : ndarray of shape (n_bins, n_atoms), or an object with ``atoms``
        Non-negative dictionary.
    config : SolverConfig, optional

    Returns
    -------
    x : ndarray of shape (n_atoms,)
        Non-negative weights.
    report : SolveReport
        Final objective, iteration count, KKT residual and convergence flag.
        ``report.history`` holds the (non-increasing) objective after every
        accepted step.
    """
    cfg = config or SolverConfig()
    D = _dictionary_matrix(D)
    y = _check_target(y, D.shape[0])
    prob = _Problem(y, D, cfg.y_floor)
    n_atoms = D.shape[1]
    x = np.zeros(n_atoms)

    g0 = D.T @ (1.0 - y / cfg.y_floor)
    if np.all(g0 >= 0):
        f0 = prob.objective_from_model(np.zeros_like(y))
        return x, SolveReport(f0, 0, _kkt_from_gradient(g0, x), True, [f0])

    j, w = _best_single_atom(prob)
    x[j] = w
    model = prob.model(x)
    f = prob.objective_from_model(model)
    history = [f]

    it = 0
    while it < cfg.max_iters:
        it += 1
        g = D.T @ (1.0 - y / np.maximum(model, cfg.y_floor))
        if _kkt_from_gradient(g, x) <= cfg.kkt_tol:
            break

        progress = False
        free = x > 0
        n_free = int(free.sum())
        can_add = cfg.max_active is None or n_free < cfg.max_active
        if can_add and not free.all():
            g_bound = np.where(free, np.inf, g)
            c = int(np.argmin(g_bound))
            # only grow the active set once the current free weights are close
            # to their own optimum; otherwise freshly dropped atoms cycle back in
            free_res = np.max(np.abs(g[free]), initial=0.0)
            if g_bound[c] < -cfg.kkt_tol and free_res <= max(cfg.kkt_tol, _ADD_RATIO * -g_bound[c]):
                w = _coordinate_minimizer(prob, model, c)
                if w > 0:
                    step = w * D[:, c]
                    if prob.change(model, step) <= 0:
                        trial = model + step
                        x[c] = w
                        model = trial
                        f = prob.objective_from_model(model)
                        history.append(f)
                        progress = True
                        g = D.T @ (1.0 - y / np.maximum(model, cfg.y_floor))

        idx = np.flatnonzero(x > 0)
        if idx.size == 0:
            break
        xa = x[idx]
        ga = g[idx]
        # weights within eps of the bound whose gradient pushes them down are
        # sent to zero along the step instead of taking part in the Newton system
        eps = min(_EPS_BOUND * float(xa.max()), float(np.linalg.norm(xa - np.maximum(xa - ga, 0.0))))
        to_bound = (xa <= eps) & (ga > 0)
        d = -xa.copy()
        keep = ~to_bound
        if keep.any():
            d[keep] = _newton_direction(prob, model, idx[keep], ga[keep])
        neg = d < 0
        t_max = 1.0
        blocking = None
        if np.any(neg):
            ratios = -xa[neg] / d[neg]
            k = int(np.argmin(ratios))
            if ratios[k] < 1.0:
                t_max = float(ratios[k])
                blocking = np.flatnonzero(neg)[k]

        # backtrack along the projection arc max(x + t d, 0) from t = 1; once
        # t falls below the first blocking point, fall back to the truncated
        # step (which drops the blocking atom) and keep halving from there
        t = 1.0
        tried_truncated = blocking is None
        accepted = False
        for _ in range(_MAX_HALVINGS + 1):
            if not tried_truncated and t <= t_max:
                t = t_max
                tried_truncated = True
            xa_new = xa + t * d
            if blocking is not None and t == t_max:
                xa_new[blocking] = 0.0
            np.maximum(xa_new, 0.0, out=xa_new)
            if prob.change(model, D[:, idx] @ (xa_new - xa)) <= 0:
                x_new = x.copy()
                x_new[idx] = xa_new
                model_new = prob.model(x_new, idx)
                accepted = True
                break
            t *= 0.5
        if accepted:
            x, model = x_new, model_new
            f = prob.objective_from_model(model)
            history.append(f)
        elif not progress:
            # no descent left at machine precision
            break

    g = D.T @ (1.0 - y / np.maximum(model, cfg.y_floor))
    res = _kkt_from_gradient(g, x)
    return x, SolveReport(f, it, res, res <= cfg.kkt_tol, history)


def solve_oracle(y, D, iters=20000, config=None):
    """Projected-gradient reference solver for the same problem.

    Starts from a uniform positive point and iterates
    ``x <- max(0, x - step * g)`` with Armijo backtracking along the
    projection arc. Stops early only once the projected step no longer
    changes ``x``.
    """
    cfg = config or SolverConfig()
    D = _dictionary_matrix(D)
    y = _check_target(y, D.shape[0])
    floor = cfg.y_floor

    def objective(x):
        return kl_divergence(y, D @ x, floor)

    x = np.full(D.shape[1], y.sum() / D.sum())
    f = objective(x)
    step = 1.0
    for _ in range(int(iters)):
        g = D.T @ (1.0 - y / np.maximum(D @ x, floor))
        while True:
            x_new = np.maximum(x - step * g, 0.0)
            f_new = objective(x_new)
            if f_new <= f + 1e-4 * float(g @ (x_new - x)):
                break
            step *= 0.5
            if step < 1e-30:
                return x
        if np.array_equal(x_new, x):
            break
        x, f = x_new, f_new
        step *= 2.0
    return x
