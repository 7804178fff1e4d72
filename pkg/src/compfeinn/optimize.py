"""BFGS with a strong-Wolfe line search, and staged training drivers.

The line search is the bracketing/zoom scheme of Nocedal and Wright
(Algorithms 3.5 and 3.6) with safeguarded cubic interpolation. The inverse
Hessian is kept dense up to ``BFGSConfig.dense_limit`` parameters; larger
problems switch to the two-loop L-BFGS recursion.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg.blas import dger


class OptimizationError(RuntimeError):
    pass


@dataclass
class BFGSConfig:
    max_iters: int = 1000
    gtol: float = 1e-10
    c1: float = 1e-4
    c2: float = 0.9
    max_linesearch: int = 30
    dense_limit: int = 6000
    lbfgs_memory: int = 20
    curvature_eps: float = 1e-14
    log_every: int = 1

    def __post_init__(self):
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError(f"need 0 < c1 < c2 < 1, got c1={self.c1}, c2={self.c2}")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")


@dataclass
class History:
    """Per-iteration records (dicts) plus counters."""

    records: list = field(default_factory=list)
    skipped_updates: int = 0
    fallbacks: int = 0
    nevals: int = 0
    message: str = ""

    def append(self, **row):
        self.records.append(row)

    def column(self, name):
        return np.array([r.get(name, np.nan) for r in self.records], dtype=float)

    def extend(self, other, iter_offset=0, **extra):
        for r in other.records:
            row = dict(r)
            row["iter"] = r["iter"] + iter_offset
            row.update(extra)
            self.records.append(row)
        self.skipped_updates += other.skipped_updates
        self.fallbacks += other.fallbacks
        self.nevals += other.nevals
        self.message = other.message


class _Counter:
    def __init__(self, fun):
        self.fun = fun
        self.n = 0

    def __call__(self, x):
        self.n += 1
        f, g = self.fun(x)
        return float(f), np.asarray(g, dtype=float)


def _cubic_min(a, fa, da, b, fb, db):
    """Minimiser of the cubic interpolating (a, fa, da) and (b, fb, db), or None."""
    d1 = da + db - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - da * db
    if disc < 0:
        return None
    d2 = math.copysign(math.sqrt(disc), b - a)
    denom = db - da + 2.0 * d2
    if denom == 0:
        return None
    return b - (b - a) * (db + d2 - d1) / denom


def strong_wolfe(fun, x, f0, g0, p, alpha1, c1=1e-4, c2=0.9, max_iter=30):
    """Step length satisfying the strong Wolfe conditions along ``p``.

    Returns (alpha, f, g) or None when no acceptable step was found.
    """
    d0 = float(g0 @ p)
    if d0 >= 0:
        return None

    def phi(a):
        f, g = fun(x + a * p)
        return f, g, float(g @ p)

    def zoom(lo, flo, dlo, hi, fhi, dhi, budget):
        for _ in range(budget):
            a = _cubic_min(lo, flo, dlo, hi, fhi, dhi)
            span = hi - lo
            if a is None or not np.isfinite(a) or not (
                    min(lo, hi) + 0.1 * abs(span) <= a <= max(lo, hi) - 0.1 * abs(span)):
                a = lo + 0.5 * span
            f, g, d = phi(a)
            if not np.isfinite(f):
                hi, fhi, dhi = a, np.inf, np.nan
                continue
            if f > f0 + c1 * a * d0 or f >= flo:
                hi, fhi, dhi = a, f, d
            else:
                if abs(d) <= -c2 * d0:
                    return a, f, g
                if d * (hi - lo) >= 0:
                    hi, fhi, dhi = lo, flo, dlo
                lo, flo, dlo = a, f, d
            if not np.isfinite(fhi) or not np.isfinite(dhi):
                # fall back to bisection once the bracket end has no model
                fhi, dhi = flo + abs(dlo) * abs(hi - lo), dlo
            if abs(hi - lo) < 1e-16 * max(1.0, abs(lo)):
                break
        return None

    a_prev, f_prev, d_prev = 0.0, f0, d0
    a = alpha1
    for i in range(max_iter):
        f, g, d = phi(a)
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            # step too long: shrink towards the last good point
            a = a_prev + 0.25 * (a - a_prev)
            continue
        if f > f0 + c1 * a * d0 or (i > 0 and f >= f_prev):
            return zoom(a_prev, f_prev, d_prev, a, f, d, max_iter)
        if abs(d) <= -c2 * d0:
            return a, f, g
        if d >= 0:
            return zoom(a, f, d, a_prev, f_prev, d_prev, max_iter)
        a_prev, f_prev, d_prev = a, f, d
        a = 2.0 * a
    return None


def _backtrack(fun, x, f0, g0, c1, max_iter=50):
    p = -g0
    gg = float(g0 @ g0)
    a = 1.0 / max(1.0, math.sqrt(gg))
    for _ in range(max_iter):
        f, g = fun(x + a * p)
        if np.isfinite(f) and f <= f0 - c1 * a * gg:
            return a, p, f, g
        a *= 0.5
    return None


class _DenseInverse:
    def __init__(self, n):
        self.H = None
        self.n = n

    def direction(self, g):
        return -g if self.H is None else -(self.H @ g)

    def update(self, s, y, sy):
        if self.H is None:
            self.H = np.asfortranarray(np.eye(self.n) * (sy / float(y @ y)))
        Hy = self.H @ y
        yHy = float(y @ Hy)
        # H += u s^T + s u^T, the BFGS inverse update written as a rank-2 change
        u = (0.5 * (sy + yHy) / sy ** 2) * s - Hy / sy
        self.H = dger(1.0, u, s, a=self.H, overwrite_a=True)
        self.H = dger(1.0, s, u, a=self.H, overwrite_a=True)

    def reset(self):
        self.H = None


class _LimitedInverse:
    def __init__(self, m):
        self.m = m
        self.pairs = []

    def direction(self, g):
        if not self.pairs:
            return -g
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(self.pairs):
            a = rho * float(s @ q)
            alphas.append(a)
            q -= a * y
        s, y, rho = self.pairs[-1]
        q *= 1.0 / (rho * float(y @ y))
        for (s, y, rho), a in zip(self.pairs, reversed(alphas)):
            b = rho * float(y @ q)
            q += (a - b) * s
        return -q

    def update(self, s, y, sy):
        self.pairs.append((s, y, 1.0 / sy))
        if len(self.pairs) > self.m:
            self.pairs.pop(0)

    def reset(self):
        self.pairs = []


def bfgs_minimize(objective, x0, config=None, callback=None):
    """Minimise ``objective(x) -> (value, gradient)`` from ``x0``.

    ``callback(iter, x)`` may return a dict of extra columns; it is called
    at iteration 0, every ``log_every`` iterations and at the final iterate.
    Returns (x, History).
    """
    config = config or BFGSConfig()
    fun = _Counter(objective)
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise OptimizationError(f"objective is not finite at the starting point (f={f})")
    hist = History()
    n = len(x)
    inv = _DenseInverse(n) if n <= config.dense_limit else _LimitedInverse(config.lbfgs_memory)

    def log(it, step, armijo):
        row = dict(iter=it, value=f, gnorm=float(np.max(np.abs(g), initial=0.0)),
                   evals=fun.n, step=step, armijo=armijo)
        if callback is not None:
            row.update(callback(it, x) or {})
        hist.append(**row)

    log(0, 0.0, True)
    it = 0
    hist.message = "iteration budget exhausted"
    while it < config.max_iters:
        if np.max(np.abs(g), initial=0.0) < config.gtol:
            hist.message = "gradient tolerance reached"
            break
        p = inv.direction(g)
        if float(g @ p) >= 0:
            inv.reset()
            p = -g
        first = isinstance(inv, _DenseInverse) and inv.H is None or \
            isinstance(inv, _LimitedInverse) and not inv.pairs
        a1 = min(1.0, 1.0 / max(np.max(np.abs(g)), 1e-300)) if first else 1.0
        res = strong_wolfe(fun, x, f, g, p, a1, config.c1, config.c2, config.max_linesearch)
        if res is None:
            hist.fallbacks += 1
            inv.reset()
            bt = _backtrack(fun, x, f, g, config.c1)
            if bt is None:
                hist.message = "line search failed to decrease the objective"
                break
            a, p, f_new, g_new = bt
        else:
            a, f_new, g_new = res
        if not np.isfinite(f_new) or not np.all(np.isfinite(g_new)):
            raise OptimizationError(f"non-finite objective at iteration {it + 1}")
        armijo = f_new <= f + config.c1 * a * float(g @ p)
        s = a * p
        y = g_new - g
        sy = float(s @ y)
        x = x + s
        f, g = f_new, g_new
        if sy > config.curvature_eps * max(1.0, float(np.sqrt(y @ y) * np.sqrt(s @ s))):
            inv.update(s, y, sy)
        else:
            hist.skipped_updates += 1
        it += 1
        if it % config.log_every == 0 or it == config.max_iters:
            log(it, a, bool(armijo))
    if hist.records[-1]["iter"] != it:
        log(it, 0.0, True)
    hist.nevals = fun.n
    return x, hist


# -- training schedules --------------------------------------------------

STAGE_KINDS = ("DataFit", "PDE", "Composite")


@dataclass(frozen=True)
class Stage:
    objective: str
    iters: int
    alpha: float = 0.0

    def __post_init__(self):
        if self.objective not in STAGE_KINDS:
            raise ValueError(f"unknown stage objective {self.objective!r}")
        if self.iters < 0:
            raise ValueError("stage budgets must be non-negative")


@dataclass(frozen=True)
class TrainingSchedule:
    stages: tuple

    def __post_init__(self):
        stages = tuple(self.stages)
        object.__setattr__(self, "stages", stages)
        alphas = [s.alpha for s in stages if s.objective == "Composite"]
        if any(b < a for a, b in zip(alphas, alphas[1:])):
            raise ValueError(f"composite penalties must be non-decreasing, got {alphas}")

    @property
    def total_iters(self):
        return sum(s.iters for s in self.stages)

    @classmethod
    def forward(cls, pde_iters, datafit_iters=0):
        stages = [Stage("DataFit", datafit_iters)] if datafit_iters else []
        if pde_iters:
            stages.append(Stage("PDE", pde_iters))
        return cls(tuple(stages))

    @classmethod
    def inverse(cls, fit_iters, coeff_iters, composite_iters, alphas):
        """Three-step schedule: fit the state, train the coefficient, then refine both."""
        if np.isscalar(composite_iters):
            composite_iters = [composite_iters] * len(alphas)
        if len(composite_iters) != len(alphas):
            raise ValueError("one composite budget per penalty coefficient")
        stages = [Stage("DataFit", fit_iters), Stage("PDE", coeff_iters)]
        stages += [Stage("Composite", n, a) for n, a in zip(composite_iters, alphas)]
        return cls(tuple(s for s in stages if s.iters))


def _masked(objective, mask):
    def fun(theta):
        f, g = objective(theta)
        g = np.where(mask, g, 0.0)
        return f, g
    return fun


def _run_stage(objective, theta, budget, config, monitor, label, hist, offset):
    cfg = BFGSConfig(**{**config.__dict__, "max_iters": budget})
    cb = None if monitor is None else (lambda it, x: monitor(x))
    theta, h = bfgs_minimize(objective, theta, cfg, cb)
    done = h.records[-1]["iter"]
    if offset:
        h.records = h.records[1:]  # iteration 0 repeats the previous stage's last row
    hist.extend(h, iter_offset=offset, stage=label)
    return theta, offset + done


def train_forward(pde_loss, schedule, theta0, datafit_loss=None, monitor=None, config=None):
    """Run DataFit and PDE stages in order from ``theta0``.

    ``monitor(theta)`` returns error columns for the history.
    """
    config = config or BFGSConfig()
    theta = np.array(theta0, dtype=float)
    hist = History()
    it = 0
    if not schedule.stages and monitor is not None:
        hist.append(iter=0, value=float(pde_loss(theta)[0]), stage="init", **monitor(theta))
    for stage in schedule.stages:
        if stage.objective == "DataFit":
            if datafit_loss is None:
                raise ValueError("DataFit stage needs a data-fit loss")
            obj = datafit_loss
        elif stage.objective == "PDE":
            obj = pde_loss
        else:
            raise ValueError("forward training has no Composite stage")
        theta, it = _run_stage(obj, theta, stage.iters, config, monitor,
                               stage.objective, hist, it)
    return theta, hist


def train_inverse(loss, schedule, theta0, monitor=None, config=None):
    """Three-step training of (theta_u, theta_kappa) packed in one vector.

    DataFit: misfit only, coefficient frozen. PDE: residual only, state
    frozen. Composite(alpha): misfit + alpha * residual, both trained.
    Freezing masks the gradient, so frozen entries stay bit-identical.
    """
    config = config or BFGSConfig()
    theta = np.array(theta0, dtype=float)
    state = np.zeros(len(theta), dtype=bool)
    state[:loss.nu] = True
    hist = History()
    it = 0
    if not schedule.stages and monitor is not None:
        hist.append(iter=0, value=float(loss(theta)[0]), stage="init", **monitor(theta))
    for stage in schedule.stages:
        if stage.objective == "DataFit":
            loss.configure(alpha=0.0, misfit_weight=1.0)
            obj = _masked(loss, state)
        elif stage.objective == "PDE":
            loss.configure(alpha=1.0, misfit_weight=0.0)
            obj = _masked(loss, ~state)
        else:
            loss.configure(alpha=stage.alpha, misfit_weight=1.0)
            obj = loss
        label = stage.objective if stage.objective != "Composite" else f"Composite({stage.alpha:g})"
        theta, it = _run_stage(obj, theta, stage.iters, config, monitor, label, hist, it)
    return theta, hist
