"""Riemannian steepest descent, conjugate gradient and trust-region solvers.

RSD and RCG share one loop: a backtracking Armijo search whose trial
objective values come from the effective-channel cache, so on the sphere
and the per-user oblique manifold a trial step costs no products with the
channel. RTR solves its subproblem with truncated CG (Steihaug-Toint) and
accepts or rejects by the actual-over-predicted decrease ratio.

Every solver returns the final :class:`ManifoldPoint` and an
:class:`IterationTrace` whose row ``k = 0`` describes the initial point.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .counting import OpCounter
from .errors import CountingUnavailableError, ConfigError, StalledLineSearchError
from .manifolds import (
    ManifoldPoint,
    feasibility_residual,
    hessian_from_parts,
    project_tangent,
    retract,
    retraction_scalings,
)
from .objective import (
    build_cache,
    cache_advance,
    dgrad_from_cache,
    gradient_from_cache,
    objective_from_cache,
    user_states,
    with_direction,
)
from .types import ConstraintKind, TangentStack, frobenius_inner

__all__ = [
    "LineSearchParams",
    "TrustRegionParams",
    "StopCriteria",
    "IterationRecord",
    "IterationTrace",
    "SolverState",
    "WSRProblem",
    "TCGResult",
    "armijo_search",
    "fletcher_reeves_beta",
    "rsd_solve",
    "rcg_solve",
    "tcg_subproblem",
    "rtr_solve",
    "rtr_minimize",
    "flop_counter_report",
]

RESTART_THRESHOLD = -1e-14
RHO_GUARD = 1e-14
POWELL_RATIO = 0.1


@dataclass(frozen=True)
class LineSearchParams:
    alpha0: float = 1e-3
    r: float = 0.5
    c: float = 1e-4
    max_backtracks: int = 60

    def __post_init__(self):
        if not self.alpha0 > 0:
            raise ConfigError("alpha0 must be positive")
        if not 0 < self.r < 1 or not 0 < self.c < 1:
            raise ConfigError("line search needs 0 < r < 1 and 0 < c < 1")
        if self.max_backtracks < 1:
            raise ConfigError("max_backtracks must be positive")


@dataclass(frozen=True)
class TrustRegionParams:
    """Trust-region settings; radii default to ``0.1 sqrt(P)`` and ``sqrt(P)``."""

    delta0: float = None
    delta_max: float = None
    rho_threshold: float = 0.05
    n_sub: int = 6

    def resolved(self, total_power):
        dmax = self.delta_max if self.delta_max is not None else math.sqrt(total_power)
        d0 = self.delta0 if self.delta0 is not None else 0.1 * math.sqrt(total_power)
        if not 0 < d0 <= dmax:
            raise ConfigError("trust region needs 0 < delta0 <= delta_max")
        if self.n_sub < 1:
            raise ConfigError("n_sub must be positive")
        return TrustRegionParams(d0, dmax, self.rho_threshold, self.n_sub)


@dataclass(frozen=True)
class StopCriteria:
    """Stop on small gradient, on a stalled objective, or after ``max_outer`` steps.

    ``grad_norm_tol=None`` means ``1e-6 * sqrt(U)``. The relative objective
    test must hold for ``patience`` consecutive accepted iterations.
    """

    max_outer: int = 5000
    grad_norm_tol: float = None
    rel_obj_tol: float = 1e-10
    patience: int = 3

    def __post_init__(self):
        if self.max_outer < 1:
            raise ConfigError("max_outer must be positive")

    def grad_tol(self, num_users):
        return 1e-6 * math.sqrt(num_users) if self.grad_norm_tol is None else self.grad_norm_tol


@dataclass
class IterationRecord:
    k: int
    f: float
    grad_norm: float
    step: float
    rho: float = float("nan")
    residual: float = 0.0
    n_in: int = 0
    flops: int = 0
    restarted: bool = False
    accepted: bool = True


@dataclass
class IterationTrace:
    solver: str
    kind: ConstraintKind
    dims: dict
    counting: bool = True
    n_sub: int = 0
    records: list = field(default_factory=list)
    stop_reason: str = ""

    @property
    def iterations(self):
        return max(len(self.records) - 1, 0)

    @property
    def objectives(self):
        return np.array([r.f for r in self.records])

    @property
    def final(self):
        return self.records[-1]

    def append(self, rec):
        self.records.append(rec)


@dataclass
class SolverState:
    """Everything known at the current iterate."""

    point: ManifoldPoint
    cache: object
    users: list
    f: float
    egrad: TangentStack
    grad: TangentStack

    @property
    def grad_norm(self):
        return math.sqrt(max(frobenius_inner(self.grad, self.grad), 0.0))


class WSRProblem:
    """WSR objective on one of the three manifolds, with cached channel products."""

    def __init__(self, cfg, ch, kind):
        self.cfg = cfg
        self.ch = ch.check(cfg)
        self.kind = ConstraintKind.parse(kind)

    inner = staticmethod(frobenius_inner)

    def state(self, point, cache=None):
        if cache is None:
            cache = build_cache(self.ch, point.p)
        users = user_states(self.cfg, cache)
        f, egrad = gradient_from_cache(self.cfg, cache)
        grad = project_tangent(point, egrad, self.cfg)
        return SolverState(point, cache, users, f, egrad, grad)

    def hess(self, state, xi):
        dgrad = dgrad_from_cache(self.cfg, state.cache, state.users, xi)
        return hessian_from_parts(state.point, xi, state.egrad, dgrad, self.cfg)

    def step(self, state, xi):
        """Retract along ``xi``; returns the new point and its objective value."""
        new = retract(state.point, xi, self.cfg)
        cache = build_cache(self.ch, new.p)
        return new, cache, objective_from_cache(self.cfg, cache)

    def residual(self, point):
        return feasibility_residual(point, self.cfg)


def _counter(enabled):
    return OpCounter() if enabled else _NullCounter()


class _NullCounter:
    mults = 0

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def armijo_search(state, direction, params, problem):
    """Backtrack from ``alpha0`` until the sufficient-decrease test passes.

    Returns ``(step, new_point, new_cache, n_in)`` where ``n_in`` counts the
    contractions. ``new_cache`` already holds ``V`` for the accepted point.
    """
    cfg, kind = problem.cfg, problem.kind
    cache = with_direction(state.cache, direction)
    slope = frobenius_inner(state.grad, direction)
    alpha = params.alpha0
    n = 0
    best = (math.inf, 0.0)
    while True:
        scal = retraction_scalings(state.point, direction, cfg, step=alpha)
        trial = cache_advance(cache, kind, alpha, scal)
        phi = objective_from_cache(cfg, trial)
        if phi < best[0]:
            best = (phi, alpha)
        if not phi - state.f >= params.c * alpha * slope:
            return alpha, ManifoldPoint(trial.point, kind), trial, n
        if n >= params.max_backtracks:
            raise StalledLineSearchError(
                f"Armijo search failed after {n} contractions", best_step=best[1]
            )
        alpha *= params.r
        n += 1


def fletcher_reeves_beta(grad_now, grad_prev):
    """``g(grad_now, grad_now) / g(grad_prev, grad_prev)``; 0 if the previous gradient vanished."""
    den = frobenius_inner(grad_prev, grad_prev)
    if den == 0.0:
        return 0.0
    return frobenius_inner(grad_now, grad_now) / den


def _new_trace(solver, problem, counting, n_sub=0):
    cfg = problem.cfg
    dims = {
        "Mt": cfg.num_bs_antennas,
        "U": cfg.num_users,
        "Nr": cfg.total_rx_antennas,
        "Nd": cfg.total_streams,
    }
    return IterationTrace(solver=solver, kind=problem.kind, dims=dims, counting=counting, n_sub=n_sub)


class _Convergence:
    def __init__(self, stop, num_users):
        self.stop = stop
        self.gtol = stop.grad_tol(num_users)
        self.streak = 0

    def check(self, k, f_prev, f_now, grad_norm, accepted=True):
        if grad_norm < self.gtol:
            return "grad_norm"
        if accepted and f_prev is not None:
            rel = abs(f_now - f_prev) / max(abs(f_now), 1e-300)
            self.streak = self.streak + 1 if rel < self.stop.rel_obj_tol else 0
            if self.streak >= self.stop.patience:
                return "rel_obj"
        if k >= self.stop.max_outer:
            return "max_outer"
        return ""


def _line_search_solve(
    cfg, ch, kind, p0, ls, stop, conjugate, count_ops, force_beta_zero=False, powell_restart=True
):
    problem = WSRProblem(cfg, ch, kind)
    pt = p0 if isinstance(p0, ManifoldPoint) else ManifoldPoint(p0, kind)
    ls = ls or LineSearchParams()
    stop = stop or StopCriteria()
    trace = _new_trace("rcg" if conjugate else "rsd", problem, count_ops)
    conv = _Convergence(stop, cfg.num_users)
    counter = _counter(count_ops)
    with counter:
        state = problem.state(pt)
        trace.append(
            IterationRecord(0, state.f, state.grad_norm, 0.0, residual=problem.residual(pt), flops=counter.mults)
        )
        reason = conv.check(0, None, state.f, state.grad_norm)
        prev_grad = prev_dir = None
        k = 0
        while not reason:
            k += 1
            restarted = False
            direction = -state.grad
            if conjugate and prev_dir is not None and not force_beta_zero:
                beta = fletcher_reeves_beta(state.grad, prev_grad)
                if powell_restart and abs(
                    frobenius_inner(state.grad, project_tangent(state.point, prev_grad, cfg))
                ) >= POWELL_RATIO * frobenius_inner(state.grad, state.grad):
                    beta = 0.0
                    restarted = True
                if beta != 0.0:
                    # Transport by projection onto the tangent space at the new point.
                    moved = project_tangent(state.point, prev_dir, cfg)
                    direction = direction + beta * moved
                    if frobenius_inner(state.grad, direction) >= RESTART_THRESHOLD:
                        direction = -state.grad
                        restarted = True
            try:
                alpha, new_pt, new_cache, n_in = armijo_search(state, direction, ls, problem)
            except StalledLineSearchError as exc:
                trace.stop_reason = "stalled_line_search"
                exc.trace = trace
                raise
            f_prev = state.f
            prev_grad, prev_dir = state.grad, direction
            state = problem.state(new_pt, new_cache)
            trace.append(
                IterationRecord(
                    k,
                    state.f,
                    state.grad_norm,
                    alpha,
                    residual=problem.residual(new_pt),
                    n_in=n_in,
                    flops=counter.mults,
                    restarted=restarted,
                )
            )
            reason = conv.check(k, f_prev, state.f, state.grad_norm)
    trace.stop_reason = reason
    return state.point, trace


def rsd_solve(cfg, ch, kind, p0, ls=None, stop=None, count_ops=True):
    """Riemannian steepest descent with Armijo backtracking."""
    return _line_search_solve(cfg, ch, kind, p0, ls, stop, conjugate=False, count_ops=count_ops)


def rcg_solve(
    cfg, ch, kind, p0, ls=None, stop=None, count_ops=True, force_beta_zero=False, powell_restart=True
):
    """Riemannian conjugate gradient with the Fletcher-Reeves coefficient.

    The direction is reset to the negative gradient when it stops being a
    descent direction, and (with ``powell_restart``) when successive
    gradients lose orthogonality, ``|<g_k, T g_{k-1}>| >= 0.1 |g_k|^2``.
    Without the Powell test Fletcher-Reeves jams under the fixed-reset
    Armijo search: tiny accepted steps give beta close to 1 and the
    direction grows without making progress.
    """
    return _line_search_solve(
        cfg,
        ch,
        kind,
        p0,
        ls,
        stop,
        conjugate=True,
        count_ops=count_ops,
        force_beta_zero=force_beta_zero,
        powell_restart=powell_restart,
    )


@dataclass
class TCGResult:
    direction: object
    boundary_hit: bool
    n_inner: int
    hess_direction: object
    model_decrease: float


def _boundary_step(inner, eta, q, delta):
    a = inner(q, q)
    b = 2.0 * inner(eta, q)
    c = inner(eta, eta) - delta * delta
    disc = max(b * b - 4.0 * a * c, 0.0)
    return (-b + math.sqrt(disc)) / (2.0 * a)


def tcg_subproblem(grad, hess, delta, n_sub, inner=frobenius_inner, zero=None):
    """Truncated CG on ``m(eta) = <grad, eta> + 0.5 <Hess eta, eta>`` within radius ``delta``.

    ``hess`` is a callable applying the Hessian. Exits early on negative
    curvature or when the next iterate would leave the region, in both cases
    returning the boundary point along the current CG direction.
    """
    if zero is None:
        zero = 0.0 * grad
    eta = zero
    h_eta = zero
    r = grad
    rr = inner(r, r)
    if rr == 0.0:
        return TCGResult(eta, False, 0, h_eta, 0.0)
    r0 = math.sqrt(rr)
    q = -r
    boundary = False
    d = 0
    for d in range(1, n_sub + 1):
        hq = hess(q)
        kappa = inner(q, hq)
        if kappa <= 0.0:
            t = _boundary_step(inner, eta, q, delta)
            eta, h_eta, boundary = eta + t * q, h_eta + t * hq, True
            break
        tau = rr / kappa
        trial = eta + tau * q
        if inner(trial, trial) >= delta * delta:
            t = _boundary_step(inner, eta, q, delta)
            eta, h_eta, boundary = eta + t * q, h_eta + t * hq, True
            break
        eta, h_eta = trial, h_eta + tau * hq
        r = r + tau * hq
        rr_new = inner(r, r)
        if math.sqrt(rr_new) <= 1e-13 * r0:
            break
        q = -r + (rr_new / rr) * q
        rr = rr_new
    decrease = -(inner(grad, eta) + 0.5 * inner(h_eta, eta))
    return TCGResult(eta, boundary, d, h_eta, decrease)


def rtr_minimize(problem, x0, tr, stop, count_ops=True, solver_name="rtr"):
    """Generic RTR loop over any object exposing ``state/hess/step/residual/inner``."""
    counter = _counter(count_ops)
    tr = tr.resolved(getattr(problem.cfg, "total_power", 1.0))
    stop = stop or StopCriteria()
    trace = _new_trace(solver_name, problem, count_ops, n_sub=tr.n_sub)
    conv = _Convergence(stop, problem.cfg.num_users)
    delta = tr.delta0
    with counter:
        state = problem.state(x0)
        trace.append(
            IterationRecord(0, state.f, state.grad_norm, delta, residual=problem.residual(x0), flops=counter.mults)
        )
        reason = conv.check(0, None, state.f, state.grad_norm)
        k = 0
        while not reason:
            k += 1
            res = tcg_subproblem(
                state.grad, lambda v: problem.hess(state, v), delta, tr.n_sub, inner=problem.inner
            )
            new_pt, new_cache, f_new = problem.step(state, res.direction)
            mdec = res.model_decrease
            if mdec < RHO_GUARD * (1.0 + abs(state.f)):
                rho = -math.inf
            else:
                rho = (state.f - f_new) / mdec
            accepted = rho > tr.rho_threshold
            f_prev = state.f
            used_delta = delta
            if rho < 0.25:
                delta = 0.25 * delta
            elif rho > 0.75 and res.boundary_hit:
                delta = min(2.0 * delta, tr.delta_max)
            if accepted:
                state = problem.state(new_pt, new_cache)
            trace.append(
                IterationRecord(
                    k,
                    state.f,
                    state.grad_norm,
                    used_delta,
                    rho=rho,
                    residual=problem.residual(state.point),
                    n_in=res.n_inner,
                    flops=counter.mults,
                    accepted=accepted,
                )
            )
            reason = conv.check(k, f_prev, state.f, state.grad_norm, accepted=accepted)
            if not reason and delta < 1e-14 * tr.delta_max:
                reason = "radius_collapsed"
    trace.stop_reason = reason
    return state.point, trace


def rtr_solve(cfg, ch, kind, p0, tr=None, stop=None, count_ops=True):
    """Riemannian trust-region method with a truncated-CG inner solver."""
    problem = WSRProblem(cfg, ch, kind)
    pt = p0 if isinstance(p0, ManifoldPoint) else ManifoldPoint(p0, kind)
    return rtr_minimize(problem, pt, tr or TrustRegionParams(), stop, count_ops=count_ops)


def _model_cost(solver, kind, dims, n_in, n_sub):
    Mt, Nr, Nd = dims["Mt"], dims["Nr"], dims["Nd"]
    base = Mt * Nr * Nd
    if solver == "rtr":
        factor = 8 if kind is ConstraintKind.PAPC else 4
        return factor * n_sub * base
    if kind is ConstraintKind.PAPC:
        return (n_in + 1) * base + Mt * Nd * Nd
    return base + Mt * Nd * Nd


def flop_counter_report(trace):
    """Measured complex multiplies per outer iteration against the leading-order model.

    Returns a dict with the per-iteration counts, their mean, the model
    prediction per iteration (using each iteration's own backtrack or inner
    count) and the measured/model ratios.
    """
    if not trace.counting:
        raise CountingUnavailableError("trace was recorded without operation counting")
    flops = [r.flops for r in trace.records]
    per_iter = [b - a for a, b in zip(flops[:-1], flops[1:])]
    model = [
        _model_cost(trace.solver, trace.kind, trace.dims, r.n_in, trace.n_sub)
        for r in trace.records[1:]
    ]
    ratios = [m / p for m, p in zip(per_iter, model)]
    n = len(per_iter)
    return {
        "solver": trace.solver,
        "kind": trace.kind.value,
        "dims": dict(trace.dims),
        "iterations": n,
        "per_iteration": per_iter,
        "total": int(sum(per_iter)),
        "mean_per_iteration": float(np.mean(per_iter)) if n else 0.0,
        "mean_n_in": float(np.mean([r.n_in for r in trace.records[1:]])) if n else 0.0,
        "model_per_iteration": model,
        "mean_model_per_iteration": float(np.mean(model)) if n else 0.0,
        "ratio_mean": float(np.mean(ratios)) if n else 0.0,
        "ratio_max": float(np.max(ratios)) if n else 0.0,
    }
