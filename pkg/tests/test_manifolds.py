import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import KINDS, crandn, make_instance, random_point, random_stack, random_tangent
from riemannian_precoding.errors import DegenerateInputError, DegenerateStepError, DimensionError, PreconditionError
from riemannian_precoding.manifolds import (
    ManifoldPoint,
    concat_rows,
    feasibility_residual,
    normalize_to_manifold,
    project_tangent,
    projection_multiplier,
    retract,
    riemannian_gradient,
    riemannian_hessian,
    tangency_residual,
    transport,
)
from riemannian_precoding.objective import euclidean_gradient, wsr_objective
from riemannian_precoding.types import ConstraintKind, PrecoderStack, TangentStack, frobenius_inner, frobenius_norm


def _constraint_values(pt, cfg):
    """Powers as seen by each constraint, computed from the concatenated matrix."""
    mat = concat_rows(pt)
    if pt.kind is ConstraintKind.TPC:
        return np.array([np.sum(np.abs(mat) ** 2)]), np.array([cfg.total_power])
    if pt.kind is ConstraintKind.PUPC:
        return np.array([np.sum(np.abs(b) ** 2) for b in pt.p.blocks]), np.array(cfg.per_user_power)
    return np.sum(np.abs(mat) ** 2, axis=1), np.array(cfg.per_antenna_power)


def test_normalize_lands_on_manifold(kind):
    cfg, ch, rng = make_instance(0)
    pt = normalize_to_manifold(random_stack(rng, cfg), kind, cfg)
    got, want = _constraint_values(pt, cfg)
    np.testing.assert_allclose(got, want, rtol=1e-13)
    assert feasibility_residual(pt, cfg) < 1e-13


def test_normalize_degenerate_block():
    cfg, ch, rng = make_instance(1)
    p = random_stack(rng, cfg)
    zeroed = PrecoderStack((p[0], np.zeros_like(p[1]), p[2]))
    normalize_to_manifold(zeroed, "tpc", cfg)  # fine: only the global norm matters
    with pytest.raises(DegenerateInputError, match="block 1"):
        normalize_to_manifold(zeroed, "pupc", cfg)
    rows = [np.array(b) for b in p.blocks]
    for b in rows:
        b[3] = 0.0
    with pytest.raises(DegenerateInputError, match="row 3"):
        normalize_to_manifold(PrecoderStack(tuple(rows)), "papc", cfg)


def test_projection_is_orthogonal(kind):
    cfg, ch, rng = make_instance(2)
    pt = random_point(rng, cfg, kind)
    z = random_stack(rng, cfg, TangentStack)
    proj = project_tangent(pt, z, cfg)
    # the removed part is normal: orthogonal to every tangent vector
    t = random_tangent(rng, pt, cfg)
    assert abs(frobenius_inner(z - proj, t)) < 1e-12
    assert tangency_residual(pt, proj, cfg) < 1e-13


def test_projection_multiplier_sizes():
    cfg, ch, rng = make_instance(3)
    for kind, n in (("tpc", 1), ("pupc", cfg.num_users), ("papc", cfg.num_bs_antennas)):
        pt = random_point(rng, cfg, kind)
        lam = projection_multiplier(pt, random_stack(rng, cfg, TangentStack), cfg)
        assert lam.values.shape == (n,)


def test_projection_requires_feasible_point():
    cfg, ch, rng = make_instance(4)
    pt = ManifoldPoint(random_stack(rng, cfg), "tpc")
    with pytest.raises(PreconditionError):
        project_tangent(pt, random_stack(rng, cfg, TangentStack), cfg)


def test_projection_shape_mismatch():
    cfg, ch, rng = make_instance(5)
    pt = random_point(rng, cfg, "tpc")
    with pytest.raises(DimensionError):
        project_tangent(pt, TangentStack((np.zeros((6, 2)),)), cfg)


def test_retract_zero_is_identity(kind):
    cfg, ch, rng = make_instance(6)
    pt = random_point(rng, cfg, kind)
    out = retract(pt, TangentStack.zeros_like(pt.p), cfg)
    for a, b in zip(out.p.blocks, pt.p.blocks):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)


def test_retraction_is_first_order(kind):
    cfg, ch, rng = make_instance(7)
    pt = random_point(rng, cfg, kind)
    xi = random_tangent(rng, pt, cfg)
    errs = []
    for t in (1e-2, 5e-3):
        r = retract(pt, xi, cfg, t)
        errs.append(max(np.linalg.norm(a - (b + t * c)) for a, b, c in zip(r.p.blocks, pt.p.blocks, xi.blocks)))
    # second-order remainder: halving t divides the error by about 4
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)


def test_retraction_onto_degenerate_point():
    cfg, ch, rng = make_instance(8)
    pt = random_point(rng, cfg, "pupc")
    xi = TangentStack(tuple(-b if i == 0 else np.zeros_like(b) for i, b in enumerate(pt.p.blocks)))
    with pytest.raises(DegenerateStepError):
        retract(pt, xi, cfg, 1.0)


def test_transport_is_projection_and_contracts(kind):
    cfg, ch, rng = make_instance(9)
    pt = random_point(rng, cfg, kind)
    eta, xi = random_tangent(rng, pt, cfg), random_tangent(rng, pt, cfg)
    moved = transport(pt, eta, xi, cfg, 0.5)
    new = retract(pt, eta, cfg, 0.5)
    assert tangency_residual(new, moved, cfg) < 1e-13
    assert frobenius_norm(moved) <= frobenius_norm(xi) * (1 + 1e-12)


def test_pupc_single_user_is_tpc():
    cfg, ch, rng = make_instance(10, Mt=4, ants=(2,))
    p = random_stack(rng, cfg)
    a, b = normalize_to_manifold(p, "tpc", cfg), normalize_to_manifold(p, "pupc", cfg)
    np.testing.assert_allclose(a.p[0], b.p[0], atol=1e-15)
    z = random_stack(rng, cfg, TangentStack)
    np.testing.assert_allclose(project_tangent(a, z, cfg)[0], project_tangent(b, z, cfg)[0], atol=1e-14)


def test_riemannian_gradient_matches_directional_derivative(kind):
    cfg, ch, rng = make_instance(11)
    pt = random_point(rng, cfg, kind)
    g = riemannian_gradient(pt, euclidean_gradient(cfg, ch, pt.p), cfg)
    xi = random_tangent(rng, pt, cfg)
    t = 1e-5
    fd = (wsr_objective(cfg, ch, retract(pt, xi, cfg, t).p) - wsr_objective(cfg, ch, retract(pt, xi, cfg, -t).p)) / (2 * t)
    assert frobenius_inner(g, xi) == pytest.approx(fd, rel=1e-6, abs=1e-8)


def test_hessian_is_tangent_and_symmetric(kind):
    cfg, ch, rng = make_instance(12)
    pt = random_point(rng, cfg, kind)
    xi, eta = random_tangent(rng, pt, cfg), random_tangent(rng, pt, cfg)
    hx, he = riemannian_hessian(pt, xi, cfg, ch), riemannian_hessian(pt, eta, cfg, ch)
    assert tangency_residual(pt, hx, cfg) < 1e-12
    a, b = frobenius_inner(hx, eta), frobenius_inner(xi, he)
    assert abs(a - b) / (1 + abs(a)) < 1e-10


def test_hessian_matches_second_derivative_along_retraction(kind):
    """At a critical point the retraction curve's second derivative is <Hess xi, xi>."""
    from riemannian_precoding.optimizers import StopCriteria, rtr_solve

    cfg, ch, rng = make_instance(13, snr_db=5.0)
    pt, _ = rtr_solve(cfg, ch, kind, random_point(rng, cfg, kind), stop=StopCriteria(grad_norm_tol=1e-11))
    xi = random_tangent(rng, pt, cfg)
    xi = (1.0 / frobenius_norm(xi)) * xi
    h = 1e-4
    f0 = wsr_objective(cfg, ch, pt.p)
    fp, fm = (wsr_objective(cfg, ch, retract(pt, xi, cfg, s).p) for s in (h, -h))
    second = (fp - 2 * f0 + fm) / h**2
    hess = frobenius_inner(riemannian_hessian(pt, xi, cfg, ch), xi)
    assert hess == pytest.approx(second, rel=1e-4, abs=1e-5)


def test_hessian_rejects_non_tangent_input():
    cfg, ch, rng = make_instance(14)
    pt = random_point(rng, cfg, "tpc")
    with pytest.raises(PreconditionError):
        riemannian_hessian(pt, TangentStack(pt.p.blocks), cfg, ch)


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**31),
    kind=st.sampled_from(KINDS),
    step=st.floats(-3.0, 3.0),
    power=st.floats(0.1, 50.0),
)
def test_retraction_always_feasible(seed, kind, step, power):
    cfg, ch, rng = make_instance(seed, Mt=5, ants=(2, 1), streams=(1, 1), power=power)
    pt = random_point(rng, cfg, kind)
    xi = random_tangent(rng, pt, cfg, scale=np.sqrt(power))
    try:
        r = retract(pt, xi, cfg, step)
    except DegenerateStepError:
        return
    assert feasibility_residual(r, cfg) < 1e-12


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), kind=st.sampled_from(KINDS))
def test_projection_idempotent(seed, kind):
    cfg, ch, rng = make_instance(seed, Mt=4, ants=(2, 2), streams=(2, 1))
    pt = random_point(rng, cfg, kind)
    z = TangentStack(tuple(crandn(rng, *b.shape) for b in pt.p.blocks))
    once = project_tangent(pt, z, cfg)
    twice = project_tangent(pt, once, cfg)
    for a, b in zip(once.blocks, twice.blocks):
        np.testing.assert_allclose(a, b, atol=1e-12)
