"""The three precoder manifolds: total-power sphere, per-user and per-antenna oblique.

Each manifold is an embedded submanifold of the product of complex matrix
spaces with metric ``sum_i Re tr(xi_i^H zeta_i)``. Its normal space is
spanned by rescalings of the point:

* TPC:  ``lam * P``                (one real scalar)
* PUPC: ``P_i * lam_i``            (one real scalar per user block)
* PAPC: ``diag(lam) @ P``          (one real scalar per antenna row)

so projection, retraction and the Weingarten correction of the Hessian all
reduce to computing these multipliers.
"""

import math
from dataclasses import dataclass

import numpy as np

from .counting import add_mults
from .errors import DegenerateInputError, DegenerateStepError, DimensionError, PreconditionError
from .types import ConstraintKind, PrecoderStack, TangentStack, stack_concat

__all__ = [
    "ManifoldPoint",
    "ProjectionMultiplier",
    "feasibility_residual",
    "normalize_to_manifold",
    "projection_multiplier",
    "project_tangent",
    "tangency_residual",
    "riemannian_gradient",
    "riemannian_hessian",
    "hessian_from_parts",
    "retraction_scalings",
    "retract",
    "transport",
]

FEASIBILITY_PRECONDITION_TOL = 1e-8
HESSIAN_TANGENCY_TOL = 1e-8
DEGENERATE_NORM_RATIO = 1e-14


@dataclass(frozen=True)
class ManifoldPoint:
    p: PrecoderStack
    kind: ConstraintKind

    def __post_init__(self):
        object.__setattr__(self, "kind", ConstraintKind.parse(self.kind))


@dataclass(frozen=True)
class ProjectionMultiplier:
    """Normal-space coordinates: 1 value (TPC), ``U`` values (PUPC) or ``M_t`` values (PAPC)."""

    kind: ConstraintKind
    values: np.ndarray


def _row_energy(blocks):
    """Squared norm of each antenna row of the concatenated stack."""
    return sum(np.sum(np.abs(b) ** 2, axis=1) for b in blocks)


def _row_inner(a_blocks, b_blocks):
    """``diag(Re(A B^H))`` for concatenated stacks, without forming them."""
    return sum(np.sum((a * b.conj()).real, axis=1) for a, b in zip(a_blocks, b_blocks))


def _block_inner(a, b):
    return float(np.vdot(a, b).real)


def _sphere_powers(kind, cfg):
    if kind is ConstraintKind.TPC:
        return np.array([cfg.total_power])
    if kind is ConstraintKind.PUPC:
        return np.array(cfg.per_user_power)
    return np.array(cfg.per_antenna_power)


def _energies(blocks, kind):
    if kind is ConstraintKind.TPC:
        return np.array([sum(_block_inner(b, b) for b in blocks)])
    if kind is ConstraintKind.PUPC:
        return np.array([_block_inner(b, b) for b in blocks])
    return _row_energy(blocks)


def feasibility_residual(pt, cfg):
    """Largest relative violation of the power constraint(s)."""
    pt.p.check(cfg)
    e = _energies(pt.p.blocks, pt.kind)
    target = _sphere_powers(pt.kind, cfg)
    return float(np.max(np.abs(e - target) / target))


def _check_feasible(pt, cfg):
    r = feasibility_residual(pt, cfg)
    if r > FEASIBILITY_PRECONDITION_TOL:
        raise PreconditionError(f"point is not on the {pt.kind.name} manifold (residual {r:.3e})")


def _scaled(blocks, kind, scale):
    if kind is ConstraintKind.TPC:
        return tuple(scale[0] * b for b in blocks)
    if kind is ConstraintKind.PUPC:
        return tuple(s * b for s, b in zip(scale, blocks))
    col = np.asarray(scale).reshape(-1, 1)
    return tuple(col * b for b in blocks)


def _normalizing_scale(blocks, kind, cfg, exc):
    e = _energies(blocks, kind)
    target = _sphere_powers(kind, cfg)
    tiny = (DEGENERATE_NORM_RATIO**2) * target
    if np.any(e <= tiny):
        bad = int(np.argmax(e <= tiny))
        unit = {ConstraintKind.TPC: "stack", ConstraintKind.PUPC: "block", ConstraintKind.PAPC: "row"}[kind]
        raise exc(f"{unit} {bad} has vanishing norm; cannot rescale onto the {kind.name} manifold")
    return np.sqrt(target / e)


def normalize_to_manifold(p, kind, cfg):
    """Rescale ``p`` globally, per block or per row so that it becomes feasible."""
    kind = ConstraintKind.parse(kind)
    p.check(cfg)
    scale = _normalizing_scale(p.blocks, kind, cfg, DegenerateInputError)
    return ManifoldPoint(PrecoderStack(_scaled(p.blocks, kind, scale)), kind)


def _multiplier_values(p_blocks, xi_blocks, kind, cfg):
    add_mults(sum(b.size for b in p_blocks))
    if kind is ConstraintKind.TPC:
        s = sum(_block_inner(a, b) for a, b in zip(p_blocks, xi_blocks))
        return np.array([s / cfg.total_power])
    if kind is ConstraintKind.PUPC:
        return np.array(
            [_block_inner(a, b) / pw for a, b, pw in zip(p_blocks, xi_blocks, cfg.per_user_power)]
        )
    return _row_inner(p_blocks, xi_blocks) * (cfg.num_bs_antennas / cfg.total_power)


def projection_multiplier(pt, xi, cfg):
    """Normal-space coordinates of ``xi`` at ``pt``."""
    return ProjectionMultiplier(pt.kind, _multiplier_values(pt.p.blocks, xi.blocks, pt.kind, cfg))


def _project(p_blocks, xi_blocks, kind, cfg):
    lam = _multiplier_values(p_blocks, xi_blocks, kind, cfg)
    normal = _scaled(p_blocks, kind, lam)
    return TangentStack(tuple(x - n for x, n in zip(xi_blocks, normal)))


def project_tangent(pt, xi, cfg):
    """Orthogonal projection of an ambient vector onto the tangent space at ``pt``."""
    if xi.shapes != pt.p.shapes:
        raise DimensionError(f"vector shapes {xi.shapes} do not match point {pt.p.shapes}")
    _check_feasible(pt, cfg)
    return _project(pt.p.blocks, xi.blocks, pt.kind, cfg)


def tangency_residual(pt, xi, cfg):
    """Scale-free violation of the tangent-space equations by ``xi``.

    The constraint differentials ``Re tr(P^H xi)`` (per stack, block or row)
    are divided by ``sqrt(power) * ||xi||``; 0 means exactly tangent.
    """
    vals = _multiplier_values(pt.p.blocks, xi.blocks, pt.kind, cfg) * _sphere_powers(pt.kind, cfg)
    nrm = math.sqrt(sum(_block_inner(b, b) for b in xi.blocks))
    if nrm == 0.0:
        return 0.0
    return float(np.max(np.abs(vals) / (np.sqrt(_sphere_powers(pt.kind, cfg)) * nrm)))


def riemannian_gradient(pt, egrad, cfg):
    """Projection of the Euclidean gradient onto the tangent space."""
    return project_tangent(pt, egrad, cfg)


def hessian_from_parts(pt, xi, egrad, dgrad, cfg):
    """Riemannian Hessian from the Euclidean gradient and its derivative along ``xi``.

    With ``grad = egrad - N(lam1)`` the Riemannian gradient field, the
    derivative along ``xi`` is ``Z = dgrad - N(D lam1[xi]) - N_xi(lam1)``,
    where ``N_xi`` applies the multipliers to ``xi`` instead of ``P``. The
    Hessian is the tangent part ``Z - N(lam2)`` of ``Z``.
    """
    kind = pt.kind
    P = pt.p.blocks
    lam1 = _multiplier_values(P, egrad.blocks, kind, cfg)
    dlam1 = _multiplier_values(P, dgrad.blocks, kind, cfg) + _multiplier_values(
        xi.blocks, egrad.blocks, kind, cfg
    )
    n_dlam = _scaled(P, kind, dlam1)
    n_xi = _scaled(xi.blocks, kind, lam1)
    Z = tuple(d - a - b for d, a, b in zip(dgrad.blocks, n_dlam, n_xi))
    return _project(P, Z, kind, cfg)


def riemannian_hessian(pt, xi, cfg, ch, egrad=None):
    """Riemannian Hessian of the WSR objective applied to tangent vector ``xi``."""
    from .objective import dgrad_directional, euclidean_gradient

    _check_feasible(pt, cfg)
    r = tangency_residual(pt, xi, cfg)
    if r > HESSIAN_TANGENCY_TOL:
        raise PreconditionError(f"Hessian input is not tangent (residual {r:.3e})")
    if egrad is None:
        egrad = euclidean_gradient(cfg, ch, pt.p)
    dgrad = dgrad_directional(cfg, ch, pt.p, xi)
    return hessian_from_parts(pt, xi, egrad, dgrad, cfg)


def retraction_scalings(pt, xi, cfg, step=1.0):
    """Scale factors ``gamma`` mapping ``P + step * xi`` back onto the manifold.

    A length-1 array for TPC, one per user for PUPC, one per row for PAPC
    (the diagonal of the row-scaling matrix).
    """
    moved = tuple(a + step * b for a, b in zip(pt.p.blocks, xi.blocks))
    return _normalizing_scale(moved, pt.kind, cfg, DegenerateStepError)


def retract(pt, xi, cfg, step=1.0):
    """Move along ``step * xi`` and rescale onto the manifold."""
    if xi.shapes != pt.p.shapes:
        raise DimensionError(f"vector shapes {xi.shapes} do not match point {pt.p.shapes}")
    moved = tuple(a + step * b for a, b in zip(pt.p.blocks, xi.blocks))
    scale = _normalizing_scale(moved, pt.kind, cfg, DegenerateStepError)
    return ManifoldPoint(PrecoderStack(_scaled(moved, pt.kind, scale)), pt.kind)


def transport(pt, eta, xi, cfg, step=1.0):
    """Vector transport of ``xi`` to ``retract(pt, step * eta)`` by projection."""
    new = retract(pt, eta, cfg, step)
    return _project(new.p.blocks, xi.blocks, new.kind, cfg)


def concat_rows(pt):
    """The ``(M_t, N_d)`` matrix of a manifold point (for row-wise inspection)."""
    return stack_concat(pt.p)
