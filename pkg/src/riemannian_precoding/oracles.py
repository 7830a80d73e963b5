"""Reference precoders and independent numerical checks.

The finite-difference gradient only calls :func:`wsr_objective`; the grid
search only calls :func:`wsr_objective` on explicitly parameterized feasible
points. Neither touches the analytic gradient or Hessian code paths.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .counting import cho_factor, cho_solve
from .errors import DimensionError, PrecodingError
from .manifolds import ManifoldPoint, normalize_to_manifold, project_tangent
from .objective import euclidean_gradient, wsr_objective
from .types import ConstraintKind, PrecoderStack, TangentStack

__all__ = [
    "OracleReport",
    "BruteForceResult",
    "rzf_precoder",
    "fd_euclidean_gradient",
    "fd_riemannian_gradient",
    "gradient_check",
    "brute_force_small_wsr",
]


@dataclass(frozen=True)
class OracleReport:
    max_rel_error: float
    worst_coordinate: tuple
    fd_step: float

    def __post_init__(self):
        if not self.fd_step > 0:
            raise ValueError("fd_step must be positive")


@dataclass(frozen=True)
class BruteForceResult:
    point: ManifoldPoint
    objective: float
    gap_bound: float
    n_evaluated: int


def rzf_precoder(cfg, ch):
    """Regularized zero-forcing, normalized onto the total-power sphere.

    ``G = H^H (H H^H + (U * mean(M_i) * s2 / P) I)^{-1}`` with ``H`` the
    stacked channel; user ``i`` takes the columns belonging to its receive
    antennas, reduced to its ``d_i`` principal directions when ``d_i < M_i``.
    """
    ch.check(cfg)
    H = ch.stacked()
    Nr = H.shape[0]
    load = cfg.num_users * float(np.mean(cfg.user_antennas)) * cfg.noise_variance / cfg.total_power
    gram = H @ H.conj().T + load * np.eye(Nr)
    fac = cho_factor(0.5 * (gram + gram.conj().T), "regularized Gram matrix")
    G = cho_solve(fac, H).conj().T  # H^H (H H^H + a I)^{-1}, the Gram being Hermitian
    blocks = []
    start = 0
    for m, d in zip(cfg.user_antennas, cfg.user_streams):
        Gi = G[:, start : start + m]
        start += m
        if d < m:
            _, _, vh = np.linalg.svd(Gi, full_matrices=False)
            Gi = Gi @ vh[:d].conj().T
        blocks.append(Gi)
    return normalize_to_manifold(PrecoderStack(tuple(blocks)), ConstraintKind.TPC, cfg)


def fd_euclidean_gradient(cfg, ch, p, step=1e-5):
    """Central differences of the objective along every real and imaginary coordinate."""
    blocks = [np.array(b) for b in p.blocks]
    out = []
    for bi, b in enumerate(blocks):
        g = np.zeros_like(b)
        for idx in np.ndindex(*b.shape):
            parts = []
            for unit in (1.0, 1j):
                orig = b[idx]
                b[idx] = orig + step * unit
                fp = wsr_objective(cfg, ch, PrecoderStack(tuple(blocks)))
                b[idx] = orig - step * unit
                fm = wsr_objective(cfg, ch, PrecoderStack(tuple(blocks)))
                b[idx] = orig
                parts.append((fp - fm) / (2.0 * step))
            g[idx] = parts[0] + 1j * parts[1]
        out.append(g)
    return TangentStack(tuple(out))


def fd_riemannian_gradient(cfg, ch, pt, step=1e-5):
    """Finite-difference Euclidean gradient projected onto the tangent space at ``pt``."""
    return project_tangent(pt, fd_euclidean_gradient(cfg, ch, pt.p, step), cfg)


def gradient_check(cfg, ch, pt, step=1e-5, analytic=None):
    """Compare the analytic Riemannian gradient with the FD oracle, coordinate by coordinate.

    The error per real coordinate is ``|a - fd| / (1 + |a|)``.
    """
    if analytic is None:
        analytic = project_tangent(pt, euclidean_gradient(cfg, ch, pt.p), cfg)
    fd = fd_riemannian_gradient(cfg, ch, pt, step)
    worst, where = 0.0, None
    for bi, (a, b) in enumerate(zip(analytic.blocks, fd.blocks)):
        for part, fa, fb in (("re", a.real, b.real), ("im", a.imag, b.imag)):
            err = np.abs(fa - fb) / (1.0 + np.abs(fa))
            idx = np.unravel_index(int(np.argmax(err)), err.shape)
            if where is None or err[idx] > worst:
                worst, where = float(err[idx]), (bi, *map(int, idx), part)
    return OracleReport(worst, where, step)


def _sphere_grid(n, grid):
    """Points of the unit sphere in R^n on a hyperspherical-angle grid."""
    if n == 1:
        return np.array([[1.0], [-1.0]])
    polar = np.linspace(0.0, math.pi, grid)
    azim = np.linspace(0.0, 2.0 * math.pi, grid, endpoint=False)
    axes = [polar] * (n - 2) + [azim]
    pts = []
    for angles in itertools.product(*axes):
        x = np.empty(n)
        s = 1.0
        for j, th in enumerate(angles):
            x[j] = s * math.cos(th)
            s *= math.sin(th)
        x[n - 1] = s
        pts.append(x)
    return np.unique(np.round(np.array(pts), 15), axis=0)


def _units(cfg, kind):
    """Index sets (block, row) of the entries sharing each sphere."""
    U, Mt = cfg.num_users, cfg.num_bs_antennas
    entries = [(i, r, c) for i in range(U) for r in range(Mt) for c in range(cfg.user_streams[i])]
    if kind is ConstraintKind.TPC:
        return [entries], [cfg.total_power]
    if kind is ConstraintKind.PUPC:
        return [[e for e in entries if e[0] == i] for i in range(U)], list(cfg.per_user_power)
    return [[e for e in entries if e[1] == r] for r in range(Mt)], list(cfg.per_antenna_power)


def brute_force_small_wsr(cfg, ch, grid=41, kind=ConstraintKind.TPC, max_real_dim=6):
    """Exhaustive search of the feasible set on an angular grid.

    Each power constraint defines a sphere over a group of complex entries
    (all entries, one user block, or one antenna row); each sphere of real
    dimension ``n`` is sampled by ``n - 1`` hyperspherical angles with
    ``grid`` values each. ``gap_bound`` is a first-order estimate of how far
    the true optimum can lie below the best grid value: twice the largest
    gradient norm seen times the largest distance from a sphere point to the
    grid.
    """
    kind = ConstraintKind.parse(kind)
    ch.check(cfg)
    real_dim = 2 * cfg.num_bs_antennas * cfg.total_streams
    if real_dim > max_real_dim:
        raise PrecodingError(f"real dimension {real_dim} exceeds brute-force limit {max_real_dim}")
    groups, powers = _units(cfg, kind)
    grids = [_sphere_grid(2 * len(g), grid) * math.sqrt(pw) for g, pw in zip(groups, powers)]
    best_f, best_blocks = math.inf, None
    gmax = 0.0
    count = 0
    for combo in itertools.product(*grids):
        blocks = [np.zeros((cfg.num_bs_antennas, d), dtype=np.complex128) for d in cfg.user_streams]
        for g, x in zip(groups, combo):
            for j, (i, r, c) in enumerate(g):
                blocks[i][r, c] = x[2 * j] + 1j * x[2 * j + 1]
        p = PrecoderStack(tuple(blocks))
        f = wsr_objective(cfg, ch, p)
        count += 1
        gn = math.sqrt(sum(float(np.vdot(b, b).real) for b in euclidean_gradient(cfg, ch, p).blocks))
        gmax = max(gmax, gn)
        if f < best_f:
            best_f, best_blocks = f, blocks
    steps = [math.pi / (grid - 1), 2.0 * math.pi / grid]
    dtheta = max(steps)
    n_angles = max(2 * len(g) - 1 for g in groups)
    radius = math.sqrt(max(powers))
    dist = radius * (dtheta / 2.0) * math.sqrt(max(n_angles, 1)) * math.sqrt(len(groups))
    if real_dim == 0:
        raise DimensionError("empty problem")
    point = ManifoldPoint(PrecoderStack(tuple(best_blocks)), kind)
    return BruteForceResult(point, best_f, 2.0 * gmax * dist, count)
