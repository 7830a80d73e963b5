"""Weighted-sum-rate objective, its Euclidean gradient and gradient derivative.

Notation follows the usual MU-MIMO downlink model. With ``V[i][l] = H_i P_l``

* ``R_i = s2 I + sum_{l != i} V[i][l] V[i][l]^H``  (interference plus noise)
* ``A_i = R_i^{-1} V[i][i]``
* ``C_i = (I + V[i][i]^H A_i)^{-1}``
* ``B_i = A_i C_i A_i^H``

and ``f(P) = -sum_i w_i logdet(I + V[i][i]^H R_i^{-1} V[i][i])`` in nats.
All inverses are Cholesky solves against ``M_i x M_i`` or ``d_i x d_i``
matrices; nothing of size ``M_t`` is ever factored.
"""

from dataclasses import dataclass

import numpy as np

from .counting import cho_factor, cho_solve, ctmm, logdet_from_factor, mm
from .errors import DimensionError, InvalidCacheError
from .types import ConstraintKind, PrecoderStack, TangentStack

__all__ = [
    "PerUserIntermediates",
    "EffectiveChannelCache",
    "HessianWorkspace",
    "effective_channels",
    "interference_covariance",
    "user_rate",
    "wsr_objective",
    "per_user_intermediates",
    "euclidean_gradient",
    "dgrad_directional",
    "hessian_workspace",
    "build_cache",
    "with_direction",
    "objective_from_cache",
    "cache_advance",
    "cache_drift",
]


@dataclass(frozen=True)
class PerUserIntermediates:
    R: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray


@dataclass(frozen=True)
class HessianWorkspace:
    """Per-receiver pieces of the gradient derivative along a direction ``xi``.

    ``M[l][i] = H_l (xi_i P_i^H + P_i xi_i^H) H_l^H`` is the perturbation of
    user ``l``'s received covariance caused by user ``i``'s block;
    ``F[l] = -R_l^{-1} dR_l B_l`` and ``E[l] = B_l dR_l B_l`` with
    ``dR_l = sum_{i != l} M[l][i]``.
    """

    M: tuple
    F: tuple
    E: tuple


@dataclass(frozen=True)
class EffectiveChannelCache:
    """Products ``V[i][l] = H_i P_l`` (and ``Uc[i][l] = H_i eta_l`` for a direction)."""

    channels: object
    point: PrecoderStack
    V: tuple
    direction: TangentStack = None
    Uc: tuple = None


def _check(cfg, ch, p):
    ch.check(cfg)
    p.check(cfg)


def effective_channels(ch, blocks):
    """``[[H_i X_l for l] for i]`` with one stacked product per block."""
    Hs = ch.stacked()
    rows = np.cumsum([0] + [h.shape[0] for h in ch.channels])
    cols = [mm(Hs, x) for x in blocks]
    return tuple(
        tuple(c[rows[i] : rows[i + 1]] for c in cols) for i in range(len(ch.channels))
    )


def _herm(a):
    return 0.5 * (a + a.conj().T)


def _covariances(cfg, V):
    """Interference-plus-noise covariance for every user from the V table."""
    out = []
    for i, row in enumerate(V):
        Mi = row[i].shape[0]
        R = cfg.noise_variance * np.eye(Mi, dtype=np.complex128)
        for l, v in enumerate(row):
            if l != i:
                R = R + mm(v, v.conj().T)
        out.append(_herm(R))
    return out


class _UserState:
    """Factorizations and intermediates for one user, built from the V table."""

    __slots__ = ("R", "Rfac", "A", "Cfac", "C", "B", "rate")

    def __init__(self, R, Vii):
        self.R = R
        self.Rfac = cho_factor(R, "interference covariance")
        self.A = cho_solve(self.Rfac, Vii)
        d = Vii.shape[1]
        G = _herm(np.eye(d, dtype=np.complex128) + ctmm(Vii, self.A))
        self.Cfac = cho_factor(G, "I + P^H H^H R^-1 H P")
        self.C = _herm(cho_solve(self.Cfac, np.eye(d, dtype=np.complex128)))
        self.B = _herm(mm(mm(self.A, self.C), self.A.conj().T))
        self.rate = logdet_from_factor(self.Cfac)

    def tinv(self, x):
        """``T^{-1} x`` with ``T = R + V_ii V_ii^H`` the total received covariance."""
        return cho_solve(self.Rfac, x) - mm(self.B, x)


def _states(cfg, V):
    return [_UserState(R, V[i][i]) for i, R in enumerate(_covariances(cfg, V))]


def interference_covariance(cfg, ch, p, i):
    """``s2 I + sum_{l != i} H_i P_l P_l^H H_i^H`` for user ``i`` (0-based)."""
    _check(cfg, ch, p)
    if not 0 <= i < cfg.num_users:
        raise DimensionError(f"user index {i} out of range")
    H = ch.channels[i]
    R = cfg.noise_variance * np.eye(H.shape[0], dtype=np.complex128)
    for l, P in enumerate(p.blocks):
        if l != i:
            v = mm(H, P)
            R = R + mm(v, v.conj().T)
    return _herm(R)


def user_rate(cfg, ch, p, i):
    """Rate of user ``i`` in nats: ``logdet(I + P_i^H H_i^H R_i^{-1} H_i P_i)``."""
    R = interference_covariance(cfg, ch, p, i)
    v = mm(ch.channels[i], p.blocks[i])
    return _UserState(R, v).rate


def wsr_objective(cfg, ch, p):
    """``f(P) = -sum_i w_i R_i``; lower is better."""
    _check(cfg, ch, p)
    V = effective_channels(ch, p.blocks)
    return _objective_from_V(cfg, V)


def _objective_from_V(cfg, V):
    total = 0.0
    for i, st in enumerate(_states(cfg, V)):
        total -= cfg.user_weights[i] * st.rate
    return total


def per_user_intermediates(cfg, ch, p, i):
    R = interference_covariance(cfg, ch, p, i)
    st = _UserState(R, mm(ch.channels[i], p.blocks[i]))
    return PerUserIntermediates(R=st.R, A=st.A, B=st.B, C=st.C)


def _stacked_adjoint(ch, pieces):
    """``sum_l H_l^H pieces[l]`` as a single ``(M_t, N_r) @ (N_r, d)`` product."""
    return ctmm(ch.stacked(), np.vstack(pieces))


def _gradient_from_states(cfg, ch, V, states):
    w = cfg.user_weights
    U = cfg.num_users
    blocks = []
    for k in range(U):
        pieces = []
        for l in range(U):
            if l == k:
                pieces.append(-2.0 * w[k] * mm(states[k].A, states[k].C))
            else:
                pieces.append(2.0 * w[l] * mm(states[l].B, V[l][k]))
        blocks.append(_stacked_adjoint(ch, pieces))
    return TangentStack(tuple(blocks))


def euclidean_gradient(cfg, ch, p):
    """Per-block gradient ``-2(w_i H_i^H A_i C_i - sum_{l != i} w_l H_l^H B_l H_l P_i)``."""
    _check(cfg, ch, p)
    V = effective_channels(ch, p.blocks)
    return _gradient_from_states(cfg, ch, V, _states(cfg, V))


def gradient_from_cache(cfg, cache):
    """Objective value and Euclidean gradient reusing the cached ``V`` table."""
    states = _states(cfg, cache.V)
    f = -sum(cfg.user_weights[i] * st.rate for i, st in enumerate(states))
    return f, _gradient_from_states(cfg, cache.channels, cache.V, states)


def hessian_workspace(V, W, states):
    U = len(V)
    M = tuple(
        tuple(
            mm(W[l][i], V[l][i].conj().T) + mm(V[l][i], W[l][i].conj().T) for i in range(U)
        )
        for l in range(U)
    )
    F, E = [], []
    for l in range(U):
        dR = sum((M[l][i] for i in range(U) if i != l), np.zeros_like(M[l][l]))
        st = states[l]
        F.append(-mm(cho_solve(st.Rfac, dR), st.B))
        E.append(mm(mm(st.B, dR), st.B))
    return HessianWorkspace(M=M, F=tuple(F), E=tuple(E))


def _dgrad(cfg, ch, V, states, xi_blocks):
    U = cfg.num_users
    w = cfg.user_weights
    W = effective_channels(ch, xi_blocks)
    ws = hessian_workspace(V, W, states)
    # Derivative of B_l: cross-user part from F, E; own-block part through T_l^{-1}.
    dB, TdT_AC = [], []
    for l in range(U):
        st = states[l]
        Mll = ws.M[l][l]
        own = st.tinv(st.tinv(Mll).conj().T).conj().T
        dB.append(ws.F[l] + ws.F[l].conj().T + ws.E[l] + own)
        dT = sum(ws.M[l], np.zeros_like(Mll))
        TdT_AC.append(st.tinv(mm(dT, mm(st.A, st.C))))
    blocks = []
    for k in range(U):
        pieces = []
        for l in range(U):
            st = states[l]
            if l == k:
                # d(A_k C_k) = T^{-1} H_k xi_k - T^{-1} dT_k A_k C_k
                pieces.append(-2.0 * w[k] * (st.tinv(W[k][k]) - TdT_AC[k]))
            else:
                pieces.append(2.0 * w[l] * (mm(dB[l], V[l][k]) + mm(st.B, W[l][k])))
        blocks.append(_stacked_adjoint(ch, pieces))
    return TangentStack(tuple(blocks))


def dgrad_directional(cfg, ch, p, xi):
    """Directional derivative of the Euclidean gradient field along ``xi``.

    Output block ``l`` collects the contributions of every input block:
    ``sum_i Dgrad f(P_l)[xi_i]``.
    """
    _check(cfg, ch, p)
    xi.check(cfg)
    V = effective_channels(ch, p.blocks)
    return _dgrad(cfg, ch, V, _states(cfg, V), xi.blocks)


def dgrad_from_cache(cfg, cache, states, xi):
    return _dgrad(cfg, cache.channels, cache.V, states, xi.blocks)


def user_states(cfg, cache):
    return _states(cfg, cache.V)


def build_cache(ch, p, direction=None):
    cache = EffectiveChannelCache(channels=ch, point=p, V=effective_channels(ch, p.blocks))
    if direction is not None:
        cache = with_direction(cache, direction)
    return cache


def with_direction(cache, direction):
    """Attach a search direction and its products ``Uc[i][l] = H_i eta_l``."""
    if direction.shapes != cache.point.shapes:
        raise InvalidCacheError("direction shape does not match cached point")
    Uc = effective_channels(cache.channels, direction.blocks)
    return EffectiveChannelCache(
        channels=cache.channels, point=cache.point, V=cache.V, direction=direction, Uc=Uc
    )


def objective_from_cache(cfg, cache):
    """Objective as a difference of logdets, using only the ``V`` table."""
    total = 0.0
    for i, row in enumerate(cache.V):
        Mi = row[i].shape[0]
        R = cfg.noise_variance * np.eye(Mi, dtype=np.complex128)
        for l, v in enumerate(row):
            if l != i:
                R = R + mm(v, v.conj().T)
        R = _herm(R)
        T = _herm(R + mm(row[i], row[i].conj().T))
        rate = logdet_from_factor(cho_factor(T, "total covariance")) - logdet_from_factor(
            cho_factor(R, "interference covariance")
        )
        total -= cfg.user_weights[i] * rate
    return total


def _validate_cache(cache):
    U = len(cache.point.blocks)
    if len(cache.V) != U or any(len(row) != U for row in cache.V):
        raise InvalidCacheError("V table size does not match number of users")
    for i, row in enumerate(cache.V):
        Mi = cache.channels.channels[i].shape[0]
        for l, v in enumerate(row):
            if v.shape != (Mi, cache.point.blocks[l].shape[1]):
                raise InvalidCacheError(f"V[{i}][{l}] has stale shape {v.shape}")


def cache_advance(cache, kind, step, scalings):
    """Cache for the retracted point ``scale(P + step * eta)``.

    ``scalings`` is the scalar ``gamma`` (TPC), the per-user factors
    (PUPC) or the per-antenna diagonal (PAPC). TPC and PUPC update ``V`` by
    rescaling ``V + step * Uc``; PAPC scales rows of ``P`` and must redo the
    channel products. The returned cache carries no direction.
    """
    kind = ConstraintKind.parse(kind)
    _validate_cache(cache)
    if cache.direction is None or cache.Uc is None:
        if step != 0:
            raise InvalidCacheError("cache has no search direction to advance along")
        eta_blocks = [np.zeros_like(b) for b in cache.point.blocks]
        Uc = None
    else:
        eta_blocks = cache.direction.blocks
        Uc = cache.Uc
    U = len(cache.point.blocks)
    moved = [P + step * e for P, e in zip(cache.point.blocks, eta_blocks)]
    if kind is ConstraintKind.TPC:
        g_arr = np.asarray(scalings, dtype=float).reshape(-1)
        if g_arr.size != 1:
            raise InvalidCacheError("TPC needs a single scaling")
        g = float(g_arr[0])
        new_blocks = [g * b for b in moved]
        V = tuple(
            tuple(
                g * (cache.V[i][l] + step * Uc[i][l]) if Uc is not None else g * cache.V[i][l]
                for l in range(U)
            )
            for i in range(U)
        )
    elif kind is ConstraintKind.PUPC:
        gs = [float(x) for x in scalings]
        if len(gs) != U:
            raise InvalidCacheError("need one scaling per user")
        new_blocks = [g * b for g, b in zip(gs, moved)]
        V = tuple(
            tuple(
                gs[l] * (cache.V[i][l] + step * Uc[i][l]) if Uc is not None else gs[l] * cache.V[i][l]
                for l in range(U)
            )
            for i in range(U)
        )
    else:
        diag = np.asarray(scalings, dtype=float).reshape(-1, 1)
        new_blocks = [diag * b for b in moved]
        V = effective_channels(cache.channels, new_blocks)
    return EffectiveChannelCache(channels=cache.channels, point=PrecoderStack(tuple(new_blocks)), V=V)


def cache_drift(cache):
    """Max relative Frobenius error of cached ``V`` against direct products."""
    direct = effective_channels(cache.channels, cache.point.blocks)
    worst = 0.0
    for row_c, row_d in zip(cache.V, direct):
        for a, b in zip(row_c, row_d):
            denom = max(np.linalg.norm(b), 1e-300)
            worst = max(worst, float(np.linalg.norm(a - b) / denom))
    return worst
