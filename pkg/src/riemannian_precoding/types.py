"""Configuration records and stacked complex-matrix containers.

A precoder is held as a tuple of per-user blocks ``P_i`` of shape
``(M_t, d_i)`` rather than one wide matrix, because the per-user constraint
works on block norms. :func:`stack_concat` / :func:`split_stack` convert to
and from the ``(M_t, N_d)`` concatenation used by per-antenna row operations.
"""

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError

__all__ = [
    "ConstraintKind",
    "SystemConfig",
    "ChannelSet",
    "PrecoderStack",
    "TangentStack",
    "stack_concat",
    "split_stack",
    "frobenius_inner",
    "frobenius_norm",
]


class ConstraintKind(enum.Enum):
    """Power constraint on the precoder stack."""

    TPC = "tpc"  # total power
    PUPC = "pupc"  # per user
    PAPC = "papc"  # per antenna (equal split)

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ConfigError(f"unknown constraint kind {value!r}") from None


@dataclass(frozen=True)
class SystemConfig:
    """Dimensions, powers and weights of one downlink scenario.

    Parameters
    ----------
    num_bs_antennas : int
        Transmit antennas ``M_t``.
    user_antennas, user_streams : tuple of int
        ``M_i`` and ``d_i`` per user.
    noise_variance : float
        Linear-scale noise power.
    total_power : float
        Linear-scale total transmit power ``P``.
    per_user_power, per_antenna_power : tuple of float, optional
        Default to the equal splits ``P / U`` and ``P / M_t``.
    user_weights : tuple of float, optional
        Defaults to all ones.
    """

    num_bs_antennas: int
    user_antennas: tuple
    user_streams: tuple
    noise_variance: float
    total_power: float = 1.0
    per_user_power: tuple = None
    per_antenna_power: tuple = None
    user_weights: tuple = None

    def __post_init__(self):
        ua = tuple(int(m) for m in self.user_antennas)
        us = tuple(int(d) for d in self.user_streams)
        object.__setattr__(self, "user_antennas", ua)
        object.__setattr__(self, "user_streams", us)
        U = len(ua)
        if U == 0 or len(us) != U:
            raise ConfigError("user_antennas and user_streams must be non-empty and of equal length")
        mt = int(self.num_bs_antennas)
        object.__setattr__(self, "num_bs_antennas", mt)
        if mt < 1:
            raise ConfigError("num_bs_antennas must be positive")
        for i, (m, d) in enumerate(zip(ua, us)):
            if not 1 <= d <= m <= mt:
                raise ConfigError(f"user {i}: need 1 <= d_i <= M_i <= M_t, got d={d}, M={m}, M_t={mt}")
        P = float(self.total_power)
        s2 = float(self.noise_variance)
        if not (P > 0 and math.isfinite(P)):
            raise ConfigError("total_power must be positive and finite")
        if not (s2 > 0 and math.isfinite(s2)):
            raise ConfigError("noise_variance must be positive and finite")
        object.__setattr__(self, "total_power", P)
        object.__setattr__(self, "noise_variance", s2)

        pu = self.per_user_power
        pu = tuple([P / U] * U) if pu is None else tuple(float(x) for x in pu)
        if len(pu) != U or any(not x > 0 for x in pu):
            raise ConfigError("per_user_power must hold U positive values")
        if abs(sum(pu) - P) > 1e-12 * P:
            raise ConfigError(f"per-user powers sum to {sum(pu)!r}, expected total {P!r}")
        object.__setattr__(self, "per_user_power", pu)

        pa = self.per_antenna_power
        pa = tuple([P / mt] * mt) if pa is None else tuple(float(x) for x in pa)
        if len(pa) != mt or any(abs(x - P / mt) > 1e-12 * (P / mt) for x in pa):
            raise ConfigError("per_antenna_power must be the equal split P / M_t on every antenna")
        object.__setattr__(self, "per_antenna_power", pa)

        w = self.user_weights
        w = tuple([1.0] * U) if w is None else tuple(float(x) for x in w)
        if len(w) != U or any(not (x >= 0 and math.isfinite(x)) for x in w):
            raise ConfigError("user_weights must hold U finite nonnegative values")
        if not any(x > 0 for x in w):
            raise ConfigError("at least one user weight must be positive")
        object.__setattr__(self, "user_weights", w)

    @property
    def num_users(self):
        return len(self.user_antennas)

    @property
    def total_rx_antennas(self):
        """``N_r``."""
        return sum(self.user_antennas)

    @property
    def total_streams(self):
        """``N_d``."""
        return sum(self.user_streams)

    def block_shapes(self):
        return [(self.num_bs_antennas, d) for d in self.user_streams]

    def replace(self, **changes):
        fields = {
            "num_bs_antennas": self.num_bs_antennas,
            "user_antennas": self.user_antennas,
            "user_streams": self.user_streams,
            "noise_variance": self.noise_variance,
            "total_power": self.total_power,
            "per_user_power": self.per_user_power,
            "per_antenna_power": self.per_antenna_power,
            "user_weights": self.user_weights,
        }
        if "total_power" in changes or "num_bs_antennas" in changes:
            fields["per_antenna_power"] = None
        if "total_power" in changes or "user_antennas" in changes:
            fields["per_user_power"] = None
        if "user_antennas" in changes:
            fields["user_weights"] = None
        fields.update(changes)
        return SystemConfig(**fields)


def _as_blocks(blocks):
    out = []
    for b in blocks:
        a = np.array(b, dtype=np.complex128)
        if a.ndim != 2:
            raise DimensionError(f"expected 2-D blocks, got shape {a.shape}")
        a.setflags(write=False)
        out.append(a)
    return tuple(out)


@dataclass(frozen=True)
class ChannelSet:
    """Per-user channel matrices ``H_i`` of shape ``(M_i, M_t)``."""

    channels: tuple

    def __post_init__(self):
        chans = _as_blocks(self.channels)
        for h in chans:
            if not np.all(np.isfinite(h)):
                raise DimensionError("channel matrices must be finite")
        object.__setattr__(self, "channels", chans)

    def __len__(self):
        return len(self.channels)

    def __getitem__(self, i):
        return self.channels[i]

    def check(self, cfg):
        if len(self.channels) != cfg.num_users:
            raise DimensionError(f"{len(self.channels)} channels for {cfg.num_users} users")
        for i, h in enumerate(self.channels):
            want = (cfg.user_antennas[i], cfg.num_bs_antennas)
            if h.shape != want:
                raise DimensionError(f"channel {i} has shape {h.shape}, expected {want}")
        return self

    def stacked(self):
        """All channels stacked vertically, shape ``(N_r, M_t)``."""
        return np.vstack(self.channels)


@dataclass(frozen=True, eq=False)
class _Stack:
    blocks: tuple = field()

    # make ``numpy_scalar * stack`` defer to the stack's own arithmetic
    __array_ufunc__ = None

    def __post_init__(self):
        object.__setattr__(self, "blocks", _as_blocks(self.blocks))

    def __len__(self):
        return len(self.blocks)

    def __getitem__(self, i):
        return self.blocks[i]

    def __iter__(self):
        return iter(self.blocks)

    @property
    def shapes(self):
        return [b.shape for b in self.blocks]

    def check(self, cfg):
        if len(self.blocks) != cfg.num_users:
            raise DimensionError(f"{len(self.blocks)} blocks for {cfg.num_users} users")
        for i, (b, shp) in enumerate(zip(self.blocks, cfg.block_shapes())):
            if b.shape != shp:
                raise DimensionError(f"block {i} has shape {b.shape}, expected {shp}")
        return self

    def is_finite(self):
        return all(np.all(np.isfinite(b)) for b in self.blocks)

    def _check_compatible(self, other):
        if self.shapes != other.shapes:
            raise DimensionError(f"stack shapes differ: {self.shapes} vs {other.shapes}")

    def __add__(self, other):
        self._check_compatible(other)
        return TangentStack(tuple(a + b for a, b in zip(self.blocks, other.blocks)))

    def __sub__(self, other):
        self._check_compatible(other)
        return TangentStack(tuple(a - b for a, b in zip(self.blocks, other.blocks)))

    def __mul__(self, scalar):
        return TangentStack(tuple(scalar * b for b in self.blocks))

    __rmul__ = __mul__

    def __neg__(self):
        return TangentStack(tuple(-b for b in self.blocks))

    def array_equal(self, other):
        return self.shapes == other.shapes and all(
            np.array_equal(a, b) for a, b in zip(self.blocks, other.blocks)
        )


@dataclass(frozen=True, eq=False)
class PrecoderStack(_Stack):
    """The optimization variable ``P = (P_1, ..., P_U)``."""

    def __post_init__(self):
        super().__post_init__()
        if not self.is_finite():
            raise DimensionError("precoder entries must be finite")


@dataclass(frozen=True, eq=False)
class TangentStack(_Stack):
    """A tangent vector: one block per user, shaped like its base precoder."""

    @classmethod
    def zeros_like(cls, stack):
        return cls(tuple(np.zeros(b.shape, dtype=np.complex128) for b in stack.blocks))


def stack_concat(p):
    """Concatenate the blocks column-wise into an ``(M_t, N_d)`` matrix."""
    shapes = {b.shape[0] for b in p.blocks}
    if len(shapes) != 1:
        raise DimensionError(f"blocks disagree on row count: {sorted(shapes)}")
    return np.hstack(p.blocks)


def split_stack(mat, widths, cls=PrecoderStack):
    """Inverse of :func:`stack_concat` for the given block widths."""
    mat = np.asarray(mat)
    widths = [int(w) for w in widths]
    if mat.ndim != 2 or mat.shape[1] != sum(widths):
        raise DimensionError(f"cannot split shape {mat.shape} into widths {widths}")
    edges = np.cumsum([0] + widths)
    return cls(tuple(mat[:, a:b] for a, b in zip(edges[:-1], edges[1:])))


def frobenius_inner(a, b):
    """Product metric ``sum_i Re tr(a_i^H b_i)``."""
    if a.shapes != b.shapes:
        raise DimensionError(f"stack shapes differ: {a.shapes} vs {b.shapes}")
    total = 0.0
    for x, y in zip(a.blocks, b.blocks):
        total += float(np.vdot(x, y).real)
    return total


def frobenius_norm(a):
    return math.sqrt(max(frobenius_inner(a, a), 0.0))
