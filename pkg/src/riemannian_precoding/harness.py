"""Batch experiment driver: channels, seeded runs, traces and summary tables.

Noise convention: the SNR of a run is the *total* transmit power over the
noise variance, ``SNR_dB = 10 log10(P / s2)``, so ``s2 = P * 10^(-SNR_dB/10)``.
"""

import csv
import dataclasses
import hashlib
import json
import math
import re
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ChannelFileError, ConfigError, DimensionError, EmptyInputError, PrecodingError, StalledLineSearchError
from .manifolds import normalize_to_manifold
from .objective import wsr_objective
from .optimizers import (
    LineSearchParams,
    StopCriteria,
    TrustRegionParams,
    rcg_solve,
    rsd_solve,
    rtr_solve,
)
from .oracles import rzf_precoder
from .types import ChannelSet, ConstraintKind, PrecoderStack, SystemConfig, split_stack, stack_concat

__all__ = [
    "PRNG_STREAM",
    "SNR_CONVENTION",
    "ExperimentSpec",
    "RunRecord",
    "RunRow",
    "SummaryRow",
    "generate_channels",
    "initial_point",
    "save_channels",
    "load_channels",
    "parse_spec",
    "load_spec",
    "noise_variance_for_snr",
    "run_single",
    "channels_for",
    "load_precoder",
    "snr_tag",
    "run_experiment",
    "summarize",
    "write_summary",
    "read_runs",
    "write_trace_csv",
    "TRACE_COLUMNS",
]

PRNG_STREAM = "numpy-pcg64-seedseq/v1"
SNR_CONVENTION = "total-power: SNR_dB = 10*log10(P / noise_variance)"
TRACE_COLUMNS = ("k", "f_nats", "gradnorm", "alpha_or_delta", "rho", "resid", "n_in", "flops")
SOLVERS = ("rsd", "rcg", "rtr")
INITS = ("gaussian", "rzf")

_CHANNEL_STREAM = 0
_INIT_STREAM = 1


def _seed_sequence(seed, stream):
    seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF  # any 64-bit integer, negative ones included
    return np.random.SeedSequence(seed, spawn_key=(stream,))


def _complex_gaussian(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)


def generate_channels(cfg, seed):
    """I.i.d. CN(0, 1) channels, deterministic per ``(seed, cfg shape)``."""
    rng = np.random.Generator(np.random.PCG64(_seed_sequence(seed, _CHANNEL_STREAM)))
    return ChannelSet(
        tuple(_complex_gaussian(rng, (m, cfg.num_bs_antennas)) for m in cfg.user_antennas)
    )


def initial_point(cfg, ch, kind, seed, init="gaussian"):
    """Seeded Gaussian stack normalized onto the manifold, or the RZF precoder.

    The RZF precoder is feasible for the total-power sphere; for the
    per-user and per-antenna manifolds it is rescaled onto them.
    """
    kind = ConstraintKind.parse(kind)
    if init == "rzf":
        return normalize_to_manifold(rzf_precoder(cfg, ch).p, kind, cfg)
    if init != "gaussian":
        raise ConfigError(f"unknown init {init!r}; expected one of {INITS}")
    rng = np.random.Generator(np.random.PCG64(_seed_sequence(seed, _INIT_STREAM)))
    p = PrecoderStack(tuple(_complex_gaussian(rng, (cfg.num_bs_antennas, d)) for d in cfg.user_streams))
    return normalize_to_manifold(p, kind, cfg)


# ---------------------------------------------------------------------------
# channel files

_HEADER_RE = re.compile(r"^CHANNELS v1 U=(\d+) Mt=(\d+) Mi=(\d+(?:,\d+)*)$")


def save_channels(path, ch):
    """Write channels in the ``CHANNELS v1`` format."""
    if len(ch) == 0:
        raise DimensionError("cannot write an empty channel set")
    mt = ch[0].shape[1]
    if any(h.shape[1] != mt for h in ch.channels):
        raise DimensionError("all channels must share the transmit dimension")
    header = f"CHANNELS v1 U={len(ch)} Mt={mt} Mi={','.join(str(h.shape[0]) for h in ch.channels)}\n"
    body = b"".join(np.ascontiguousarray(h, dtype="<c16").tobytes(order="C") for h in ch.channels)
    Path(path).write_bytes(header.encode("ascii") + body)


def load_channels(path, cfg=None):
    """Read a ``CHANNELS v1`` file; checks dimensions against ``cfg`` when given."""
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise ChannelFileError("line 1: header line is not terminated", offset=len(data))
    try:
        header = data[:nl].decode("ascii")
    except UnicodeDecodeError as exc:
        raise ChannelFileError("line 1: header is not ASCII", offset=exc.start) from None
    m = _HEADER_RE.match(header.rstrip("\r"))
    if not m:
        raise ChannelFileError(f"line 1: malformed header {header!r}", offset=0)
    U, Mt = int(m.group(1)), int(m.group(2))
    Mi = [int(x) for x in m.group(3).split(",")]
    if len(Mi) != U:
        raise ChannelFileError(f"line 1: header declares U={U} but lists {len(Mi)} antenna counts", offset=0)
    if U < 1 or Mt < 1 or min(Mi) < 1:
        raise ChannelFileError("line 1: dimensions must be positive", offset=0)
    start = nl + 1
    need = 16 * Mt * sum(Mi)
    have = len(data) - start
    if have < need:
        raise ChannelFileError(
            f"truncated channel data: expected {need} bytes after the header, found {have} "
            f"({need - have} bytes missing)",
            offset=len(data),
        )
    if have > need:
        raise ChannelFileError(f"{have - need} trailing bytes after channel data", offset=start + need)
    if cfg is not None:
        if Mt != cfg.num_bs_antennas:
            raise DimensionError(f"file has Mt={Mt}, configuration expects {cfg.num_bs_antennas}")
        if tuple(Mi) != cfg.user_antennas:
            raise DimensionError(f"file has Mi={tuple(Mi)}, configuration expects {cfg.user_antennas}")
    flat = np.frombuffer(data, dtype="<c16", offset=start)
    chans, pos = [], 0
    for m_i in Mi:
        n = m_i * Mt
        chans.append(flat[pos : pos + n].reshape(m_i, Mt).astype(np.complex128))
        pos += n
    return ChannelSet(tuple(chans))


# ---------------------------------------------------------------------------
# experiment specification


@dataclass(frozen=True)
class ExperimentSpec:
    """One batch of runs: a scenario swept over SNR points and seeds.

    ``user_streams`` defaults to ``user_antennas``; ``channel_source`` is
    ``"synthetic"`` or a path to a channel file. ``None`` solver settings
    take the solver defaults.
    """

    num_bs_antennas: int = 16
    user_antennas: tuple = (2, 2, 2, 2)
    user_streams: tuple = None
    total_power: float = 1.0
    per_user_power: tuple = None
    user_weights: tuple = None
    constraint: ConstraintKind = ConstraintKind.TPC
    solver: str = "rcg"
    snr_points_db: tuple = (20.0,)
    seeds: tuple = (0,)
    channel_source: str = "synthetic"
    output_dir: str = "results"
    init: str = "gaussian"
    alpha0: float = 1e-3
    backtrack_ratio: float = 0.5
    armijo_c: float = 1e-4
    max_backtracks: int = 60
    delta0: float = None
    delta_max: float = None
    rho_threshold: float = 0.05
    n_sub: int = 6
    max_outer: int = 5000
    grad_norm_tol: float = None
    rel_obj_tol: float = 1e-10
    patience: int = 3
    workers: int = 1
    record_timing: bool = True

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("constraint", ConstraintKind.parse(self.constraint))
        set_("user_antennas", tuple(int(m) for m in self.user_antennas))
        set_("user_streams", self.user_antennas if self.user_streams is None else tuple(int(d) for d in self.user_streams))
        set_("snr_points_db", tuple(float(s) for s in self.snr_points_db))
        set_("seeds", tuple(int(s) for s in self.seeds))
        set_("solver", str(self.solver).lower())
        set_("init", str(self.init).lower())
        if not self.snr_points_db:
            raise ConfigError("snr_points_db must be nonempty")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if not all(math.isfinite(s) for s in self.snr_points_db):
            raise ConfigError("SNR points must be finite")
        if self.solver not in SOLVERS:
            raise ConfigError(f"unknown solver {self.solver!r}; expected one of {SOLVERS}")
        if self.init not in INITS:
            raise ConfigError(f"unknown init {self.init!r}; expected one of {INITS}")
        if self.workers < 1:
            raise ConfigError("workers must be positive")
        # validate the scenario and solver settings eagerly
        self.system_config(self.snr_points_db[0])
        self.line_search(), self.trust_region().resolved(self.total_power), self.stop_criteria()

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def system_config(self, snr_db):
        return SystemConfig(
            num_bs_antennas=self.num_bs_antennas,
            user_antennas=self.user_antennas,
            user_streams=self.user_streams,
            noise_variance=noise_variance_for_snr(snr_db, self.total_power),
            total_power=self.total_power,
            per_user_power=self.per_user_power,
            user_weights=self.user_weights,
        )

    def line_search(self):
        return LineSearchParams(self.alpha0, self.backtrack_ratio, self.armijo_c, self.max_backtracks)

    def trust_region(self):
        return TrustRegionParams(self.delta0, self.delta_max, self.rho_threshold, self.n_sub)

    def stop_criteria(self):
        return StopCriteria(self.max_outer, self.grad_norm_tol, self.rel_obj_tol, self.patience)

    def canonical(self):
        """Fields that determine the numerical results (no output location or parallelism)."""
        d = dataclasses.asdict(self)
        for k in ("output_dir", "workers", "record_timing"):
            d.pop(k)
        d["constraint"] = self.constraint.value
        return d

    @property
    def spec_hash(self):
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_FIELD_TYPES = {f.name: f for f in dataclasses.fields(ExperimentSpec)}
_INT_LISTS = {"user_antennas", "user_streams", "seeds"}
_FLOAT_LISTS = {"per_user_power", "user_weights", "snr_points_db"}
_INTS = {"num_bs_antennas", "max_backtracks", "n_sub", "max_outer", "patience", "workers"}
_OPT_FLOATS = {"delta0", "delta_max", "grad_norm_tol"}
_FLOATS = {"total_power", "alpha0", "backtrack_ratio", "armijo_c", "rho_threshold", "rel_obj_tol"}
_BOOLS = {"record_timing"}


def _convert(key, raw):
    if key in _INT_LISTS:
        return tuple(int(x) for x in raw.split(",") if x.strip())
    if key in _FLOAT_LISTS:
        return tuple(float(x) for x in raw.split(",") if x.strip())
    if key in _INTS:
        return int(raw)
    if key in _FLOATS:
        return float(raw)
    if key in _OPT_FLOATS:
        return None if raw.lower() in ("none", "default", "") else float(raw)
    if key in _BOOLS:
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("true", "1", "yes")
    return raw


def parse_spec(text):
    """Parse ``key = value`` lines (``#`` starts a comment; lists are comma-separated)."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _convert(key, raw)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None
    try:
        return ExperimentSpec(**values)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def load_spec(path):
    return parse_spec(Path(path).read_text())


def noise_variance_for_snr(snr_db, total_power=1.0):
    return total_power * 10.0 ** (-float(snr_db) / 10.0)


# ---------------------------------------------------------------------------
# running


@dataclass
class RunRecord:
    spec_hash: str
    seed: int
    snr_db: float
    solver: str
    constraint: ConstraintKind
    wsr_nats: float
    wsr_bits: float
    iterations: int
    wall_time: float
    flops_per_iteration: float
    stop_reason: str
    trace: object = None
    precoder: np.ndarray = None
    error: str = ""

    @property
    def ok(self):
        return not self.error

    def row(self):
        return RunRow(
            self.seed, self.snr_db, self.solver, self.constraint.value, self.wsr_nats, self.wsr_bits,
            self.iterations, self.wall_time, self.flops_per_iteration, self.stop_reason, self.error,
        )


@dataclass(frozen=True)
class RunRow:
    """The per-run line of ``runs.csv``."""

    seed: int
    snr_db: float
    solver: str
    constraint: str
    wsr_nats: float
    wsr_bits: float
    iterations: int
    wall_time: float
    flops_per_iteration: float
    stop_reason: str
    error: str = ""


def _solve(spec, cfg, ch, p0):
    kind = spec.constraint
    stop = spec.stop_criteria()
    if spec.solver == "rsd":
        return rsd_solve(cfg, ch, kind, p0, spec.line_search(), stop)
    if spec.solver == "rcg":
        return rcg_solve(cfg, ch, kind, p0, spec.line_search(), stop)
    return rtr_solve(cfg, ch, kind, p0, spec.trust_region(), stop)


def channels_for(spec, cfg, seed):
    if spec.channel_source == "synthetic":
        return generate_channels(cfg, seed)
    return load_channels(spec.channel_source, cfg)


def run_single(spec, seed, snr_db):
    """Solve one ``(seed, snr)`` instance; solver failures are captured in the record."""
    cfg = spec.system_config(snr_db)
    ch = channels_for(spec, cfg, seed)
    p0 = initial_point(cfg, ch, spec.constraint, seed, spec.init)
    t0 = time.perf_counter()
    error, trace, point = "", None, None
    try:
        point, trace = _solve(spec, cfg, ch, p0)
    except StalledLineSearchError as exc:
        error, trace = f"{type(exc).__name__}: {exc}", exc.trace
    except (PrecodingError, np.linalg.LinAlgError, FloatingPointError) as exc:
        error = f"{type(exc).__name__}: {exc}"
    wall = time.perf_counter() - t0 if spec.record_timing else 0.0
    if point is not None:
        f = wsr_objective(cfg, ch, point.p)
        mat = stack_concat(point.p)
        iters = trace.iterations
        flops = (trace.final.flops - trace.records[0].flops) / iters if iters else 0.0
        stop = trace.stop_reason
    else:
        f, mat, flops, stop = math.nan, None, math.nan, "error"
        iters = trace.iterations if trace is not None else 0
    return RunRecord(
        spec.spec_hash, int(seed), float(snr_db), spec.solver, spec.constraint, -f, -f / math.log(2.0),
        iters, wall, float(flops), stop, trace, mat, error,
    )


def _run_task(args):
    return run_single(*args)


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return str(x)


def snr_tag(snr_db):
    return f"{snr_db:g}"


def write_trace_csv(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in trace.records:
            w.writerow([r.k, _fmt(float(r.f)), _fmt(float(r.grad_norm)), _fmt(float(r.step)),
                        _fmt(float(r.rho)), _fmt(float(r.residual)), r.n_in, r.flops])


def _write_runs(path, rows):
    names = [f.name for f in dataclasses.fields(RunRow)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in rows:
            w.writerow([_fmt(getattr(row, n)) for n in names])


def read_runs(directory):
    """Load the per-run rows written by :func:`run_experiment`."""
    path = Path(directory) / "runs.csv"
    if not path.exists():
        raise EmptyInputError(f"no runs.csv in {directory}")
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(
                RunRow(
                    int(rec["seed"]), float(rec["snr_db"]), rec["solver"], rec["constraint"],
                    float(rec["wsr_nats"]), float(rec["wsr_bits"]), int(rec["iterations"]),
                    float(rec["wall_time"]), float(rec["flops_per_iteration"]), rec["stop_reason"],
                    rec["error"],
                )
            )
    return rows


def run_experiment(spec, write=True):
    """Run every ``(seed, snr)`` pair of ``spec``; returns records ordered by (seed, snr).

    With ``write`` set, the output directory receives one
    ``trace_<seed>_<snr>.csv`` and ``precoder_<seed>_<snr>.npy`` per run plus
    ``runs.csv``, ``summary.csv`` and ``summary.json``. Runs may execute in
    ``spec.workers`` processes; all files are written afterwards in order.
    """
    tasks = [(spec, seed, snr) for seed in spec.seeds for snr in spec.snr_points_db]
    if spec.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            records = list(pool.map(_run_task, tasks))
    else:
        records = [_run_task(t) for t in tasks]
    records.sort(key=lambda r: (r.seed, r.snr_db))
    if write:
        out = Path(spec.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        for r in records:
            tag = f"{r.seed}_{snr_tag(r.snr_db)}"
            if r.trace is not None:
                write_trace_csv(out / f"trace_{tag}.csv", r.trace)
            if r.precoder is not None:
                np.save(out / f"precoder_{tag}.npy", r.precoder)
        _write_runs(out / "runs.csv", [r.row() for r in records])
        write_summary(summarize(records), out, spec)
    return records


def load_precoder(directory, seed, snr_db, cfg):
    """The stored final precoder of one run as a :class:`PrecoderStack`."""
    mat = np.load(Path(directory) / f"precoder_{seed}_{snr_tag(snr_db)}.npy")
    return split_stack(mat, cfg.user_streams)


# ---------------------------------------------------------------------------
# summaries


@dataclass(frozen=True)
class SummaryRow:
    solver: str
    constraint: str
    snr_db: float
    n_runs: int
    n_failed: int
    mean_wsr_bits: float
    median_wsr_bits: float
    mean_iterations: float
    mean_wall_time: float
    mean_flops_per_iteration: float


def _mean(xs):
    return statistics.fmean(xs) if xs else math.nan


def summarize(records):
    """Aggregate runs per (solver, constraint, snr); failed runs only count in ``n_failed``."""
    rows = [r.row() if isinstance(r, RunRecord) else r for r in records]
    if not rows:
        raise EmptyInputError("no run records to summarize")
    groups = {}
    for r in rows:
        groups.setdefault((r.solver, r.constraint, r.snr_db), []).append(r)
    out = []
    for (solver, kind, snr), grp in sorted(groups.items()):
        ok = [r for r in grp if not r.error]
        bits = [r.wsr_bits for r in ok]
        out.append(
            SummaryRow(
                solver, kind, snr, len(grp), len(grp) - len(ok),
                _mean(bits), statistics.median(bits) if bits else math.nan,
                _mean([float(r.iterations) for r in ok]),
                _mean([r.wall_time for r in ok]),
                _mean([r.flops_per_iteration for r in ok]),
            )
        )
    return out


def _json_value(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def write_summary(rows, directory, spec=None):
    """Write ``summary.csv`` and ``summary.json`` (the latter with run metadata)."""
    if not rows:
        raise EmptyInputError("empty summary table")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = [f.name for f in dataclasses.fields(SummaryRow)]
    with open(directory / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in rows:
            w.writerow([_fmt(getattr(row, n)) for n in names])
    meta = {"snr_convention": SNR_CONVENTION, "prng_stream": PRNG_STREAM, "wsr_unit": "bits/s/Hz"}
    if spec is not None:
        meta["spec_hash"] = spec.spec_hash
        meta["spec"] = spec.canonical()
    doc = {
        "metadata": meta,
        "rows": [{n: _json_value(getattr(row, n)) for n in names} for row in rows],
    }
    (directory / "summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
