"""Initial-state sampling, dataset generation and the binary dataset file."""

from __future__ import annotations

import logging
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import CartpoleParams, FixedConstants, OcpConfig
from .dynamics import wrap_angle
from .ocp import NonFiniteError, build_nlp
from .sensitivity import SingularKktError, WeaklyActiveError, kkt_sensitivity
from .solver import (InfeasibleError, MaxIterError, SingularError, SolverConfig, SolverFailure,
                     multistart_solve)

log = logging.getLogger(__name__)

MAGIC = b"AMPCDS01"
HEADER = struct.Struct("<8sQI")
RECORD = np.dtype([("x", "<f8", (4,)), ("u0", "<f8"), ("sens", "<f8", (5,)), ("flags", "<u4")])

# skip reasons; the flags word of a persisted record holds the active-set size
OK, SKIP_MAXITER, SKIP_INFEASIBLE, SKIP_SINGULAR, SKIP_SINGULAR_KKT, SKIP_WEAK, SKIP_NONFINITE = range(7)
SKIP_NAMES = {
    SKIP_MAXITER: "max_iter",
    SKIP_INFEASIBLE: "infeasible",
    SKIP_SINGULAR: "singular",
    SKIP_SINGULAR_KKT: "singular_kkt",
    SKIP_WEAK: "weakly_active",
    SKIP_NONFINITE: "non_finite",
}


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class SampleSpec:
    n_total: int = 10_000
    dense_frac: float = 0.01
    ranges: tuple = ((-0.35, 0.35), (-2.0, 2.0), (-np.pi, np.pi), (-10.0, 10.0))
    upright_ranges: tuple = ((-0.2, 0.2), (-0.5, 0.5), (-0.3, 0.3), (-1.0, 1.0))
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dense_frac <= 1.0:
            raise ValueError("dense_frac must lie in [0, 1]")
        if self.n_total < 0:
            raise ValueError("n_total must be >= 0")
        for lo, hi in tuple(self.ranges) + tuple(self.upright_ranges):
            if not lo < hi:
                raise ValueError(f"range ({lo}, {hi}) is not ordered")

    @property
    def n_dense(self) -> int:
        return int(round(self.dense_frac * self.n_total))


def sample_states(spec: SampleSpec) -> np.ndarray:
    """Uniform samples over ``ranges`` followed by the dense cluster near upright."""
    rng = np.random.default_rng(spec.seed)
    n_dense = spec.n_dense
    lo, hi = np.array(spec.ranges, dtype=float).T
    dlo, dhi = np.array(spec.upright_ranges, dtype=float).T
    X = np.vstack([
        rng.uniform(lo, hi, size=(spec.n_total - n_dense, 4)),
        rng.uniform(dlo, dhi, size=(n_dense, 4)),
    ])
    X[:, 2] = wrap_angle(X[:, 2])
    return X


@dataclass
class Dataset:
    """Successful records in input order, plus bookkeeping for skipped states."""

    X: np.ndarray
    u0: np.ndarray
    sens: np.ndarray
    flags: np.ndarray
    skipped: int = 0
    skip_reasons: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def success_rate(self) -> float:
        total = len(self) + self.skipped
        return len(self) / total if total else 1.0

    @property
    def active_set_sizes(self) -> np.ndarray:
        return self.flags & 0xFF

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.u0[idx], self.sens[idx], self.flags[idx])

    def split(self, val_frac: float, seed) -> tuple["Dataset", "Dataset"]:
        """Random train/validation split (validation gets ``round(val_frac * n)``)."""
        perm = np.random.default_rng(seed).permutation(len(self))
        n_val = int(round(val_frac * len(self)))
        return self.subset(np.sort(perm[n_val:])), self.subset(np.sort(perm[:n_val]))


def _solve_record(args):
    i, x0, theta, ocp_cfg, consts, solver_cfg, theta_range, seed, offset = args
    nlp = build_nlp(x0, theta, ocp_cfg, consts)
    try:
        sol = multistart_solve(nlp, solver_cfg, seed=[seed, offset + i])
        S = kkt_sensitivity(nlp, sol, theta_range, solver_cfg)
    except MaxIterError:
        return i, None, SKIP_MAXITER
    except InfeasibleError:
        return i, None, SKIP_INFEASIBLE
    except SingularError:
        return i, None, SKIP_SINGULAR
    except SolverFailure:
        return i, None, SKIP_MAXITER
    except SingularKktError:
        return i, None, SKIP_SINGULAR_KKT
    except WeaklyActiveError:
        return i, None, SKIP_WEAK
    except (NonFiniteError, FloatingPointError):
        return i, None, SKIP_NONFINITE
    row = S.row
    if not np.all(np.isfinite(row)) or not np.isfinite(sol.u0):
        return i, None, SKIP_NONFINITE
    u0 = float(np.clip(sol.u0, ocp_cfg.u_min, ocp_cfg.u_max))  # only moves it by round-off
    return i, (u0, row, len(sol.active_set), sol.trace), OK


def _solve_one(args):
    i, rec, reason = _solve_record(args)
    if rec is None:
        return i, None, reason, ()
    return i, rec[:3], reason, rec[3]


def generate(states, theta: CartpoleParams, ocp_cfg: OcpConfig, consts: FixedConstants,
             solver_cfg: SolverConfig = SolverConfig(), theta_range=(0.04, 1.0, 9.0, 1.0, 0.06),
             workers: int = 1, seed: int = 0, start_index: int = 0, progress_every: int = 0,
             min_success: float = 0.5, traces: dict | None = None) -> Dataset:
    """Solve the MPC problem with sensitivities for every state.

    Each state uses its own seed derived from ``(seed, start_index + i)``, so the
    output does not depend on ``workers`` or on how a long run is chunked.
    Raises :class:`DatasetError` if fewer than ``min_success`` of the states succeed.
    If ``traces`` is a dict it receives the SQP trace of each successful state.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    jobs = [(i, states[i], theta, ocp_cfg, consts, solver_cfg, tuple(theta_range), seed, start_index)
            for i in range(len(states))]
    results = [None] * len(jobs)
    if workers <= 1:
        it = map(_solve_one, jobs)
        pool = None
    else:
        pool = ProcessPoolExecutor(max_workers=workers)
        it = pool.map(_solve_one, jobs, chunksize=4)
    try:
        for done, (i, rec, reason, trace) in enumerate(it, 1):
            results[i] = (rec, reason)
            if traces is not None and rec is not None:
                traces[start_index + i] = trace
            if progress_every and done % progress_every == 0:
                log.info("solved %d/%d states", done, len(jobs))
    finally:
        if pool is not None:
            pool.shutdown()

    keep = [i for i, (rec, _) in enumerate(results) if rec is not None]
    reasons: dict[str, int] = {}
    for rec, reason in results:
        if rec is None:
            reasons[SKIP_NAMES[reason]] = reasons.get(SKIP_NAMES[reason], 0) + 1
    ds = Dataset(
        X=states[keep].copy().reshape(-1, 4),
        u0=np.array([results[i][0][0] for i in keep], dtype=float),
        sens=np.array([results[i][0][1] for i in keep], dtype=float).reshape(-1, 5),
        flags=np.array([results[i][0][2] for i in keep], dtype=np.uint32),
        skipped=len(jobs) - len(keep),
        skip_reasons=reasons,
    )
    log.info("dataset: %d records, %d skipped %s", len(ds), ds.skipped, reasons)
    if jobs and ds.success_rate < min_success:
        raise DatasetError(f"success rate {ds.success_rate:.2%} below {min_success:.0%}: {reasons}")
    return ds


def file_size(n_records: int) -> int:
    return HEADER.size + n_records * RECORD.itemsize


def save(ds: Dataset, path) -> None:
    rec = np.zeros(len(ds), dtype=RECORD)
    rec["x"] = ds.X
    rec["u0"] = ds.u0
    rec["sens"] = ds.sens
    rec["flags"] = ds.flags
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, len(ds), ds.skipped))
        fh.write(rec.tobytes())


def load(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise DatasetError("file too short for a dataset header")
    magic, n, skipped = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetError(f"bad magic {magic!r}")
    if len(raw) != file_size(n):
        raise DatasetError(f"expected {file_size(n)} bytes for {n} records, got {len(raw)}")
    rec = np.frombuffer(raw, dtype=RECORD, count=n, offset=HEADER.size)
    return Dataset(
        X=rec["x"].astype(float),
        u0=rec["u0"].astype(float),
        sens=rec["sens"].astype(float),
        flags=rec["flags"].astype(np.uint32),
        skipped=int(skipped),
    )
