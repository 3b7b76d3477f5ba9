"""Numerical classification of input encodings as linear or nonlinear.

A node is *linear* when its value after the input step (discrete) or at a
read time (continuous) is an affine function of the current input u for
every fixed prior state / history. Each probe samples node values on a
u-grid, fits the best affine model per node and classifies the worst
residual against two thresholds; between them the verdict is
``indeterminate``.
"""

from __future__ import annotations

import itertools
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dynamics import (
    BosonicDrive,
    DriveGenerator,
    InputSignal,
    adjoint_rhs,
    evolve,
    moment_adjoint_matrix,
    nl_contribution,
)
from .encodings import GaussianChannel, GaussianState, ParamChannel, squeezed_cov
from .operators import (
    DensityMatrix,
    OperatorBasis,
    expectation_vector,
    random_ginibre_state,
    random_pure_state,
    tensor,
)

log = logging.getLogger(__name__)

__all__ = [
    "AffineFit", "Tolerances", "NodeResult", "LinearityReport", "PriorEnsemble",
    "affine_fit", "default_grid", "probe_discrete", "probe_continuous",
    "check_forcing_condition", "ForcingResult", "nl_contribution",
]

REPORT_SCHEMA_VERSION = 1
RANGE_FLOOR = 1e-6


class RankDeficientError(ValueError):
    pass


@dataclass(frozen=True)
class AffineFit:
    coefficients: np.ndarray  # (a0, a_1..a_N)
    residuals: np.ndarray
    max_residual: float

    def predict(self, u_samples) -> np.ndarray:
        U = np.atleast_2d(np.asarray(u_samples, dtype=float))
        if U.shape[0] == 1 and len(self.coefficients) == 2:
            U = U.T
        return self.coefficients[0] + U @ self.coefficients[1:]


def affine_fit(u_samples, y_samples) -> AffineFit:
    """Least-squares fit y ~ a0 + a . u; complex y are fitted as complex."""
    U = np.asarray(u_samples, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    y = np.asarray(y_samples)
    if not np.iscomplexobj(y):
        y = y.astype(float)
    n, N = U.shape
    if y.shape != (n,):
        raise ValueError(f"got {n} input samples but y has shape {y.shape}")
    if n <= N + 1:
        raise RankDeficientError(f"need more than {N + 1} samples for an affine fit in {N} inputs")
    A = np.hstack([np.ones((n, 1)), U])
    if np.linalg.matrix_rank(A) < N + 1:
        raise RankDeficientError("input samples are degenerate (rank-deficient design matrix)")
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    res = y - A @ coef
    return AffineFit(coef, res, float(np.max(np.abs(res))))


@dataclass(frozen=True)
class Tolerances:
    linear: float = 1e-8
    nonlinear: float = 1e-4

    def __post_init__(self):
        if not 0 < self.linear < self.nonlinear:
            raise ValueError("need 0 < linear tolerance < nonlinear tolerance")

    def verdict(self, scaled_residual: float) -> str:
        if scaled_residual <= self.linear:
            return "linear"
        if scaled_residual >= self.nonlinear:
            return "nonlinear"
        return "indeterminate"


def _scaled(residual: float, values: np.ndarray) -> tuple[float, float]:
    rng = float(np.ptp(values.real) + np.ptp(values.imag)) if values.size else 0.0
    return (residual / rng if rng >= RANGE_FLOOR else residual), rng


def _pair(z) -> list[float]:
    z = complex(z)
    return [z.real, z.imag]


def _unpair(p) -> complex:
    return complex(p[0], p[1])


@dataclass(frozen=True)
class NodeResult:
    index: int
    label: str
    max_abs_residual: float
    scaled_residual: float
    value_range: float
    coefficients: tuple  # complex affine coefficients of the worst case
    verdict: str
    worst_case: int  # prior index (discrete) or read-time index (continuous)
    values: tuple  # node values along the grid for the worst case
    residuals: tuple

    def to_dict(self) -> dict:
        d = asdict(self)
        d["coefficients"] = [_pair(c) for c in self.coefficients]
        d["values"] = [_pair(v) for v in self.values]
        d["residuals"] = [_pair(r) for r in self.residuals]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NodeResult":
        d = dict(d)
        for key in ("coefficients", "values", "residuals"):
            d[key] = tuple(_unpair(p) for p in d[key])
        return cls(**d)


@dataclass(frozen=True)
class LinearityReport:
    encoding: str
    nodes: tuple[NodeResult, ...]
    u_grid: tuple[tuple[float, ...], ...]
    tolerances: Tolerances
    fit_mode: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        # JSON-native metadata so that reports round-trip exactly
        object.__setattr__(self, "metadata", json.loads(json.dumps(self.metadata)))

    @property
    def verdicts(self) -> dict[str, str]:
        return {n.label: n.verdict for n in self.nodes}

    def node(self, label: str) -> NodeResult:
        for n in self.nodes:
            if n.label == label:
                return n
        raise KeyError(label)

    @property
    def any_indeterminate(self) -> bool:
        return any(n.verdict == "indeterminate" for n in self.nodes)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "kind": "linearity-report",
            "encoding": self.encoding,
            "fit_mode": self.fit_mode,
            "tolerances": asdict(self.tolerances),
            "u_grid": [list(u) for u in self.u_grid],
            "metadata": self.metadata,
            "nodes": [n.to_dict() for n in self.nodes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinearityReport":
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema version {d.get('schema_version')}")
        return cls(
            encoding=d["encoding"],
            nodes=tuple(NodeResult.from_dict(n) for n in d["nodes"]),
            u_grid=tuple(tuple(u) for u in d["u_grid"]),
            tolerances=Tolerances(**d["tolerances"]),
            fit_mode=d["fit_mode"],
            metadata=d.get("metadata", {}),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LinearityReport":
        return cls.from_dict(json.loads(text))


# --------------------------------------------------------------------------
# prior states
# --------------------------------------------------------------------------

_PRODUCT_KETS = [
    np.array([1, 0]), np.array([0, 1]),
    np.array([1, 1]) / np.sqrt(2), np.array([1, -1]) / np.sqrt(2),
    np.array([1, 1j]) / np.sqrt(2), np.array([1, -1j]) / np.sqrt(2),
]


@dataclass(frozen=True)
class PriorEnsemble:
    """Random prior states rho_{j-1}; ``kind="gaussian"`` samples single-mode Gaussian states."""

    count: int = 20
    kind: str = "ginibre-mixed"
    seed: int = 0
    dims: tuple[int, ...] = (2,)

    def sample(self) -> list:
        rng = np.random.default_rng(self.seed)
        d = int(np.prod(self.dims))
        out = []
        for _ in range(self.count):
            if self.kind == "ginibre-mixed":
                out.append(DensityMatrix(random_ginibre_state(d, rng), self.dims))
            elif self.kind == "haar-pure":
                out.append(DensityMatrix(random_pure_state(d, rng), self.dims))
            elif self.kind == "product-basis":
                if any(k != 2 for k in self.dims):
                    raise ValueError("product-basis priors need qubit subsystems")
                kets = [_PRODUCT_KETS[i] for i in rng.integers(0, 6, size=len(self.dims))]
                psi = tensor(*[k[:, None] for k in kets]).ravel()
                out.append(DensityMatrix.from_ket(psi, self.dims))
            elif self.kind == "gaussian":
                out.append(_random_gaussian(rng))
            else:
                raise ValueError(f"unknown prior kind {self.kind!r}")
        return out


def _random_gaussian(rng) -> GaussianState:
    nu = rng.uniform(1.0, 3.0)
    cov = nu * squeezed_cov(rng.uniform(0.0, 0.8), rng.uniform(0, 2 * np.pi))
    return GaussianState(rng.normal(size=2), 0.5 * (cov + cov.T))


def default_grid(domain: Sequence[tuple[float, float]], points: int = 21,
                 margin: float = 0.05) -> np.ndarray:
    """Cartesian grid, ``points`` per dimension, on the domain interior."""
    axes = [np.linspace(lo + margin * (hi - lo), hi - margin * (hi - lo), points) for lo, hi in domain]
    return np.array(list(itertools.product(*axes)))


def _check_grid(u_grid, input_dim: int) -> np.ndarray:
    U = np.asarray(u_grid, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    if U.shape[1] != input_dim:
        raise ValueError(f"grid has {U.shape[1]} input components, expected {input_dim}")
    for k in range(input_dim):
        if len(np.unique(U[:, k])) < 11:
            raise ValueError("degenerate grid: need at least 11 distinct values per input dimension")
    return U


def _classify(values: np.ndarray, U: np.ndarray, labels, mode: str, tol: Tolerances):
    """values: (cases, grid, nodes). Returns NodeResults."""
    cases, G, K = values.shape
    results = []
    for k in range(K):
        if mode == "joint":
            fit = affine_fit(np.tile(U, (cases, 1)), values[:, :, k].reshape(-1))
            res = fit.residuals.reshape(cases, G)
            worst = int(np.argmax(np.max(np.abs(res), axis=1)))
            scaled, rng = _scaled(fit.max_residual, values[:, :, k])
            coef, resid = fit.coefficients, res[worst]
            max_abs = fit.max_residual
        else:
            fits = [affine_fit(U, values[c, :, k]) for c in range(cases)]
            scored = [_scaled(f.max_residual, values[c, :, k]) for c, f in enumerate(fits)]
            worst = max(range(cases), key=lambda c: (scored[c][0], fits[c].max_residual))
            scaled, rng = scored[worst]
            fit = fits[worst]
            max_abs = max(f.max_residual for f in fits)
            coef, resid = fit.coefficients, fit.residuals
        results.append(NodeResult(
            index=k, label=labels[k], max_abs_residual=float(max_abs), scaled_residual=float(scaled),
            value_range=float(rng), coefficients=tuple(complex(c) for c in coef),
            verdict=tol.verdict(scaled), worst_case=worst,
            values=tuple(complex(v) for v in values[worst, :, k]),
            residuals=tuple(complex(r) for r in resid)))
    return tuple(results)


def _maybe_real(values: np.ndarray) -> np.ndarray:
    return values.real if np.max(np.abs(values.imag), initial=0.0) <= 1e-12 else values


def probe_discrete(
    channel: ParamChannel | GaussianChannel,
    basis: OperatorBasis,
    priors: PriorEnsemble | Sequence | None = None,
    u_grid=None,
    tolerances: Tolerances = Tolerances(),
    fit_mode: str = "auto",
    threads: int = 1,
) -> LinearityReport:
    """Classify each node Tr[B_k C_in(u)[rho]] of a discrete encoding.

    ``fit_mode="joint"`` demands one affine model that serves every prior;
    ``"per-prior"`` fits each prior separately and reports the worst case.
    ``"auto"`` uses joint fitting for channels whose output ignores the prior
    (full re-initialization) and per-prior fitting otherwise, since a
    history-dependent node may legitimately carry prior-dependent slopes.
    """
    gaussian = isinstance(channel, GaussianChannel)
    if priors is None:
        priors = PriorEnsemble(kind="gaussian" if gaussian else "ginibre-mixed",
                               dims=() if gaussian else channel.dims)
    ensemble_meta = asdict(priors) if isinstance(priors, PriorEnsemble) else {"kind": "explicit"}
    prior_states = priors.sample() if isinstance(priors, PriorEnsemble) else list(priors)
    if not prior_states:
        raise ValueError("at least one prior state is required")
    U = _check_grid(default_grid(channel.domain) if u_grid is None else u_grid, channel.input_dim)
    if gaussian:
        if not basis.orders:
            raise ValueError("Gaussian channels need a moment basis (make_basis('fock-moment', ...))")
        nodes_of = lambda s: s.moments(basis.orders)
    else:
        nodes_of = lambda s: expectation_vector(s, basis)

    def one_prior(rho):
        return [nodes_of(channel.apply(u, rho)) for u in U]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one_prior, prior_states))
    else:
        rows = [one_prior(r) for r in prior_states]
    values = _maybe_real(np.array(rows))
    if fit_mode == "auto":
        mode = "joint" if channel.prior_independent else "per-prior"
    elif fit_mode in ("joint", "per-prior"):
        mode = fit_mode
    else:
        raise ValueError(f"unknown fit mode {fit_mode!r}")
    if mode == "per-prior" and fit_mode == "auto":
        log.info("%s: output depends on the prior, fitting per prior (worst case reported)",
                 channel.kind)
    nodes = _classify(values, U, basis.labels, mode, tolerances)
    meta = {"priors": ensemble_meta, "probe": "discrete", "prior_count": len(prior_states)}
    return LinearityReport(channel.kind, nodes, tuple(tuple(map(float, u)) for u in U),
                           tolerances, mode, meta)


def probe_continuous(
    system: DriveGenerator | BosonicDrive,
    protocol: Callable[[np.ndarray], InputSignal],
    basis: OperatorBasis,
    read_times: Sequence[float],
    u_grid,
    state0=None,
    t0: float = 0.0,
    dt: float | None = None,
    tolerances: Tolerances = Tolerances(),
    encoding: str = "continuous",
) -> LinearityReport:
    """Classify nodes of a continuous encoding read at ``read_times``.

    Every grid value u is turned into a full signal by ``protocol`` and
    evolved from the common ``state0``; node values are fitted against u at
    each read time and the worst read time decides the verdict.
    """
    U = np.asarray(u_grid, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    read_times = sorted(float(t) for t in read_times)
    t1 = read_times[-1]
    bosonic = isinstance(system, BosonicDrive)
    if state0 is None:
        state0 = GaussianState.vacuum() if bosonic else DensityMatrix(
            np.diag([1.0] + [0.0] * (system.dim - 1)).astype(complex))
    rows = []
    for u in U:
        signal = protocol(u)
        if bosonic:
            traj = system.evolve(state0, signal, (t0, t1), read_times)
            rows.append(np.array([s.moments(basis.orders) for s in traj.states]))
        else:
            traj = evolve(state0, system, signal, (t0, t1), dt=dt, basis=basis,
                          sample_times=read_times, estimate_error=False)
            rows.append(traj.node_values)
    values = _maybe_real(np.transpose(np.array(rows), (1, 0, 2)))  # (read times, grid, nodes)
    nodes = _classify(values, U, basis.labels, "per-read-time", tolerances)
    meta = {"probe": "continuous", "read_times": read_times}
    return LinearityReport(encoding, nodes, tuple(tuple(map(float, u)) for u in U),
                           tolerances, "per-read-time", meta)


@dataclass(frozen=True)
class ForcingResult:
    label: str
    satisfied: bool
    defect: float  # size of the input-dependent part that is not a multiple of the identity
    forcing: float  # magnitude of the identity (inhomogeneous) part


def check_forcing_condition(
    system: DriveGenerator | BosonicDrive,
    basis: OperatorBasis,
    u0,
    u1,
    tol: float = 1e-10,
) -> list[ForcingResult]:
    """Does the input enter each node's equation purely as an inhomogeneous forcing term?

    For a finite generator the input-dependent change of the adjoint
    generator, D_n = L^dag(u1)[B_n] - L^dag(u0)[B_n], is split into its
    identity part and a remainder. A node satisfies the condition when the
    remainder vanishes (defect <= tol) and the identity part does not; a node
    the input never reaches is reported as not satisfied. For a bosonic drive
    the same split is done on the moment-equation matrix.
    """
    u0 = np.atleast_1d(np.asarray(u0, dtype=float))
    u1 = np.atleast_1d(np.asarray(u1, dtype=float))
    if np.array_equal(u0, u1):
        raise ValueError("probe inputs must differ")
    out = []
    if isinstance(system, BosonicDrive):
        if not basis.orders:
            raise ValueError("bosonic forcing check needs a moment basis")
        orders = list(basis.orders)
        dM = moment_adjoint_matrix(system.force_vector(u1), system.gamma, orders) \
            - moment_adjoint_matrix(system.force_vector(u0), system.gamma, orders)
        ident = orders.index((0, 0))
        for i, label in enumerate(basis.labels):
            defect = float(np.linalg.norm(np.delete(dM[i], ident)))
            forcing = float(abs(dM[i, ident]))
            out.append(ForcingResult(label, defect <= tol and forcing > tol, defect, forcing))
        return out
    d = system.dim
    for B, label in zip(basis.elements, basis.labels):
        delta = adjoint_rhs(B, system, u1) - adjoint_rhs(B, system, u0)
        ident = np.trace(delta) / d
        defect = float(np.linalg.norm(delta - ident * np.eye(d)))
        forcing = float(abs(ident))
        out.append(ForcingResult(label, defect <= tol and forcing > tol, defect, forcing))
    return out
