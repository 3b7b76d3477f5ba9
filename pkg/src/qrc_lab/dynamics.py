"""Continuous-time reservoir dynamics.

Finite-dimensional reservoirs follow the Lindblad master equation, integrated
with fixed-step RK4 (a step-halving error estimate is kept for every step).
The vectorized Liouvillian and its eigendecomposition give an independent
route for time-independent generators.

Single bosonic modes driven by H(t) = f_x(u) P - f_p(u) X under amplitude
damping are handled exactly through their first and second moments.
"""

from __future__ import annotations

import inspect
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.integrate

from .encodings import VACUUM_COV, GaussianState
from .operators import (
    DensityMatrix,
    OperatorBasis,
    StateError,
    as_matrix,
    dagger,
    devectorize,
    expectation_vector,
    matrix_exp,
    moment_orders,
    state_defects,
    vectorize,
)

log = logging.getLogger(__name__)

COND_MAX = 1e8


class IntegrationError(RuntimeError):
    pass


class DefectiveLiouvillianError(RuntimeError):
    """Eigenbasis of the Liouvillian is too ill-conditioned to trust."""


# --------------------------------------------------------------------------
# input signals
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class InputSignal:
    """An N-dimensional input u(t).

    Kinds: ``constant``; ``piecewise-constant`` (``values[k]`` holds on
    ``[times[k-1], times[k])``, right-continuous); ``sampled`` (linear
    interpolation between ``times``, held constant outside); and
    ``analytic-callable`` (``func(t)``, optional ``deriv(t)``).
    """

    kind: str
    dim: int
    values: np.ndarray | None = None
    times: np.ndarray | None = None
    func: Callable | None = None
    deriv: Callable | None = None

    @classmethod
    def constant(cls, u) -> "InputSignal":
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return cls("constant", u.size, values=u)

    @classmethod
    def piecewise_constant(cls, switch_times, values) -> "InputSignal":
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        times = np.asarray(switch_times, dtype=float).ravel()
        if len(times) != len(values) - 1:
            raise ValueError("piecewise-constant signal needs len(values) - 1 switch times")
        if np.any(np.diff(times) <= 0):
            raise ValueError("switch times must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise ValueError("segment values must be finite")
        return cls("piecewise-constant", values.shape[1], values=values, times=times)

    @classmethod
    def sampled(cls, times, values) -> "InputSignal":
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        times = np.asarray(times, dtype=float).ravel()
        if len(times) != len(values) or len(times) < 2:
            raise ValueError("sampled signal needs matching times and values (>= 2 samples)")
        if np.any(np.diff(times) <= 0):
            raise ValueError("sample times must be strictly increasing")
        return cls("sampled", values.shape[1], values=values, times=times)

    @classmethod
    def analytic(cls, func, dim: int = 1, derivative=None) -> "InputSignal":
        return cls("analytic-callable", dim, func=func, deriv=derivative)

    @property
    def is_piecewise_constant(self) -> bool:
        return self.kind in ("constant", "piecewise-constant")

    def __call__(self, t: float) -> np.ndarray:
        if self.kind == "constant":
            return self.values
        if self.kind == "piecewise-constant":
            return self.values[np.searchsorted(self.times, t, side="right")]
        if self.kind == "sampled":
            return np.array([np.interp(t, self.times, self.values[:, k]) for k in range(self.dim)])
        return np.atleast_1d(np.asarray(self.func(t), dtype=float))

    def left_limit(self, t: float) -> np.ndarray:
        if self.kind == "piecewise-constant":
            return self.values[np.searchsorted(self.times, t, side="left")]
        return self(t)

    def derivative(self, t: float) -> np.ndarray:
        """du/dt away from kinks (jumps of piecewise-constant signals are not impulses here)."""
        if self.is_piecewise_constant:
            return np.zeros(self.dim)
        if self.kind == "sampled":
            k = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2)
            if t < self.times[0] or t > self.times[-1]:
                return np.zeros(self.dim)
            return (self.values[k + 1] - self.values[k]) / (self.times[k + 1] - self.times[k])
        if self.deriv is not None:
            return np.atleast_1d(np.asarray(self.deriv(t), dtype=float))
        h = 1e-6 * max(1.0, abs(t))
        return (self(t + h) - self(t - h)) / (2 * h)

    def kinks(self, t0: float, t1: float) -> np.ndarray:
        """Times in (t0, t1) where the signal is not smooth."""
        if self.times is None:
            return np.empty(0)
        return self.times[(self.times > t0) & (self.times < t1)]

    def on_piece(self, t: float, a: float, b: float) -> np.ndarray:
        """Value inside the smooth piece [a, b], one-sided at its right end."""
        return self.left_limit(b) if t >= b else self(t)


# --------------------------------------------------------------------------
# generators
# --------------------------------------------------------------------------


def _check_coupling(f) -> Callable:
    try:
        params = [p for p in inspect.signature(f).parameters.values()
                  if p.default is p.empty and p.kind in (p.POSITIONAL_ONLY, p.POSITIONAL_OR_KEYWORD)]
    except (TypeError, ValueError):
        return f
    if len(params) != 1:
        raise ValueError("drive couplings must be functions of the input only; "
                         "time-dependent input masks are not supported")
    return f


def linear_coupling(weights, offset: float = 0.0) -> Callable[[np.ndarray], float]:
    """f(u) = offset + weights . u"""
    w = np.atleast_1d(np.asarray(weights, dtype=float))
    return lambda u: float(offset + w @ np.atleast_1d(u))


@dataclass(frozen=True, eq=False)
class DriveGenerator:
    """Lindbladian family: H(u) = h0 + sum_l f_l(u) G_l, jumps (L_j, gamma_j)."""

    h0: np.ndarray
    drive_terms: tuple = ()
    jumps: tuple = ()

    def __post_init__(self):
        h0 = as_matrix(self.h0)
        d = h0.shape[0]
        if np.max(np.abs(h0 - dagger(h0)), initial=0.0) > 1e-12:
            raise ValueError("static Hamiltonian must be Hermitian")
        drives = []
        for op, f in self.drive_terms:
            op = as_matrix(op)
            if op.shape != (d, d) or np.max(np.abs(op - dagger(op))) > 1e-12:
                raise ValueError("drive operators must be Hermitian and match h0")
            drives.append((op, _check_coupling(f)))
        jumps = []
        for L, rate in self.jumps:
            L = as_matrix(L)
            if L.shape != (d, d):
                raise ValueError("jump operator dimension mismatch")
            if rate < 0:
                raise ValueError("jump rates must be non-negative")
            jumps.append((L, float(rate)))
        object.__setattr__(self, "h0", h0)
        object.__setattr__(self, "drive_terms", tuple(drives))
        object.__setattr__(self, "jumps", tuple(jumps))
        object.__setattr__(self, "_diss", tuple(
            (np.sqrt(r) * L, np.sqrt(r) * dagger(L), r * dagger(L) @ L) for L, r in jumps))
        object.__setattr__(self, "_super", None)

    @property
    def dim(self) -> int:
        return self.h0.shape[0]

    @property
    def gamma_max(self) -> float:
        return max((r for _, r in self.jumps), default=0.0)

    def hamiltonian(self, u) -> np.ndarray:
        h = self.h0
        if self.drive_terms:
            u = np.atleast_1d(np.asarray(u, dtype=float))
            h = h + sum(f(u) * op for op, f in self.drive_terms)
        return h

    def _pieces(self):
        if self._super is None:
            d = self.dim
            eye = np.eye(d)
            static = _hamiltonian_super(self.h0)
            for Ls, Lds, LdL in self._diss:
                static = static + np.kron(Lds.T, Ls) - 0.5 * (np.kron(eye, LdL) + np.kron(LdL.T, eye))
            parts = [(_hamiltonian_super(op), f) for op, f in self.drive_terms]
            adj = (static.conj().T, tuple((S.conj().T, f) for S, f in parts))
            object.__setattr__(self, "_super", ((static, tuple(parts)), adj))
        return self._super

    @staticmethod
    def _assemble(pieces, u) -> np.ndarray:
        static, parts = pieces
        if not parts:
            return static
        u = np.atleast_1d(np.asarray(u, dtype=float))
        out = static.copy()
        for S, f in parts:
            out += f(u) * S
        return out

    def superoperator(self, u) -> np.ndarray:
        """Column-stacking matrix of the Lindbladian at input u (read-only when undriven)."""
        return self._assemble(self._pieces()[0], u)

    def adjoint_superoperator(self, u) -> np.ndarray:
        """Matrix of the adjoint generator, the conjugate transpose of :meth:`superoperator`."""
        return self._assemble(self._pieces()[1], u)

    def rate_scale(self, u=None) -> float:
        h = self.h0 if u is None else self.hamiltonian(u)
        return max(self.gamma_max, float(np.linalg.norm(h, 2)), 1.0)


def _hamiltonian_super(H: np.ndarray) -> np.ndarray:
    eye = np.eye(H.shape[0])
    return -1j * (np.kron(eye, H) - np.kron(H.T, eye))


def _check_dim(a: np.ndarray, gen: DriveGenerator):
    if a.shape[-2:] != (gen.dim, gen.dim):
        raise ValueError(f"operator shape {a.shape} does not match generator dimension {gen.dim}")


def _lindblad(rho, H, diss):
    out = -1j * (H @ rho - rho @ H)
    for L, Ld, LdL in diss:
        out = out + L @ rho @ Ld - 0.5 * (LdL @ rho + rho @ LdL)
    return out


def _adjoint(B, H, diss):
    out = 1j * (H @ B - B @ H)
    for L, Ld, LdL in diss:
        out = out + Ld @ B @ L - 0.5 * (LdL @ B + B @ LdL)
    return out


def lindblad_rhs(rho, gen: DriveGenerator, u, t: float = 0.0) -> np.ndarray:
    """Schrodinger-picture d rho/dt at input u."""
    r = as_matrix(rho)
    _check_dim(r, gen)
    return _lindblad(r, gen.hamiltonian(u), gen._diss)


def adjoint_rhs(B, gen: DriveGenerator, u, t: float = 0.0) -> np.ndarray:
    """Heisenberg-picture generator L^dag[B] at input u."""
    b = np.asarray(B, dtype=complex)
    _check_dim(b, gen)
    return _adjoint(b, gen.hamiltonian(u), gen._diss)


# --------------------------------------------------------------------------
# RK4 integration
# --------------------------------------------------------------------------


@dataclass
class Trajectory:
    times: np.ndarray
    states: list
    node_values: np.ndarray | None = None
    labels: tuple = ()
    error_estimate: float = 0.0


def _memo(fun):
    """Cache A(s) for the few most recent stage times; neighbouring steps share endpoints."""
    cache = {}

    def get(x):
        A = cache.get(x)
        if A is None:
            if len(cache) > 8:
                cache.clear()
            A = cache[x] = fun(x)
        return A
    return get


def _rk4_linear(A_at, a, k, frac, y, h):
    """RK4 step number k of size frac*h from a for y' = A(s) y; stage times are computed
    from (a, k) so that consecutive steps hit identical floats."""
    hs = frac * h
    A1 = A_at(a + k * hs)
    A2 = A_at(a + (k + 0.5) * hs)
    A4 = A_at(a + (k + 1) * hs)
    k1 = A1 @ y
    k2 = A2 @ (y + 0.5 * hs * k1)
    k3 = A2 @ (y + 0.5 * hs * k2)
    k4 = A4 @ (y + hs * k3)
    return y + (hs / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _rk4_matrix(A: np.ndarray, h: float) -> np.ndarray:
    """One RK4 step for y' = A y with constant A, as a matrix (the degree-4 Taylor polynomial)."""
    hA = h * A
    out = np.eye(A.shape[0], dtype=complex)
    term = out
    for k in range(1, 5):
        term = term @ hA / k
        out = out + term
    return out


def _event_grid(t0, t1, signal, sample_times):
    ev = {float(t0), float(t1)}
    ev.update(float(t) for t in signal.kinks(t0, t1))
    if sample_times is not None:
        ev.update(float(t) for t in sample_times if t0 <= t <= t1)
    return np.array(sorted(ev))


def _integrate(A_of_u, y0, signal, t0, t1, dt, sample_times, estimate_error, on_step=None,
               backward=False):
    """Fixed-step RK4 of the linear system y' = A(u(s)) y between events.

    Returns {time: y} at the events and the step-halving error estimate. On
    pieces where the input is constant the RK4 step is applied as a matrix.
    """
    events = _event_grid(min(t0, t1), max(t0, t1), signal, sample_times)
    if backward:
        events = events[::-1]
    y = y0
    out = {float(events[0]): y0}
    err_max = 0.0
    for a, b in zip(events[:-1], events[1:]):
        lo, hi = min(a, b), max(a, b)
        n = max(1, math.ceil((hi - lo) / dt - 1e-9))
        h = (b - a) / n
        if signal.is_piecewise_constant:
            A = A_of_u(signal(0.5 * (lo + hi)))
            P = _rk4_matrix(A, h)
            if estimate_error:
                Ph = _rk4_matrix(A, 0.5 * h)
                Ph = Ph @ Ph
            step = lambda k, yy: P @ yy
            halved = (lambda k, yy: Ph @ yy) if estimate_error else None
        else:
            A_at = _memo(lambda x, _lo=lo, _hi=hi: A_of_u(signal.on_piece(x, _lo, _hi)))
            step = lambda k, yy: _rk4_linear(A_at, a, k, 1.0, yy, h)
            halved = lambda k, yy: _rk4_linear(A_at, a, 2 * k + 1, 0.5, _rk4_linear(A_at, a, 2 * k, 0.5, yy, h),
                                               h)
        for k in range(n):
            if estimate_error:
                full = step(k, y)
                y = halved(k, y)
                err_max = max(err_max, float(np.max(np.abs(y - full))) / 15.0)
            else:
                y = step(k, y)
            if on_step is not None:
                on_step(a + (k + 1) * h, y)
        out[float(b)] = y
    return out, err_max


def evolve(
    state0: DensityMatrix,
    gen: DriveGenerator,
    signal: InputSignal,
    t_span: tuple[float, float],
    dt: float | None = None,
    basis: OperatorBasis | None = None,
    sample_times: Sequence[float] | None = None,
    estimate_error: bool = True,
    check_states: bool = True,
) -> Trajectory:
    """Integrate the master equation from ``state0`` over ``t_span``.

    States are recorded at ``sample_times`` (default: both ends of the span)
    and validated after every RK4 step; a violated invariant raises
    :class:`IntegrationError` naming the time and defect.
    """
    t0, t1 = map(float, t_span)
    if t1 < t0:
        raise ValueError("t_span must be increasing")
    rho0 = state0.matrix if isinstance(state0, DensityMatrix) else as_matrix(state0)
    dims = state0.dims if isinstance(state0, DensityMatrix) else (rho0.shape[0],)
    _check_dim(rho0, gen)
    if dt is None:
        dt = 1e-3 / gen.rate_scale()
    if dt <= 0:
        raise ValueError("dt must be positive")

    def check(s, v):
        r = devectorize(v)
        if not np.all(np.isfinite(r)):
            raise IntegrationError(f"non-finite state at t={s:.6g}")
        herm, tr, min_eig = state_defects(r)
        if herm > 1e-12 or tr > 1e-12 or min_eig < -1e-10:
            raise IntegrationError(
                f"density-matrix invariant violated at t={s:.6g}: hermiticity {herm:.2e}, "
                f"trace {tr:.2e}, min eigenvalue {min_eig:.2e}")

    samples = [t0, t1] if sample_times is None else list(sample_times)
    table, err = _integrate(gen.superoperator, vectorize(rho0), signal, t0, t1, dt, samples, estimate_error,
                            on_step=check if check_states else None)
    times = np.array(sorted(float(t) for t in samples))
    states = [DensityMatrix(devectorize(table[float(t)]), dims) for t in times]
    nodes = None
    labels = ()
    if basis is not None:
        nodes = np.array([expectation_vector(s, basis) for s in states])
        labels = basis.labels
    return Trajectory(times, states, nodes, labels, err)


def heisenberg_operators(
    ops,
    gen: DriveGenerator,
    signal: InputSignal,
    t0: float,
    t: float,
    dt: float | None = None,
) -> np.ndarray:
    """Operators B_H with Tr[B_H rho(t0)] = Tr[B rho(t)].

    For a time-dependent generator the adjoint equation runs backwards from
    t to t0 (dB/ds = -L^dag(s)[B]); ``ops`` may be a stack (k, d, d).
    """
    B = np.asarray(ops, dtype=complex)
    _check_dim(B, gen)
    if dt is None:
        dt = 1e-3 / gen.rate_scale()
    if t == t0:
        return B.copy()
    d = gen.dim
    stack = B.reshape(-1, d, d)
    cols = stack.transpose(0, 2, 1).reshape(len(stack), d * d).T  # vec of each operator
    table, _ = _integrate(lambda u: -gen.adjoint_superoperator(u), cols, signal, t0, t, dt, None, False,
                          backward=True)
    res = table[float(t0)].T.reshape(len(stack), d, d).transpose(0, 2, 1)
    return res.reshape(B.shape)


def adjoint_node_trajectory(rho0, gen, signal, basis: OperatorBasis, sample_times, dt=None) -> np.ndarray:
    """Node values <B_k>(t) computed entirely in the Heisenberg picture."""
    r = as_matrix(rho0)
    stack = np.stack(basis.elements)
    t0 = float(min(sample_times))
    rows = []
    for t in sample_times:
        BH = heisenberg_operators(stack, gen, signal, t0, float(t), dt)
        rows.append(np.einsum("kij,ji->k", BH, r))
    return np.array(rows)


def evolve_adjoint_forward(B0, gen: DriveGenerator, u, t: float, dt: float | None = None) -> np.ndarray:
    """Forward adjoint flow exp(t L^dag)[B0] at frozen input u."""
    B = np.asarray(B0, dtype=complex)
    dt = dt or 1e-3 / gen.rate_scale(u)
    signal = InputSignal.constant(u)
    d = gen.dim
    stack = B.reshape(-1, d, d)
    cols = stack.transpose(0, 2, 1).reshape(len(stack), d * d).T
    La = gen.adjoint_superoperator(u)
    table, _ = _integrate(lambda _u: La, cols, signal, 0.0, t, dt, None, False)
    res = table[float(t)].T.reshape(len(stack), d, d).transpose(0, 2, 1)
    return res.reshape(B.shape)


# --------------------------------------------------------------------------
# Magnus expansion, first order
# --------------------------------------------------------------------------


def _simpson(fvals: list, a: float, b: float) -> np.ndarray:
    n = len(fvals) - 1
    h = (b - a) / n
    w = np.ones(n + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return (h / 3.0) * sum(wi * f for wi, f in zip(w, fvals))


def magnus_first_order(M: Callable, signal: InputSignal, t_span, n_quad: int = 64) -> np.ndarray:
    """First Magnus term: integral of M(u(s)) over ``t_span`` by composite Simpson.

    The quadrature is split at the signal's kinks so that switched inputs are
    integrated exactly piece by piece.
    """
    t0, t1 = map(float, t_span)
    if n_quad % 2:
        n_quad += 1
    edges = [t0, *signal.kinks(t0, t1), t1]
    total = None
    for a, b in zip(edges[:-1], edges[1:]):
        nodes = np.linspace(a, b, n_quad + 1)
        vals = [np.asarray(M(signal.on_piece(s, a, b)), dtype=complex) for s in nodes]
        part = _simpson(vals, a, b)
        total = part if total is None else total + part
    return total


def time_ordered_propagator(M: Callable, signal: InputSignal, t_span, steps: int = 2000) -> np.ndarray:
    """Reference solution of dY/dt = M(u(t)) Y, Y(t0) = I, by RK4."""
    t0, t1 = map(float, t_span)
    d = np.asarray(M(signal(t0))).shape[0]
    dt = (t1 - t0) / steps
    table, _ = _integrate(lambda u: np.asarray(M(u), dtype=complex),
                          np.eye(d, dtype=complex), signal, t0, t1, dt, None, False)
    return table[t1]


# --------------------------------------------------------------------------
# vectorized Liouvillian and spectral solution
# --------------------------------------------------------------------------


def build_liouvillian(gen: DriveGenerator, u=0.0) -> np.ndarray:
    """Matrix L with L @ vec(rho) == vec(lindblad_rhs(rho)), column-stacking.

    The adjoint generator is represented by ``L.conj().T``: with the
    Hilbert-Schmidt inner product vec(A)^dag vec(B) = Tr[A^dag B], the matrix
    of L^dag is the conjugate transpose of the matrix of L.
    """
    return gen.superoperator(u).copy()


def build_adjoint_liouvillian(gen: DriveGenerator, u=0.0) -> np.ndarray:
    return build_liouvillian(gen, u).conj().T


@dataclass(frozen=True)
class LiouvillianSpectrum:
    eigenvalues: np.ndarray
    vectors: np.ndarray
    inverse: np.ndarray
    condition: float


def liouvillian_spectrum(L: np.ndarray, cond_max: float = COND_MAX) -> LiouvillianSpectrum:
    """Eigendecomposition L = V diag(eps) V^-1, refused when V is ill-conditioned."""
    eps, V = np.linalg.eig(L)
    cond = float(np.linalg.cond(V))
    if not np.isfinite(cond) or cond > cond_max:
        raise DefectiveLiouvillianError(
            f"Liouvillian eigenbasis condition number {cond:.3e} exceeds {cond_max:.1e}; "
            "integrate directly instead")
    return LiouvillianSpectrum(eps, V, np.linalg.inv(V), cond)


def spectral_propagate(spec: LiouvillianSpectrum, vec0: np.ndarray, t: float) -> np.ndarray:
    return spec.vectors @ (np.exp(spec.eigenvalues * t) * (spec.inverse @ vec0))


def spectral_evolve(state0: DensityMatrix, gen: DriveGenerator, u, t: float,
                    cond_max: float = COND_MAX) -> DensityMatrix:
    """rho(t) from the eigenmodes of the frozen-input Liouvillian."""
    spec = liouvillian_spectrum(build_liouvillian(gen, u), cond_max)
    rho0 = state0.matrix if isinstance(state0, DensityMatrix) else as_matrix(state0)
    dims = state0.dims if isinstance(state0, DensityMatrix) else (rho0.shape[0],)
    rho = devectorize(spectral_propagate(spec, vectorize(rho0), t))
    defect = float(np.max(np.abs(rho - dagger(rho))))
    if defect:
        log.debug("spectral_evolve: symmetrized Hermiticity defect %.3e", defect)
    rho = 0.5 * (rho + dagger(rho))
    try:
        return DensityMatrix(rho, dims)
    except StateError as exc:
        raise IntegrationError(f"spectral solution left the state space: {exc}") from exc


# --------------------------------------------------------------------------
# Gaussian bosonic mode
# --------------------------------------------------------------------------

GAUSSIAN_ORDERS = tuple(moment_orders(2))


@dataclass(frozen=True, eq=False)
class BosonicDrive:
    """Damped single mode pushed by the complex force F(u) = f_x(u) + i f_p(u)."""

    force: Callable[[np.ndarray], complex]
    gamma: float

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")

    def force_vector(self, u) -> np.ndarray:
        return _force_vector(self.force, u)

    def evolve(self, g0: GaussianState, signal: InputSignal, t_span, sample_times=None) -> Trajectory:
        return gaussian_evolve(g0, self.force, self.gamma, signal, t_span, sample_times)


def _force_vector(force, u) -> np.ndarray:
    f = complex(force(np.atleast_1d(u)))
    return np.array([f.real, f.imag])


def gaussian_evolve(
    g0: GaussianState,
    force: Callable[[np.ndarray], complex],
    gamma: float,
    signal: InputSignal,
    t_span,
    sample_times: Sequence[float] | None = None,
) -> Trajectory:
    """Driven, amplitude-damped single mode.

    The drive H = Re[F(u)] P - Im[F(u)] X pushes d<X>/dt = Re F, d<P>/dt = Im F;
    damping pulls the means to zero at rate ``gamma`` and the covariance to
    the vacuum at rate 2 ``gamma``. Piecewise-constant segments are updated
    in closed form, smooth pieces by adaptive quadrature of the exponential
    kernel.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    t0, t1 = map(float, t_span)
    samples = [t0, t1] if sample_times is None else sorted(float(t) for t in sample_times)
    events = _event_grid(t0, t1, signal, samples)
    m = np.array(g0.means, dtype=float)
    out = {t0: m.copy()}
    for a, b in zip(events[:-1], events[1:]):
        h = b - a
        decay = math.exp(-gamma * h)
        if signal.is_piecewise_constant:
            F = _force_vector(force, signal(0.5 * (a + b)))
            if gamma > 0:
                m = F / gamma + (m - F / gamma) * decay
            else:
                m = m + F * h
        else:
            kernel = lambda s, _a=a, _b=b: math.exp(-gamma * (_b - s)) * _force_vector(
                force, signal.on_piece(s, _a, _b))
            integral, _ = scipy.integrate.quad_vec(kernel, a, b, epsabs=1e-14, epsrel=1e-13)
            m = decay * m + integral
        out[float(b)] = m.copy()
    times = np.array(samples)
    states = []
    for t in times:
        cov = VACUUM_COV + (g0.cov - VACUUM_COV) * math.exp(-2 * gamma * (t - t0))
        states.append(GaussianState(out[float(t)], cov))
    nodes = np.array([s.moments(GAUSSIAN_ORDERS) for s in states])
    return Trajectory(times, states, nodes, ("I", "X", "P", "X^2", "P^2", "sym(XP)"))


def moment_adjoint_matrix(force_vec, gamma: float, orders: Sequence[tuple[int, int]]) -> np.ndarray:
    """Adjoint generator on symmetrized moments, as a matrix M with d<w>/dt = M <w>.

    Works on Weyl symbols x^a p^b, where the linear drive acts as
    f_x d/dx + f_p d/dp and amplitude damping as the Fokker-Planck operator
    -gamma (x d/dx + p d/dp) + (gamma/2)(d^2/dx^2 + d^2/dp^2).
    """
    fx, fp = force_vec
    index = {o: i for i, o in enumerate(orders)}
    M = np.zeros((len(orders), len(orders)))

    def add(row, order, coeff):
        if coeff == 0:
            return
        if order not in index:
            raise ValueError(f"moment set is not closed: needs {order}")
        M[row, index[order]] += coeff

    for i, (a, b) in enumerate(orders):
        if a:
            add(i, (a - 1, b), fx * a)
        if b:
            add(i, (a, b - 1), fp * b)
        add(i, (a, b), -gamma * (a + b))
        if a >= 2:
            add(i, (a - 2, b), 0.5 * gamma * a * (a - 1))
        if b >= 2:
            add(i, (a, b - 2), 0.5 * gamma * b * (b - 1))
    return M


def moment_evolve(g0: GaussianState, force_vec, gamma: float, t: float, degree: int = 2) -> np.ndarray:
    """Symmetrized moments at time t for a constant force, via exp(M t)."""
    orders = moment_orders(degree)
    M = moment_adjoint_matrix(force_vec, gamma, orders)
    return np.real(matrix_exp(M * t) @ g0.moments(orders))


# --------------------------------------------------------------------------
# closed-form node solution and its nonlinear part
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AffineForce:
    """f(u) = offset + weights . u with time-independent weights."""

    weights: np.ndarray
    offset: float = 0.0

    def __call__(self, u) -> float:
        return float(self.offset + np.asarray(self.weights, dtype=float) @ np.atleast_1d(u))

    def rate(self, du) -> float:
        return float(np.asarray(self.weights, dtype=float) @ np.atleast_1d(du))


def _as_force(f) -> AffineForce:
    if isinstance(f, AffineForce):
        return f
    return AffineForce(np.atleast_1d(np.asarray(f, dtype=float)))


def _kernel_integral(fun, gamma, t, a, b):
    val, _ = scipy.integrate.quad(lambda s: math.exp(-gamma * (t - s)) * fun(s), a, b,
                                  epsabs=1e-15, epsrel=1e-13, limit=200)
    return val


def general_solution_node(
    f,
    gamma: float,
    signal: InputSignal,
    t_span,
    sample_times: Sequence[float] | None = None,
    b0: float = 0.0,
    undamped: bool = False,
) -> np.ndarray:
    """Node value for d<B>/dt = f(u(t)) - gamma <B>, by integration by parts.

    On each smooth piece [a, t] of the signal,

        gamma <B>(t) = gamma e^{-gamma (t-a)} <B>(a) + f(u(t)) - e^{-gamma (t-a)} f(u(a))
                       - int_a^t e^{-gamma (t-s)} (d/ds) f(u(s)) ds,

    and pieces are chained with updated initial conditions, so jumps of a
    piecewise-constant input never enter as derivatives. ``undamped=True``
    with gamma = 0 uses <B>(t) = <B>(a) + int_a^t f(u(s)) ds instead.
    """
    f = _as_force(f)
    if gamma == 0 and not undamped:
        raise ValueError("gamma = 0 has no fading memory; pass undamped=True for the plain integral")
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    t0, t1 = map(float, t_span)
    samples = [t1] if sample_times is None else sorted(float(t) for t in sample_times)
    edges = [t0, *signal.kinks(t0, t1), t1]
    values = {}
    b = float(b0)
    sample_iter = iter(samples)
    nxt = next(sample_iter, None)
    for a, e in zip(edges[:-1], edges[1:]):
        def node_at(t, a=a, e=e, b_start=b):
            if gamma == 0:
                integ, _ = scipy.integrate.quad(lambda s: f(signal.on_piece(s, a, e)), a, t,
                                                epsabs=1e-15, epsrel=1e-13, limit=200)
                return b_start + integ
            decay = math.exp(-gamma * (t - a))
            lin = gamma * decay * b_start + f(signal.on_piece(t, a, e)) - decay * f(signal(a))
            if signal.is_piecewise_constant or t == a:
                corr = 0.0
            else:
                corr = _kernel_integral(lambda s: f.rate(signal.derivative(s)), gamma, t, a, t)
            return (lin - corr) / gamma

        while nxt is not None and nxt <= e:
            if nxt >= a:
                values[nxt] = node_at(nxt)
            nxt = next(sample_iter, None)
        b = node_at(e)
    return np.array([values[t] for t in samples])


def linear_prediction(f, gamma: float, signal: InputSignal, t: float, t0: float = 0.0,
                      b0: float = 0.0) -> float:
    """Part of the node value that is affine in u(t): decayed start plus the boundary terms."""
    f = _as_force(f)
    decay = math.exp(-gamma * (t - t0))
    return decay * b0 + (f(signal(t)) - decay * f(signal(t0))) / gamma


def nl_contribution(weights, gamma: float, signal: InputSignal, t: float, t0: float = 0.0) -> float:
    """Derivative-driven part of the node value, -(1/gamma) sum_l c_l int e^{-gamma(t-s)} du_l/ds ds.

    With this sign, node = linear_prediction + nl_contribution for a smooth
    input. Jumps of piecewise-constant inputs are excluded, so such inputs
    give exactly 0.
    """
    c = np.atleast_1d(np.asarray(weights, dtype=float))
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if signal.is_piecewise_constant:
        return 0.0
    edges = [t0, *signal.kinks(t0, t), t]
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        mid_rate = lambda s, a=a, b=b: float(c @ signal.derivative(min(max(s, a + 1e-12 * (b - a)),
                                                                          b - 1e-12 * (b - a))))
        total += _kernel_integral(mid_rate, gamma, t, a, b)
    return -total / gamma
