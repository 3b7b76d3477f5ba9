"""Input encodings: parameterized channels on qubits and Gaussian bosonic modes.

A :class:`ParamChannel` is stored operationally as a map ``(u, rho) -> rho'``
that is linear in ``rho`` for every frozen input ``u``. Complete positivity is
checked through the Choi matrix of the frozen map, never assumed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb
from typing import Callable, Sequence

import numpy as np

from .operators import (
    DensityMatrix,
    StateError,
    as_matrix,
    check_state,
    dagger,
    partial_trace_array,
    permute_subsystems,
)

Map = Callable[[np.ndarray], np.ndarray]

CPTP_TOL = 1e-10


class InputDomainError(ValueError):
    pass


def _as_input(u, input_dim: int) -> np.ndarray:
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if u.shape != (input_dim,):
        raise InputDomainError(f"expected input of length {input_dim}, got shape {u.shape}")
    if not np.all(np.isfinite(u)):
        raise InputDomainError("input has non-finite entries")
    return u


@dataclass(frozen=True, eq=False)
class ParamChannel:
    """Family of channels C_in(u) acting on states of dimension prod(dims).

    ``prior_independent`` marks channels whose output does not depend on the
    incoming state at all (full re-initialization); linearity probes fit
    those jointly across priors.
    """

    kind: str
    dims: tuple[int, ...]
    input_dim: int
    linear_map: Callable[[np.ndarray, np.ndarray], np.ndarray]
    domain: tuple[tuple[float, float], ...]
    params: dict = field(default_factory=dict)
    prior_independent: bool = False

    @property
    def dim(self) -> int:
        return int(np.prod(self.dims))

    def check_input(self, u) -> np.ndarray:
        u = _as_input(u, self.input_dim)
        for k, (lo, hi) in enumerate(self.domain):
            if not lo - 1e-12 <= u[k] <= hi + 1e-12:
                raise InputDomainError(f"input component {k} = {u[k]} outside [{lo}, {hi}]")
        return u

    def apply(self, u, rho: DensityMatrix) -> DensityMatrix:
        u = self.check_input(u)
        if rho.dim != self.dim:
            raise ValueError(f"state dimension {rho.dim} does not match channel dimension {self.dim}")
        out = self.linear_map(u, rho.matrix)
        return DensityMatrix(out, rho.dims)

    def apply_array(self, u, rho: np.ndarray) -> np.ndarray:
        return self.linear_map(self.check_input(u), rho)

    def frozen(self, u) -> Map:
        u = self.check_input(u)
        return lambda rho: self.linear_map(u, rho)

    def choi(self, u) -> np.ndarray:
        return choi_matrix(self.frozen(u), self.dim)


def choi_matrix(channel: Map, d: int) -> np.ndarray:
    """J = sum_ij |i><j| (x) C(|i><j|), input factor first."""
    J = np.zeros((d * d, d * d), dtype=complex)
    for i in range(d):
        for j in range(d):
            e = np.zeros((d, d), dtype=complex)
            e[i, j] = 1.0
            J[i * d:(i + 1) * d, j * d:(j + 1) * d] = channel(e)
    return J


def cptp_defects(channel: Map, d: int) -> tuple[float, float]:
    """(most negative Choi eigenvalue, max deviation of Tr_out J from identity)."""
    J = choi_matrix(channel, d)
    herm = 0.5 * (J + dagger(J))
    min_eig = float(np.linalg.eigvalsh(herm).min())
    tp = partial_trace_array(J, (d, d), keep=[0])
    return min_eig, float(np.max(np.abs(tp - np.eye(d))))


def is_cptp(channel: Map, d: int, tol: float = CPTP_TOL) -> bool:
    min_eig, tp = cptp_defects(channel, d)
    return min_eig >= -tol and tp <= 1e-12


# --------------------------------------------------------------------------
# fixed channels
# --------------------------------------------------------------------------


def identity_channel(rho: np.ndarray) -> np.ndarray:
    return rho


def unitary_channel(U) -> Map:
    U = as_matrix(U)
    Ud = dagger(U)
    return lambda rho: U @ rho @ Ud


def kraus_channel(kraus_ops: Sequence) -> Map:
    ops = [as_matrix(k) for k in kraus_ops]
    total = sum(dagger(k) @ k for k in ops)
    if np.max(np.abs(total - np.eye(total.shape[0]))) > 1e-12:
        raise ValueError("Kraus operators are not trace preserving")
    return lambda rho: sum(k @ rho @ dagger(k) for k in ops)


def compose(*maps: Map) -> Map:
    """compose(a, b)(rho) == b(a(rho)): applied left to right."""

    def run(rho):
        for m in maps:
            rho = m(rho)
        return rho

    return run


# --------------------------------------------------------------------------
# re-initialization
# --------------------------------------------------------------------------


def _reinit_map(dims: tuple[int, ...], targets: tuple[int, ...], states):
    n = len(dims)
    rest = [i for i in range(n) if i not in targets]
    new_order = list(targets) + rest
    new_dims = tuple(dims[i] for i in new_order)
    back = [new_order.index(i) for i in range(n)]
    d_target = int(np.prod([dims[t] for t in targets]))

    def joint_state(u):
        s = states(u)
        if isinstance(s, (list, tuple)):
            if len(s) != len(targets):
                raise ValueError(f"expected {len(targets)} target states, got {len(s)}")
            sig = np.ones((1, 1), dtype=complex)
            for t, piece in zip(targets, s):
                piece = as_matrix(piece)
                if piece.shape != (dims[t], dims[t]):
                    raise ValueError(f"state for subsystem {t} has shape {piece.shape}")
                sig = np.kron(sig, piece)
        else:
            sig = as_matrix(s)
        if sig.shape != (d_target, d_target):
            raise ValueError(f"joint input state has shape {sig.shape}, expected {d_target}")
        try:
            check_state(sig)
        except StateError as exc:
            raise StateError(f"invalid re-initialization state at u={u}: {exc}") from exc
        return sig

    def linear_map(u, rho):
        sig = joint_state(u)
        red = partial_trace_array(rho, dims, rest)
        out = np.kron(sig, red)
        return out if new_order == list(range(n)) else permute_subsystems(out, new_dims, back)

    return linear_map, joint_state


def reinit_general(
    states: Callable,
    targets: Sequence[int] = (0,),
    dims: Sequence[int] = (2,),
    input_dim: int = 1,
    domain: Sequence[tuple[float, float]] | None = None,
    kind: str = "reinit-general",
    params: dict | None = None,
) -> ParamChannel:
    """Replace the ``targets`` subsystems by sigma(u), keep the rest.

    ``states(u)`` returns either one matrix per target (tensored in target
    order) or a single joint matrix on all targets.
    """
    dims = tuple(int(d) for d in dims)
    targets = tuple(int(t) for t in targets)
    if len(set(targets)) != len(targets) or any(t < 0 or t >= len(dims) for t in targets):
        raise ValueError(f"invalid target subsystems {targets} for dims {dims}")
    linear_map, joint_state = _reinit_map(dims, targets, states)
    domain = tuple(domain) if domain is not None else ((0.0, 1.0),) * input_dim
    ch = ParamChannel(
        kind=kind,
        dims=dims,
        input_dim=input_dim,
        linear_map=linear_map,
        domain=domain,
        params=dict(params or {}, targets=list(targets)),
        prior_independent=set(targets) == set(range(len(dims))),
    )
    object.__setattr__(ch, "target_state", lambda u: joint_state(ch.check_input(u)))
    return ch


def sqrt_amplitude_state(u: float) -> np.ndarray:
    """|s><s| with |s> = sqrt(1-u)|0> + sqrt(u)|1>."""
    psi = np.array([np.sqrt(1.0 - u), np.sqrt(u)], dtype=complex)
    return np.outer(psi, psi.conj())


def mixed_population_state(u: float) -> np.ndarray:
    return np.diag([1.0 - u, u]).astype(complex)


def reinit_pure_sqrt(target: int = 0, dims: Sequence[int] = (2,)) -> ParamChannel:
    """Re-initialize one qubit in a pure state with sqrt(u) amplitudes."""
    if tuple(dims)[target] != 2:
        raise ValueError("target subsystem must be a qubit")
    return reinit_general(lambda u: [sqrt_amplitude_state(u[0])], (target,), dims,
                          kind="reinit-pure-sqrt", params={"target": target})


def reinit_mixed(target: int = 0, dims: Sequence[int] = (2,)) -> ParamChannel:
    """Re-initialize one qubit in the incoherent mixture (1-u)|0><0| + u|1><1|."""
    if tuple(dims)[target] != 2:
        raise ValueError("target subsystem must be a qubit")
    return reinit_general(lambda u: [mixed_population_state(u[0])], (target,), dims,
                          kind="reinit-mixed", params={"target": target})


def convex_reinit(
    fixed_states: Sequence,
    weights: Callable[[np.ndarray], np.ndarray],
    targets: Sequence[int] = (0,),
    dims: Sequence[int] = (2,),
    input_dim: int = 1,
    domain=None,
) -> ParamChannel:
    """Re-initialization into the convex sum sum_m f_m(u) tau_m of fixed states."""
    taus = [as_matrix(t) for t in fixed_states]

    def states(u):
        w = _simplex_weights(weights, u, len(taus))
        return sum(wm * t for wm, t in zip(w, taus))

    return reinit_general(states, targets, dims, input_dim, domain, kind="reinit-convex")


# --------------------------------------------------------------------------
# channel mixtures and unitaries
# --------------------------------------------------------------------------


def _simplex_weights(weights, u, count: int, tol: float = 1e-12) -> np.ndarray:
    w = np.asarray(weights(u), dtype=float).ravel()
    if w.shape != (count,):
        raise ValueError(f"weights returned {w.shape}, expected ({count},)")
    if np.any(w < -tol) or abs(w.sum() - 1.0) > tol:
        raise ValueError(f"weights {w} leave the probability simplex at u={u}")
    return w


def affine_weights(offsets: Sequence[float], slopes) -> Callable[[np.ndarray], np.ndarray]:
    """f_m(u) = offsets[m] + slopes[m] . u"""
    a0 = np.asarray(offsets, dtype=float)
    A = np.asarray(slopes, dtype=float).reshape(len(a0), -1)
    return lambda u: a0 + A @ np.atleast_1d(u)


def channel_mixture(
    channels: Sequence[Map],
    weights: Callable[[np.ndarray], np.ndarray],
    dims: Sequence[int] = (2,),
    input_dim: int = 1,
    domain=None,
) -> ParamChannel:
    """rho -> sum_m f_m(u) C_m[rho] with simplex weights f(u)."""
    channels = list(channels)
    if not channels:
        raise ValueError("channel_mixture needs at least one channel")

    def linear_map(u, rho):
        w = _simplex_weights(weights, u, len(channels))
        return sum(wm * c(rho) for wm, c in zip(w, channels))

    domain = tuple(domain) if domain is not None else ((0.0, 1.0),) * input_dim
    return ParamChannel("channel-mixture", tuple(dims), input_dim, linear_map, domain,
                        {"count": len(channels)})


def parameterized_unitary(
    generator,
    angle_map: Callable[[np.ndarray], float] | None = None,
    dims: Sequence[int] | None = None,
    input_dim: int = 1,
    domain=None,
) -> ParamChannel:
    """rho -> U rho U^dag with U = exp(-i theta(u) G)."""
    G = as_matrix(generator)
    if np.max(np.abs(G - dagger(G))) > 1e-12:
        raise ValueError("generator must be Hermitian")
    evals, W = np.linalg.eigh(G)
    Wd = dagger(W)
    angle_map = angle_map or (lambda u: float(u[0]))
    dims = tuple(dims) if dims is not None else (G.shape[0],)

    def unitary(u):
        return (W * np.exp(-1j * angle_map(u) * evals)) @ Wd

    def linear_map(u, rho):
        U = unitary(u)
        return U @ rho @ dagger(U)

    domain = tuple(domain) if domain is not None else ((0.0, 1.0),) * input_dim
    ch = ParamChannel("parameterized-unitary", dims, input_dim, linear_map, domain)
    object.__setattr__(ch, "unitary", lambda u: unitary(ch.check_input(u)))
    return ch


def eigenphase_unitary(
    projectors: Sequence,
    phase_maps: Sequence[Callable[[np.ndarray], float]],
    input_dim: int = 1,
    domain=None,
) -> ParamChannel:
    """U(u) = sum_m exp(i phi_m(u)) P_m from orthogonal projectors.

    No linearity is implied by this constructor; it exists so that
    eigenphase-level encodings can be probed like any other channel.
    """
    projs = [as_matrix(p) for p in projectors]
    d = projs[0].shape[0]
    if np.max(np.abs(sum(projs) - np.eye(d))) > 1e-12:
        raise ValueError("projectors must resolve the identity")

    def linear_map(u, rho):
        phases = [np.exp(1j * f(u)) for f in phase_maps]
        out = np.zeros_like(rho, dtype=complex)
        for pm, Pm in zip(phases, projs):
            for pl, Pl in zip(phases, projs):
                out += pm * np.conj(pl) * (Pm @ rho @ Pl)
        return out

    domain = tuple(domain) if domain is not None else ((0.0, 1.0),) * input_dim
    return ParamChannel("eigenphase-unitary", (d,), input_dim, linear_map, domain)


def eigenphase_products(phases) -> tuple[np.ndarray, np.ndarray]:
    """Real and imaginary parts of exp(i(phi_m - phi_l)) for all pairs (m, l)."""
    e = np.exp(1j * np.asarray(phases, dtype=float))
    prod = np.outer(e, e.conj())
    return prod.real, prod.imag


# --------------------------------------------------------------------------
# Gaussian single-mode states and channels (hbar = 1, vacuum variance 1/2)
# --------------------------------------------------------------------------

OMEGA = np.array([[0.0, 1.0], [-1.0, 0.0]])
VACUUM_COV = 0.5 * np.eye(2)


@dataclass(frozen=True, eq=False)
class GaussianState:
    """Single-mode Gaussian state: means (<X>, <P>) and symmetric covariance."""

    means: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        m = np.array(self.means, dtype=float).reshape(2)
        c = np.array(self.cov, dtype=float).reshape(2, 2)
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(c))):
            raise StateError("Gaussian state has non-finite moments")
        if np.max(np.abs(c - c.T)) > 1e-12:
            raise StateError("covariance matrix is not symmetric")
        min_eig = np.linalg.eigvalsh(c + 0.5j * OMEGA).min()
        if min_eig < -1e-10:
            raise StateError(f"covariance violates the uncertainty relation (min eig {min_eig:.3e})")
        m.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "cov", c)

    @classmethod
    def vacuum(cls) -> "GaussianState":
        return cls(np.zeros(2), VACUUM_COV)

    def moments(self, orders: Sequence[tuple[int, int]]) -> np.ndarray:
        """Symmetrized moments <sym(X^n P^m)> for each (n, m) in ``orders``."""
        return np.array([gaussian_symmetric_moment(self.means, self.cov, n, m) for n, m in orders])

    def __eq__(self, other):
        if not isinstance(other, GaussianState):
            return NotImplemented
        return np.array_equal(self.means, other.means) and np.array_equal(self.cov, other.cov)

    __hash__ = None


def _central_moment(cov: np.ndarray, i: int, j: int, cache: dict) -> float:
    # Stein recursion for E[xi^i eta^j] of a zero-mean bivariate normal
    key = (i, j)
    if key in cache:
        return cache[key]
    if i < 0 or j < 0:
        return 0.0
    if i == 0 and j == 0:
        val = 1.0
    elif (i + j) % 2:
        val = 0.0
    elif i > 0:
        val = (i - 1) * cov[0, 0] * _central_moment(cov, i - 2, j, cache) \
            + j * cov[0, 1] * _central_moment(cov, i - 1, j - 1, cache)
    else:
        val = (j - 1) * cov[1, 1] * _central_moment(cov, 0, j - 2, cache)
    cache[key] = val
    return val


def gaussian_symmetric_moment(means, cov, n: int, m: int) -> float:
    """<sym(X^n P^m)>: the plain moment of the (Gaussian) Wigner function."""
    mx, mp = means
    cache: dict = {}
    total = 0.0
    for i in range(n + 1):
        for j in range(m + 1):
            c = _central_moment(cov, i, j, cache)
            if c:
                total += (comb(n, i) * comb(m, j) * mx ** (n - i) * mp ** (m - j) * c)
    return float(total)


def squeezed_cov(r: float, phi: float = 0.0) -> np.ndarray:
    """Covariance of the squeezed vacuum S(r e^{i phi})|0>."""
    ch, sh = np.cosh(2 * r), np.sinh(2 * r)
    return 0.5 * np.array([
        [ch - sh * np.cos(phi), -sh * np.sin(phi)],
        [-sh * np.sin(phi), ch + sh * np.cos(phi)],
    ])


@dataclass(frozen=True, eq=False)
class GaussianChannel:
    """Input-parameterized Gaussian map on single-mode states."""

    kind: str
    input_dim: int
    update: Callable[[np.ndarray, GaussianState], GaussianState]
    domain: tuple[tuple[float, float], ...]
    params: dict = field(default_factory=dict)
    prior_independent: bool = False

    def check_input(self, u) -> np.ndarray:
        u = _as_input(u, self.input_dim)
        for k, (lo, hi) in enumerate(self.domain):
            if not lo - 1e-12 <= u[k] <= hi + 1e-12:
                raise InputDomainError(f"input component {k} = {u[k]} outside [{lo}, {hi}]")
        return u

    def apply(self, u, state: GaussianState) -> GaussianState:
        return self.update(self.check_input(u), state)


def _shift(beta: complex) -> np.ndarray:
    return np.sqrt(2.0) * np.array([beta.real, beta.imag])


def displacement_encode(beta_map: Callable[[np.ndarray], complex], input_dim: int = 1,
                        domain=None) -> GaussianChannel:
    """Apply D(beta(u)): means shift by sqrt2 (Re beta, Im beta), covariance untouched."""

    def update(u, s):
        return GaussianState(s.means + _shift(complex(beta_map(u))), s.cov)

    domain = tuple(domain) if domain is not None else ((0.0, 1.0),) * input_dim
    return GaussianChannel("displacement", input_dim, update, domain)


def coherent_reinit(beta_map: Callable[[np.ndarray], complex], input_dim: int = 1,
                    domain=None) -> GaussianChannel:
    """Reset to vacuum, then displace: the coherent state |beta(u)>."""

    def update(u, s):
        return GaussianState(_shift(complex(beta_map(u))), VACUUM_COV)

    domain = tuple(domain) if domain is not None else ((0.0, 1.0),) * input_dim
    return GaussianChannel("coherent-reinit", input_dim, update, domain, prior_independent=True)


def squeezed_reinit(r_map: Callable[[np.ndarray], float], phi: float = 0.0, input_dim: int = 1,
                    domain=None) -> GaussianChannel:
    """Reset to the squeezed vacuum with squeezing r(u) at fixed angle phi."""

    def update(u, s):
        return GaussianState(np.zeros(2), squeezed_cov(float(r_map(u)), phi))

    domain = tuple(domain) if domain is not None else ((0.0, 1.0),) * input_dim
    return GaussianChannel("squeezed-reinit", input_dim, update, domain, {"phi": phi},
                           prior_independent=True)
