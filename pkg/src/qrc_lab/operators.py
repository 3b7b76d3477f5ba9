"""Dense operator toolkit: states, bases, tensor structure and vectorization.

Every other module in the package sits on top of these primitives. Matrices
are plain complex ``numpy`` arrays; the only wrapper type is
:class:`DensityMatrix`, which carries subsystem dimensions and validates the
physical invariants once, at construction.

Vectorization is column-stacking throughout, so that

    vec(A @ rho @ B) == kron(B.T, A) @ vec(rho)
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from math import comb
from typing import Sequence

import numpy as np
import scipy.linalg

HERMITIAN_TOL = 1e-12
TRACE_TOL = 1e-12
PSD_TOL = 1e-10

I2 = np.eye(2, dtype=complex)
X = np.array([[0, 1], [1, 0]], dtype=complex)
Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
Z = np.array([[1, 0], [0, -1]], dtype=complex)
SIGMA_MINUS = np.array([[0, 1], [0, 0]], dtype=complex)  # |0><1|, decays |1> -> |0>
PAULIS = {"I": I2, "X": X, "Y": Y, "Z": Z}


class StateError(ValueError):
    """A matrix failed a density-matrix invariant."""


class DimensionError(ValueError):
    pass


class BasisError(ValueError):
    pass


def _finite(a: np.ndarray, what: str = "matrix") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} has non-finite entries")
    return a


def as_matrix(a) -> np.ndarray:
    """Return ``a`` (array or :class:`DensityMatrix`) as a complex 2-D array."""
    if isinstance(a, DensityMatrix):
        return a.matrix
    m = np.asarray(a, dtype=complex)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def state_defects(rho: np.ndarray) -> tuple[float, float, float]:
    """Return (hermiticity defect, trace defect, most negative eigenvalue)."""
    herm = float(np.max(np.abs(rho - rho.conj().T))) if rho.size else 0.0
    tr = abs(complex(np.trace(rho)) - 1.0)
    h = 0.5 * (rho + rho.conj().T)
    min_eig = float(np.linalg.eigvalsh(h).min())
    return herm, tr, min_eig


def check_state(
    rho: np.ndarray,
    herm_tol: float = HERMITIAN_TOL,
    trace_tol: float = TRACE_TOL,
    psd_tol: float = PSD_TOL,
) -> None:
    """Raise :class:`StateError` unless ``rho`` is Hermitian, unit-trace and PSD."""
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise StateError(f"density matrix must be square, got {rho.shape}")
    _finite(rho, "density matrix")
    herm, tr, min_eig = state_defects(rho)
    if herm > herm_tol:
        raise StateError(f"not Hermitian: max|rho - rho^dag| = {herm:.3e}")
    if tr > trace_tol:
        raise StateError(f"trace differs from 1 by {tr:.3e}")
    if min_eig < -psd_tol:
        raise StateError(f"not positive semidefinite: min eigenvalue {min_eig:.3e}")


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    """A validated reservoir state with its tensor-factor dimensions.

    The stored array is read-only. Construction raises :class:`StateError`
    when an invariant is violated; nothing is clipped or repaired.
    """

    matrix: np.ndarray
    dims: tuple[int, ...] = ()

    def __post_init__(self):
        m = np.array(self.matrix, dtype=complex)
        dims = tuple(int(d) for d in self.dims) if self.dims else (m.shape[0],)
        if any(d < 1 for d in dims) or int(np.prod(dims)) != m.shape[0]:
            raise DimensionError(f"subsystem dims {dims} do not match matrix size {m.shape}")
        check_state(m)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "dims", dims)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def from_ket(cls, psi, dims: Sequence[int] = ()) -> "DensityMatrix":
        psi = np.asarray(psi, dtype=complex).ravel()
        psi = psi / np.linalg.norm(psi)
        return cls(np.outer(psi, psi.conj()), tuple(dims))

    def __eq__(self, other):
        if not isinstance(other, DensityMatrix):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.matrix, other.matrix)

    __hash__ = None


def basis_state(index: int | Sequence[int], dims: Sequence[int]) -> DensityMatrix:
    """Computational basis projector, e.g. ``basis_state((1, 0), (2, 2))`` is |10><10|."""
    dims = tuple(dims)
    if isinstance(index, (int, np.integer)):
        flat = int(index)
    else:
        flat = int(np.ravel_multi_index(tuple(index), dims))
    d = int(np.prod(dims))
    psi = np.zeros(d, dtype=complex)
    psi[flat] = 1.0
    return DensityMatrix.from_ket(psi, dims)


def tensor(*ops) -> np.ndarray:
    """Kronecker product of one or more matrices, left factor most significant."""
    if len(ops) == 1 and isinstance(ops[0], (list, tuple)):
        ops = tuple(ops[0])
    out = np.ones((1, 1), dtype=complex)
    for op in ops:
        out = np.kron(out, as_matrix(op))
    return out


def _reshape_check(rho: np.ndarray, dims: Sequence[int]) -> None:
    if int(np.prod(dims)) != rho.shape[0] or rho.shape[0] != rho.shape[1]:
        raise DimensionError(f"subsystem dims {tuple(dims)} inconsistent with shape {rho.shape}")


def partial_trace_array(rho: np.ndarray, dims: Sequence[int], keep: Sequence[int]) -> np.ndarray:
    """Partial trace on a raw (possibly non-Hermitian) matrix; keeps index order."""
    dims = tuple(dims)
    _reshape_check(rho, dims)
    n = len(dims)
    keep = sorted(set(int(k) for k in keep))
    if any(k < 0 or k >= n for k in keep):
        raise DimensionError(f"keep={keep} outside subsystem range 0..{n - 1}")
    if n > 26:
        raise DimensionError("too many subsystems")
    row = [chr(ord("a") + i) for i in range(n)]
    # traced subsystems share the row label
    col = [row[i].upper() if i in keep else row[i] for i in range(n)]
    out = "".join(row[i] for i in keep) + "".join(col[i] for i in keep)
    t = rho.reshape(dims + dims)
    red = np.einsum("".join(row) + "".join(col) + "->" + out, t)
    dk = int(np.prod([dims[i] for i in keep])) if keep else 1
    return red.reshape(dk, dk)


def partial_trace(rho: DensityMatrix, keep: Sequence[int]) -> DensityMatrix:
    """Reduced state on the subsystems listed in ``keep``."""
    if not isinstance(rho, DensityMatrix):
        raise TypeError("partial_trace needs a DensityMatrix (subsystem dims are required)")
    keep = sorted(set(int(k) for k in keep))
    red = partial_trace_array(rho.matrix, rho.dims, keep)
    return DensityMatrix(red, tuple(rho.dims[k] for k in keep))


def permute_subsystems(a: np.ndarray, dims: Sequence[int], order: Sequence[int]) -> np.ndarray:
    """Reorder tensor factors: factor ``order[i]`` of ``a`` becomes factor ``i``."""
    dims = tuple(dims)
    _reshape_check(a, dims)
    n = len(dims)
    order = list(order)
    t = a.reshape(dims + dims).transpose(order + [n + o for o in order])
    d = a.shape[0]
    return t.reshape(d, d)


def expectation(rho, B) -> complex:
    """Tr[B rho]."""
    r = as_matrix(rho)
    b = as_matrix(B)
    if r.shape != b.shape:
        raise DimensionError(f"operator shape {b.shape} does not match state shape {r.shape}")
    # Tr[B rho] = sum_ij B_ij rho_ji
    return complex(np.sum(b * r.T))


def vectorize(a) -> np.ndarray:
    """Column-stacking vec(A)."""
    return as_matrix(a).reshape(-1, order="F")


def devectorize(v) -> np.ndarray:
    v = np.asarray(v, dtype=complex).ravel()
    d = int(round(np.sqrt(v.size)))
    if d * d != v.size:
        raise DimensionError(f"vector length {v.size} is not a perfect square")
    return v.reshape(d, d, order="F")


def matrix_exp(a) -> np.ndarray:
    """Matrix exponential (scaling and squaring with Pade approximants)."""
    m = as_matrix(a)
    if m.shape[0] != m.shape[1]:
        raise DimensionError("matrix_exp needs a square matrix")
    _finite(m)
    return scipy.linalg.expm(m)


def dagger(a: np.ndarray) -> np.ndarray:
    return a.conj().T


def embed(op, index: int, dims: Sequence[int]) -> np.ndarray:
    """Lift a single-subsystem operator to the full space."""
    factors = [np.eye(d, dtype=complex) for d in dims]
    factors[index] = as_matrix(op)
    return tensor(*factors)


def pauli_string(label: str) -> np.ndarray:
    """``pauli_string("XZ")`` -> X (x) Z."""
    try:
        return tensor(*[PAULIS[c] for c in label.upper()])
    except KeyError as exc:
        raise ValueError(f"invalid Pauli label {label!r}") from exc


# --------------------------------------------------------------------------
# operator bases
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OperatorBasis:
    """Ordered operator basis whose element 0 is the identity.

    ``orders`` is populated for moment bases only and lists the quadrature
    powers (n, m) of each element.
    """

    name: str
    elements: tuple[np.ndarray, ...]
    labels: tuple[str, ...]
    orthogonal: bool = True
    complete: bool = True
    orders: tuple[tuple[int, int], ...] = field(default=())

    def __len__(self):
        return len(self.elements)

    @property
    def dim(self) -> int:
        return self.elements[0].shape[0]

    def gram(self) -> np.ndarray:
        """Hilbert-Schmidt Gram matrix Tr[B_j^dag B_k]."""
        stack = np.stack([e.reshape(-1) for e in self.elements])
        return stack.conj() @ stack.T

    def recombine(self, V: np.ndarray) -> "OperatorBasis":
        """New node set B'_j = sum_k V_jk B_k (element 0 is not re-checked)."""
        V = np.asarray(V)
        elems = tuple(np.tensordot(V[j], np.stack(self.elements), axes=1) for j in range(V.shape[0]))
        labels = tuple(f"{self.name}'[{j}]" for j in range(V.shape[0]))
        return OperatorBasis(f"{self.name}-recombined", elems, labels, orthogonal=False,
                             complete=self.complete)


def _pauli_basis(n_qubits: int) -> OperatorBasis:
    if n_qubits < 1:
        raise BasisError("pauli basis needs at least one qubit")
    labels = ["".join(p) for p in itertools.product("IXYZ", repeat=n_qubits)]
    elems = tuple(pauli_string(lbl) for lbl in labels)
    return OperatorBasis(f"pauli-{n_qubits}", elems, tuple(labels))


def _gell_mann_basis(d: int) -> OperatorBasis:
    if d < 2:
        raise BasisError("gell-mann basis needs dimension >= 2")
    elems = [np.eye(d, dtype=complex)]
    labels = ["I"]
    for j in range(d):
        for k in range(j + 1, d):
            s = np.zeros((d, d), dtype=complex)
            s[j, k] = s[k, j] = 1.0
            a = np.zeros((d, d), dtype=complex)
            a[j, k], a[k, j] = -1j, 1j
            elems += [s, a]
            labels += [f"S{j}{k}", f"A{j}{k}"]
    for l in range(1, d):
        diag = np.zeros(d)
        diag[:l] = 1.0
        diag[l] = -l
        elems.append(np.sqrt(2.0 / (l * (l + 1))) * np.diag(diag).astype(complex))
        labels.append(f"D{l}")
    return OperatorBasis(f"gell-mann-{d}", tuple(elems), tuple(labels))


def ladder_operators(cutoff: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Truncated (a, X, P) with X = (a + a^dag)/sqrt2, P = (a - a^dag)/(i sqrt2)."""
    if cutoff < 2:
        raise BasisError("Fock cutoff must be >= 2")
    a = np.diag(np.sqrt(np.arange(1, cutoff)), 1).astype(complex)
    x = (a + a.conj().T) / np.sqrt(2)
    p = (a - a.conj().T) / (1j * np.sqrt(2))
    return a, x, p


def moment_orders(degree: int) -> list[tuple[int, int]]:
    """(n, m) powers ordered by total degree; pure powers first within a degree."""
    out = [(0, 0)]
    for k in range(1, degree + 1):
        out.append((k, 0))
        out.append((0, k))
        out.extend((k - j, j) for j in range(1, k))
    return out


def symmetrized_moment(x: np.ndarray, p: np.ndarray, n: int, m: int) -> np.ndarray:
    """Average of all distinct orderings of n copies of X and m copies of P."""
    d = x.shape[0]
    if n + m == 0:
        return np.eye(d, dtype=complex)
    total = np.zeros((d, d), dtype=complex)
    for pos in itertools.combinations(range(n + m), n):
        prod = np.eye(d, dtype=complex)
        for i in range(n + m):
            prod = prod @ (x if i in pos else p)
        total += prod
    return total / comb(n + m, n)


def _moment_label(n: int, m: int) -> str:
    if n == m == 0:
        return "I"
    parts = []
    if n:
        parts.append("X" if n == 1 else f"X^{n}")
    if m:
        parts.append("P" if m == 1 else f"P^{m}")
    return "sym(" + "".join(parts) + ")" if n and m else "".join(parts)


def _fock_moment_basis(degree: int, cutoff: int) -> OperatorBasis:
    if degree < 1:
        raise BasisError("moment basis degree must be >= 1")
    _, x, p = ladder_operators(cutoff)
    orders = moment_orders(degree)
    elems = tuple(symmetrized_moment(x, p, n, m) for n, m in orders)
    labels = tuple(_moment_label(n, m) for n, m in orders)
    return OperatorBasis(f"fock-moment-{degree}", elems, labels, orthogonal=False,
                         complete=False, orders=tuple(orders))


def make_basis(kind: str, dims=1, *, cutoff: int = 20) -> OperatorBasis:
    """Build a built-in basis.

    Args:
        kind: ``"pauli"`` (``dims`` = number of qubits), ``"gell-mann"``
            (``dims`` = Hilbert-space dimension) or ``"fock-moment"``
            (``dims`` = maximal total degree n + m of the symmetrized
            quadrature moments, represented on a Fock space of ``cutoff``
            levels).
    """
    if kind == "pauli":
        return _pauli_basis(int(dims))
    if kind == "gell-mann":
        return _gell_mann_basis(int(dims))
    if kind == "fock-moment":
        return _fock_moment_basis(int(dims), int(cutoff))
    raise BasisError(f"unsupported basis kind {kind!r}")


def basis_expand(a, basis: OperatorBasis) -> np.ndarray:
    """Coefficients c with a = sum_m c_m B_m."""
    m = as_matrix(a)
    d = basis.dim
    if m.shape != (d, d):
        raise DimensionError(f"operator shape {m.shape} does not match basis dimension {d}")
    if not basis.complete or len(basis) != d * d:
        raise BasisError(f"basis {basis.name} is not complete for dimension {d}")
    stack = np.stack([e.reshape(-1) for e in basis.elements])
    rhs = stack.conj() @ m.reshape(-1)
    gram = stack.conj() @ stack.T
    if basis.orthogonal:
        return rhs / np.real(np.diag(gram))
    return np.linalg.solve(gram, rhs)


def reconstruct(coeffs, basis: OperatorBasis) -> np.ndarray:
    return np.tensordot(np.asarray(coeffs, dtype=complex), np.stack(basis.elements), axes=1)


def expectation_vector(rho, basis: OperatorBasis) -> np.ndarray:
    """Node values Tr[B_k rho] for every basis element, in basis order."""
    r = as_matrix(rho)
    return np.array([expectation(r, b) for b in basis.elements])


# --------------------------------------------------------------------------
# random instances
# --------------------------------------------------------------------------


def random_hermitian(d: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    g = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    return scale * 0.5 * (g + g.conj().T)


def random_ginibre_state(d: int, rng: np.random.Generator) -> np.ndarray:
    g = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    rho = g @ g.conj().T
    rho = 0.5 * (rho + rho.conj().T)
    return rho / np.trace(rho).real


def random_pure_state(d: int, rng: np.random.Generator) -> np.ndarray:
    psi = rng.normal(size=d) + 1j * rng.normal(size=d)
    psi /= np.linalg.norm(psi)
    return np.outer(psi, psi.conj())
