"""End-to-end reservoir pipeline: run the reservoir, train a linear readout, score tasks."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dynamics import BosonicDrive, DriveGenerator, InputSignal, evolve, gaussian_evolve
from .encodings import GaussianChannel, GaussianState, ParamChannel, identity_channel, unitary_channel
from .linearity import LinearityReport, Tolerances, probe_continuous
from .operators import (
    DensityMatrix,
    OperatorBasis,
    Z,
    embed,
    expectation_vector,
    make_basis,
    matrix_exp,
    pauli_string,
)


@dataclass(frozen=True, eq=False)
class ReservoirConfig:
    """Everything needed to run a reservoir.

    Discrete mode applies ``output_channel(reservoir_channel(input_channel(u)[rho]))``
    per step. Continuous mode evolves under ``drive`` (a finite
    :class:`DriveGenerator` or a :class:`BosonicDrive`); it must damp every
    node unless ``allow_undamped`` is set.
    """

    mode: str
    basis: OperatorBasis
    dims: tuple[int, ...] = ()
    input_channel: ParamChannel | GaussianChannel | None = None
    reservoir_channel: Callable | None = None
    output_channel: Callable | None = None
    drive: DriveGenerator | BosonicDrive | None = None
    initial_state: DensityMatrix | GaussianState | None = None
    seed: int = 0
    allow_undamped: bool = False

    def __post_init__(self):
        if self.mode == "discrete":
            if self.input_channel is None:
                raise ValueError("discrete mode needs an input channel")
            if self.reservoir_channel is None:
                object.__setattr__(self, "reservoir_channel", identity_channel)
            if self.output_channel is None:
                object.__setattr__(self, "output_channel", identity_channel)
            if isinstance(self.input_channel, ParamChannel) and not self.dims:
                object.__setattr__(self, "dims", self.input_channel.dims)
        elif self.mode == "continuous":
            if self.drive is None:
                raise ValueError("continuous mode needs a drive")
            if not self.allow_undamped:
                if isinstance(self.drive, BosonicDrive):
                    gmin = self.drive.gamma
                else:
                    gmin = min((r for _, r in self.drive.jumps), default=0.0)
                if gmin <= 0:
                    raise ValueError("continuous reservoir has no damping (gamma_min = 0); "
                                     "set allow_undamped=True to override")
            if isinstance(self.drive, DriveGenerator) and not self.dims:
                object.__setattr__(self, "dims", (self.drive.dim,))
        else:
            raise ValueError(f"unknown mode {self.mode!r}")
        object.__setattr__(self, "dims", tuple(self.dims))

    @property
    def gaussian(self) -> bool:
        return isinstance(self.input_channel, GaussianChannel) or isinstance(self.drive, BosonicDrive)

    def default_state(self):
        if self.initial_state is not None:
            return self.initial_state
        if self.gaussian:
            return GaussianState.vacuum()
        d = int(np.prod(self.dims))
        rho = np.zeros((d, d), dtype=complex)
        rho[0, 0] = 1.0
        return DensityMatrix(rho, self.dims)


def _nodes(state, basis: OperatorBasis) -> np.ndarray:
    if isinstance(state, GaussianState):
        return state.moments(basis.orders)
    return expectation_vector(state, basis).real


def run_discrete(config: ReservoirConfig, inputs, initial_state=None) -> np.ndarray:
    """Node matrix (steps x nodes) recorded after every full input/evolve/measure step."""
    if config.mode != "discrete":
        raise ValueError("run_discrete needs a discrete-mode config")
    ch = config.input_channel
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim == 1:
        inputs = inputs[:, None] if ch.input_dim == 1 else inputs[None, :]
    state = initial_state if initial_state is not None else config.default_state()
    rows = np.empty((len(inputs), len(config.basis)))
    for j, u in enumerate(inputs):
        state = ch.apply(u, state)
        if isinstance(state, GaussianState):
            state = config.output_channel(config.reservoir_channel(state))
        else:
            rho = config.output_channel(config.reservoir_channel(state.matrix))
            state = DensityMatrix(rho, state.dims)
        rows[j] = _nodes(state, config.basis)
    return rows


def run_continuous(config: ReservoirConfig, signal: InputSignal, sample_times: Sequence[float],
                   t0: float = 0.0, dt: float | None = None) -> np.ndarray:
    """Node matrix (len(sample_times) x nodes) under continuous drive."""
    if config.mode != "continuous":
        raise ValueError("run_continuous needs a continuous-mode config")
    times = sorted(float(t) for t in sample_times)
    state0 = config.default_state()
    if isinstance(config.drive, BosonicDrive):
        traj = gaussian_evolve(state0, config.drive.force, config.drive.gamma, signal,
                               (t0, times[-1]), times)
        return np.array([_nodes(s, config.basis) for s in traj.states])
    traj = evolve(state0, config.drive, signal, (t0, times[-1]), dt=dt, basis=config.basis,
                  sample_times=times)
    return traj.node_values.real


# --------------------------------------------------------------------------
# readout
# --------------------------------------------------------------------------


def nmse(y, y_hat) -> float:
    y = np.asarray(y, dtype=float)
    var = float(np.var(y))
    if var == 0:
        return float("nan")
    return float(np.mean((y - np.asarray(y_hat)) ** 2) / var)


@dataclass
class ReadoutModel:
    weights: np.ndarray  # (kept features, outputs)
    bias: np.ndarray
    kept_columns: np.ndarray
    lam: float
    lam_effective: float
    train_nmse: float = float("nan")
    test_nmse: float = float("nan")
    n_train: int = 0

    def predict(self, nodes) -> np.ndarray:
        X = np.asarray(nodes, dtype=float)[:, self.kept_columns]
        out = X @ self.weights + self.bias
        return out[:, 0] if out.shape[1] == 1 else out


def train_readout(nodes, targets, lam: float = 1e-8, train_fraction: float = 0.8) -> ReadoutModel:
    """Ridge regression readout with an unpenalized bias.

    ``lam`` is relative to the squared largest singular value of the centred
    training features. The first ``train_fraction`` of rows (in order) train
    the model; the rest are held out.
    """
    if lam <= 0:
        raise ValueError("regularization must be positive")
    X = np.asarray(nodes, dtype=float)
    Y = np.asarray(targets, dtype=float)
    squeeze = Y.ndim == 1
    if squeeze:
        Y = Y[:, None]
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"{X.shape[0]} node rows but {Y.shape[0]} targets")
    n_train = int(round(train_fraction * X.shape[0]))
    if n_train < 2:
        raise ValueError("not enough rows to train a readout")
    Xtr, Ytr = X[:n_train], Y[:n_train]
    spread = np.ptp(Xtr, axis=0)
    scale = max(float(np.max(np.abs(Xtr), initial=0.0)), 1.0)
    kept = np.flatnonzero(spread > 1e-12 * scale)
    if kept.size < X.shape[1]:
        warnings.warn(f"dropping {X.shape[1] - kept.size} constant node column(s); bias retained",
                      stacklevel=2)
    xm = Xtr[:, kept].mean(axis=0)
    ym = Ytr.mean(axis=0)
    Xc = Xtr[:, kept] - xm
    if kept.size:
        Uu, s, Vt = np.linalg.svd(Xc, full_matrices=False)
        lam_eff = lam * float(s[0] ** 2) if s.size and s[0] > 0 else lam
        filt = s / (s ** 2 + lam_eff)
        W = Vt.T @ (filt[:, None] * (Uu.T @ (Ytr - ym)))
    else:
        lam_eff = lam
        W = np.zeros((0, Y.shape[1]))
    model = ReadoutModel(W, ym - xm @ W, kept, lam, lam_eff, n_train=n_train)
    pred = X[:, kept] @ W + model.bias
    model.train_nmse = float(np.mean([nmse(Y[:n_train, k], pred[:n_train, k]) for k in range(Y.shape[1])]))
    if n_train < X.shape[0] - 1:
        model.test_nmse = float(np.mean([nmse(Y[n_train:, k], pred[n_train:, k])
                                         for k in range(Y.shape[1])]))
    return model


def r_squared(y, y_hat) -> float:
    """Squared Pearson correlation, clipped to [0, 1]."""
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if np.var(y) == 0 or np.var(y_hat) == 0:
        return 0.0
    c = np.corrcoef(y, y_hat)[0, 1]
    return float(np.clip(c * c, 0.0, 1.0))


# --------------------------------------------------------------------------
# tasks
# --------------------------------------------------------------------------


@dataclass
class STMResult:
    delays: np.ndarray
    r2: np.ndarray
    washout: int

    @property
    def capacity(self) -> float:
        return float(np.sum(self.r2))


def stm_capacity(
    config: ReservoirConfig,
    inputs=None,
    delays: Sequence[int] = (0, 1, 2, 3, 4, 5),
    length: int | None = None,
    lam: float = 1e-8,
) -> STMResult:
    """Short-term memory: how well a linear readout recovers u_{j-d} for each delay d."""
    delays = np.array(sorted(int(d) for d in delays))
    if delays.size == 0 or delays[0] < 0:
        raise ValueError("delays must be non-negative")
    max_d = int(delays[-1])
    if inputs is None:
        length = length or max(50 * max(max_d, 1), 500)
        inputs = np.random.default_rng(config.seed).uniform(0.0, 1.0, size=length)
    inputs = np.asarray(inputs, dtype=float).ravel()
    L = inputs.size
    if L < 50 * max(max_d, 1):
        raise ValueError(f"sequence length {L} is shorter than 50 x max delay ({50 * max(max_d, 1)})")
    if np.var(inputs) == 0:
        raise ValueError("input sequence has zero variance; r^2 is undefined")
    nodes = run_discrete(config, inputs)
    washout = max(math.ceil(0.1 * L), max_d)
    r2 = []
    for d in delays:
        X = nodes[washout:]
        y = inputs[washout - d: L - d]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            model = train_readout(X, y, lam)
        r2.append(r_squared(y[model.n_train:], model.predict(X[model.n_train:])))
    return STMResult(delays, np.array(r2), washout)


@dataclass
class SineReport:
    encoding: str
    params: np.ndarray
    predictions: np.ndarray
    test_index: np.ndarray
    nmse: float
    linearity: LinearityReport
    first_moment_verdict: str = field(default="")


def sine_signal(amplitude: float, omega: float, phase: float) -> InputSignal:
    return InputSignal.analytic(lambda t: amplitude * math.sin(omega * t + phase),
                                derivative=lambda t: amplitude * omega * math.cos(omega * t + phase))


def sine_estimation(
    config: ReservoirConfig,
    encoding: str,
    grid,
    amplitude: float = 1.0,
    phase: float = 0.0,
    omega: float = 2 * math.pi,
    sample_times: Sequence[float] | None = None,
    lam: float = 1e-8,
    tolerances: Tolerances = Tolerances(),
) -> SineReport:
    """Estimate the amplitude or the phase of a sinusoidal drive from the reservoir nodes."""
    if encoding not in ("amplitude", "phase"):
        raise ValueError("encoding must be 'amplitude' or 'phase'")
    if config.mode != "continuous" or not isinstance(config.drive, BosonicDrive):
        raise ValueError("sine estimation needs a continuous damped bosonic reservoir")
    grid = np.asarray(grid, dtype=float).ravel()
    gamma = config.drive.gamma
    if sample_times is None:
        t_settle = 5.0 / gamma
        sample_times = t_settle + np.linspace(0.0, 2 * math.pi / omega, 9)[:-1]
    sample_times = sorted(float(t) for t in sample_times)

    def protocol(p):
        p = float(np.atleast_1d(p)[0])
        if encoding == "amplitude":
            return sine_signal(p, omega, phase)
        return sine_signal(amplitude, omega, p)

    report = probe_continuous(config.drive, protocol, config.basis, sample_times, grid,
                              state0=config.default_state(), tolerances=tolerances,
                              encoding=f"sine-{encoding}")
    first = [n.verdict for n in report.nodes if n.label in ("X", "P")]
    first_verdict = "nonlinear" if "nonlinear" in first else (
        "indeterminate" if "indeterminate" in first else "linear")

    feats = []
    for p in grid:
        nodes = run_continuous(config, protocol(p), sample_times)
        cols = [i for i, lbl in enumerate(config.basis.labels) if lbl in ("X", "P")]
        feats.append(nodes[:, cols].ravel())
    feats = np.array(feats)
    order = np.random.default_rng(config.seed).permutation(len(grid))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = train_readout(feats[order], grid[order], lam)
    test = order[model.n_train:]
    pred = model.predict(feats[test])
    return SineReport(encoding, grid, pred, test, nmse(grid[test], pred), report, first_verdict)


# --------------------------------------------------------------------------
# reservoir building blocks
# --------------------------------------------------------------------------


def ising_unitary(n_qubits: int, tau: float = 1.0, J: float = 1.0, h: float = 0.5,
                  seed: int = 0) -> np.ndarray:
    """exp(-i tau H) for H = sum_{i<j} J_ij Z_i Z_j + h sum_i X_i, J_ij ~ U(-J, J)."""
    rng = np.random.default_rng(seed)
    dims = (2,) * n_qubits
    d = 2 ** n_qubits
    H = np.zeros((d, d), dtype=complex)
    for i in range(n_qubits):
        label = ["I"] * n_qubits
        label[i] = "X"
        H += h * pauli_string("".join(label))
        for j in range(i + 1, n_qubits):
            H += rng.uniform(-J, J) * embed(Z, i, dims) @ embed(Z, j, dims)
    return matrix_exp(-1j * tau * H)


def qubit_reservoir(input_channel: ParamChannel, n_qubits: int, tau: float = 1.0,
                    seed: int = 0, basis: OperatorBasis | None = None) -> ReservoirConfig:
    """Discrete reservoir: input channel followed by a random transverse-field Ising unitary."""
    return ReservoirConfig(
        mode="discrete",
        basis=basis or make_basis("pauli", n_qubits),
        dims=(2,) * n_qubits,
        input_channel=input_channel,
        reservoir_channel=unitary_channel(ising_unitary(n_qubits, tau, seed=seed)),
        seed=seed,
    )
