import math

import numpy as np
import pytest
import scipy.integrate
from hypothesis import given, settings
from hypothesis import strategies as st

from qrc_lab.dynamics import BosonicDrive, DriveGenerator, InputSignal, linear_coupling, nl_contribution
from qrc_lab.encodings import (
    affine_weights,
    channel_mixture,
    displacement_encode,
    identity_channel,
    parameterized_unitary,
    reinit_general,
    reinit_mixed,
    reinit_pure_sqrt,
    squeezed_reinit,
    unitary_channel,
)
from qrc_lab.linearity import (
    LinearityReport,
    PriorEnsemble,
    RankDeficientError,
    Tolerances,
    affine_fit,
    check_forcing_condition,
    default_grid,
    probe_continuous,
    probe_discrete,
)
from qrc_lab.operators import SIGMA_MINUS, X, Z, make_basis, random_hermitian

seeds = st.integers(0, 2 ** 32 - 1)
U21 = np.linspace(0.05, 0.95, 21)
PAULI1 = make_basis("pauli", 1)
MOMENTS = make_basis("fock-moment", 2)


# -- affine fits ----------------------------------------------------------------


def test_affine_fit_examples():
    fit = affine_fit(U21, 1 - 2 * U21)
    assert fit.max_residual <= 1e-14
    assert np.allclose(fit.coefficients, [1, -2])
    assert affine_fit(U21, np.sqrt(U21 * (1 - U21))).max_residual >= 1e-2
    const = affine_fit(U21, np.full(21, 0.3))
    assert const.max_residual == pytest.approx(0, abs=1e-15)
    assert const.coefficients[1] == pytest.approx(0, abs=1e-14)


def test_affine_fit_multivariate_and_complex():
    rng = np.random.default_rng(0)
    U = rng.uniform(size=(30, 3))
    y = (0.2 + 1j) + U @ np.array([1.0, -0.5j, 2.0])
    fit = affine_fit(U, y)
    assert fit.max_residual <= 1e-13
    assert np.allclose(fit.predict(U), y)


def test_affine_fit_degenerate():
    with pytest.raises(RankDeficientError):
        affine_fit([0.1, 0.2], [1, 2])
    with pytest.raises(RankDeficientError):
        affine_fit(np.full(10, 0.5), np.arange(10.0))
    U = np.column_stack([U21, 2 * U21])
    with pytest.raises(RankDeficientError):
        affine_fit(U, U21)


def test_tolerance_band():
    tol = Tolerances()
    assert tol.verdict(1e-9) == "linear"
    assert tol.verdict(1e-3) == "nonlinear"
    assert tol.verdict(1e-6) == "indeterminate"
    with pytest.raises(ValueError):
        Tolerances(1e-3, 1e-4)


def test_default_grid():
    g = default_grid([(0.0, 1.0)])
    assert g.shape == (21, 1)
    assert g[0, 0] == pytest.approx(0.05) and g[-1, 0] == pytest.approx(0.95)
    assert default_grid([(0, 1), (0, 2)], points=11).shape == (121, 2)


# -- discrete probes ------------------------------------------------------------------


def test_probe_reinit_mixed_linear():
    rep = probe_discrete(reinit_mixed(), PAULI1)
    assert rep.verdicts == {"I": "linear", "X": "linear", "Y": "linear", "Z": "linear"}
    assert max(n.max_abs_residual for n in rep.nodes) <= 1e-10


def test_probe_reinit_pure_sqrt():
    rep = probe_discrete(reinit_pure_sqrt(), PAULI1)
    assert rep.verdicts["X"] == "nonlinear" and rep.verdicts["Z"] == "linear"
    assert rep.node("Z").max_abs_residual <= 1e-10
    assert rep.node("X").max_abs_residual >= 1e-2
    assert rep.fit_mode == "joint"
    # at least eight decades between the two residuals
    assert rep.node("X").max_abs_residual / max(rep.node("Z").max_abs_residual, 1e-300) >= 1e8


def test_probe_partial_reinit_on_two_qubits():
    rep = probe_discrete(reinit_pure_sqrt(0, (2, 2)), make_basis("pauli", 2))
    assert rep.fit_mode == "per-prior"
    assert rep.verdicts["XI"] == "nonlinear"
    assert rep.verdicts["ZI"] == "linear"
    assert rep.verdicts["IZ"] == "linear"
    assert rep.verdicts["XZ"] == "nonlinear"


def test_probe_channel_mixture_linear():
    ch = channel_mixture([identity_channel, unitary_channel(X), unitary_channel(Z)],
                         affine_weights([0.5, 0.5, 0.0], [[-0.5], [-0.3], [0.8]]))
    rep = probe_discrete(ch, PAULI1)
    assert set(rep.verdicts.values()) == {"linear"}
    assert max(n.max_abs_residual for n in rep.nodes) <= 1e-10


def test_probe_constant_channel():
    ch = reinit_general(lambda u: [np.diag([0.3, 0.7])], (0,), (2,))
    rep = probe_discrete(ch, PAULI1)
    assert all(n.verdict == "linear" and n.max_abs_residual <= 1e-12 for n in rep.nodes)


def test_probe_unitary_nonlinear():
    rep = probe_discrete(parameterized_unitary(X / 2), PAULI1)
    assert rep.verdicts["Z"] == "nonlinear" and rep.verdicts["Y"] == "nonlinear"


def test_probe_gaussian_channels():
    rep = probe_discrete(displacement_encode(lambda u: (0.7 - 0.2j) * u[0]), MOMENTS)
    assert rep.verdicts["X"] == "linear" and rep.verdicts["P"] == "linear"
    rep = probe_discrete(squeezed_reinit(lambda u: u[0]), MOMENTS)
    assert rep.verdicts["X^2"] == "nonlinear" and rep.verdicts["P^2"] == "nonlinear"
    with pytest.raises(ValueError):
        probe_discrete(displacement_encode(lambda u: u[0]), PAULI1)


@pytest.mark.parametrize("factory", [reinit_mixed, reinit_pure_sqrt, lambda: parameterized_unitary(X / 2)])
def test_verdicts_are_seed_robust(factory):
    a = probe_discrete(factory(), PAULI1, PriorEnsemble(20, seed=1))
    b = probe_discrete(factory(), PAULI1, PriorEnsemble(20, seed=2))
    assert a.verdicts == b.verdicts


@pytest.mark.parametrize("kind", ["haar-pure", "product-basis", "ginibre-mixed"])
def test_prior_kinds_are_valid_states(kind):
    states = PriorEnsemble(8, kind, seed=3, dims=(2, 2)).sample()
    assert len(states) == 8  # DensityMatrix validates on construction


def test_residuals_transform_with_basis_recombination():
    rng = np.random.default_rng(5)
    V = np.eye(4) + 0.3 * rng.normal(size=(4, 4))
    ch = reinit_pure_sqrt()
    grid = default_grid(ch.domain)
    a = probe_discrete(ch, PAULI1, PriorEnsemble(1), grid)
    b = probe_discrete(ch, PAULI1.recombine(V), PriorEnsemble(1), grid)
    ra = np.array([n.residuals for n in a.nodes])
    rb = np.array([n.residuals for n in b.nodes])
    assert np.allclose(rb, V @ ra, atol=1e-12)
    # nodes without an X component stay linear, all others become nonlinear
    W = np.eye(4)
    W[2] = [0.5, 0.0, 1.0, 0.7]  # mixes I, Y, Z only
    c = probe_discrete(ch, PAULI1.recombine(W), PriorEnsemble(1), grid)
    assert [n.verdict for n in c.nodes] == ["linear", "nonlinear", "linear", "linear"]


def test_grid_checks():
    ch = reinit_mixed()
    with pytest.raises(ValueError):
        probe_discrete(ch, PAULI1, u_grid=np.linspace(0, 1, 5))
    with pytest.raises(ValueError):
        probe_discrete(ch, PAULI1, u_grid=np.linspace(0, 2, 21))


def test_threads_do_not_change_result():
    ch = reinit_pure_sqrt(0, (2, 2))
    basis = make_basis("pauli", 2)
    a = probe_discrete(ch, basis, threads=1)
    b = probe_discrete(ch, basis, threads=4)
    assert a.to_json() == b.to_json()


@settings(max_examples=10, deadline=None)
@given(seeds)
def test_report_json_roundtrip(seed):
    rep = probe_discrete(reinit_pure_sqrt(), PAULI1, PriorEnsemble(3, seed=seed))
    back = LinearityReport.from_json(rep.to_json())
    assert back == rep
    assert back.to_json() == rep.to_json()


# -- continuous probes ----------------------------------------------------------------


def test_probe_continuous_qubit_drive_nonlinear():
    gen = DriveGenerator(np.zeros((2, 2)), ((X / 2, linear_coupling([1.0])),))
    rep = probe_continuous(gen, lambda u: InputSignal.constant(u), PAULI1, [1.0], U21)
    assert rep.verdicts["Z"] == "nonlinear"


def test_probe_continuous_bosonic():
    drive = BosonicDrive(lambda u: (1.0 + 0.5j) * u[0], 0.8)
    const = probe_continuous(drive, lambda u: InputSignal.constant(u), MOMENTS, [0.5, 2.0, 6.0], U21)
    assert const.verdicts["X"] == "linear" and const.verdicts["P"] == "linear"
    steps = probe_continuous(
        drive, lambda u: InputSignal.piecewise_constant([1.0, 2.0], [u[0], 0.5, 1 - u[0]]),
        MOMENTS, [1.5, 3.0], U21)
    assert steps.verdicts["X"] == "linear" and steps.verdicts["P"] == "linear"


def test_probe_continuous_sinusoid_amplitude_vs_phase():
    drive = BosonicDrive(lambda u: u[0], 1.0)
    w = 2 * math.pi
    amp = lambda u: InputSignal.analytic(lambda t: u[0] * math.sin(w * t))
    phase = lambda u: InputSignal.analytic(lambda t: math.sin(w * t + 3 * u[0]))
    times = [5.0, 5.2, 5.4]
    assert probe_continuous(drive, amp, MOMENTS, times, U21).verdicts["X"] == "linear"
    assert probe_continuous(drive, phase, MOMENTS, times, U21).verdicts["X"] == "nonlinear"


# -- forcing condition ----------------------------------------------------------------


def test_forcing_condition_finite_never_holds():
    rng = np.random.default_rng(11)
    for _ in range(12):
        n = int(rng.integers(1, 4))
        d = 2 ** n
        gen = DriveGenerator(random_hermitian(d, rng), ((random_hermitian(d, rng), linear_coupling([1.0])),),
                             ((np.kron(SIGMA_MINUS, np.eye(d // 2)), 0.3),))
        res = check_forcing_condition(gen, make_basis("pauli", n), 0.0, 1.0)
        assert not any(r.satisfied for r in res[1:])
        assert res[0].defect <= 1e-12


def test_forcing_condition_bosonic():
    drive = BosonicDrive(lambda u: u[0], 0.5)  # H = u P
    res = {r.label: r for r in check_forcing_condition(drive, MOMENTS, 0.0, 1.0)}
    assert res["X"].satisfied
    assert not res["P"].satisfied  # never reached by this drive
    for lbl in ("X^2", "P^2", "sym(XP)"):
        assert not res[lbl].satisfied
    assert res["X^2"].defect > 0
    with pytest.raises(ValueError):
        check_forcing_condition(drive, MOMENTS, 0.5, 0.5)


# -- nonlinear contribution ---------------------------------------------------------------


@pytest.mark.parametrize("a,gamma,t", [(0.5, 0.3, 2.0), (1.2, 1.0, 1.0), (-0.7, 2.5, 3.0)])
def test_nl_contribution_ramp(a, gamma, t):
    ramp = InputSignal.analytic(lambda s: a * s, derivative=lambda s: a)
    quad, _ = scipy.integrate.quad(lambda s: math.exp(-gamma * (t - s)) * a, 0, t, epsabs=1e-15)
    nl = nl_contribution([1.0], gamma, ramp, t)
    assert abs(nl - (-quad / gamma)) <= 1e-10
    # magnitude (a/gamma)(1 - e^{-gamma t})/gamma, entering the node with a minus sign
    assert abs(nl + (a / gamma) * (1 - math.exp(-gamma * t)) / gamma) <= 1e-10
    assert nl_contribution([1.0], gamma, InputSignal.constant(0.4), t) == 0.0
