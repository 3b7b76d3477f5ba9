import math

import numpy as np
import pytest

from qrc_lab.dynamics import AffineForce, BosonicDrive, DriveGenerator, InputSignal, general_solution_node
from qrc_lab.encodings import ParamChannel, reinit_mixed, reinit_pure_sqrt, unitary_channel
from qrc_lab.linearity import PriorEnsemble, probe_discrete
from qrc_lab.operators import SIGMA_MINUS, X, DensityMatrix, basis_state, make_basis, random_ginibre_state
from qrc_lab.reservoir import (
    ReservoirConfig,
    ising_unitary,
    nmse,
    qubit_reservoir,
    run_continuous,
    run_discrete,
    sine_estimation,
    sine_signal,
    stm_capacity,
    train_readout,
)

MOMENTS = make_basis("fock-moment", 2)


def single_qubit_memoryless():
    return ReservoirConfig("discrete", make_basis("pauli", 1), input_channel=reinit_mixed())


def bosonic(gamma=1.0, c=1.0):
    return ReservoirConfig("continuous", MOMENTS, drive=BosonicDrive(lambda u: c * u[0], gamma))


# -- config -------------------------------------------------------------------------


def test_config_invariants():
    with pytest.raises(ValueError):
        ReservoirConfig("discrete", make_basis("pauli", 1))
    with pytest.raises(ValueError):
        ReservoirConfig("continuous", MOMENTS, drive=BosonicDrive(lambda u: u[0], 0.0))
    ReservoirConfig("continuous", MOMENTS, drive=BosonicDrive(lambda u: u[0], 0.0), allow_undamped=True)
    with pytest.raises(ValueError):
        ReservoirConfig("continuous", make_basis("pauli", 1), drive=DriveGenerator(X))
    with pytest.raises(ValueError):
        ReservoirConfig("hybrid", MOMENTS)
    cfg = single_qubit_memoryless()
    assert cfg.reservoir_channel is not None and cfg.output_channel is not None
    assert np.allclose(cfg.default_state().matrix, np.diag([1, 0]))


# -- discrete runs -----------------------------------------------------------------


def test_memoryless_reservoir_z_node():
    u = np.random.default_rng(0).uniform(size=30)
    nodes = run_discrete(single_qubit_memoryless(), u)
    assert nodes.shape == (30, 4)
    assert np.allclose(nodes[:, 3], 1 - 2 * u, atol=1e-14)


def test_empty_input():
    assert run_discrete(single_qubit_memoryless(), []).shape == (0, 4)


def test_constant_input_converges():
    cfg = qubit_reservoir(reinit_pure_sqrt(0, (2, 2, 2)), 3, seed=2)
    nodes = run_discrete(cfg, np.full(600, 0.3))
    steps = np.max(np.abs(np.diff(nodes, axis=0)), axis=1)
    assert steps[-1] < 1e-2 * steps[10]
    assert np.polyfit(np.arange(100, 599), np.log(steps[100:]), 1)[0] < 0


def test_input_outside_domain_rejected():
    with pytest.raises(ValueError):
        run_discrete(single_qubit_memoryless(), [0.2, 1.4])


def test_echo_state_full_reinit_forgets_in_one_step():
    cfg = single_qubit_memoryless()
    u = [0.3, 0.8, 0.1]
    a = run_discrete(cfg, u, initial_state=basis_state(1, (2,)))
    b = run_discrete(cfg, u, initial_state=DensityMatrix(random_ginibre_state(2, np.random.default_rng(1))))
    assert np.max(np.abs(a - b)) < 1e-10


def test_echo_state_partial_reinit_fades():
    cfg = qubit_reservoir(reinit_mixed(0, (2, 2, 2)), 3, seed=4)
    u = np.random.default_rng(3).uniform(size=300)
    rng = np.random.default_rng(9)
    a = run_discrete(cfg, u, initial_state=DensityMatrix(random_ginibre_state(8, rng), (2, 2, 2)))
    b = run_discrete(cfg, u, initial_state=DensityMatrix(random_ginibre_state(8, rng), (2, 2, 2)))
    dist = np.max(np.abs(a - b), axis=1)
    assert dist[-1] < 1e-12
    assert dist[-1] < dist[0]


def test_linear_step_map_is_affine_at_fixed_history():
    dims = (2, 2)
    enc = reinit_mixed(0, dims)
    res = unitary_channel(ising_unitary(2, seed=5))
    step = ParamChannel("step", dims, 1, lambda u, r: res(enc.linear_map(u, r)), enc.domain)
    rep = probe_discrete(step, make_basis("pauli", 2), PriorEnsemble(10, dims=dims))
    assert set(rep.verdicts.values()) == {"linear"}
    # the same affine node values come out of run_discrete after one step
    cfg = ReservoirConfig("discrete", make_basis("pauli", 2), dims, enc, res)
    prior = PriorEnsemble(1, dims=dims).sample()[0]
    nodes = np.array([run_discrete(cfg, [u], initial_state=prior)[0] for u in np.linspace(0, 1, 11)])
    for k in range(16):
        fit = np.polyfit(np.linspace(0, 1, 11), nodes[:, k], 1, full=True)
        assert (fit[1][0] if len(fit[1]) else 0.0) <= 1e-20


def test_determinism():
    cfg_a = qubit_reservoir(reinit_pure_sqrt(0, (2, 2)), 2, seed=7)
    cfg_b = qubit_reservoir(reinit_pure_sqrt(0, (2, 2)), 2, seed=7)
    u = np.random.default_rng(0).uniform(size=50)
    assert run_discrete(cfg_a, u).tobytes() == run_discrete(cfg_b, u).tobytes()


# -- continuous runs ------------------------------------------------------------------


def test_zero_drive_vacuum():
    nodes = run_continuous(bosonic(), InputSignal.constant(0.0), [0.5, 1.0, 2.0])
    assert np.allclose(nodes[:, 1:3], 0.0)


def test_piecewise_drive_matches_closed_form():
    gamma, c = 0.7, 1.3
    sig = InputSignal.piecewise_constant([2.0, 4.0, 6.0], [0.2, 0.9, -0.3, 0.5])
    times = [1.0, 3.0, 5.0, 7.5]
    nodes = run_continuous(bosonic(gamma, c), sig, times)
    ref = general_solution_node(AffineForce([c]), gamma, sig, (0, 7.5), times)
    assert np.allclose(nodes[:, 1], ref, atol=1e-8)


def test_late_time_tracks_input():
    gamma, c = 2.0, 0.8
    levels = [0.2, 0.9, 0.4]
    sig = InputSignal.piecewise_constant([10.0, 20.0], levels)
    nodes = run_continuous(bosonic(gamma, c), sig, [9.9, 19.9, 29.9])
    assert np.allclose(gamma * nodes[:, 1], c * np.array(levels), atol=1e-12)


def test_finite_continuous_run():
    gen = DriveGenerator(np.zeros((2, 2)), ((X, lambda u: u[0]),), ((SIGMA_MINUS, 0.5),))
    cfg = ReservoirConfig("continuous", make_basis("pauli", 1), drive=gen)
    nodes = run_continuous(cfg, InputSignal.constant(0.0), [1.0, 2.0])
    assert np.allclose(nodes[:, 3], 1.0)


# -- readout --------------------------------------------------------------------------


def test_readout_identity_regression():
    rng = np.random.default_rng(0)
    nodes = rng.normal(size=(200, 5))
    model = train_readout(nodes, nodes[:, 2], lam=1e-12)
    assert model.weights[2, 0] == pytest.approx(1.0, abs=1e-6)
    assert model.train_nmse <= 1e-10
    assert np.allclose(model.predict(nodes), nodes[:, 2], atol=1e-6)


def test_readout_null_model():
    rng = np.random.default_rng(1)
    model = train_readout(rng.normal(size=(1000, 4)), rng.normal(size=1000))
    assert 0.8 <= model.test_nmse <= 1.25


def test_readout_lambda_sweep_monotone():
    rng = np.random.default_rng(2)
    nodes = rng.normal(size=(300, 6))
    y = nodes @ rng.normal(size=6) + 0.3 * rng.normal(size=300)
    errs = [train_readout(nodes, y, lam).train_nmse for lam in [1e-10, 1e-6, 1e-3, 1e-1, 1.0, 10.0]]
    assert all(b >= a - 1e-15 for a, b in zip(errs, errs[1:]))


def test_readout_drops_constant_columns():
    rng = np.random.default_rng(3)
    nodes = np.column_stack([np.ones(100), rng.normal(size=100), np.full(100, 2.0)])
    with pytest.warns(UserWarning, match="constant"):
        model = train_readout(nodes, 3 * nodes[:, 1] + 1, lam=1e-12)
    assert list(model.kept_columns) == [1]
    assert model.bias[0] == pytest.approx(1.0, abs=1e-8)


def test_readout_invariant_under_affine_recombination():
    rng = np.random.default_rng(4)
    nodes = rng.normal(size=(200, 4))
    y = np.sin(nodes[:, 0]) + nodes[:, 1] ** 2
    A = np.eye(4) + 0.2 * rng.normal(size=(4, 4))
    a = train_readout(nodes, y, lam=1e-12)
    b = train_readout(nodes @ A + rng.normal(size=4), y, lam=1e-12)
    assert a.train_nmse == pytest.approx(b.train_nmse, rel=1e-6)
    assert a.test_nmse == pytest.approx(b.test_nmse, rel=1e-6)


def test_readout_errors():
    with pytest.raises(ValueError):
        train_readout(np.ones((10, 2)), np.ones(10), lam=0)
    with pytest.raises(ValueError):
        train_readout(np.ones((10, 2)), np.ones(9))


def test_nmse_of_constant_target_is_undefined():
    assert math.isnan(nmse(np.ones(5), np.zeros(5)))


# -- short-term memory -------------------------------------------------------------


def test_stm_memoryless_single_qubit():
    res = stm_capacity(single_qubit_memoryless(), delays=[0, 1, 2, 3], length=1000)
    assert res.r2[0] >= 0.99
    assert np.all(res.r2[1:] <= 0.05)


def test_stm_multi_qubit_beats_memoryless():
    base = stm_capacity(single_qubit_memoryless(), delays=range(5), length=1000)
    rich = stm_capacity(qubit_reservoir(reinit_mixed(0, (2, 2, 2)), 3, seed=1), delays=range(5), length=1000)
    assert rich.capacity > base.capacity
    assert np.all((rich.r2 >= 0) & (rich.r2 <= 1))


def test_stm_errors():
    cfg = single_qubit_memoryless()
    with pytest.raises(ValueError, match="variance"):
        stm_capacity(cfg, inputs=np.full(500, 0.4), delays=[0, 1])
    with pytest.raises(ValueError, match="shorter"):
        stm_capacity(cfg, inputs=np.random.default_rng(0).uniform(size=100), delays=[0, 5])


def test_stm_one_row_per_delay_and_deterministic():
    cfg = single_qubit_memoryless()
    a = stm_capacity(cfg, delays=[0, 2, 4], length=400)
    b = stm_capacity(cfg, delays=[0, 2, 4], length=400)
    assert list(a.delays) == [0, 2, 4]
    assert a.r2.tobytes() == b.r2.tobytes()


# -- sine estimation ----------------------------------------------------------------


def test_sine_amplitude_linear_phase_nonlinear():
    cfg = bosonic(1.0)
    amp = sine_estimation(cfg, "amplitude", np.linspace(0.1, 1.0, 21))
    first = [amp.linearity.node(lbl) for lbl in ("X", "P")]
    assert amp.first_moment_verdict == "linear"
    assert all(n.scaled_residual <= 1e-8 for n in first)
    assert amp.nmse <= 1e-8
    ph = sine_estimation(cfg, "phase", np.linspace(0.1, 3.0, 21))
    assert ph.first_moment_verdict == "nonlinear"
    assert ph.linearity.node("X").scaled_residual >= 1e-4
    assert ph.nmse > amp.nmse


def test_sine_zero_amplitude_decays():
    cfg = bosonic(1.0)
    nodes = run_continuous(cfg, sine_signal(0.0, 2 * math.pi, 0.3), [1.0, 5.0])
    assert np.allclose(nodes[:, 1:3], 0.0)


def test_sine_requires_bosonic_continuous():
    with pytest.raises(ValueError):
        sine_estimation(single_qubit_memoryless(), "amplitude", np.linspace(0, 1, 21))
    with pytest.raises(ValueError):
        sine_estimation(bosonic(), "frequency", np.linspace(0, 1, 21))
