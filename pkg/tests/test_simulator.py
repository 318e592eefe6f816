import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import oracle_state, random_circuit
from qpvm.simulator import (
    CapacityError,
    Circuit,
    GateOp,
    SimulatorError,
    StateVector,
    apply_circuit,
    apply_gate,
    dump_state_csv,
    init_state,
    povm_expectations,
    pvm_probabilities,
    run_batch,
    run_batch_jacobian,
    sample_counts,
    softmax_povm,
)


class TestInitState:
    def test_one_qubit(self):
        np.testing.assert_array_equal(init_state(1).amplitudes, [1 + 0j, 0])

    def test_two_qubits(self):
        np.testing.assert_array_equal(init_state(2).amplitudes, [1, 0, 0, 0])

    def test_four_qubits(self):
        s = init_state(4)
        assert s.amplitudes.size == 16 and s.amplitudes[0] == 1

    @pytest.mark.parametrize("q", [0, 25])
    def test_capacity(self, q):
        with pytest.raises(CapacityError):
            init_state(q)

    def test_configurable_cap(self):
        with pytest.raises(CapacityError):
            init_state(5, max_qubits=4)


class TestApplyGate:
    def test_ry_pi_flips(self):
        s = apply_gate(init_state(1), GateOp("RY", 0, angle=math.pi))
        np.testing.assert_allclose(np.abs(s.amplitudes), [0, 1], atol=1e-15)

    def test_ry_zero_is_identity(self):
        rng = np.random.default_rng(3)
        amps = rng.normal(size=8) + 1j * rng.normal(size=8)
        s = StateVector(3, amps / np.linalg.norm(amps))
        out = apply_gate(s, GateOp("RY", 1, angle=0.0))
        np.testing.assert_array_equal(out.amplitudes, s.amplitudes)

    def test_hadamard_involutive(self):
        s = apply_gate(apply_gate(init_state(1), GateOp("H", 0)), GateOp("H", 0))
        np.testing.assert_allclose(s.amplitudes, [1, 0], atol=1e-12)

    def test_input_not_mutated(self):
        s = init_state(2)
        apply_gate(s, GateOp("H", 0))
        np.testing.assert_array_equal(s.amplitudes, [1, 0, 0, 0])

    def test_qubit_zero_is_most_significant(self):
        s = apply_gate(init_state(3), GateOp("RY", 0, angle=math.pi))
        assert abs(s.amplitudes[4]) == pytest.approx(1.0)

    def test_controlled_needs_control_bit(self):
        s = apply_gate(init_state(2), GateOp("CNOT", 1, control=0))
        np.testing.assert_array_equal(s.amplitudes, [1, 0, 0, 0])
        s = apply_gate(apply_gate(init_state(2), GateOp("RY", 0, angle=math.pi)),
                       GateOp("CNOT", 1, control=0))
        np.testing.assert_allclose(np.abs(s.amplitudes), [0, 0, 0, 1], atol=1e-15)

    def test_index_out_of_range(self):
        with pytest.raises(SimulatorError):
            apply_gate(init_state(2), GateOp("RX", 2, angle=0.1))

    def test_non_finite_angle(self):
        with pytest.raises(SimulatorError):
            apply_gate(init_state(1), GateOp("RX", 0, param=0), params=[np.nan])

    @pytest.mark.parametrize("kw", [
        dict(kind="CRX", target=0),
        dict(kind="RX", target=0, control=1),
        dict(kind="CNOT", target=0, control=0),
        dict(kind="H", target=0, angle=0.3),
        dict(kind="RX", target=0, param=0, data=0),
        dict(kind="SWAP", target=0),
    ])
    def test_gate_validation(self, kw):
        with pytest.raises(SimulatorError):
            GateOp(**kw)

    @given(st.sampled_from(["RX", "RY", "RZ", "CRX", "CRY", "CRZ", "CNOT", "H"]),
           st.floats(-10, 10), st.integers(0, 2**31 - 1))
    @settings(max_examples=100, deadline=None)
    def test_norm_preserved_per_gate(self, kind, angle, seed):
        rng = np.random.default_rng(seed)
        amps = rng.normal(size=8) + 1j * rng.normal(size=8)
        s = StateVector(3, amps / np.linalg.norm(amps))
        control = 2 if kind.startswith("C") else None
        if kind in ("H", "CNOT"):
            angle = 0.0
        out = apply_gate(s, GateOp(kind, 0, control=control, angle=angle))
        assert abs(out.norm_squared() - 1) <= 1e-12


class TestApplyCircuit:
    def test_empty_circuit(self):
        s = init_state(3)
        out = apply_circuit(s, Circuit(3))
        np.testing.assert_array_equal(out.amplitudes, s.amplitudes)

    def test_fixed_zero_rotations(self):
        ops = [GateOp(k, t, angle=0.0) for k in ("RX", "RY", "RZ") for t in range(3)]
        ops += [GateOp("CRY", 1, control=0, angle=0.0)]
        out = apply_circuit(init_state(3), Circuit(3, ops))
        np.testing.assert_array_equal(out.amplitudes, init_state(3).amplitudes)

    def test_random_50_gate_circuit_matches_oracle(self):
        rng = np.random.default_rng(0)
        c = random_circuit(rng, 4, 50, n_params=5, n_data=3)
        params, data = rng.uniform(-math.pi, math.pi, 5), rng.uniform(0, 1, 3)
        out = apply_circuit(init_state(4), c, params, data)
        ref = oracle_state(c, params, data)
        # fix global phase on the largest oracle amplitude
        k = np.argmax(np.abs(ref))
        phase = out.amplitudes[k] / ref[k]
        np.testing.assert_allclose(out.amplitudes, ref * phase, atol=1e-10)

    def test_slot_length_mismatch(self):
        c = Circuit(1, (GateOp("RX", 0, param=0),), num_param_slots=1)
        with pytest.raises(SimulatorError):
            apply_circuit(init_state(1), c, params=[])

    def test_slot_index_validated(self):
        with pytest.raises(SimulatorError):
            Circuit(1, (GateOp("RX", 0, param=3),), num_param_slots=1)

    def test_norm_over_many_random_circuits(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            q = int(rng.integers(1, 7))
            c = random_circuit(rng, q, int(rng.integers(1, 40)))
            assert abs(apply_circuit(init_state(q), c).norm_squared() - 1) <= 1e-9


class TestMeasurement:
    def test_povm_ground_state(self):
        np.testing.assert_array_equal(povm_expectations(init_state(4), 4), [1, 1, 1, 1])

    def test_povm_flipped_qubit(self):
        # "qubit 2" is the second qubit, index 1
        s = apply_gate(init_state(4), GateOp("RY", 1, angle=math.pi))
        np.testing.assert_allclose(povm_expectations(s, 4), [1, -1, 1, 1], atol=1e-15)

    def test_povm_plus_states(self):
        s = init_state(4)
        for t in range(4):
            s = apply_gate(s, GateOp("H", t))
        np.testing.assert_allclose(povm_expectations(s, 4), 0.0, atol=1e-12)

    def test_povm_channel_bound(self):
        with pytest.raises(SimulatorError):
            povm_expectations(init_state(2), 3)

    def test_pvm_ground(self):
        np.testing.assert_array_equal(pvm_probabilities(init_state(2)), [1, 0, 0, 0])

    def test_pvm_uniform(self):
        s = apply_gate(apply_gate(init_state(2), GateOp("H", 0)), GateOp("H", 1))
        np.testing.assert_allclose(pvm_probabilities(s), 0.25, atol=1e-12)

    def test_pvm_matches_oracle(self):
        rng = np.random.default_rng(11)
        c = random_circuit(rng, 4, 30)
        ref = np.abs(oracle_state(c)) ** 2
        np.testing.assert_allclose(pvm_probabilities(apply_circuit(init_state(4), c)), ref, atol=1e-10)

    @given(st.integers(0, 2**31 - 1), st.integers(1, 6))
    @settings(max_examples=50, deadline=None)
    def test_measurement_ranges(self, seed, q):
        rng = np.random.default_rng(seed)
        s = apply_circuit(init_state(q), random_circuit(rng, q, 20))
        p = pvm_probabilities(s)
        assert p.min() >= 0 and abs(p.sum() - 1) <= 1e-9
        e = povm_expectations(s, q)
        assert np.all(e >= -1 - 1e-12) and np.all(e <= 1 + 1e-12)


class TestSoftmax:
    def test_equal_logits(self):
        np.testing.assert_allclose(softmax_povm([0, 0, 0, 0], 1.0), 0.25)

    def test_zero_beta(self):
        np.testing.assert_allclose(softmax_povm([1, -1], 0.0), [0.5, 0.5])

    def test_two_class_values(self):
        e, ei = math.e, 1 / math.e
        np.testing.assert_allclose(softmax_povm([1, -1], 1.0), [e / (e + ei), ei / (e + ei)], atol=1e-15)
        np.testing.assert_allclose(softmax_povm([1, -1], 1.0), [0.8808, 0.1192], atol=1e-4)

    @given(st.lists(st.floats(-1, 1), min_size=1, max_size=8), st.floats(-5, 5), st.floats(-3, 3))
    def test_shift_invariance(self, xs, beta, shift):
        a = softmax_povm(xs, beta)
        b = softmax_povm(np.array(xs) + shift, beta)
        np.testing.assert_allclose(a, b, atol=1e-12)
        assert abs(a.sum() - 1) <= 1e-12


class TestBatchKernels:
    def test_run_batch_matches_single_state_path(self):
        rng = np.random.default_rng(5)
        c = random_circuit(rng, 4, 60, n_params=6, n_data=4)
        params = rng.uniform(-3, 3, 6)
        data = rng.uniform(0, 1, (10, 4))
        got = run_batch(c, params, data)
        for row, p in zip(data, got):
            np.testing.assert_allclose(p, pvm_probabilities(apply_circuit(init_state(4), c, params, row)), atol=1e-12)

    def test_workers_bit_identical(self):
        rng = np.random.default_rng(6)
        c = random_circuit(rng, 3, 40, n_params=4, n_data=3)
        params, data = rng.uniform(-3, 3, 4), rng.uniform(0, 1, (37, 3))
        np.testing.assert_array_equal(run_batch(c, params, data, workers=1), run_batch(c, params, data, workers=4))
        gates = np.flatnonzero(c.program.kinds < 6)
        a = run_batch_jacobian(c, params, data, gates, workers=1)
        b = run_batch_jacobian(c, params, data, gates, workers=3)
        np.testing.assert_array_equal(a[1], b[1])

    def test_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        c = random_circuit(rng, 3, 40, n_params=6, n_data=2)
        params, data = rng.uniform(-3, 3, 6), rng.uniform(0, 1, (1, 2))
        gates = np.flatnonzero((c.program.kinds < 6) & (c.program.param_idx >= 0))
        _, dp = run_batch_jacobian(c, params, data, gates)
        # per-gate derivative summed into per-parameter derivative
        eps = 1e-6
        for p in range(6):
            e = np.zeros(6)
            e[p] = eps
            fd = (run_batch(c, params + e, data) - run_batch(c, params - e, data)) / (2 * eps)
            ps = dp[0, c.program.param_idx[gates] == p].sum(axis=0)
            np.testing.assert_allclose(ps, fd[0], atol=1e-8)

    def test_jacobian_rejects_fixed_gates(self):
        c = Circuit(2, (GateOp("H", 0), GateOp("RX", 1, angle=0.2)))
        with pytest.raises(SimulatorError):
            run_batch_jacobian(c, [], np.zeros((1, 0)), np.array([0]))


class TestSampling:
    def test_counts_sum(self):
        s = apply_gate(init_state(2), GateOp("H", 0))
        counts = sample_counts(s, 1000, np.random.default_rng(0))
        assert counts.sum() == 1000 and counts[1] == 0 and counts[3] == 0


def test_dump_state_csv():
    s = apply_gate(init_state(2), GateOp("H", 1))
    buf = io.StringIO()
    dump_state_csv(s, buf)
    lines = buf.getvalue().strip().splitlines()
    assert lines[0] == "index,real,imag,probability"
    probs = [float(line.split(",")[3]) for line in lines[1:]]
    assert len(probs) == 4 and abs(sum(probs) - 1) <= 1e-12
