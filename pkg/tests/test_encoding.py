import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import oracle_state
from qpvm.encoding import (
    AnsatzSpec,
    EncodingError,
    build_encoder_circuit,
    chunk_features,
    encode_and_run,
    pad_features,
)
from qpvm.simulator import pvm_probabilities


class TestChunkFeatures:
    def test_exact_division(self):
        x = np.arange(12.0)
        chunks = chunk_features(x, 4)
        assert len(chunks) == 3
        for i, c in enumerate(chunks):
            np.testing.assert_array_equal(c, x[4 * i : 4 * i + 4])

    def test_zero_padding(self):
        x = np.arange(1.0, 11.0)
        chunks = chunk_features(x, 4)
        assert len(chunks) == 3
        np.testing.assert_array_equal(chunks[-1], [9.0, 10.0, 0.0, 0.0])

    def test_single_chunk(self):
        x = np.array([0.1, 0.2, 0.3, 0.4])
        (only,) = chunk_features(x, 4)
        np.testing.assert_array_equal(only, x)

    def test_empty(self):
        with pytest.raises(EncodingError):
            chunk_features([], 4)


class TestBuildCircuit:
    def test_parameter_count_example(self):
        c = build_encoder_circuit(AnsatzSpec(4, 3, 1, "ring_cnot"))
        assert c.num_data_slots == 12
        assert c.num_param_slots == 3 * (3 * 4) + 1 * (3 * 4) == 48

    def test_single_qubit_has_no_entangler(self):
        c = build_encoder_circuit(AnsatzSpec(1, 1, 1))
        assert all(op.control is None for op in c.ops)

    def test_zero_inputs_keep_ground_state(self):
        spec = AnsatzSpec(4, 3, 2)
        state = encode_and_run(spec, np.zeros(12), np.zeros(spec.num_enc_params), np.zeros(spec.num_pqc_params))
        np.testing.assert_allclose(pvm_probabilities(state), np.eye(16)[0], atol=1e-15)

    def test_block_structure(self):
        c = build_encoder_circuit(AnsatzSpec(2, 1, 1))
        kinds = [op.kind for op in c.ops]
        assert kinds == ["RY", "RY"] + ["RX", "RY", "RZ"] * 2 + ["CNOT"] * 2 + ["RX", "RY", "RZ"] * 2 + ["CNOT"] * 2
        assert [op.data for op in c.ops[:2]] == [0, 1]
        assert c.ops[0].scale == pytest.approx(math.pi)

    def test_crx_entangler_is_trainable(self):
        spec = AnsatzSpec(3, 2, 1, "ring_crx")
        c = build_encoder_circuit(spec)
        crx = [op for op in c.ops if op.kind == "CRX"]
        assert len(crx) == 3
        assert sorted(op.param for op in crx) == list(range(spec.num_params - 3, spec.num_params))

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 3), st.sampled_from(["ring_cnot", "ring_crx"]))
    @settings(max_examples=60, deadline=None)
    def test_parameter_formula(self, q, chunks, depth, ent):
        spec = AnsatzSpec(q, chunks, depth, ent)
        c = build_encoder_circuit(spec)
        extra = q if ent == "ring_crx" and q > 1 else 0
        assert c.num_param_slots == chunks * 3 * q + depth * (3 * q + extra) == spec.num_params
        used = sorted(op.param for op in c.ops if op.param is not None)
        assert used == list(range(spec.num_params))
        assert c.num_data_slots == chunks * q

    def test_invalid_spec(self):
        with pytest.raises(EncodingError):
            AnsatzSpec(0, 1)
        with pytest.raises(EncodingError):
            AnsatzSpec(2, 1, entangler="star")


class TestEncodeAndRun:
    def test_matches_matrix_oracle(self):
        rng = np.random.default_rng(0)
        spec = AnsatzSpec(3, 2, 1, "ring_crx")
        feats = rng.uniform(0, 1, 6)
        t_enc = rng.uniform(-math.pi, math.pi, spec.num_enc_params)
        t_pqc = rng.uniform(-math.pi, math.pi, spec.num_pqc_params)
        state = encode_and_run(spec, feats, t_enc, t_pqc)
        ref = oracle_state(build_encoder_circuit(spec), np.concatenate([t_enc, t_pqc]), feats)
        np.testing.assert_allclose(np.abs(state.amplitudes) ** 2, np.abs(ref) ** 2, atol=1e-10)
        k = np.argmax(np.abs(ref))
        np.testing.assert_allclose(state.amplitudes, ref * (state.amplitudes[k] / ref[k]), atol=1e-10)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_normalized_and_deterministic(self, seed):
        rng = np.random.default_rng(seed)
        spec = AnsatzSpec(3, 3, 1)
        args = (rng.uniform(0, 1, 7), rng.uniform(-3, 3, spec.num_enc_params), rng.uniform(-3, 3, spec.num_pqc_params))
        a = encode_and_run(spec, *args)
        b = encode_and_run(spec, *args)
        assert abs(a.norm_squared() - 1) <= 1e-9
        np.testing.assert_array_equal(a.amplitudes, b.amplitudes)

    def test_data_angles_in_range(self):
        spec = AnsatzSpec(2, 2)
        c = build_encoder_circuit(spec)
        feats = pad_features([0.0, 0.5, 1.0], 2)
        angles = [op.resolve_angle(np.zeros(spec.num_params), feats) for op in c.ops if op.data is not None]
        assert min(angles) >= 0 and max(angles) <= spec.angle_scale

    def test_dimension_mismatch(self):
        spec = AnsatzSpec(2, 1)
        with pytest.raises(EncodingError):
            encode_and_run(spec, np.zeros(4), np.zeros(spec.num_enc_params), np.zeros(spec.num_pqc_params))
        with pytest.raises(EncodingError):
            encode_and_run(spec, np.zeros(2), np.zeros(1), np.zeros(spec.num_pqc_params))
