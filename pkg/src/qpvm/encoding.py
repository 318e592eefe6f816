"""Data re-uploading encoder and trainable ansatz.

Every upload block is ``RY(data)`` on each qubit, a trainable ``RX RY RZ``
triple on each qubit, then a CNOT ring ``i -> (i + 1) mod Q``. The trailing
PQC blocks repeat the trainable triple followed by the configured entangler
ring: plain CNOTs, or trainable CRX gates (one extra parameter per qubit).
A single qubit gets no ring, and so no CRX parameters.

Parameter slots are laid out as all upload-block parameters first (block by
block, qubit by qubit, RX/RY/RZ), then the PQC blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from qpvm.simulator import (
    Circuit,
    GateOp,
    StateVector,
    apply_circuit,
    init_state,
)

ENTANGLERS = ("ring_cnot", "ring_crx")


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class AnsatzSpec:
    num_qubits: int
    upload_chunks: int
    pqc_depth: int = 1
    entangler: str = "ring_cnot"
    angle_scale: float = math.pi

    def __post_init__(self):
        if self.num_qubits < 1 or self.upload_chunks < 1 or self.pqc_depth < 1:
            raise EncodingError(
                "num_qubits, upload_chunks and pqc_depth must all be >= 1"
            )
        if self.entangler not in ENTANGLERS:
            raise EncodingError(f"entangler must be one of {ENTANGLERS}")

    @property
    def params_per_upload_block(self) -> int:
        return 3 * self.num_qubits

    @property
    def params_per_pqc_block(self) -> int:
        extra = self.num_qubits if self.entangler == "ring_crx" and self.num_qubits > 1 else 0
        return 3 * self.num_qubits + extra

    @property
    def num_enc_params(self) -> int:
        return self.upload_chunks * self.params_per_upload_block

    @property
    def num_pqc_params(self) -> int:
        return self.pqc_depth * self.params_per_pqc_block

    @property
    def num_params(self) -> int:
        return self.num_enc_params + self.num_pqc_params

    @property
    def num_data_slots(self) -> int:
        return self.upload_chunks * self.num_qubits


def chunk_features(x, num_qubits: int) -> list[np.ndarray]:
    """Split ``x`` into consecutive length-``num_qubits`` chunks, zero-padding the last."""
    flat = pad_features(x, num_qubits)
    return list(flat.reshape(-1, num_qubits))


def pad_features(x, num_qubits: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise EncodingError("cannot chunk an empty feature vector")
    n_chunks = -(-x.size // num_qubits)
    out = np.zeros(n_chunks * num_qubits)
    out[: x.size] = x
    return out


def signed_to_unit(x):
    """Map POVM outputs in [-1, 1] onto [0, 1] before re-encoding."""
    return (np.asarray(x) + 1.0) / 2.0


def _rotation_layer(q: int, first_param: int) -> list[GateOp]:
    ops = []
    for i in range(q):
        for j, kind in enumerate(("RX", "RY", "RZ")):
            ops.append(GateOp(kind, i, param=first_param + 3 * i + j))
    return ops


def _cnot_ring(q: int) -> list[GateOp]:
    if q == 1:
        return []
    return [GateOp("CNOT", (i + 1) % q, control=i) for i in range(q)]


def build_encoder_circuit(spec: AnsatzSpec) -> Circuit:
    """Full re-uploading circuit: all upload blocks followed by the PQC blocks."""
    q = spec.num_qubits
    ops: list[GateOp] = []
    for c in range(spec.upload_chunks):
        for i in range(q):
            ops.append(GateOp("RY", i, data=c * q + i, scale=spec.angle_scale))
        ops.extend(_rotation_layer(q, c * spec.params_per_upload_block))
        ops.extend(_cnot_ring(q))
    for d in range(spec.pqc_depth):
        base = spec.num_enc_params + d * spec.params_per_pqc_block
        ops.extend(_rotation_layer(q, base))
        if spec.entangler == "ring_cnot":
            ops.extend(_cnot_ring(q))
        elif q > 1:
            ops.extend(
                GateOp("CRX", (i + 1) % q, control=i, param=base + 3 * q + i)
                for i in range(q)
            )
    return Circuit(q, tuple(ops), spec.num_params, spec.num_data_slots)


def encode_and_run(spec: AnsatzSpec, features, theta_enc, theta_pqc) -> StateVector:
    data = pad_features(features, spec.num_qubits)
    if data.size != spec.num_data_slots:
        raise EncodingError(
            f"features fill {data.size} data slots, circuit has {spec.num_data_slots}"
        )
    theta_enc = np.asarray(theta_enc, dtype=np.float64)
    theta_pqc = np.asarray(theta_pqc, dtype=np.float64)
    if theta_enc.size != spec.num_enc_params or theta_pqc.size != spec.num_pqc_params:
        raise EncodingError(
            f"expected {spec.num_enc_params} encoder and {spec.num_pqc_params} PQC "
            f"parameters, got {theta_enc.size} and {theta_pqc.size}"
        )
    circuit = build_encoder_circuit(spec)
    params = np.concatenate([theta_enc, theta_pqc])
    return apply_circuit(init_state(spec.num_qubits), circuit, params, data)
