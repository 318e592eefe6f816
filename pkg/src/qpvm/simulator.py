"""Dense statevector simulation.

Basis-state ordering: qubit 0 is the most significant bit of the basis index,
so ``|q0 q1 ... q_{n-1}>`` maps to index ``q0 * 2**(n-1) + ... + q_{n-1}``.
Rotations follow ``R_P(theta) = exp(-i theta P / 2)``.

Single states go through the numpy kernels in this module; batches of
circuit evaluations go through :func:`run_batch` / :func:`run_batch_jacobian`,
which dispatch to the compiled kernels in :mod:`qpvm._kernels`.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import IO, NamedTuple, Sequence

import numpy as np

from qpvm import _kernels

MAX_QUBITS = 24

ROTATIONS = ("RX", "RY", "RZ")
CONTROLLED_ROTATIONS = ("CRX", "CRY", "CRZ")
GATE_KINDS = ROTATIONS + CONTROLLED_ROTATIONS + ("CNOT", "H")
_KIND_CODES = {kind: code for code, kind in enumerate(GATE_KINDS)}


class SimulatorError(ValueError):
    pass


class CapacityError(SimulatorError):
    pass


@dataclass
class StateVector:
    num_qubits: int
    amplitudes: np.ndarray

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=np.complex128)
        if self.amplitudes.shape != (2**self.num_qubits,):
            raise SimulatorError(
                f"expected {2**self.num_qubits} amplitudes, got {self.amplitudes.shape}"
            )

    def norm_squared(self) -> float:
        return float(np.vdot(self.amplitudes, self.amplitudes).real)

    def copy(self) -> StateVector:
        return StateVector(self.num_qubits, self.amplitudes.copy())


@dataclass(frozen=True)
class GateOp:
    """One gate. The angle comes from exactly one source.

    ``param`` indexes the trainable parameter vector, ``data`` indexes the
    data vector (angle = ``scale * data[i]``), otherwise ``angle`` is used.
    """

    kind: str
    target: int
    control: int | None = None
    angle: float = 0.0
    param: int | None = None
    data: int | None = None
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise SimulatorError(f"unknown gate kind {self.kind!r}")
        needs_control = self.kind in CONTROLLED_ROTATIONS or self.kind == "CNOT"
        if needs_control != (self.control is not None):
            raise SimulatorError(f"{self.kind} control qubit mismatch")
        if self.control is not None and self.control == self.target:
            raise SimulatorError("control and target must differ")
        if self.param is not None and self.data is not None:
            raise SimulatorError("a gate takes its angle from one source only")
        if self.kind in ("H", "CNOT") and (
            self.param is not None or self.data is not None or self.angle != 0.0
        ):
            raise SimulatorError(f"{self.kind} takes no angle")

    @property
    def is_rotation(self) -> bool:
        return self.kind not in ("H", "CNOT")

    def resolve_angle(self, params: Sequence[float], data: Sequence[float]) -> float:
        if self.param is not None:
            return float(params[self.param])
        if self.data is not None:
            return self.scale * float(data[self.data])
        return self.angle


class Program(NamedTuple):
    """Array form of a circuit consumed by the compiled kernels."""

    kinds: np.ndarray
    targets: np.ndarray
    controls: np.ndarray
    param_idx: np.ndarray
    data_idx: np.ndarray
    angles: np.ndarray
    scales: np.ndarray


@dataclass(frozen=True)
class Circuit:
    num_qubits: int
    ops: tuple[GateOp, ...] = field(default_factory=tuple)
    num_param_slots: int = 0
    num_data_slots: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        for op in self.ops:
            _check_qubits(op, self.num_qubits)
            if op.param is not None and not 0 <= op.param < self.num_param_slots:
                raise SimulatorError(f"param slot {op.param} out of range")
            if op.data is not None and not 0 <= op.data < self.num_data_slots:
                raise SimulatorError(f"data slot {op.data} out of range")

    @cached_property
    def program(self) -> Program:
        ops = self.ops
        return Program(
            kinds=np.array([_KIND_CODES[op.kind] for op in ops], dtype=np.int64),
            targets=np.array([op.target for op in ops], dtype=np.int64),
            controls=np.array(
                [-1 if op.control is None else op.control for op in ops], dtype=np.int64
            ),
            param_idx=np.array(
                [-1 if op.param is None else op.param for op in ops], dtype=np.int64
            ),
            data_idx=np.array(
                [-1 if op.data is None else op.data for op in ops], dtype=np.int64
            ),
            angles=np.array([op.angle for op in ops], dtype=np.float64),
            scales=np.array([op.scale for op in ops], dtype=np.float64),
        )

    def param_gates(self) -> np.ndarray:
        """Indices of gates whose angle is a trainable parameter."""
        return np.flatnonzero(self.program.param_idx >= 0)

    def data_gates(self) -> np.ndarray:
        return np.flatnonzero(self.program.data_idx >= 0)


def _check_qubits(op: GateOp, q: int) -> None:
    if not 0 <= op.target < q:
        raise SimulatorError(f"target qubit {op.target} out of range for {q} qubits")
    if op.control is not None and not 0 <= op.control < q:
        raise SimulatorError(f"control qubit {op.control} out of range for {q} qubits")


def gate_matrix(kind: str, angle: float = 0.0) -> np.ndarray:
    """2x2 matrix acting on the target (for controlled kinds, the controlled block)."""
    c, s = math.cos(angle / 2), math.sin(angle / 2)
    if kind in ("RX", "CRX"):
        return np.array([[c, -1j * s], [-1j * s, c]])
    if kind in ("RY", "CRY"):
        return np.array([[c, -s], [s, c]], dtype=np.complex128)
    if kind in ("RZ", "CRZ"):
        return np.array([[c - 1j * s, 0], [0, c + 1j * s]])
    if kind == "CNOT":
        return np.array([[0, 1], [1, 0]], dtype=np.complex128)
    if kind == "H":
        return np.array([[1, 1], [1, -1]], dtype=np.complex128) / math.sqrt(2)
    raise SimulatorError(f"unknown gate kind {kind!r}")


def init_state(q: int, max_qubits: int = MAX_QUBITS) -> StateVector:
    if not 1 <= q <= max_qubits:
        raise CapacityError(f"qubit count {q} outside [1, {max_qubits}]")
    amps = np.zeros(2**q, dtype=np.complex128)
    amps[0] = 1.0
    return StateVector(q, amps)


def _apply_pair_update(tensor: np.ndarray, u: np.ndarray, axis: int) -> None:
    lo = [slice(None)] * tensor.ndim
    hi = [slice(None)] * tensor.ndim
    lo[axis], hi[axis] = 0, 1
    lo, hi = tuple(lo), tuple(hi)
    a0 = tensor[lo].copy()
    a1 = tensor[hi]
    tensor[lo] = u[0, 0] * a0 + u[0, 1] * a1
    tensor[hi] = u[1, 0] * a0 + u[1, 1] * a1


def apply_gate(
    state: StateVector,
    gate: GateOp,
    params: Sequence[float] = (),
    data: Sequence[float] = (),
) -> StateVector:
    q = state.num_qubits
    _check_qubits(gate, q)
    angle = gate.resolve_angle(params, data)
    if not math.isfinite(angle):
        raise SimulatorError(f"non-finite angle for {gate.kind} on qubit {gate.target}")
    u = gate_matrix(gate.kind, angle)
    out = state.copy()
    tensor = out.amplitudes.reshape((2,) * q)
    if gate.control is None:
        _apply_pair_update(tensor, u, gate.target)
    else:
        index = [slice(None)] * q
        index[gate.control] = 1
        sub = tensor[tuple(index)]
        axis = gate.target if gate.target < gate.control else gate.target - 1
        _apply_pair_update(sub, u, axis)
    return out


def apply_circuit(
    state: StateVector,
    circuit: Circuit,
    params: Sequence[float] = (),
    data: Sequence[float] = (),
) -> StateVector:
    if state.num_qubits != circuit.num_qubits:
        raise SimulatorError("state and circuit qubit counts differ")
    if len(params) != circuit.num_param_slots:
        raise SimulatorError(
            f"expected {circuit.num_param_slots} parameters, got {len(params)}"
        )
    if len(data) != circuit.num_data_slots:
        raise SimulatorError(f"expected {circuit.num_data_slots} data values, got {len(data)}")
    for op in circuit.ops:
        state = apply_gate(state, op, params, data)
    return state


def pvm_probabilities(state: StateVector) -> np.ndarray:
    amps = state.amplitudes
    return amps.real**2 + amps.imag**2


def z_signs(q: int, channels: int) -> np.ndarray:
    """(2**q, channels) matrix of +1/-1: entry [n, c] is the Z eigenvalue of qubit c in |n>."""
    idx = np.arange(2**q)[:, None]
    bits = (idx >> (q - 1 - np.arange(channels))[None, :]) & 1
    return 1.0 - 2.0 * bits


def povm_expectations(state: StateVector, channels: int) -> np.ndarray:
    """Pauli-Z expectation of each of the first ``channels`` qubits."""
    q = state.num_qubits
    if not 1 <= channels <= q:
        raise SimulatorError(f"channels must lie in [1, {q}], got {channels}")
    # the sum of probabilities can exceed 1 by a few ulps
    return np.clip(pvm_probabilities(state) @ z_signs(q, channels), -1.0, 1.0)


def softmax_povm(expectations: Sequence[float], beta: float = 1.0) -> np.ndarray:
    logits = beta * np.asarray(expectations, dtype=np.float64)
    logits = logits - logits.max()
    w = np.exp(logits)
    return w / w.sum()


def sample_counts(state: StateVector, shots: int, rng: np.random.Generator) -> np.ndarray:
    """Counts per basis state from ``shots`` computational-basis measurements."""
    probs = pvm_probabilities(state)
    outcomes = rng.choice(probs.size, size=shots, p=probs / probs.sum())
    return np.bincount(outcomes, minlength=probs.size)


def dump_state_csv(state: StateVector, stream: IO[str]) -> None:
    writer = csv.writer(stream)
    writer.writerow(["index", "real", "imag", "probability"])
    probs = pvm_probabilities(state)
    for n, (a, p) in enumerate(zip(state.amplitudes, probs)):
        writer.writerow([n, repr(float(a.real)), repr(float(a.imag)), repr(float(p))])


# -- batched evaluation -------------------------------------------------------


def _split(n: int, workers: int) -> list[tuple[int, int]]:
    workers = max(1, min(workers, n))
    bounds = np.linspace(0, n, workers + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _as_batch(circuit: Circuit, params, data) -> tuple[np.ndarray, np.ndarray]:
    params = np.ascontiguousarray(params, dtype=np.float64).reshape(-1)
    data = np.ascontiguousarray(data, dtype=np.float64)
    if data.ndim == 1:
        data = data[None, :]
    if params.size != circuit.num_param_slots:
        raise SimulatorError(
            f"expected {circuit.num_param_slots} parameters, got {params.size}"
        )
    if data.shape[1] != circuit.num_data_slots:
        raise SimulatorError(
            f"expected {circuit.num_data_slots} data values per row, got {data.shape[1]}"
        )
    if not np.all(np.isfinite(params)) or not np.all(np.isfinite(data)):
        raise SimulatorError("non-finite angle source")
    return params, data


def run_batch(circuit: Circuit, params, data, workers: int = 1) -> np.ndarray:
    """Output probabilities of one circuit, shared parameters, one row per data vector.

    Returns an ``(N, 2**q)`` array. Rows are independent, so results do not
    depend on ``workers``.
    """
    params, data = _as_batch(circuit, params, data)
    n, q = data.shape[0], circuit.num_qubits
    out = np.empty((n, 2**q))
    prog = circuit.program

    def work(lo_hi):
        lo, hi = lo_hi
        _kernels.run_probs(*prog, params, data[lo:hi], q, out[lo:hi])

    chunks = _split(n, workers)
    if len(chunks) <= 1:
        for c in chunks:
            work(c)
    else:
        with ThreadPoolExecutor(len(chunks)) as pool:
            list(pool.map(work, chunks))
    return out


def run_batch_jacobian(
    circuit: Circuit, params, data, gates: np.ndarray, workers: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """Probabilities and their derivatives with respect to selected gate angles.

    ``gates`` lists rotation-gate indices. Derivatives come from the
    parameter-shift rule: two shifts of +-pi/2 for single-qubit rotations,
    four shifts (+-pi/2, +-3pi/2) for controlled rotations. Returns
    ``probs`` of shape ``(N, 2**q)`` and ``dprobs`` of shape
    ``(N, len(gates), 2**q)``.
    """
    params, data = _as_batch(circuit, params, data)
    gates = np.ascontiguousarray(gates, dtype=np.int64)
    prog = circuit.program
    if gates.size and (prog.kinds[gates] >= _KIND_CODES["CNOT"]).any():
        raise SimulatorError("shift rule applies to rotation gates only")
    if gates.size > 1 and np.any(np.diff(gates) <= 0):
        raise SimulatorError("gate indices must be strictly increasing")
    n, q = data.shape[0], circuit.num_qubits
    probs = np.empty((n, 2**q))
    dprobs = np.empty((n, gates.size, 2**q))

    def work(lo_hi):
        lo, hi = lo_hi
        _kernels.run_jacobian(
            *prog, params, data[lo:hi], q, gates, probs[lo:hi], dprobs[lo:hi]
        )

    chunks = _split(n, workers)
    if len(chunks) <= 1:
        for c in chunks:
            work(c)
    else:
        with ThreadPoolExecutor(len(chunks)) as pool:
            list(pool.map(work, chunks))
    return probs, dprobs
