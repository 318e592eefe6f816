"""Quantum convolution layers, PVM classifier head and the composed model.

Feature maps are ``(width, height, channels)`` float arrays (batches add a
leading sample axis). Axis 0 is the image row axis of the source data. A
conv layer prepares one state per output position by re-uploading the
patch of every input channel in turn (channel 0 first, each ``kappa**2``
patch split into ``ceil(kappa**2 / Q)`` uploads), applies the PQC and reads
the Pauli-Z expectations of the first ``c_out`` qubits as output channels.
The head re-uploads the flattened features and returns the basis-state
probabilities: the first ``num_classes`` are class probabilities, the rest
is unused-class mass.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from qpvm.encoding import AnsatzSpec, build_encoder_circuit, signed_to_unit
from qpvm.simulator import Circuit, run_batch, run_batch_jacobian, softmax_povm, z_signs

READOUTS = ("pvm", "povm_softmax")
INIT_RANGE = 0.1
JACOBIAN_CHUNK_ROWS = 2048


class ConfigError(ValueError):
    pass


def conv_output_dims(W: int, H: int, kernel: int, stride: int, padding: int = 0) -> tuple[int, int]:
    if kernel < 1 or stride < 1 or padding < 0:
        raise ConfigError("kernel and stride must be >= 1 and padding >= 0")
    if W + padding < kernel or H + padding < kernel:
        raise ConfigError(
            f"kernel {kernel} larger than padded input {W + padding}x{H + padding}"
        )
    return (W + padding - kernel) // stride + 1, (H + padding - kernel) // stride + 1


@dataclass(frozen=True)
class ConvLayerSpec:
    kernel: int
    stride: int
    padding: int = 0
    in_channels: int = 1
    out_channels: int = 1
    qubits: int = 4
    pqc_depth: int = 1
    entangler: str = "ring_cnot"
    angle_scale: float = math.pi

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ConfigError("kernel and stride must be >= 1 and padding >= 0")
        for name in ("in_channels", "out_channels"):
            value = getattr(self, name)
            if not 1 <= value <= self.qubits:
                raise ConfigError(f"{name}={value} must lie in [1, qubits={self.qubits}]")

    @property
    def uploads_per_channel(self) -> int:
        return -(-self.kernel**2 // self.qubits)

    @property
    def ansatz(self) -> AnsatzSpec:
        return AnsatzSpec(
            num_qubits=self.qubits,
            upload_chunks=self.in_channels * self.uploads_per_channel,
            pqc_depth=self.pqc_depth,
            entangler=self.entangler,
            angle_scale=self.angle_scale,
        )

    def output_shape(self, W: int, H: int) -> tuple[int, int, int]:
        w, h = conv_output_dims(W, H, self.kernel, self.stride, self.padding)
        return w, h, self.out_channels


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple[int, int, int]
    conv_layers: tuple[ConvLayerSpec, ...]
    head_qubits: int
    num_classes: int
    head_depth: int = 1
    head_entangler: str = "ring_cnot"
    angle_scale: float = math.pi
    readout: str = "pvm"
    beta: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "conv_layers", tuple(self.conv_layers))
        if len(self.input_shape) != 3:
            raise ConfigError("input_shape must be (width, height, channels)")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.readout not in READOUTS:
            raise ConfigError(f"readout must be one of {READOUTS}")
        if self.readout == "pvm" and 2**self.head_qubits < self.num_classes:
            raise ConfigError(
                f"PVM head needs 2**q >= num_classes; q={self.head_qubits} "
                f"gives {2**self.head_qubits} < {self.num_classes}"
            )
        if self.readout == "povm_softmax" and self.head_qubits < self.num_classes:
            raise ConfigError("POVM-softmax head needs one qubit per class")
        shape = self.input_shape
        for i, layer in enumerate(self.conv_layers):
            if layer.in_channels != shape[2]:
                raise ConfigError(
                    f"conv layer {i} expects {layer.in_channels} channels, input has {shape[2]}"
                )
            shape = layer.output_shape(shape[0], shape[1])

    @property
    def stage_shapes(self) -> list[tuple[int, int, int]]:
        shapes = [self.input_shape]
        for layer in self.conv_layers:
            shapes.append(layer.output_shape(*shapes[-1][:2]))
        return shapes

    @property
    def num_features(self) -> int:
        return int(np.prod(self.stage_shapes[-1]))

    @property
    def head(self) -> AnsatzSpec:
        return AnsatzSpec(
            num_qubits=self.head_qubits,
            upload_chunks=-(-self.num_features // self.head_qubits),
            pqc_depth=self.head_depth,
            entangler=self.head_entangler,
            angle_scale=self.angle_scale,
        )

    @property
    def num_unused(self) -> int:
        return 2**self.head_qubits - self.num_classes if self.readout == "pvm" else 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["conv_layers"] = [asdict(layer) for layer in self.conv_layers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        d["conv_layers"] = tuple(ConvLayerSpec(**layer) for layer in d.get("conv_layers", ()))
        return cls(**d)


def standard_architecture(
    input_shape=(28, 28, 1), num_classes: int = 10, head_qubits: int = 4, **head_kw
) -> ModelConfig:
    """Two 4x4/stride-3 quantum conv layers with 3 channels on 4 qubits, then a PVM head."""
    c_in = input_shape[2]
    layers = (
        ConvLayerSpec(kernel=4, stride=3, in_channels=c_in, out_channels=3, qubits=4),
        ConvLayerSpec(kernel=4, stride=3, in_channels=3, out_channels=3, qubits=4),
    )
    return ModelConfig(tuple(input_shape), layers, head_qubits, num_classes, **head_kw)


@dataclass
class ParameterStore:
    """Flat parameter vector partitioned into named, contiguous blocks."""

    theta: np.ndarray
    partitions: dict[str, tuple[int, int]]
    seed: int = 0

    def __getitem__(self, name: str) -> np.ndarray:
        lo, hi = self.partitions[name]
        return self.theta[lo:hi]

    def block(self, prefix: str) -> slice:
        """Contiguous slice covering ``<prefix>.enc`` and ``<prefix>.pqc``."""
        return slice(self.partitions[f"{prefix}.enc"][0], self.partitions[f"{prefix}.pqc"][1])

    def with_theta(self, theta) -> ParameterStore:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != self.theta.shape:
            raise ConfigError(f"expected {self.theta.size} parameters, got {theta.size}")
        return ParameterStore(theta, self.partitions, self.seed)


@dataclass
class _Block:
    name: str
    circuit: Circuit
    spec: AnsatzSpec
    start: int

    @property
    def stop(self) -> int:
        return self.start + self.spec.num_params


class PVMClassifier:
    """Compiled circuits and parameter layout for one :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.blocks: list[_Block] = []
        start = 0
        for i, layer in enumerate(config.conv_layers):
            spec = layer.ansatz
            self.blocks.append(_Block(f"conv{i}", build_encoder_circuit(spec), spec, start))
            start += spec.num_params
        head = config.head
        self.blocks.append(_Block("head", build_encoder_circuit(head), head, start))
        self.num_params = start + head.num_params
        self._readouts = [
            z_signs(layer.qubits, layer.out_channels) for layer in config.conv_layers
        ]

    @property
    def partitions(self) -> dict[str, tuple[int, int]]:
        parts = {}
        for b in self.blocks:
            mid = b.start + b.spec.num_enc_params
            parts[f"{b.name}.enc"] = (b.start, mid)
            parts[f"{b.name}.pqc"] = (mid, b.stop)
        return parts

    def init_parameters(self, seed: int = 0) -> ParameterStore:
        rng = np.random.default_rng(seed)
        theta = rng.uniform(-INIT_RANGE, INIT_RANGE, size=self.num_params)
        return ParameterStore(theta, self.partitions, seed)


# -- patches -------------------------------------------------------------------


def _pad_spatial(X: np.ndarray, padding: int) -> np.ndarray:
    lo = padding // 2
    hi = padding - lo
    return np.pad(X, ((0, 0), (lo, hi), (lo, hi), (0, 0)))


def extract_patch(X, w: int, h: int, kernel: int, c: int, padding: int = 0) -> np.ndarray:
    """Row-major ``kernel x kernel`` window of channel ``c`` at padded position (w, h)."""
    X = np.asarray(X, dtype=np.float64)
    if not 0 <= c < X.shape[2]:
        raise ConfigError(f"channel {c} out of range for {X.shape[2]} channels")
    Xp = _pad_spatial(X[None], padding)[0]
    if w < 0 or h < 0 or w + kernel > Xp.shape[0] or h + kernel > Xp.shape[1]:
        raise ConfigError("patch outside the padded image")
    return Xp[w : w + kernel, h : h + kernel, c].reshape(-1).copy()


def _patch_rows(X: np.ndarray, layer: ConvLayerSpec, signed: bool) -> np.ndarray:
    """Data rows (N * W_out * H_out, data_slots) for every patch of a batch."""
    n = X.shape[0]
    k, s = layer.kernel, layer.stride
    Xp = _pad_spatial(X, layer.padding)
    win = sliding_window_view(Xp, (k, k), axis=(1, 2))[:, ::s, ::s]
    w_out, h_out = win.shape[1], win.shape[2]
    values = win.reshape(n * w_out * h_out, layer.in_channels, k * k)
    if signed:
        values = signed_to_unit(values)
    block = layer.uploads_per_channel * layer.qubits
    rows = np.zeros((values.shape[0], layer.in_channels, block))
    rows[:, :, : k * k] = values
    return rows.reshape(values.shape[0], -1)


def _scatter_patch_grad(
    g_rows: np.ndarray, layer: ConvLayerSpec, in_shape: tuple, signed: bool
) -> np.ndarray:
    """Adjoint of :func:`_patch_rows`: per-row data gradients -> input-map gradient."""
    n, W, H, C = in_shape
    k, s, d = layer.kernel, layer.stride, layer.padding
    w_out, h_out = conv_output_dims(W, H, k, s, d)
    block = layer.uploads_per_channel * layer.qubits
    g = g_rows.reshape(n, w_out, h_out, C, block)[..., : k * k].reshape(n, w_out, h_out, C, k, k)
    if signed:
        g = 0.5 * g
    Gp = np.zeros((n, W + d, H + d, C))
    for a in range(k):
        for b in range(k):
            Gp[:, a : a + s * (w_out - 1) + 1 : s, b : b + s * (h_out - 1) + 1 : s, :] += g[..., a, b]
    lo = d // 2
    return Gp[:, lo : lo + W, lo : lo + H, :]


def _head_rows(features: np.ndarray, spec: AnsatzSpec, signed: bool) -> np.ndarray:
    n = features.shape[0]
    flat = features.reshape(n, -1)
    if signed:
        flat = signed_to_unit(flat)
    rows = np.zeros((n, spec.num_data_slots))
    rows[:, : flat.shape[1]] = flat
    return rows


# -- forward -------------------------------------------------------------------


def _as_batch(X) -> tuple[np.ndarray, bool]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        return X[None], True
    if X.ndim != 4:
        raise ConfigError(f"expected a (W, H, C) map or a batch of them, got shape {X.shape}")
    return X, False


def qconv_forward(
    X,
    layer: ConvLayerSpec,
    theta,
    signed_input: bool = False,
    counter: Counter | None = None,
    name: str = "conv",
    workers: int = 1,
) -> np.ndarray:
    """One quantum conv layer on a map ``(W, H, c_in)`` or batch ``(N, W, H, c_in)``."""
    X, single = _as_batch(X)
    if X.shape[3] != layer.in_channels:
        raise ConfigError(f"input has {X.shape[3]} channels, layer expects {layer.in_channels}")
    w_out, h_out, c_out = layer.output_shape(X.shape[1], X.shape[2])
    rows = _patch_rows(X, layer, signed_input)
    if counter is not None:
        counter[name] += rows.shape[0]
    probs = run_batch(build_encoder_circuit(layer.ansatz), theta, rows, workers=workers)
    out = (probs @ z_signs(layer.qubits, c_out)).reshape(X.shape[0], w_out, h_out, c_out)
    return out[0] if single else out


def _readout(config: ModelConfig, P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    K = config.num_classes
    if config.readout == "pvm":
        return P[:, :K], P[:, K:]
    expectations = P @ z_signs(config.head_qubits, K)
    probs = np.stack([softmax_povm(e, config.beta) for e in expectations])
    return probs, np.zeros((P.shape[0], 0))


def classify(
    features, config: ModelConfig, theta, signed_input: bool = True, workers: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities and unused-class mass for one feature vector or a batch."""
    features = np.asarray(features, dtype=np.float64)
    single = features.ndim == 1
    feats = features.reshape(1 if single else features.shape[0], -1)
    spec = config.head
    if feats.shape[1] > spec.num_data_slots:
        raise ConfigError("more features than head data slots")
    rows = _head_rows(feats, spec, signed_input)
    P = run_batch(build_encoder_circuit(spec), theta, rows, workers=workers)
    probs, unused = _readout(config, P)
    return (probs[0], unused[0]) if single else (probs, unused)


def forward(
    X, model: PVMClassifier, store: ParameterStore, counter: Counter | None = None, workers: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    probs, unused, _ = forward_stages(X, model, store, counter, workers)
    return probs, unused


def forward_stages(X, model: PVMClassifier, store: ParameterStore, counter=None, workers=1):
    """Like :func:`forward`, also returning every intermediate feature map."""
    X, single = _as_batch(X)
    config = model.config
    if X.shape[1:] != config.input_shape:
        raise ConfigError(f"input shape {X.shape[1:]} does not match model {config.input_shape}")
    maps = [X]
    for i, layer in enumerate(config.conv_layers):
        theta = store.theta[model.blocks[i].start : model.blocks[i].stop]
        maps.append(
            qconv_forward(maps[-1], layer, theta, i > 0, counter, f"conv{i}", workers)
        )
    head = model.blocks[-1]
    if counter is not None:
        counter["head"] += X.shape[0]
    probs, unused = classify(
        maps[-1].reshape(X.shape[0], -1),
        config,
        store.theta[head.start : head.stop],
        signed_input=bool(config.conv_layers),
        workers=workers,
    )
    if single:
        return probs[0], unused[0], [m[0] for m in maps]
    return probs, unused, maps


def predict(probs) -> int | np.ndarray:
    """Top-1 class; ``np.argmax`` already breaks ties toward the lowest index."""
    probs = np.asarray(probs)
    if probs.size == 0:
        raise ConfigError("empty probability vector")
    return int(np.argmax(probs)) if probs.ndim == 1 else np.argmax(probs, axis=1)


# -- shift-rule tape -----------------------------------------------------------


@dataclass
class _StageTape:
    block: _Block
    in_shape: tuple
    signed: bool
    gates: np.ndarray
    param_cols: np.ndarray
    data_cols: np.ndarray
    jac: np.ndarray  # (rows, len(gates), m) derivative of outputs wrt gate angles


@dataclass
class Tape:
    probs: np.ndarray
    unused: np.ndarray
    head_probs: np.ndarray
    stages: list[_StageTape] = field(default_factory=list)


def _stage_jacobian(circuit, theta, rows, gates, readout, workers):
    m = readout.shape[1] if readout is not None else 2**circuit.num_qubits
    out = np.empty((rows.shape[0], m))
    jac = np.empty((rows.shape[0], gates.size, m))
    for lo in range(0, rows.shape[0], JACOBIAN_CHUNK_ROWS):
        hi = min(lo + JACOBIAN_CHUNK_ROWS, rows.shape[0])
        p, dp = run_batch_jacobian(circuit, theta, rows[lo:hi], gates, workers=workers)
        if readout is None:
            out[lo:hi], jac[lo:hi] = p, dp
        else:
            out[lo:hi], jac[lo:hi] = p @ readout, dp @ readout
    return out, jac


def _select_gates(block: _Block, selected: np.ndarray | None, need_data: bool):
    prog = block.circuit.program
    pidx = prog.param_idx
    if selected is None:
        p_mask = pidx >= 0
    else:
        p_mask = (pidx >= 0) & selected[np.clip(pidx, 0, None) + block.start]
    d_mask = (prog.data_idx >= 0) & need_data
    gates = np.flatnonzero(p_mask | d_mask)
    return gates, np.flatnonzero(p_mask[gates]), np.flatnonzero(d_mask[gates])


def forward_tape(
    X, model: PVMClassifier, store: ParameterStore, selected=None, counter=None, workers: int = 1
) -> Tape:
    """Forward pass recording shift-rule Jacobians of every stage.

    ``selected`` is an optional boolean mask over parameters; unselected
    parameters are not shifted and get zero gradient.
    """
    X, _ = _as_batch(X)
    config = model.config
    n = X.shape[0]
    sel = None if selected is None else np.asarray(selected, dtype=bool)
    # a stage needs data derivatives only if some selected parameter lives upstream
    block_has = [
        (sel is None and b.spec.num_params > 0) or (sel is not None and sel[b.start : b.stop].any())
        for b in model.blocks
    ]
    stages: list[_StageTape] = []
    current = X
    for i, layer in enumerate(config.conv_layers):
        block = model.blocks[i]
        signed = i > 0
        rows = _patch_rows(current, layer, signed)
        if counter is not None:
            counter[block.name] += rows.shape[0]
        gates, pcols, dcols = _select_gates(block, sel, any(block_has[:i]))
        theta = store.theta[block.start : block.stop]
        out, jac = _stage_jacobian(block.circuit, theta, rows, gates, model._readouts[i], workers)
        stages.append(_StageTape(block, current.shape, signed, gates, pcols, dcols, jac))
        current = out.reshape(n, *layer.output_shape(current.shape[1], current.shape[2]))
    head = model.blocks[-1]
    signed = bool(config.conv_layers)
    rows = _head_rows(current, head.spec, signed)
    if counter is not None:
        counter["head"] += n
    gates, pcols, dcols = _select_gates(head, sel, any(block_has[:-1]))
    P, jac = _stage_jacobian(
        head.circuit, store.theta[head.start : head.stop], rows, gates, None, workers
    )
    stages.append(_StageTape(head, current.shape, signed, gates, pcols, dcols, jac))
    probs, unused = _readout(config, P)
    return Tape(probs, unused, P, stages)


def _readout_backward(config: ModelConfig, tape: Tape, g_probs, g_unused) -> np.ndarray:
    if config.readout == "pvm":
        return np.concatenate([g_probs, g_unused], axis=1)
    p = tape.probs
    g_logits = p * (g_probs - np.sum(p * g_probs, axis=1, keepdims=True))
    return (config.beta * g_logits) @ z_signs(config.head_qubits, config.num_classes).T


def backward(model: PVMClassifier, tape: Tape, g_probs, g_unused) -> np.ndarray:
    """Chain rule through the recorded stages; returns d(loss)/d(theta)."""
    grad = np.zeros(model.num_params)
    g_out = _readout_backward(model.config, tape, g_probs, g_unused)
    for stage in reversed(tape.stages):
        block = stage.block
        prog = block.circuit.program
        g_rows = g_out.reshape(stage.jac.shape[0], -1)
        g_gates = np.einsum("rm,rsm->rs", g_rows, stage.jac)
        if stage.param_cols.size:
            pidx = prog.param_idx[stage.gates[stage.param_cols]]
            np.add.at(grad, block.start + pidx, g_gates[:, stage.param_cols].sum(axis=0))
        if not stage.data_cols.size:
            break
        dgates = stage.gates[stage.data_cols]
        g_data = np.zeros((g_rows.shape[0], block.spec.num_data_slots))
        g_data[:, prog.data_idx[dgates]] = g_gates[:, stage.data_cols] * prog.scales[dgates]
        if block.name == "head":
            n_feat = int(np.prod(stage.in_shape[1:]))
            g_feat = g_data[:, :n_feat] * (0.5 if stage.signed else 1.0)
            g_out = g_feat.reshape(stage.in_shape)
        else:
            layer_idx = int(block.name[4:])
            layer = model.config.conv_layers[layer_idx]
            g_out = _scatter_patch_grad(g_data, layer, stage.in_shape, stage.signed)
    return grad
