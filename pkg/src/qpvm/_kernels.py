"""Compiled statevector kernels for batched circuit evaluation.

Gate codes follow ``simulator.GATE_KINDS``:
RX=0, RY=1, RZ=2, CRX=3, CRY=4, CRZ=5, CNOT=6, H=7.
All kernels release the GIL and treat each batch row independently.
"""

import math

import numpy as np
from numba import njit

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
# four-term shift coefficients for controlled rotations
_C_NEAR = (math.sqrt(2.0) + 1.0) / (4.0 * math.sqrt(2.0))
_C_FAR = (1.0 - math.sqrt(2.0)) / (4.0 * math.sqrt(2.0))


@njit(cache=True, nogil=True)
def _apply(psi, q, kind, target, control, theta):
    c = math.cos(0.5 * theta)
    s = math.sin(0.5 * theta)
    base = kind % 3
    if kind <= 5:
        if base == 0:
            u00 = complex(c, 0.0)
            u01 = complex(0.0, -s)
            u10 = complex(0.0, -s)
            u11 = complex(c, 0.0)
        elif base == 1:
            u00 = complex(c, 0.0)
            u01 = complex(-s, 0.0)
            u10 = complex(s, 0.0)
            u11 = complex(c, 0.0)
        else:
            u00 = complex(c, -s)
            u01 = 0j
            u10 = 0j
            u11 = complex(c, s)
    elif kind == 6:
        u00 = 0j
        u01 = 1 + 0j
        u10 = 1 + 0j
        u11 = 0j
    else:
        u00 = complex(_INV_SQRT2, 0.0)
        u01 = complex(_INV_SQRT2, 0.0)
        u10 = complex(_INV_SQRT2, 0.0)
        u11 = complex(-_INV_SQRT2, 0.0)

    tbit = q - 1 - target
    tmask = 1 << tbit
    low = tmask - 1
    cmask = 0
    if control >= 0:
        cmask = 1 << (q - 1 - control)
    half = 1 << (q - 1)
    for k in range(half):
        i = ((k >> tbit) << (tbit + 1)) | (k & low)
        if cmask != 0 and (i & cmask) == 0:
            continue
        j = i | tmask
        a = psi[i]
        b = psi[j]
        psi[i] = u00 * a + u01 * b
        psi[j] = u10 * a + u11 * b


@njit(cache=True, nogil=True)
def _angle(g, param_idx, data_idx, angles, scales, params, row):
    if param_idx[g] >= 0:
        return params[param_idx[g]]
    if data_idx[g] >= 0:
        return scales[g] * row[data_idx[g]]
    return angles[g]


@njit(cache=True, nogil=True)
def _run_from(psi, q, start, kinds, targets, controls, theta):
    for g in range(start, kinds.shape[0]):
        _apply(psi, q, kinds[g], targets[g], controls[g], theta[g])


@njit(cache=True, nogil=True)
def _abs2_into(psi, out, weight):
    for i in range(psi.shape[0]):
        out[i] += weight * (psi[i].real * psi[i].real + psi[i].imag * psi[i].imag)


@njit(cache=True, nogil=True)
def run_probs(kinds, targets, controls, param_idx, data_idx, angles, scales,
              params, data, q, out):
    dim = 1 << q
    ngates = kinds.shape[0]
    psi = np.empty(dim, dtype=np.complex128)
    theta = np.empty(ngates)
    for n in range(data.shape[0]):
        for g in range(ngates):
            theta[g] = _angle(g, param_idx, data_idx, angles, scales, params, data[n])
        psi[:] = 0.0
        psi[0] = 1.0
        _run_from(psi, q, 0, kinds, targets, controls, theta)
        for i in range(dim):
            out[n, i] = psi[i].real * psi[i].real + psi[i].imag * psi[i].imag


@njit(cache=True, nogil=True)
def run_jacobian(kinds, targets, controls, param_idx, data_idx, angles, scales,
                 params, data, q, shift_gates, probs, dprobs):
    dim = 1 << q
    ngates = kinds.shape[0]
    nshift = shift_gates.shape[0]
    psi = np.empty(dim, dtype=np.complex128)
    work = np.empty(dim, dtype=np.complex128)
    prefix = np.empty((nshift, dim), dtype=np.complex128)
    theta = np.empty(ngates)
    half_pi = 0.5 * math.pi
    for n in range(data.shape[0]):
        for g in range(ngates):
            theta[g] = _angle(g, param_idx, data_idx, angles, scales, params, data[n])
        psi[:] = 0.0
        psi[0] = 1.0
        k = 0
        for g in range(ngates):
            if k < nshift and shift_gates[k] == g:
                prefix[k, :] = psi
                k += 1
            _apply(psi, q, kinds[g], targets[g], controls[g], theta[g])
        for i in range(dim):
            probs[n, i] = psi[i].real * psi[i].real + psi[i].imag * psi[i].imag

        for k in range(nshift):
            g = shift_gates[k]
            dp = dprobs[n, k]
            dp[:] = 0.0
            controlled = kinds[g] >= 3
            near = 0.5
            if controlled:
                near = _C_NEAR
            for sign in (1.0, -1.0):
                work[:] = prefix[k]
                _apply(work, q, kinds[g], targets[g], controls[g], theta[g] + sign * half_pi)
                _run_from(work, q, g + 1, kinds, targets, controls, theta)
                _abs2_into(work, dp, sign * near)
                if controlled:
                    work[:] = prefix[k]
                    _apply(work, q, kinds[g], targets[g], controls[g],
                           theta[g] + sign * 3.0 * half_pi)
                    _run_from(work, q, g + 1, kinds, targets, controls, theta)
                    _abs2_into(work, dp, sign * _C_FAR)
