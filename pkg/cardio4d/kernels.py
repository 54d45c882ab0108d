"""Compiled 4D convolution kernels.

Arrays use the layout (batch, channel, X, Y, Z, T) with T varying fastest. Kernels
have extent 3 or 1 on each axis, with zero padding of ``extent // 2``. All functions
write into a caller-provided output array.

Each parallel loop (:func:`numba.prange`) runs over (batch, channel) pairs that own
disjoint slices of the output, and the reduction order inside one iteration is
fixed. Results are therefore identical from run to run regardless of thread count.

Three forward formulations exist:

- :func:`conv4d_direct`: for every output voxel, sum over all input channels and
  all 3⁴ taps.
- :func:`conv4d_temporal`: the 4D convolution as a sum of 3D convolutions, one per
  temporal tap, with the loop rearranged so that each 3D tap streams over the
  contiguous time axis of every output row.
- :func:`conv4d_naive`: the same sum computed literally; one separate 3D
  convolution of one input frame for every output frame and temporal tap. Used only
  as the baseline in benchmarks.
"""

import numpy as np
from numba import njit, prange


@njit(cache=True, inline="always")
def _valid_range(n_out, stride, offset, n_in):
    """Range of output indices ``o`` with ``0 <= o * stride + offset < n_in``."""
    lo = 0
    while lo < n_out and lo * stride + offset < 0:
        lo += 1
    hi = n_out
    while hi > lo and (hi - 1) * stride + offset >= n_in:
        hi -= 1
    return lo, hi


@njit(parallel=True, cache=True)
def conv4d_direct(x, w, b, out, sx, sy, sz, st):
    N, Cin, X, Y, Z, T = x.shape
    Cout, _, KX, KY, KZ, KT = w.shape
    _, _, OX, OY, OZ, OT = out.shape
    px, py, pz, pt = KX // 2, KY // 2, KZ // 2, KT // 2

    for nco in prange(N * Cout):
        n = nco // Cout
        co = nco % Cout
        for ox in range(OX):
            for oy in range(OY):
                for oz in range(OZ):
                    for ot in range(OT):
                        acc = b[co]
                        for ci in range(Cin):
                            for kx in range(KX):
                                ix = ox * sx + kx - px
                                if ix < 0 or ix >= X:
                                    continue
                                for ky in range(KY):
                                    iy = oy * sy + ky - py
                                    if iy < 0 or iy >= Y:
                                        continue
                                    for kz in range(KZ):
                                        iz = oz * sz + kz - pz
                                        if iz < 0 or iz >= Z:
                                            continue
                                        for kt in range(KT):
                                            it = ot * st + kt - pt
                                            if it < 0 or it >= T:
                                                continue
                                            acc += (
                                                w[co, ci, kx, ky, kz, kt]
                                                * x[n, ci, ix, iy, iz, it]
                                            )
                        out[n, co, ox, oy, oz, ot] = acc


@njit(parallel=True, cache=True)
def conv4d_temporal(x, w, b, out, sx, sy, sz, st):
    N, Cin, X, Y, Z, T = x.shape
    Cout, _, KX, KY, KZ, KT = w.shape
    _, _, OX, OY, OZ, OT = out.shape
    px, py, pz, pt = KX // 2, KY // 2, KZ // 2, KT // 2

    for nco in prange(N * Cout):
        n = nco // Cout
        co = nco % Cout
        out[n, co] = b[co]
        for kt in range(KT):
            ot_lo, ot_hi = _valid_range(OT, st, kt - pt, T)
            for ci in range(Cin):
                for kx in range(KX):
                    ox_lo, ox_hi = _valid_range(OX, sx, kx - px, X)
                    for ky in range(KY):
                        oy_lo, oy_hi = _valid_range(OY, sy, ky - py, Y)
                        for kz in range(KZ):
                            oz_lo, oz_hi = _valid_range(OZ, sz, kz - pz, Z)
                            wv = w[co, ci, kx, ky, kz, kt]
                            for ox in range(ox_lo, ox_hi):
                                ix = ox * sx + kx - px
                                for oy in range(oy_lo, oy_hi):
                                    iy = oy * sy + ky - py
                                    for oz in range(oz_lo, oz_hi):
                                        iz = oz * sz + kz - pz
                                        for ot in range(ot_lo, ot_hi):
                                            out[n, co, ox, oy, oz, ot] += (
                                                wv * x[n, ci, ix, iy, iz, ot * st + kt - pt]
                                            )


@njit(parallel=True, cache=True)
def conv3d(x, w, out, sx, sy, sz):
    """Plain 3D convolution of (N, C, X, Y, Z) arrays, accumulated into `out`."""
    N, Cin, X, Y, Z = x.shape
    Cout, _, KX, KY, KZ = w.shape
    _, _, OX, OY, OZ = out.shape
    px, py, pz = KX // 2, KY // 2, KZ // 2

    for nco in prange(N * Cout):
        n = nco // Cout
        co = nco % Cout
        for ox in range(OX):
            for oy in range(OY):
                for oz in range(OZ):
                    acc = out[n, co, ox, oy, oz]
                    for ci in range(Cin):
                        for kx in range(KX):
                            ix = ox * sx + kx - px
                            if ix < 0 or ix >= X:
                                continue
                            for ky in range(KY):
                                iy = oy * sy + ky - py
                                if iy < 0 or iy >= Y:
                                    continue
                                for kz in range(KZ):
                                    iz = oz * sz + kz - pz
                                    if iz < 0 or iz >= Z:
                                        continue
                                    acc += w[co, ci, kx, ky, kz] * x[n, ci, ix, iy, iz]
                    out[n, co, ox, oy, oz] = acc


def conv4d_naive(x, w, b, out, sx, sy, sz, st):
    """Sum of 3D convolutions, one call per (output frame, temporal tap)."""
    T = x.shape[-1]
    KT = w.shape[-1]
    pt = KT // 2
    out[...] = b.reshape((1, -1, 1, 1, 1, 1))
    for ot in range(out.shape[-1]):
        frame_out = np.zeros(out.shape[:-1], dtype=out.dtype)
        for kt in range(KT):
            it = ot * st + kt - pt
            if it < 0 or it >= T:
                continue
            frame = np.ascontiguousarray(x[..., it])
            taps = np.ascontiguousarray(w[..., kt])
            conv3d(frame, taps, frame_out, sx, sy, sz)
        out[..., ot] += frame_out


@njit(parallel=True, cache=True)
def conv4d_grad_input(gout, w, gin, sx, sy, sz, st):
    """Accumulate the gradient with respect to the input into zero-filled `gin`."""
    N, Cin, X, Y, Z, T = gin.shape
    Cout, _, KX, KY, KZ, KT = w.shape
    _, _, OX, OY, OZ, OT = gout.shape
    px, py, pz, pt = KX // 2, KY // 2, KZ // 2, KT // 2

    for nci in prange(N * Cin):
        n = nci // Cin
        ci = nci % Cin
        for co in range(Cout):
            for kt in range(KT):
                ot_lo, ot_hi = _valid_range(OT, st, kt - pt, T)
                for kx in range(KX):
                    ox_lo, ox_hi = _valid_range(OX, sx, kx - px, X)
                    for ky in range(KY):
                        oy_lo, oy_hi = _valid_range(OY, sy, ky - py, Y)
                        for kz in range(KZ):
                            oz_lo, oz_hi = _valid_range(OZ, sz, kz - pz, Z)
                            wv = w[co, ci, kx, ky, kz, kt]
                            for ox in range(ox_lo, ox_hi):
                                ix = ox * sx + kx - px
                                for oy in range(oy_lo, oy_hi):
                                    iy = oy * sy + ky - py
                                    for oz in range(oz_lo, oz_hi):
                                        iz = oz * sz + kz - pz
                                        for ot in range(ot_lo, ot_hi):
                                            gin[n, ci, ix, iy, iz, ot * st + kt - pt] += (
                                                wv * gout[n, co, ox, oy, oz, ot]
                                            )


@njit(parallel=True, cache=True)
def conv4d_grad_kernel(gout, x, gw, sx, sy, sz, st):
    """Write the gradient with respect to the kernel into `gw`."""
    N, Cin, X, Y, Z, T = x.shape
    Cout, _, KX, KY, KZ, KT = gw.shape
    _, _, OX, OY, OZ, OT = gout.shape
    px, py, pz, pt = KX // 2, KY // 2, KZ // 2, KT // 2

    for coci in prange(Cout * Cin):
        co = coci // Cin
        ci = coci % Cin
        for kx in range(KX):
            ox_lo, ox_hi = _valid_range(OX, sx, kx - px, X)
            for ky in range(KY):
                oy_lo, oy_hi = _valid_range(OY, sy, ky - py, Y)
                for kz in range(KZ):
                    oz_lo, oz_hi = _valid_range(OZ, sz, kz - pz, Z)
                    for kt in range(KT):
                        ot_lo, ot_hi = _valid_range(OT, st, kt - pt, T)
                        acc = 0.0
                        for n in range(N):
                            for ox in range(ox_lo, ox_hi):
                                ix = ox * sx + kx - px
                                for oy in range(oy_lo, oy_hi):
                                    iy = oy * sy + ky - py
                                    for oz in range(oz_lo, oz_hi):
                                        iz = oz * sz + kz - pz
                                        for ot in range(ot_lo, ot_hi):
                                            acc += (
                                                gout[n, co, ox, oy, oz, ot]
                                                * x[n, ci, ix, iy, iz, ot * st + kt - pt]
                                            )
                        gw[co, ci, kx, ky, kz, kt] = acc


#: Forward implementations by name.
FORWARD = {
    "direct": conv4d_direct,
    "temporal": conv4d_temporal,
    "naive": conv4d_naive,
}
