"""Compiled inner loops shared by whole-frame and line-streaming execution.

Both execution paths call the same compiled functions, so each output element
sees the same sequence of floating point operations regardless of how much of
the frame is in memory.
"""

import numba


@numba.njit(cache=True)
def conv_accumulate(xpad, w, groups, out):
    """out[b, o, y, x] = sum over (kernel row, kernel col, in-channel).

    xpad: (B, Cin, Hout + kh - 1, Wout + kw - 1), already zero padded.
    w:    (Cout, Cin // groups, kh, kw).
    out:  (B, Cout, Hout, Wout), overwritten.
    """
    nb, cout, hout, wout = out.shape
    cin_g = w.shape[1]
    kh = w.shape[2]
    kw = w.shape[3]
    cout_g = cout // groups
    for b in range(nb):
        for o in range(cout):
            g = o // cout_g
            for y in range(hout):
                for x in range(wout):
                    out[b, o, y, x] = 0.0
            for i in range(kh):
                for j in range(kw):
                    for c in range(cin_g):
                        wv = w[o, c, i, j]
                        ci = g * cin_g + c
                        for y in range(hout):
                            for x in range(wout):
                                out[b, o, y, x] += wv * xpad[b, ci, y + i, x + j]


@numba.njit(cache=True)
def conv_grad_input(gout, w, groups, gxpad):
    """Adjoint of conv_accumulate with respect to xpad (accumulates)."""
    nb, cout, hout, wout = gout.shape
    cin_g = w.shape[1]
    kh = w.shape[2]
    kw = w.shape[3]
    cout_g = cout // groups
    for b in range(nb):
        for o in range(cout):
            g = o // cout_g
            for i in range(kh):
                for j in range(kw):
                    for c in range(cin_g):
                        wv = w[o, c, i, j]
                        ci = g * cin_g + c
                        for y in range(hout):
                            for x in range(wout):
                                gxpad[b, ci, y + i, x + j] += wv * gout[b, o, y, x]


@numba.njit(cache=True, fastmath=True)
def conv_grad_weight(gout, xpad, groups, gw):
    """Adjoint of conv_accumulate with respect to w (accumulates)."""
    nb, cout, hout, wout = gout.shape
    cin_g = gw.shape[1]
    kh = gw.shape[2]
    kw = gw.shape[3]
    cout_g = cout // groups
    for b in range(nb):
        for o in range(cout):
            g = o // cout_g
            for i in range(kh):
                for j in range(kw):
                    for c in range(cin_g):
                        ci = g * cin_g + c
                        acc = gw[o, c, i, j] * 0
                        for y in range(hout):
                            for x in range(wout):
                                acc += gout[b, o, y, x] * xpad[b, ci, y + i, x + j]
                        gw[o, c, i, j] += acc


@numba.njit(cache=True)
def dpcm_encode_rows(samples, residual_bits, input_bits, step, codes, recon):
    """Closed-loop left-neighbour DPCM over the last axis of a 2-D array."""
    nrows, n = samples.shape
    maxv = (1 << input_bits) - 1
    qmin = -(1 << (residual_bits - 1))
    qmax = (1 << (residual_bits - 1)) - 1
    half = step // 2
    for r in range(nrows):
        if n == 0:
            continue
        codes[r, 0] = samples[r, 0]
        recon[r, 0] = samples[r, 0]
        for k in range(1, n):
            pred = recon[r, k - 1]
            d = samples[r, k] - pred
            q = (d + half) // step
            if q < qmin:
                q = qmin
            elif q > qmax:
                q = qmax
            v = pred + q * step
            if v < 0:
                v = 0
            elif v > maxv:
                v = maxv
            codes[r, k] = q
            recon[r, k] = v


@numba.njit(cache=True)
def dpcm_decode_rows(codes, input_bits, step, out):
    nrows, n = codes.shape
    maxv = (1 << input_bits) - 1
    for r in range(nrows):
        if n == 0:
            continue
        out[r, 0] = codes[r, 0]
        for k in range(1, n):
            v = out[r, k - 1] + codes[r, k] * step
            if v < 0:
                v = 0
            elif v > maxv:
                v = maxv
            out[r, k] = v
