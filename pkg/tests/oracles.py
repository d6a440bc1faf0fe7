"""Independent scalar/loop oracles shared by the unit and acceptance suites.

Everything here is deliberately naive: quadruple-loop convolution, per-pixel
scalar LSTM equations, index-arithmetic shuffles, central finite differences.
None of it shares code with the library paths it checks.
"""

import numpy as np


def conv2d_direct(x, w, b, stride):
    """Quadruple-loop direct convolution with zero same-padding (channels-last)."""
    h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    out_h = -(-h // stride)
    out_w = -(-wd // stride)
    pad_h = max((out_h - 1) * stride + kh - h, 0)
    pad_w = max((out_w - 1) * stride + kw - wd, 0)
    pt, pl = pad_h // 2, pad_w // 2
    y = np.zeros((out_h, out_w, cout), dtype=x.dtype)
    for oy in range(out_h):
        for ox in range(out_w):
            for co in range(cout):
                acc = 0.0
                for i in range(kh):
                    for j in range(kw):
                        iy = oy * stride + i - pt
                        ix = ox * stride + j - pl
                        if 0 <= iy < h and 0 <= ix < wd:
                            for ci in range(cin):
                                acc += x[iy, ix, ci] * w[i, j, ci, co]
                y[oy, ox, co] = acc + (b[co] if b is not None else 0.0)
    return y


def lstm_step_scalar(gates, h_prev, c_prev):
    """Per-pixel scalar LSTM given the summed gate pre-activations.

    gates: (H, W, 4*N) ordered input, forget, output, candidate.
    """
    hh, ww, n4 = gates.shape
    n = n4 // 4
    h_new = np.zeros_like(h_prev)
    c_new = np.zeros_like(c_prev)
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    for y in range(hh):
        for x in range(ww):
            for c in range(n):
                i = sig(gates[y, x, c])
                f = sig(gates[y, x, n + c])
                o = sig(gates[y, x, 2 * n + c])
                g = np.tanh(gates[y, x, 3 * n + c])
                cc = f * c_prev[y, x, c] + i * g
                c_new[y, x, c] = cc
                h_new[y, x, c] = o * np.tanh(cc)
    return h_new, c_new


def depth_to_space_index(x, block):
    """Index-arithmetic depth-to-space, row-major channel scan within a block."""
    h, w, c = x.shape
    cout = c // (block * block)
    y = np.zeros((h * block, w * block, cout), dtype=x.dtype)
    for yy in range(h):
        for xx in range(w):
            for dy in range(block):
                for dx in range(block):
                    for co in range(cout):
                        y[yy * block + dy, xx * block + dx, co] = \
                            x[yy, xx, (dy * block + dx) * cout + co]
    return y


def finite_difference(f, arrays, h=1e-5):
    """Central finite differences of scalar f(*arrays) w.r.t. each array."""
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = f(*arrays)
            flat[idx] = orig - h
            fm = f(*arrays)
            flat[idx] = orig
            gflat[idx] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric):
    """Elementwise |a - n| / max(|n|, 1), maximized."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(n), 1.0)))


def psnr_scalar(ref, rec):
    """Brute-force MSE PSNR over unit-range images."""
    acc = 0.0
    count = 0
    flat_r = ref.reshape(-1)
    flat_x = rec.reshape(-1)
    for i in range(flat_r.size):
        d = float(flat_r[i]) - float(flat_x[i])
        acc += d * d
        count += 1
    mse = acc / count
    if mse == 0.0:
        return None
    return 10.0 * np.log10(1.0 / mse)


def block_l1_scalar(ref, rec, block):
    """Per-block mean absolute error map in 8-bit units, scalar loops."""
    h, w = ref.shape[:2]
    bh = -(-h // block)
    bw = -(-w // block)
    out = np.zeros((bh, bw), dtype=np.float64)
    for by in range(bh):
        for bx in range(bw):
            acc = 0.0
            count = 0
            for y in range(by * block, min((by + 1) * block, h)):
                for x in range(bx * block, min((bx + 1) * block, w)):
                    for c in range(ref.shape[2]):
                        acc += abs(float(ref[y, x, c]) - float(rec[y, x, c]))
                        count += 1
            out[by, bx] = 255.0 * acc / count
    return out
