"""Independent oracles and gradient-check utilities shared by the test suite.

Everything here deliberately avoids the library's fast paths: convolution is
six nested Python loops, pooling enumerates windows, cross-correlation crops
every sub-window, and gradients come from central finite differences.
"""

import numpy as np


def conv2d_loops(x, w, b, stride, groups):
    """Six-nested-loop convolution reference, accumulated in float64."""
    n, c, h, w_in = x.shape
    oc, icg, kh, kw = w.shape
    ocg = oc // groups
    oh = (h - kh) // stride + 1
    ow = (w_in - kw) // stride + 1
    out = np.zeros((n, oc, oh, ow), dtype=np.float64)
    for bi in range(n):
        for oci in range(oc):
            gi = oci // ocg
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(icg):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += float(x[bi, gi * icg + ci, i * stride + ki,
                                               j * stride + kj]) * float(w[oci, ci, ki, kj])
                    out[bi, oci, i, j] = acc + float(b[oci])
    return out


def maxpool2d_windows(x, size, stride):
    """Window-enumeration max pooling reference."""
    n, c, h, w = x.shape
    oh = (h - size) // stride + 1
    ow = (w - size) // stride + 1
    out = np.zeros((n, c, oh, ow), dtype=np.float64)
    for bi in range(n):
        for ci in range(c):
            for i in range(oh):
                for j in range(ow):
                    window = x[bi, ci, i * stride : i * stride + size,
                               j * stride : j * stride + size]
                    out[bi, ci, i, j] = float(window.max())
    return out


def batchnorm_two_pass(x, gamma, beta, eps=1e-5):
    """Two-pass per-channel normalization reference (train mode)."""
    x64 = x.astype(np.float64)
    out = np.zeros_like(x64)
    for ci in range(x.shape[1]):
        vals = x64[:, ci]
        mean = vals.mean()
        var = ((vals - mean) ** 2).mean()
        out[:, ci] = gamma[ci] * (vals - mean) / np.sqrt(var + eps) + beta[ci]
    return out


def xcorr_windows(z, x):
    """Crop every sub-window and take the float64 inner product."""
    n, c, hz, wz = z.shape
    _, _, hx, wx = x.shape
    oh, ow = hx - hz + 1, wx - wz + 1
    out = np.zeros((n, 1, oh, ow), dtype=np.float64)
    for bi in range(n):
        zb = z[0 if z.shape[0] == 1 else bi].astype(np.float64)
        for i in range(oh):
            for j in range(ow):
                window = x[bi, :, i : i + hz, j : j + wz].astype(np.float64)
                out[bi, 0, i, j] = float(np.sum(window * zb))
    return out


def fd_gradient(f, x, eps=1e-3):
    """Central finite differences of a scalar function w.r.t. every element
    of x (perturbed in x's own dtype)."""
    x = np.array(x)
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def grad_rel_error(analytic, numeric):
    """Max-norm relative disagreement, safe for near-zero gradients."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def random_projection_loss(out_shape, rng):
    """A fixed random linear functional and its gradient: turns a tensor
    output into the scalar the finite-difference checks differentiate. The
    projection tensor itself is the upstream gradient to feed the analytic
    backward."""
    proj = rng.normal(size=out_shape)

    def reduce(out):
        return float(np.sum(out.astype(np.float64) * proj))

    return reduce, proj.astype(np.float32)
