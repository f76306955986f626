"""Independent oracles shared by the test modules.

These deliberately avoid the library's own fast paths: the AUC oracle is the
O(N^2) pairwise definition, and the convolution oracle is a direct loop over
the defining sum.
"""

import numpy as np


def brute_force_auc(scores, labels):
    """(#concordant + 0.5 * #tied) / (#pos * #neg) over all pos-neg pairs."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    assert pos.size and neg.size, "oracle needs both classes"
    concordant = np.sum(pos[:, None] > neg[None, :])
    tied = np.sum(pos[:, None] == neg[None, :])
    return (concordant + 0.5 * tied) / (pos.size * neg.size)


def loop_conv2d(x, kernel, stride, pad):
    """Direct quadruple-loop cross-correlation, the conv oracle."""
    n, c_in, h, w = x.shape
    c_out, _, kh, kw = kernel.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c_out, h_out, w_out))
    for b in range(n):
        for o in range(c_out):
            for i in range(h_out):
                for j in range(w_out):
                    patch = xp[b, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[b, o, i, j] = np.sum(patch * kernel[o])
    return out
