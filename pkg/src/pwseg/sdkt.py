"""Gram-matrix texture transfer loss, its analytic gradient, and an MMD oracle.

The Gram matrix of a feature map X in R^{C x (D*H*W)} is X X^T / (C*D*H*W):
a channel-by-channel correlation that is invariant to any permutation of the
voxel axis.  The transfer loss is a weighted sum of squared Frobenius gaps
between teacher Grams and the segmentation-feature Gram.  For equal sample
counts this objective is exactly MMD^2 with the kernel (u^T v)^2 scaled by
1/C^2, which ``mmd_poly2`` certifies numerically.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


def _as_matrix(x: np.ndarray) -> np.ndarray:
    """Flatten [C, D, H, W] (or [C, N]) features to a C x N sample matrix."""
    x = np.asarray(x)
    if x.ndim < 2:
        raise ShapeError(f"feature tensor must have a channel axis plus voxels, got rank {x.ndim}")
    return x.reshape(x.shape[0], -1)


def gram(x: np.ndarray) -> np.ndarray:
    """Channel correlation matrix X X^T / (C * volume); symmetric PSD.

    Voxel columns are sorted into a canonical order before the reduction so
    the result is bit-identical under any spatial permutation of the input
    (summation order would otherwise leak voxel order into the rounding).
    """
    m = _as_matrix(x)
    c, n = m.shape
    m = m[:, np.lexsort(m[::-1])]
    g = (m @ m.T) / (c * n)
    return (g + g.T) * 0.5  # exact symmetry despite BLAS rounding


def sdkt_loss(d_seg: np.ndarray, teachers) -> float:
    """Weighted squared-Frobenius gap between teacher Grams and the seg Gram.

    ``teachers`` is a sequence of (feature tensor, weight) pairs.  Volumes may
    differ across tensors (the Gram is spatially invariant) but channel counts
    must match.  Non-negative; zero iff every teacher Gram equals the seg Gram.
    """
    g_seg = gram(d_seg)
    c = g_seg.shape[0]
    total = 0.0
    for m, (feat, weight) in enumerate(teachers):
        if np.asarray(feat).shape[0] != c:
            raise ShapeError(
                f"teacher {m} has {np.asarray(feat).shape[0]} channels, segmentation features have {c}"
            )
        diff = gram(feat) - g_seg
        total += weight * float(np.sum(diff * diff))
    return total


def sdkt_grad(d_seg: np.ndarray, teachers) -> np.ndarray:
    """Analytic gradient of :func:`sdkt_loss` with respect to ``d_seg``.

    d/dX || X X^T / n - G ||_F^2 = (4 / n) (X X^T / n - G) X  with
    n = C * volume, summed over teachers with their weights.
    """
    x = np.asarray(d_seg)
    m = _as_matrix(x)
    c, n = m.shape
    norm = c * n
    g_seg = gram(x)
    acc = np.zeros_like(g_seg)
    for t, (feat, weight) in enumerate(teachers):
        if np.asarray(feat).shape[0] != c:
            raise ShapeError(
                f"teacher {t} has {np.asarray(feat).shape[0]} channels, segmentation features have {c}"
            )
        acc += weight * (g_seg - gram(feat))
    grad = (4.0 / norm) * (acc @ m)
    return grad.reshape(x.shape)


def mmd_poly2(x: np.ndarray, y: np.ndarray) -> float:
    """Squared maximum mean discrepancy with kernel (u^T v)^2.

    Voxel positions are the samples (columns); the biased V-statistic
    estimator averages the kernel over all pairs including self-pairs.
    """
    mx = _as_matrix(x)
    my = _as_matrix(y)
    if mx.shape[0] != my.shape[0]:
        raise ShapeError(f"channel counts differ: {mx.shape[0]} vs {my.shape[0]}")
    kxx = np.square(mx.T @ mx)
    kyy = np.square(my.T @ my)
    kxy = np.square(mx.T @ my)
    return float(kxx.mean() + kyy.mean() - 2.0 * kxy.mean())
