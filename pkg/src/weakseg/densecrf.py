"""Binary fully-connected CRF solved by mean-field iteration with exact dense pairwise sums."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .nn import softmax


@dataclass
class CrfParams:
    w_appearance: float = 4.0
    w_smoothness: float = 3.0
    theta_alpha: float = 8.0
    theta_beta: float = 0.1
    theta_gamma: float = 3.0
    iterations: int = 5

    def __post_init__(self):
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0:
            raise ValueError("kernel widths must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@njit(cache=True)
def _neg_color_dist(col, inv_beta, out):
    n, c = col.shape
    for p in range(n):
        for q in range(n):
            d = 0.0
            for k in range(c):
                t = col[p, k] - col[q, k]
                d += t * t
            out[p, q] = -d * inv_beta


@njit(cache=True)
def _combine(ys, xs, app_y, app_x, smooth_y, smooth_x, w_app, w_smooth, out):
    # spatial Gaussians factor over |dy| and |dx|, so they come from 1-D lookup tables
    n = out.shape[0]
    for p in range(n):
        for q in range(n):
            dy = abs(ys[p] - ys[q])
            dx = abs(xs[p] - xs[q])
            out[p, q] = w_app * app_y[dy] * app_x[dx] * out[p, q] + w_smooth * smooth_y[dy] * smooth_x[dx]
        out[p, p] = 0.0


def pairwise_kernel(image, params):
    """Dense N x N kernel k(p, q) over all pixel pairs, zero on the diagonal."""
    image = np.asarray(image, dtype=np.float64)
    c, h, w = image.shape
    ys, xs = np.mgrid[0:h, 0:w]
    col = np.ascontiguousarray(image.reshape(c, -1).T)

    def gauss(n, theta):
        return np.exp(-np.arange(n, dtype=np.float64) ** 2 / (2 * theta ** 2))

    out = np.empty((h * w, h * w))
    _neg_color_dist(col, 1.0 / (2 * params.theta_beta ** 2), out)
    np.exp(out, out=out)
    _combine(ys.ravel(), xs.ravel(), gauss(h, params.theta_alpha), gauss(w, params.theta_alpha),
             gauss(h, params.theta_gamma), gauss(w, params.theta_gamma),
             float(params.w_appearance), float(params.w_smoothness), out)
    return out


def mean_field(unary, image, params=CrfParams(), kernel=None, history=None):
    """Marginals (2, H, W) for unary energies (2, H, W) under a Potts model.

    ``kernel`` may be passed in to reuse a precomputed ``pairwise_kernel``;
    ``history``, when a list, receives the marginals after every iteration.
    """
    unary = np.asarray(unary, dtype=np.float64)
    if not np.all(np.isfinite(unary)):
        raise ValueError("non-finite unary potential")
    n_lab, h, w = unary.shape
    u = unary.reshape(n_lab, -1)
    q = softmax(-u, axis=0)
    if params.w_appearance == 0 and params.w_smoothness == 0:
        if history is not None:
            history.extend(q.reshape(n_lab, h, w).copy() for _ in range(params.iterations))
        return q.reshape(n_lab, h, w)
    if kernel is None:
        kernel = pairwise_kernel(image, params)
    for _ in range(params.iterations):
        msg = q @ kernel  # kernel is symmetric: msg[l, p] = sum_q k(p, q) Q_l(q)
        # Potts: a label pays for the messages of every other label
        penalty = msg.sum(axis=0, keepdims=True) - msg
        q = softmax(-u - penalty, axis=0)
        if history is not None:
            history.append(q.reshape(n_lab, h, w).copy())
    return q.reshape(n_lab, h, w)


def unary_from_confidence(conf, eps=1e-6):
    conf = np.asarray(conf, dtype=np.float64)
    return np.stack([-np.log(np.maximum(1.0 - conf, eps)), -np.log(np.maximum(conf, eps))])


def crf_foreground(conf, image, params=CrfParams(), kernel=None):
    """Foreground marginal of the binary CRF whose unary comes from a [0, 1] confidence map.

    Channel 0 is background, channel 1 foreground.
    """
    return mean_field(unary_from_confidence(conf), image, params, kernel)[1]
