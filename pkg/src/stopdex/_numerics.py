"""Small numerical helpers: finite-difference weights, Gauss rules, Hermite cells."""

import os

import numpy as np

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(12)


def fd_weights(z, x0, m):
    """Fornberg weights for derivatives 0..m at ``x0`` from nodes ``z``.

    Returns an array of shape (m + 1, len(z)).
    """
    n = len(z)
    c = np.zeros((m + 1, n))
    c1 = 1.0
    c4 = z[0] - x0
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, m)
        c2 = 1.0
        c5 = c4
        c4 = z[i] - x0
        for j in range(i):
            c3 = z[i] - z[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[k, i] = c1 * (k * c[k - 1, i - 1] - c5 * c[k, i - 1]) / c2
                c[0, i] = -c1 * c5 * c[0, i - 1] / c2
            for k in range(mn, 0, -1):
                c[k, j] = (c4 * c[k, j] - k * c[k - 1, j]) / c3
            c[0, j] = c4 * c[0, j] / c3
        c1 = c2
    return c


def stencil_derivatives(x, f, npts=5):
    """First and second derivatives of samples ``f`` on the (possibly non-uniform) grid ``x``.

    Central ``npts``-point stencils in the interior, shifted one-sided stencils
    near the ends so every stencil stays inside the array.
    """
    x = np.asarray(x, float)
    f = np.asarray(f, float)
    n = len(x)
    if n < npts:
        raise ValueError(f"need at least {npts} points, got {n}")
    half = npts // 2
    d1 = np.empty(n)
    d2 = np.empty(n)
    for i in range(n):
        lo = min(max(i - half, 0), n - npts)
        idx = slice(lo, lo + npts)
        w = fd_weights(x[idx], x[i], 2)
        d1[i] = w[1] @ f[idx]
        d2[i] = w[2] @ f[idx]
    return d1, d2


def one_sided_slopes(x, f):
    """Backward and forward 3-point first-derivative estimates at every node.

    The backward slope is undefined at the first two nodes and the forward
    slope at the last two; those entries are NaN.
    """
    x = np.asarray(x, float)
    f = np.asarray(f, float)
    n = len(x)
    left = np.full(n, np.nan)
    right = np.full(n, np.nan)
    for i in range(n):
        if i >= 2:
            w = fd_weights(x[i - 2:i + 1], x[i], 1)
            left[i] = w[1] @ f[i - 2:i + 1]
        if i <= n - 3:
            w = fd_weights(x[i:i + 3], x[i], 1)
            right[i] = w[1] @ f[i:i + 3]
    return left, right


def gauss_integral(fun, a, b):
    """12-point Gauss-Legendre rule on [a, b]; ``fun`` must accept arrays."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    nodes = mid[..., None] + half[..., None] * _GL_NODES
    return half * (fun(nodes) @ _GL_WEIGHTS)


def hermite_eval(x, grid, values, d_right, d_left):
    """Piecewise cubic Hermite interpolation with one-sided node derivatives.

    On cell [x_i, x_{i+1}] the slope at x_i is the right derivative and the
    slope at x_{i+1} the left derivative, so derivative jumps at nodes are kept.
    Returns (values, first derivatives).
    """
    x = np.asarray(x, float)
    i = np.clip(np.searchsorted(grid, x, side="right") - 1, 0, len(grid) - 2)
    h = grid[i + 1] - grid[i]
    t = (x - grid[i]) / h
    y0, y1 = values[i], values[i + 1]
    m0, m1 = d_right[i] * h, d_left[i + 1] * h
    t2, t3 = t * t, t * t * t
    f = (2 * t3 - 3 * t2 + 1) * y0 + (t3 - 2 * t2 + t) * m0 + (-2 * t3 + 3 * t2) * y1 + (t3 - t2) * m1
    df = ((6 * t2 - 6 * t) * y0 + (3 * t2 - 4 * t + 1) * m0 + (-6 * t2 + 6 * t) * y1 + (3 * t2 - 2 * t) * m1) / h
    return f, df


def worker_count():
    """Worker cap from STOPDEX_THREADS, defaulting to the CPU count."""
    raw = os.environ.get("STOPDEX_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1
