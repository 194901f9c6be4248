"""Independent reference implementations used as test oracles.

Everything here is plain float64 numpy or pure Python loops and shares no code
with the package beyond reading parameter arrays.
"""

from __future__ import annotations

import math

import numpy as np


def matmul_loops(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def matvec_loops(T, phi, bias):
    T = np.asarray(T, np.float64)
    out = []
    for r in range(T.shape[0]):
        out.append(sum(T[r, c] * float(phi[c]) for c in range(T.shape[1])) + float(bias[r]))
    return np.array(out)


def mse_loops(pred, target):
    pred, target = np.asarray(pred, np.float64), np.asarray(target, np.float64)
    total, count = 0.0, 0
    for p_row, t_row in zip(pred, target):
        for p, t in zip(np.ravel(p_row), np.ravel(t_row)):
            total += (p - t) ** 2
            count += 1
    return total / count


def per_basis_sum_forward(bank_w, bank_b, alpha_layers, coords, w0, w0_on_input=True, rgb_density=False):
    """Mixture network evaluated by summing each basis' layer output before the nonlinearity.

    ``bank_w[i]`` is ``[M, out, in]``, ``alpha_layers[i]`` is ``[M]``.
    """
    h = np.asarray(coords, np.float64)
    n_layers = len(bank_w)
    for i in range(n_layers):
        W = np.asarray(bank_w[i], np.float64)
        b = np.asarray(bank_b[i], np.float64)
        a = np.asarray(alpha_layers[i], np.float64)
        z = sum(a[m] * (h @ W[m].T + b[m]) for m in range(W.shape[0]))
        if i == n_layers - 1:
            if rgb_density:
                dens = z[:, 3:]
                z = np.concatenate([z[:, :3], np.where(dens > 0, dens, np.expm1(dens)) + 1.0], axis=1)
            return z
        if i > 0 or w0_on_input:
            z = w0 * z
        h = np.sin(z)


def siren_loops(weights, biases, coords, w0):
    h = np.asarray(coords, np.float64)
    for i, (W, b) in enumerate(zip(weights, biases)):
        z = h @ np.asarray(W, np.float64).T + np.asarray(b, np.float64)
        if i == len(weights) - 1:
            return z
        h = np.sin(w0 * z)


def chamfer_brute(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)

    def one_way(x, y):
        total = 0.0
        for p in x:
            total += min(float(np.sum((p - q) ** 2)) for q in y)
        return total / len(x)

    return one_way(a, b) + one_way(b, a)


def coverage_mmd_brute(gen, ref):
    dist = [[chamfer_brute(g, r) for r in ref] for g in gen]
    matched = set()
    for row in dist:
        best = 0
        for j in range(1, len(row)):
            if row[j] < row[best]:
                best = j
        matched.add(best)
    mmd = sum(min(dist[g][r] for g in range(len(gen))) for r in range(len(ref))) / len(ref)
    return len(matched) / len(ref), mmd


def cosine_loops(u, v):
    u, v = np.ravel(u).astype(np.float64), np.ravel(v).astype(np.float64)
    dot = sum(x * y for x, y in zip(u, v))
    nu = math.sqrt(sum(x * x for x in u))
    nv = math.sqrt(sum(y * y for y in v))
    return abs(dot) / (nu * nv)


def two_sample_composite(c1, s1, d1, c2, s2, d2):
    return c1 * (1 - math.exp(-s1 * d1)) + c2 * math.exp(-s1 * d1) * (1 - math.exp(-s2 * d2))


def quadratic_meta_grad(theta, phi0, eps, steps):
    """d/dtheta of L(theta, phi_N) with L = (theta*phi - 1)^2 and phi_{n+1} = phi_n - eps dL/dphi.

    Derived by hand: dphi_{n+1}/dtheta = dphi_n/dtheta (1 - 2 eps theta^2) - 2 eps (2 theta phi_n - 1).
    """
    phi, dphi = phi0, 0.0
    for _ in range(steps):
        phi, dphi = phi - eps * 2 * theta * (theta * phi - 1), dphi * (1 - 2 * eps * theta**2) - 2 * eps * (2 * theta * phi - 1)
    return 2 * (theta * phi - 1) * (phi + theta * dphi)


def quadratic_first_order_grad(theta, phi0, eps, steps):
    """Same objective with phi_N treated as a constant."""
    phi = phi0
    for _ in range(steps):
        phi = phi - eps * 2 * theta * (theta * phi - 1)
    return 2 * (theta * phi - 1) * phi


def march_sphere_color(origin, direction, center, radius, albedo, light, ambient, t_max=10.0, dt=1e-4):
    """Walk along a ray in small steps until inside the sphere, then refine by bisection and shade."""
    o, d, c = (np.asarray(x, np.float64) for x in (origin, direction, center))
    t = 0.0
    inside = lambda s: np.sum((o + s * d - c) ** 2) <= radius**2
    coarse = 1e-2
    while t < t_max and not inside(t + coarse):
        t += coarse
    if t >= t_max:
        return np.zeros(3)
    lo, hi = t, t + coarse
    while hi - lo > dt:
        mid = 0.5 * (lo + hi)
        if inside(mid):
            hi = mid
        else:
            lo = mid
    p = o + hi * d
    n = (p - c) / np.linalg.norm(p - c)
    diff = max(float(n @ np.asarray(light)), 0.0)
    return np.asarray(albedo) * (ambient + (1 - ambient) * diff)


def energy_distance(x, y):
    x, y = np.asarray(x, np.float64), np.asarray(y, np.float64)

    def mean_dist(a, b):
        return float(np.mean(np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)))

    return 2 * mean_dist(x, y) - mean_dist(x, x) - mean_dist(y, y)
