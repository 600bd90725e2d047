"""Independent reference computations used by the tests.

Nothing here imports the package's numerical kernels: the B-spline oracle
is a scalar Cox-de Boor recursion, quadrature oracles refine plain
trapezoid rules, and derivatives come from central differences.
"""
import numpy as np


def deboor_scalar(t, p, k, x):
    """B_{k,p}(x) on knot vector t by the textbook recursion (right-open spans)."""
    if p == 0:
        if t[k] <= x < t[k + 1]:
            return 1.0
        # close the final non-degenerate span on the right
        last = max(i for i in range(len(t) - 1) if t[i] < t[i + 1])
        return 1.0 if (k == last and x == t[k + 1]) else 0.0
    out = 0.0
    if t[k + p] > t[k]:
        out += (x - t[k]) / (t[k + p] - t[k]) * deboor_scalar(t, p - 1, k, x)
    if t[k + p + 1] > t[k + 1]:
        out += (t[k + p + 1] - x) / (t[k + p + 1] - t[k + 1]) * deboor_scalar(t, p - 1, k + 1, x)
    return out


def deboor_dscalar(t, p, k, x):
    """First derivative of B_{k,p} from the standard difference formula."""
    out = 0.0
    if t[k + p] > t[k]:
        out += p / (t[k + p] - t[k]) * deboor_scalar(t, p - 1, k, x)
    if t[k + p + 1] > t[k + 1]:
        out -= p / (t[k + p + 1] - t[k + 1]) * deboor_scalar(t, p - 1, k + 1, x)
    return out


def deboor_sum(t, p, beta, x, keep=None):
    n = len(t) - p - 1
    idx = range(n) if keep is None else keep
    return sum(b * deboor_scalar(t, p, k, x) for b, k in zip(beta, idx))


def trapezoid_refined(f, lo, hi, rtol=1e-12, max_level=22):
    """Trapezoid rule with Richardson extrapolation (Romberg) until stable."""
    R = [[0.5 * (hi - lo) * (f(lo) + f(hi))]]
    for lev in range(1, max_level):
        n = 2 ** lev
        h = (hi - lo) / n
        mids = lo + h * np.arange(1, n, 2)
        row = [0.5 * R[-1][0] + h * float(np.sum(f(mids)))]
        for j in range(1, lev + 1):
            row.append(row[j - 1] + (row[j - 1] - R[-1][j - 1]) / (4 ** j - 1))
        if abs(row[-1] - R[-1][-1]) <= rtol * max(abs(row[-1]), 1e-300):
            return row[-1]
        R.append(row)
    return R[-1][-1]


def central_diff(f, x0, eps):
    return (f(x0 + eps) - f(x0 - eps)) / (2 * eps)


def second_diff(f, x0, eps):
    return (f(x0 + eps) - 2 * f(x0) + f(x0 - eps)) / eps ** 2


def simpson_brute(f, lo, hi, n=2048):
    x = np.linspace(lo, hi, n + 1)
    y = f(x)
    return (hi - lo) / (3 * n) * (y[0] + y[-1] + 4 * y[1:-1:2].sum() + 2 * y[2:-1:2].sum())


def rk4_batch(basis, betas, thetas, a, n_steps, stride):
    """Plain fixed-step RK4 for many (β, θ, a) at once; states every ``stride`` steps.

    Independent of the package solver: no knot splitting, g from the design matrix.
    """
    betas = np.atleast_2d(np.asarray(betas, dtype=float))
    rate = np.exp(np.asarray(thetas, dtype=float))
    x = np.broadcast_to(np.asarray(a, dtype=float), rate.shape).copy()
    h = 1.0 / n_steps
    f = lambda v: rate * np.einsum("km,km->k", basis.design(v), betas)
    out = [x.copy()]
    for i in range(1, n_steps + 1):
        k1 = f(x)
        k2 = f(x + h / 2 * k1)
        k3 = f(x + h / 2 * k2)
        k4 = f(x + h * k3)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if i % stride == 0:
            out.append(x.copy())
    return np.stack(out, axis=-1)
